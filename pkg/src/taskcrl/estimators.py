"""scikit-learn style wrappers around the training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import TrainData
from .evaluation import evaluate
from .models import build_model, resolve_model_config
from .trainer import ExperimentConfig, RunContext, train_run

DEFAULT_STATIC_CONSTRAINTS = ({"kind": "vae_kl", "weight": 0.1},)
DEFAULT_TEMPORAL_CONSTRAINTS = (
    {"kind": "temporal_prior", "weight": 0.05},
    {"kind": "latent_recon", "weight": 0.1},
    {"kind": "delta_match", "weight": 0.1},
)


def check_environments(u, n_samples: int) -> np.ndarray:
    """Integer environment labels in ``[0, n_envs)``; all zeros when ``u`` is None."""
    if u is None:
        return np.zeros(n_samples, dtype=int)
    u = np.asarray(u)
    if u.shape != (n_samples,):
        raise ValueError(f"u must have shape ({n_samples},), got {u.shape}")
    if not np.issubdtype(u.dtype, np.integer):
        if not np.all(np.equal(np.mod(u, 1), 0)):
            raise ValueError("environment labels must be integers")
        u = u.astype(int)
    if u.min() < 0:
        raise ValueError("environment labels must be nonnegative")
    return u


def check_sequences(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected (episodes, time, features), got {X.ndim}-d input")
    return X


class _CRLEstimator(TransformerMixin, BaseEstimator):
    pipeline = "static_image"

    def _check_X(self, X):
        return check_array(X, dtype=np.float64)

    def _default_constraints(self):
        return DEFAULT_STATIC_CONSTRAINTS

    def _config(self) -> dict:
        constraints = self.constraints if self.constraints is not None else self._default_constraints()
        return {
            "objective": {"pipeline": self.pipeline, "task": dict(self.task) if isinstance(self.task, dict)
                          else {"kind": self.task},
                          "constraints": [dict(c) for c in constraints]},
            "model": self._model_params(),
            "optimizer": {"lr": self.lr},
            "run": {"steps": self.steps, "batch": self.batch_size, "seed": self.random_state},
            "data": {"kind": "temporal" if self.pipeline == "temporal_video" else "static"},
        }

    def _model_params(self) -> dict:
        return {"latent_dim": self.latent_dim, "hidden": list(self.hidden)}

    def fit(self, X, y=None, u=None):
        """Train on ``X``; ``u`` holds optional per-sample environment labels."""
        X = self._check_X(X)
        u = check_environments(u, X.shape[0])
        config = ExperimentConfig.from_dict(self._config())
        latent = self.latent_dim or X.shape[-1]
        n_envs = int(u.max()) + 1
        mcfg = resolve_model_config(config.model, self.pipeline, latent, None)
        model = build_model(config.objective, mcfg, X.shape[-1], n_envs, config.seed)
        z_dummy = np.zeros(X.shape[:-1] + (latent,))
        train = TrainData(X, z_dummy, u, n_envs)
        record = train_run(config, context=RunContext(config, model, train, None, None))
        self.model_ = model
        self.n_features_in_ = X.shape[-1]
        self.n_envs_ = n_envs
        self.loss_curve_ = record.traces.get("total", [])
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[-1]} features, expected {self.n_features_in_}")
        return self.model_.embed(X)

    def score(self, X, z_true, method: str = "pearson"):
        """MCC of the learned representation against known latents."""
        z_hat = self.transform(X)
        z_true = np.asarray(z_true, dtype=np.float64).reshape(z_hat.shape[0], -1)
        return evaluate(z_hat, z_true, method).mcc


class StaticCRL(_CRLEstimator):
    """Static-feature representation learner (task plus latent constraints)."""

    pipeline = "static_image"

    def __init__(self, task="reconstruction", constraints=None, latent_dim=None, style_dim=0, hidden=(64, 64),
                 extractor=False, steps=3000, batch_size=64, lr=1e-3, random_state=0):
        self.task = task
        self.constraints = constraints
        self.latent_dim = latent_dim
        self.style_dim = style_dim
        self.hidden = hidden
        self.extractor = extractor
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def _model_params(self) -> dict:
        return {**super()._model_params(), "style_dim": self.style_dim, "extractor": self.extractor}


class TemporalCRL(_CRLEstimator):
    """Sequence representation learner with a transition-prior constraint."""

    pipeline = "temporal_video"

    def __init__(self, task="reconstruction", constraints=None, latent_dim=None, lag=1, hidden=(64, 64),
                 steps=3000, batch_size=32, lr=2e-3, random_state=0):
        self.task = task
        self.constraints = constraints
        self.latent_dim = latent_dim
        self.lag = lag
        self.hidden = hidden
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def _check_X(self, X):
        return check_sequences(X)

    def _default_constraints(self):
        return DEFAULT_TEMPORAL_CONSTRAINTS

    def _model_params(self) -> dict:
        return {**super()._model_params(), "lag": self.lag}
