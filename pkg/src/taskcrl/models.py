"""Pipeline models: the temporal (sequence) model and the static (feature) model.

Each model exposes ``loss_terms(batch, step, seed)`` returning an ordered dict of
already-weighted scalar tensors, and ``embed(x)`` returning the deterministic
representation used for evaluation.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import constraints as cs
from . import tasks as tk
from . import tensor as tn
from .nets import (AdditiveDecoder, ComponentwiseFlow, DomainFlow, FrozenExtractor, GaussianEncoder, Linear, Mlp,
                   Module, Prototypes, history_window, reparameterize)
from .objective import ObjectiveSpec
from .prng import STREAM_INIT, STREAM_REPARAM, STREAM_VIEW, PrngStream

STEP_STRIDE = 256

MODEL_DEFAULTS = {
    "latent_dim": None,
    "style_dim": None,
    "hidden": [64, 64],
    "feature_dim": 32,
    "activation": "leaky_relu",
    "lag": None,
    "flow_hidden": 32,
    "flow_env": True,
    "extractor": None,
    "extractor_dim": 16,
    "extractor_seed": 0,
    "decoder": "mlp",
    "blocks": None,
    "proj_dim": 16,
    "n_codes": 16,
    "learned_energy": False,
}


class TermError(tn.NumericError):
    """A numeric failure attributed to one named loss term."""

    def __init__(self, term: str, message: str):
        super().__init__(f"loss term '{term}': {message}")
        self.term = term


@contextmanager
def _term(name: str):
    try:
        yield
    except TermError:
        raise
    except (tn.NumericError, FloatingPointError) as exc:
        raise TermError(name, str(exc)) from exc


def step_stream(seed: int, stream_id: int, step: int) -> PrngStream:
    """Stream reserved for one training step; leaves room for several draws per step."""
    return PrngStream(seed, stream_id, step * STEP_STRIDE)


def resolve_model_config(cfg: dict | None, pipeline: str, latent_dim: int, lag: int | None) -> dict:
    out = dict(MODEL_DEFAULTS)
    out.update(cfg or {})
    if out["latent_dim"] is None:
        out["latent_dim"] = latent_dim
    if out["style_dim"] is None:
        out["style_dim"] = 2 if pipeline == "static_image" else 0
    if out["lag"] is None:
        out["lag"] = lag or 1
    if out["extractor"] is None:
        out["extractor"] = pipeline in ("static_image", "sparsity_vae")
    out["hidden"] = [int(h) for h in out["hidden"]]
    if out["decoder"] not in ("mlp", "additive"):
        raise ValueError(f"model.decoder must be 'mlp' or 'additive', got {out['decoder']!r}")
    return out


def _common_penalty(spec: cs.ConstraintSpec, mu, logvar, z, chol=None):
    if spec.kind in ("vae_kl", "vib"):
        return spec.get("beta", 1.0) * cs.kl_standard_gaussian(mu, logvar)
    if spec.kind in ("l1_sparsity", "target_sparsity"):
        return cs.sparsity_penalties(z, spec)
    if spec.kind == "energy":
        return cs.energy_penalty(z, chol)
    return None


def _sum_terms(terms: dict) -> tn.Tensor:
    total = None
    for t in terms.values():
        total = t if total is None else total + t
    return total if total is not None else tn.constant(0.0)


class TemporalModel(Module):
    """Frame encoder, Gaussian posterior, history-window decoder and transition flow."""

    pipeline = "temporal_video"

    def __init__(self, objective: ObjectiveSpec, obs_dim: int, n_envs: int, cfg: dict, seed: int):
        super().__init__()
        if objective.pipeline != self.pipeline:
            raise ValueError(f"TemporalModel needs the temporal_video pipeline, got {objective.pipeline!r}")
        init = PrngStream(seed, STREAM_INIT)
        self.objective, self.cfg = objective, cfg
        H, F, D, L = cfg["hidden"], int(cfg["feature_dim"]), int(cfg["latent_dim"]), int(cfg["lag"])
        act = cfg["activation"]
        self.latent_dim, self.lag, self.obs_dim = D, L, obs_dim
        self.frame_encoder = self.add("frame_encoder", Mlp([obs_dim, H[0], F], init, act))
        self.posterior = self.add("posterior", GaussianEncoder(F, D, init, H[1:] or H[:1], act))
        self.decoder_head = self.add("decoder_head", Mlp([(L + 1) * D, H[0], F], init, act))
        self.frame_decoder = self.add("frame_decoder", Mlp([F, H[-1], obs_dim], init, act))
        flow_envs = n_envs if cfg["flow_env"] else 1
        self.flow = self.add("flow", ComponentwiseFlow(D, L, init, int(cfg["flow_hidden"]), flow_envs))
        self.prototypes = None
        if objective.task.kind == "prototype":
            self.prototypes = self.add("prototypes", Prototypes(objective.task.n_prototypes, D, init,
                                                                objective.task.tau_p))
        self.chol = None
        if "energy" in objective.kinds() and cfg["learned_energy"]:
            self.chol = self.param("energy_chol", np.eye(D))

    def embed(self, x) -> np.ndarray:
        """Posterior means for every frame, flattened to (episodes * T, D)."""
        x = np.asarray(x, dtype=np.float64)
        B, T, n = x.shape
        with tn.no_grad():
            mu, _ = self.posterior(self.frame_encoder(tn.constant(x.reshape(B * T, n))))
        return mu.data.copy()

    def loss_terms(self, batch: dict, step: int, seed: int) -> dict:
        task = self.objective.task
        x = np.asarray(batch["x"], dtype=np.float64)
        u = np.asarray(batch["u"], dtype=int)
        B, T, n = x.shape
        D, L = self.latent_dim, self.lag
        mask = None
        x_in = x
        if task.kind == "masked":
            mask = tk.random_mask(x.shape, task.mask_ratio, step_stream(seed, STREAM_VIEW, step).generator())
            x_in = mask * x
        with _term("forward"):
            h = self.frame_encoder(tn.constant(x_in.reshape(B * T, n)))
            mu, logvar = self.posterior(h)
            noise = step_stream(seed, STREAM_REPARAM, step).generator().standard_normal(mu.shape)
            z = reparameterize(mu, logvar, noise)
            z3 = tn.reshape(z, (B, T, D))
            s = history_window(z3, L)
            h_hat = self.decoder_head(tn.reshape(s, (B * T, (L + 1) * D)))
            h3 = tn.reshape(h, (B, T, -1))
            hh3 = tn.reshape(h_hat, (B, T, -1))

        def x_hat():
            return tn.reshape(self.frame_decoder(h_hat), (B, T, n))

        terms = {}
        with _term("task"):
            k = task.kind
            if k in ("reconstruction", "next_frame", "autoregressive"):
                loss = tk.loss_squared_family(k, x_hat(), tn.constant(x))
            elif k == "masked":
                loss = tk.loss_squared_family(k, x_hat(), tn.constant(x), mask)
            elif k == "mid_latent":
                loss = tk.loss_squared_family(k, hh3, h3)
            elif k == "contrastive":
                F = h3.shape[-1]
                q = tn.reshape(hh3[:, :-1], (B * (T - 1), F))
                key = tn.reshape(h3[:, 1:], (B * (T - 1), F))
                groups = np.repeat(np.arange(B), T - 1) if task.exclude_same_sequence else None
                loss = tk.loss_infonce(q, key, task.tau, stop_grad_keys=True, groups=groups)
            elif k == "prototype":
                loss = tk.loss_prototype(tn.mean(z3, axis=1), self.prototypes, task)
            else:
                raise ValueError(f"task {k!r} is not implemented for the temporal pipeline")
            terms["task"] = task.weight * loss

        mu3, lv3 = tn.reshape(mu, (B, T, D)), tn.reshape(logvar, (B, T, D))
        aux = None
        for spec, lam in self.objective.constraints:
            kind = spec.kind
            if kind == "none":
                continue
            if kind == "temporal_prior":
                with _term("temporal_prior"):
                    init_t, fut_t = cs.temporal_prior_kl(
                        mu3, lv3, z3, self.flow, L, spec.get("beta", 1.0), spec.get("gamma", 1.0),
                        u if self.flow.use_env else None, parts=True)
                terms["init_kl"] = lam * init_t
                terms["future_kl"] = lam * fut_t
                continue
            with _term(kind):
                if kind in ("latent_recon", "delta_match"):
                    if aux is None:
                        aux = cs.aux_latent_and_delta(h3, hh3)
                    value = aux[0] if kind == "latent_recon" else aux[1]
                elif kind == "mechanism_sparsity":
                    value = cs.mechanism_sparsity(self.flow.E)
                else:
                    value = _common_penalty(spec, mu, logvar, z, self.chol)
                    if value is None:
                        raise ValueError(f"constraint {kind!r} is not implemented for the temporal pipeline")
                terms[kind] = lam * value
        return terms


class _EncodeContext:
    def __init__(self, gen: np.random.Generator, view_stream: PrngStream):
        self.gen = gen
        self.view_stream = view_stream
        self.codes = []
        self.vq = []


class StaticModel(Module):
    """Gaussian encoder over (optionally extracted) features with content/style split."""

    def __init__(self, objective: ObjectiveSpec, obs_dim: int, n_envs: int, cfg: dict, seed: int,
                 invariant_set=None):
        super().__init__()
        if objective.pipeline not in ("static_image", "sparsity_vae"):
            raise ValueError(f"StaticModel does not serve the {objective.pipeline!r} pipeline")
        self.pipeline = objective.pipeline
        init = PrngStream(seed, STREAM_INIT)
        self.objective, self.cfg = objective, cfg
        self.n_envs = n_envs
        self.invariant_set = list(invariant_set) if invariant_set is not None else None
        H, act = cfg["hidden"], cfg["activation"]
        self.extractor = None
        if cfg["extractor"]:
            self.extractor = FrozenExtractor(obs_dim, int(cfg["extractor_dim"]), int(cfg["extractor_seed"]))
        feat = self.extractor.n_out if self.extractor else obs_dim
        c, s = int(cfg["latent_dim"]), int(cfg["style_dim"])
        self.content_dim, self.style_dim = c, s
        D = c + s
        self.latent_dim = D
        self.encoder = self.add("encoder", GaussianEncoder(feat, D, init, H, act))
        if cfg["decoder"] == "additive":
            blocks = cfg["blocks"] or [[i] for i in range(D)]
            self.decoder = self.add("decoder", AdditiveDecoder(blocks, feat, init, H, act))
        else:
            self.decoder = self.add("decoder", Mlp([D] + H + [feat], init, act))
        kinds = objective.kinds()
        self.domain_flow = None
        if s > 0:
            self.domain_flow = self.add("domain_flow", DomainFlow(s, n_envs, init))
        if "style_gaussian" in kinds and s == 0:
            raise ValueError("style_gaussian needs style_dim > 0")
        if "cond_prior_static" in kinds:
            self.prior_mu = self.param("prior_mu", np.zeros((n_envs, D)))
            self.prior_logvar = self.param("prior_logvar", np.zeros((n_envs, D)))
        self.codebook = None
        if "vq" in kinds:
            self.codebook = self.param("codebook", init.generator().standard_normal((int(cfg["n_codes"]), D)))
        self.chol = None
        if "energy" in kinds and cfg["learned_energy"]:
            self.chol = self.param("energy_chol", np.eye(D))
        task = objective.task
        if task.kind in ("contrastive", "prototype"):
            self.head = self.add("head", Mlp([c, H[0], int(cfg["proj_dim"])], init, act))
        if task.kind == "prototype":
            self.prototypes = self.add("prototypes", Prototypes(task.n_prototypes, int(cfg["proj_dim"]), init,
                                                                task.tau_p))
        if task.kind == "target_pred":
            self.classifier = self.add("classifier", Linear(D, max(n_envs, 2), init))
        if task.kind == "transform_correct":
            self.classifier = self.add("classifier", Linear(D, len(tk.TRANSFORM_CLASSES), init))

    def features(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.extractor(x) if self.extractor is not None else x

    def embed(self, x) -> np.ndarray:
        """Posterior mean of the content block."""
        with tn.no_grad():
            mu, _ = self.encoder(tn.constant(self.features(x)))
        return mu.data[:, :self.content_dim].copy()

    def _encode(self, ctx: _EncodeContext, x_raw, u) -> tn.Tensor:
        mu, logvar = self.encoder(tn.constant(self.features(x_raw)))
        if self.codebook is not None:
            spec, _ = self.objective.get("vq")
            z, vq_loss, _ = cs.vector_quantize(mu, self.codebook, spec.get("beta_commit", 0.25))
            ctx.vq.append(vq_loss)
        else:
            z = reparameterize(mu, logvar, ctx.gen.standard_normal(mu.shape))
        ctx.codes.append((mu, logvar, z, np.asarray(u, dtype=int)))
        return z

    def _task_loss(self, ctx: _EncodeContext, batch: dict) -> tn.Tensor:
        task = self.objective.task
        k = task.kind
        x = np.asarray(batch["x"], dtype=np.float64)
        u = np.asarray(batch["u"], dtype=int)
        target = tn.constant(self.features(x))
        if k == "reconstruction":
            return tk.loss_squared_family(k, self.decoder(self._encode(ctx, x, u)), target)
        if k == "denoising":
            xv, _ = tk.view_generate(tk.ViewSpec("corrupt", sigma_noise=task.sigma_noise), x, ctx.view_stream)
            return tk.loss_squared_family(k, self.decoder(self._encode(ctx, xv, u)), target)
        if k == "masked":
            xv, _ = tk.view_generate(tk.ViewSpec("mask", ratio=task.mask_ratio), x, ctx.view_stream)
            return tk.loss_squared_family("reconstruction", self.decoder(self._encode(ctx, xv, u)), target)
        if k in ("cross_view", "contrastive", "prototype"):
            v1, meta = tk.view_generate(tk.ViewSpec("two_views"), x, ctx.view_stream)
            v2 = meta["paired_view"]
            z1, z2 = self._encode(ctx, v1, u), self._encode(ctx, v2, u)
            if k == "cross_view":
                return tk.loss_squared_family(k, (self.decoder(z1), self.decoder(z2)),
                                              (tn.constant(self.features(v1)), tn.constant(self.features(v2))))
            c = self.content_dim
            p1, p2 = self.head(z1[:, :c]), self.head(z2[:, :c])
            if k == "contrastive":
                return tk.loss_infonce_symmetric(p1, p2, task.tau)
            return tk.loss_prototype((p1, p2), self.prototypes, task)
        if k == "target_pred":
            return tk.loss_classification(self.classifier(self._encode(ctx, x, u)), u)
        if k == "transform_correct":
            xv, meta = tk.view_generate(tk.ViewSpec("transform"), x, ctx.view_stream)
            return tk.loss_classification(self.classifier(self._encode(ctx, xv, u)), meta["transform_id"])
        if k == "multi_view":
            views = tk.multi_views(x, task.n_views, ctx.view_stream)
            feats = [self.features(v) for v in views]
            mean_feat = np.mean(feats, axis=0)
            zs = [self._encode(ctx, v, u) for v in views]
            out = self.decoder(tn.concat(zs, axis=0))
            return tk.loss_squared_family(k, out, tn.constant(np.concatenate([mean_feat] * len(views), axis=0)))
        raise ValueError(f"task {k!r} is not implemented for the static pipeline")

    def loss_terms(self, batch: dict, step: int, seed: int) -> dict:
        task = self.objective.task
        ctx = _EncodeContext(step_stream(seed, STREAM_REPARAM, step).generator(),
                             step_stream(seed, STREAM_VIEW, step))
        terms = {}
        with _term("task"):
            terms["task"] = task.weight * self._task_loss(ctx, batch)
        if len(ctx.codes) == 1:
            mu, logvar, z, u = ctx.codes[0]
        else:
            mu = tn.concat([c[0] for c in ctx.codes], axis=0)
            logvar = tn.concat([c[1] for c in ctx.codes], axis=0)
            z = tn.concat([c[2] for c in ctx.codes], axis=0)
            u = np.concatenate([c[3] for c in ctx.codes])
        c = self.content_dim
        styled = None

        def transformed():
            nonlocal styled
            if styled is None:
                if self.domain_flow is None:
                    styled = (z, None, tn.constant(0.0))
                else:
                    zs, logdet = self.domain_flow(z[:, c:], u)
                    styled = (tn.concat([z[:, :c], zs], axis=1), zs, tn.mean(logdet))
            return styled

        for spec, lam in self.objective.constraints:
            kind = spec.kind
            if kind == "none":
                continue
            with _term(kind):
                if kind == "capacity_kl":
                    z_t, _, mean_logdet = transformed()
                    log_q = tn.mean(tn.sum(cs.gaussian_log_density(z, mu, logvar), axis=1))
                    log_p = tn.mean(tn.sum(cs.standard_normal_log_density(z_t), axis=1))
                    kl = log_q - log_p - mean_logdet
                    value = cs.capacity_kl(kl, step, spec.get("beta", 1.0), spec.get("c_max", 5.0),
                                           spec.get("t_stop", 1000.0))
                elif kind == "style_gaussian":
                    value = cs.style_gaussian(transformed()[1])
                elif kind == "cond_prior_static":
                    value = cs.cond_prior_static_kl(mu, logvar, u, self.prior_mu, self.prior_logvar)
                elif kind == "vq":
                    value = ctx.vq[0] if len(ctx.vq) == 1 else tn.mean(tn.stack(ctx.vq))
                elif kind == "jacobian_sparsity":
                    if not isinstance(self.decoder, Mlp):
                        raise cs.ConstraintError("jacobian_sparsity needs the plain MLP decoder")
                    value = cs.decoder_jacobian_l1(self.decoder, z, row_sample=spec.get("row_sample", None),
                                                   gen=ctx.gen)
                elif kind == "invariance":
                    value = self._invariance(spec, batch)
                else:
                    value = _common_penalty(spec, mu, logvar, z, self.chol)
                    if value is None:
                        raise ValueError(f"constraint {kind!r} is not implemented for the static pipeline")
                terms[kind] = lam * value
        return terms

    def _invariance(self, spec: cs.ConstraintSpec, batch: dict) -> tn.Tensor:
        if "x_pair" not in batch:
            raise cs.ConstraintError("invariance needs paired data (data.kind = 'paired')")
        A = spec.get("A", None)
        if A is None:
            A = self.invariant_set
        if A is None:
            raise cs.ConstraintError("invariant set unknown; pass params.A")
        mu1, _ = self.encoder(tn.constant(self.features(batch["x"])))
        mu2, _ = self.encoder(tn.constant(self.features(batch["x_pair"])))
        return cs.invariance_penalty(mu1, mu2, A, spec.get("statistic", "identity"))


def build_model(objective: ObjectiveSpec, model_cfg: dict, obs_dim: int, n_envs: int, seed: int,
                invariant_set=None):
    if objective.pipeline == "temporal_video":
        return TemporalModel(objective, obs_dim, n_envs, model_cfg, seed)
    return StaticModel(objective, obs_dim, n_envs, model_cfg, seed, invariant_set)


def total_from_terms(terms: dict) -> tn.Tensor:
    return _sum_terms(terms)
