"""Latent-space constraints: generic regularisers and causal penalties."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .nets import ComponentwiseFlow, Mlp, temporal_flow_forward
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)
JACOBIAN_CAP = 128
RATE_CLAMP = 1e-6
ENERGY_WEIGHT_DECAY = 1e-4

CONSTRAINT_KINDS = (
    "none", "vae_kl", "capacity_kl", "vib", "l1_sparsity", "target_sparsity", "energy", "vq",
    "cond_prior_static", "temporal_prior", "style_gaussian", "jacobian_sparsity", "invariance",
    "mechanism_sparsity", "latent_recon", "delta_match",
)


class ConstraintError(ValueError):
    pass


@dataclass
class ConstraintSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ConstraintError(f"unknown constraint kind {self.kind!r}")
        for k, v in self.params.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0 and k != "value":
                raise ConstraintError(f"{self.kind}.{k} must be nonnegative")

    def get(self, key, default):
        return self.params.get(key, default)


# ---------------------------------------------------------------- divergences

def gaussian_log_density(x: Tensor, mu, logvar) -> Tensor:
    """Elementwise log N(x; mu, exp(logvar))."""
    diff = x - mu
    return -0.5 * (LOG_2PI + logvar + tn.square(diff) * tn.exp(-logvar))


def standard_normal_log_density(x: Tensor) -> Tensor:
    return -0.5 * (LOG_2PI + tn.square(x))


def _batch_mean_of_sum(x: Tensor) -> Tensor:
    return tn.mean(tn.sum(x, axis=-1))


def kl_standard_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) summed over dims, averaged over leading axes."""
    if mu.shape != logvar.shape:
        raise tn.ShapeError("kl_standard_gaussian", [mu.shape, logvar.shape])
    return _batch_mean_of_sum(0.5 * (tn.square(mu) + tn.exp(logvar) - logvar - 1.0))


def kl_gaussians(mu_q: Tensor, logvar_q: Tensor, mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    term = logvar_p - logvar_q + (tn.exp(logvar_q) + tn.square(mu_q - mu_p)) * tn.exp(-logvar_p) - 1.0
    return _batch_mean_of_sum(0.5 * term)


def capacity(step: int, c_max: float, t_stop: float) -> float:
    if t_stop <= 0:
        raise ConstraintError("T_stop must be positive")
    if step < 0:
        raise ConstraintError("step must be nonnegative")
    return min(c_max, step / t_stop * c_max)


def capacity_kl(kl_value: Tensor, step: int, beta: float, c_max: float, t_stop: float) -> Tensor:
    """``beta * |KL - C(t)|`` with a linearly growing capacity ``C(t)``."""
    return beta * tn.abs(kl_value - capacity(step, c_max, t_stop))


def cond_prior_static_kl(mu: Tensor, logvar: Tensor, u, prior_mu: Tensor, prior_logvar: Tensor) -> Tensor:
    """KL against a per-environment diagonal Gaussian prior ``p(z | u)``."""
    u = np.asarray(u, dtype=int)
    n_env = prior_mu.shape[0]
    if u.size and (u.min() < 0 or u.max() >= n_env):
        raise ConstraintError(f"unknown environment index; prior table has {n_env} rows")
    return kl_gaussians(mu, logvar, prior_mu[u], prior_logvar[u])


# ---------------------------------------------------------------- sparsity / energy / discreteness

def l1_sparsity(z: Tensor) -> Tensor:
    return _batch_mean_of_sum(tn.abs(z))


def bernoulli_kl(rho: float, rho_hat) -> Tensor:
    """Sum over units of KL(Bernoulli(rho) || Bernoulli(rho_hat))."""
    if not 0.0 < rho < 1.0:
        raise ConstraintError("target rate rho must lie in (0, 1)")
    rh = rho_hat if isinstance(rho_hat, Tensor) else tn.constant(rho_hat)
    rh = tn.clip(rh, RATE_CLAMP, 1.0 - RATE_CLAMP)
    return tn.sum(rho * (math.log(rho) - tn.log(rh)) + (1 - rho) * (math.log(1 - rho) - tn.log(1.0 - rh)))


def target_sparsity(z: Tensor, rho: float) -> Tensor:
    """Bernoulli-KL penalty on average sigmoid activations."""
    return bernoulli_kl(rho, tn.mean(tn.sigmoid(z), axis=0))


def sparsity_penalties(z, spec: ConstraintSpec) -> Tensor:
    if spec.kind == "l1_sparsity":
        return l1_sparsity(z)
    if spec.kind == "target_sparsity":
        return target_sparsity(z, spec.get("rho", 0.05))
    raise ConstraintError(f"{spec.kind!r} is not a sparsity constraint")


def energy_penalty(z: Tensor, chol: Tensor | None = None) -> Tensor:
    """Mean energy. Fixed ``0.5 ||z||^2`` or a learned PSD quadratic ``0.5 z^T L L^T z``."""
    if chol is None:
        return tn.mean(0.5 * tn.sum(tn.square(z), axis=-1))
    d = chol.shape[0]
    lower = chol * tn.constant(np.tril(np.ones((d, d))))
    proj = z @ lower
    decay = ENERGY_WEIGHT_DECAY * tn.sum(tn.square(chol))
    return tn.mean(0.5 * tn.sum(tn.square(proj), axis=-1)) + decay


def vector_quantize(z_e: Tensor, codebook: Tensor, beta_commit: float = 0.25):
    """Nearest-code quantisation with a straight-through estimator.

    Returns ``(z_q, loss, index)`` where the loss is the codebook term plus
    ``beta_commit`` times the commitment term.
    """
    if codebook.shape[0] == 0:
        raise ConstraintError("empty codebook")
    d2 = ((z_e.data[:, None, :] - codebook.data[None, :, :]) ** 2).sum(axis=-1)
    index = d2.argmin(axis=1)
    e = codebook[index]
    z_q = z_e + tn.stop_gradient(e - z_e)
    code_term = _batch_mean_of_sum(tn.square(tn.stop_gradient(z_e) - e))
    commit = _batch_mean_of_sum(tn.square(z_e - tn.stop_gradient(e)))
    return z_q, code_term + beta_commit * commit, index


# ---------------------------------------------------------------- temporal prior

def temporal_prior_kl(mu: Tensor, logvar: Tensor, z: Tensor, flow: ComponentwiseFlow, lag: int,
                      beta_init: float = 1.0, gamma_future: float = 1.0, u=None, parts: bool = False):
    """Initial-step KL plus the flow-based future KL (single-sample estimate).

    Inputs are (B, T, D). With ``parts=True`` returns ``(init_term, future_term)``
    already multiplied by their weights.
    """
    B, T, D = z.shape
    if T < lag + 2:
        raise ConstraintError(f"sequence length {T} shorter than lag + 2 = {lag + 2}")
    if flow.lag != lag:
        raise ConstraintError(f"flow lag {flow.lag} differs from requested lag {lag}")
    l_init = tn.mean(tn.sum(0.5 * (tn.square(mu[:, :lag]) + tn.exp(logvar[:, :lag]) - logvar[:, :lag] - 1.0),
                            axis=(1, 2)))
    log_q = tn.sum(gaussian_log_density(z[:, lag:], mu[:, lag:], logvar[:, lag:]), axis=(1, 2))
    r, logdet = temporal_flow_forward(flow, z, u)
    log_p = tn.sum(standard_normal_log_density(r), axis=(1, 2)) + logdet
    l_future = tn.mean(log_q - log_p) / float(T - lag)
    init_term, future_term = beta_init * l_init, gamma_future * l_future
    if parts:
        return init_term, future_term
    return init_term + future_term


def style_gaussian(z_s: Tensor) -> Tensor:
    """``-log N(z_s; 0, I)`` averaged over the batch."""
    return -_batch_mean_of_sum(standard_normal_log_density(z_s))


# ---------------------------------------------------------------- decoder Jacobian

def decoder_jacobian_l1(decoder: Mlp, z: Tensor, cap: int = JACOBIAN_CAP, row_sample: int | None = None,
                        gen: np.random.Generator | None = None) -> Tensor:
    """Batch mean of the entrywise L1 norm of the decoder Jacobian.

    Output widths above ``cap`` are refused unless ``row_sample`` is given, in
    which case a uniform row subset is used and rescaled (unbiased).
    """
    n_out = decoder.widths[-1]
    jac = decoder.jacobian(z)
    if row_sample is None:
        if n_out > cap:
            raise ConstraintError(
                f"decoder output dimension {n_out} exceeds the full-Jacobian cap {cap}; "
                "pass row_sample=<m> to use the row-sampled estimator")
        return tn.mean(tn.sum(tn.abs(jac), axis=(1, 2)))
    gen = gen or np.random.default_rng(0)
    rows = gen.choice(n_out, size=min(row_sample, n_out), replace=False)
    sub = jac[:, rows]
    return tn.mean(tn.sum(tn.abs(sub), axis=(1, 2))) * (n_out / len(rows))


# ---------------------------------------------------------------- invariance / mechanisms

def invariance_penalty(z1: Tensor, z2: Tensor, A, statistic: str = "identity") -> Tensor:
    """Discrepancy between invariant statistics of two views on coordinates ``A``."""
    A = [int(a) for a in A]
    d = z1.shape[-1]
    if any(a < 0 or a >= d for a in A):
        raise ConstraintError(f"invariant coordinate out of range [0, {d})")
    if z1.shape != z2.shape:
        raise tn.ShapeError("invariance", [z1.shape, z2.shape])
    if not A:
        return tn.constant(0.0)
    a1, a2 = z1[:, A], z2[:, A]
    if statistic == "identity":
        return tn.mean(tn.square(a1 - a2))
    if statistic == "moments":
        m1, m2 = tn.mean(a1, axis=0), tn.mean(a2, axis=0)
        v1 = tn.mean(tn.square(a1 - m1), axis=0)
        v2 = tn.mean(tn.square(a2 - m2), axis=0)
        return tn.mean(tn.square(m1 - m2) + tn.square(v1 - v2))
    raise ConstraintError(f"unknown invariant statistic {statistic!r}")


def mechanism_sparsity(E: Tensor) -> Tensor:
    return tn.sum(tn.abs(E))


def aux_latent_and_delta(h: Tensor, h_hat: Tensor) -> tuple[Tensor, Tensor]:
    """Feature reconstruction and temporal-difference matching on (B, T, F) features."""
    if h.shape != h_hat.shape:
        raise tn.ShapeError("aux_latent_and_delta", [h.shape, h_hat.shape])
    if h.ndim != 3 or h.shape[1] < 2:
        raise ConstraintError("delta matching needs sequences with T >= 2")
    l_latent = tn.mean(tn.sum(tn.square(h_hat - h), axis=-1))
    dh_hat = h_hat[:, 1:] - h_hat[:, :-1]
    dh = h[:, 1:] - h[:, :-1]
    l_delta = tn.mean(tn.sum(tn.square(dh_hat - dh), axis=-1))
    return l_latent, l_delta

