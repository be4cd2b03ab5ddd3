"""View generation and task losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .nets import NetError, Prototypes, l2_normalize, prototype_logits
from .prng import PrngStream
from .tensor import Tensor

MASK_EPS = 1e-8
DEFAULT_TAU = 0.1
DEFAULT_TAU_P = 0.1
SINKHORN_ITERS = 3
SINKHORN_EPS = 0.05
JITTER_SIGMA = 0.1
DROPOUT_RATE = 0.1

TASK_KINDS = (
    "reconstruction", "denoising", "masked", "next_frame", "mid_latent", "contrastive", "cross_view",
    "prototype", "target_pred", "transform_correct", "autoregressive", "multi_view",
)
VIEW_KINDS = ("identity", "corrupt", "mask", "two_views", "transform", "prefix")
TRANSFORM_CLASSES = ("identity", "negate", "reverse", "roll")


class TaskError(ValueError):
    pass


@dataclass
class ViewSpec:
    kind: str = "identity"
    sigma_noise: float = 0.1
    ratio: float = 0.5
    jitter: float = JITTER_SIGMA
    dropout: float = DROPOUT_RATE
    classes: tuple = TRANSFORM_CLASSES
    prefix: int = 1

    def __post_init__(self):
        if self.kind not in VIEW_KINDS:
            raise TaskError(f"unknown view kind {self.kind!r}")
        if self.kind == "mask" and not 0.0 < self.ratio < 1.0:
            raise TaskError("mask ratio must lie in (0, 1)")
        if self.kind == "corrupt" and self.sigma_noise <= 0:
            raise TaskError("corruption sigma must be positive")


@dataclass
class TaskSpec:
    kind: str = "reconstruction"
    weight: float = 1.0
    tau: float = DEFAULT_TAU
    n_prototypes: int = 8
    tau_p: float = DEFAULT_TAU_P
    sinkhorn: bool = True
    sinkhorn_iters: int = SINKHORN_ITERS
    sigma_noise: float = 0.1
    mask_ratio: float = 0.5
    n_views: int = 2
    exclude_same_sequence: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskError(f"unknown task kind {self.kind!r}")
        if self.tau <= 0 or self.tau_p <= 0:
            raise TaskError("temperatures must be positive")
        if self.n_prototypes < 1:
            raise TaskError("need at least one prototype")
        if self.weight < 0:
            raise TaskError("task weight must be nonnegative")


def _mask_count(ratio: float, d: int) -> int:
    return int(math.floor(ratio * d + 0.5))


def random_mask(shape, ratio: float, gen: np.random.Generator) -> np.ndarray:
    """Binary visibility mask; exactly round(ratio * d) zeros along the last axis."""
    d = shape[-1]
    k = _mask_count(ratio, d)
    keys = gen.random(shape)
    ranks = np.argsort(np.argsort(keys, axis=-1), axis=-1)
    return (ranks >= k).astype(np.float64)


def apply_transform(x: np.ndarray, cls: np.ndarray, classes=TRANSFORM_CLASSES) -> np.ndarray:
    out = np.array(x, dtype=np.float64, copy=True)
    for c, name in enumerate(classes):
        sel = cls == c
        if not sel.any():
            continue
        if name == "identity":
            continue
        if name == "negate":
            out[sel] = -x[sel]
        elif name == "reverse":
            out[sel] = x[sel][..., ::-1]
        elif name == "roll":
            out[sel] = np.roll(x[sel], 1, axis=-1)
        else:
            raise TaskError(f"unknown transform {name!r}")
    return out


def _augment(x: np.ndarray, spec: ViewSpec, gen: np.random.Generator) -> np.ndarray:
    jitter = spec.jitter * gen.standard_normal(x.shape)
    keep = (gen.random(x.shape) >= spec.dropout).astype(np.float64)
    return (x + jitter) * keep


def view_generate(spec: ViewSpec, batch: np.ndarray, stream: PrngStream):
    """Return ``(view, meta)``; ``meta`` carries the mask, transform labels or the paired view."""
    x = np.asarray(batch, dtype=np.float64)
    if spec.kind == "identity":
        return x, {}
    gen = stream.generator()
    if spec.kind == "corrupt":
        return x + spec.sigma_noise * gen.standard_normal(x.shape), {}
    if spec.kind == "mask":
        m = random_mask(x.shape, spec.ratio, gen)
        return m * x, {"mask": m}
    if spec.kind == "two_views":
        v1 = _augment(x, spec, gen)
        v2 = _augment(x, spec, gen)
        return v1, {"paired_view": v2}
    if spec.kind == "transform":
        cls = gen.integers(0, len(spec.classes), size=x.shape[0])
        return apply_transform(x, cls, spec.classes), {"transform_id": cls}
    if spec.kind == "prefix":
        if x.ndim < 3:
            raise TaskError("prefix view needs (batch, time, dim) input")
        return x[:, :spec.prefix], {"prefix": spec.prefix}
    raise TaskError(f"unknown view kind {spec.kind!r}")


def multi_views(batch: np.ndarray, n_views: int, stream: PrngStream, spec: ViewSpec | None = None) -> list:
    """``n_views`` independently augmented copies of the batch."""
    if n_views < 2:
        raise TaskError("multi-view tasks need at least two views")
    spec = spec or ViewSpec("two_views")
    gen = stream.generator()
    x = np.asarray(batch, dtype=np.float64)
    return [_augment(x, spec, gen) for _ in range(n_views)]


# ---------------------------------------------------------------- squared-error family

def _sq_norm_mean(diff: Tensor) -> Tensor:
    """Mean over all leading axes of the squared L2 norm along the last axis."""
    return tn.mean(tn.sum(tn.square(diff), axis=-1))


def _check(kind, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise tn.ShapeError(f"loss[{kind}]", [a.shape, b.shape])


def loss_squared_family(kind: str, outputs, targets, mask=None) -> Tensor:
    """Squared-error task losses.

    reconstruction / denoising / multi_view: ``mean ||x_hat - x||^2``.
    next_frame: outputs and targets are full sequences; compares ``x_hat_t`` with ``x_{t+1}``.
    autoregressive: unit-variance Gaussian NLL (constant dropped) of the next step.
    masked: squared error on masked-out entries divided by their count (+1e-8).
    mid_latent: target passes through stop_gradient.
    cross_view: ``outputs``/``targets`` are pairs, symmetric average.
    """
    if kind in ("reconstruction", "denoising", "multi_view"):
        _check(kind, outputs, targets)
        return _sq_norm_mean(outputs - targets)
    if kind == "mid_latent":
        _check(kind, outputs, targets)
        return _sq_norm_mean(outputs - tn.stop_gradient(targets))
    if kind in ("next_frame", "autoregressive"):
        _check(kind, outputs, targets)
        if outputs.ndim < 3 or outputs.shape[1] < 2:
            raise TaskError(f"{kind} needs sequences with T >= 2")
        loss = _sq_norm_mean(outputs[:, :-1] - targets[:, 1:])
        return 0.5 * loss if kind == "autoregressive" else loss
    if kind == "masked":
        if mask is None:
            raise TaskError("masked loss requires a mask")
        _check(kind, outputs, targets)
        hidden = 1.0 - np.asarray(mask, dtype=np.float64)
        if hidden.shape != outputs.shape:
            raise tn.ShapeError("loss[masked]", [outputs.shape, hidden.shape])
        num = tn.sum(tn.square((outputs - targets) * tn.constant(hidden)))
        return num / (float(hidden.sum()) + MASK_EPS)
    if kind == "cross_view":
        (oi, oj), (ti, tj) = outputs, targets
        _check(kind, oi, tj)
        _check(kind, oj, ti)
        return 0.5 * (_sq_norm_mean(oi - tj) + _sq_norm_mean(oj - ti))
    raise TaskError(f"{kind!r} is not a squared-error task")


# ---------------------------------------------------------------- contrastive

def loss_infonce(queries: Tensor, keys: Tensor, tau: float = DEFAULT_TAU, stop_grad_keys: bool = True,
                 groups=None) -> Tensor:
    """InfoNCE with in-batch negatives; row i's positive is key i.

    Both sides are L2-normalised. ``groups`` (optional ints) excludes keys from
    the same group (other than the positive) from the negatives.
    """
    if queries.shape != keys.shape:
        raise tn.ShapeError("infonce", [queries.shape, keys.shape])
    n = queries.shape[0]
    if n < 2:
        raise TaskError("InfoNCE needs a batch of at least 2")
    if tau <= 0:
        raise TaskError("temperature must be positive")
    q = l2_normalize(queries, what="query")
    k = l2_normalize(tn.stop_gradient(keys) if stop_grad_keys else keys, what="key")
    logits = (q @ tn.transpose(k)) / tau
    if groups is not None:
        g = np.asarray(groups)
        block = (g[:, None] == g[None, :]) & ~np.eye(n, dtype=bool)
        logits = logits + tn.constant(np.where(block, -1e9, 0.0))
    logp = tn.log_softmax(logits, axis=1)
    return -tn.mean(logp[np.arange(n), np.arange(n)])


def loss_infonce_symmetric(hi: Tensor, hj: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Two-direction multi-view InfoNCE, no stop-gradient."""
    return 0.5 * (loss_infonce(hi, hj, tau, stop_grad_keys=False) +
                  loss_infonce(hj, hi, tau, stop_grad_keys=False))


# ---------------------------------------------------------------- clustering

def sinkhorn_assign(logits, iters: int = SINKHORN_ITERS) -> np.ndarray:
    """Balanced soft assignments (N x K) from tempered logits; rows sum to 1, columns tend to N/K."""
    if iters < 1:
        raise TaskError("sinkhorn needs at least one iteration")
    s = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    n, k = s.shape
    q = np.exp(s - s.max())
    q /= q.sum()
    for _ in range(iters):
        q /= q.sum(axis=0, keepdims=True)
        q /= k
        q /= q.sum(axis=1, keepdims=True)
        q /= n
    return q * n


def loss_classification(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy with integer labels."""
    labels = np.asarray(labels, dtype=int)
    n, c = logits.shape
    if labels.shape != (n,):
        raise tn.ShapeError("cross_entropy", [logits.shape, labels.shape])
    if labels.min() < 0 or labels.max() >= c:
        raise TaskError(f"label out of range [0, {c})")
    logp = tn.log_softmax(logits, axis=1)
    return -tn.mean(logp[np.arange(n), labels])


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    logp = tn.log_softmax(logits, axis=1)
    return -tn.mean(tn.sum(logp * tn.constant(targets), axis=1))


def loss_prototype(reps, protos: Prototypes, spec: TaskSpec | None = None) -> Tensor:
    """Prototype task loss.

    With a single representation tensor: hard nearest-prototype assignment on
    the detached representation, then cross entropy over cosine logits.
    With a pair ``(r_i, r_j)``: swapped prediction against Sinkhorn-balanced
    targets computed from the other view.
    """
    spec = spec or TaskSpec(kind="prototype")
    if isinstance(reps, (tuple, list)):
        ri, rj = reps
        li, lj = prototype_logits(protos, ri), prototype_logits(protos, rj)
        if spec.sinkhorn:
            # cosine scores sharpened by the Sinkhorn temperature
            qi = sinkhorn_assign(li.data * protos.tau / SINKHORN_EPS, spec.sinkhorn_iters)
            qj = sinkhorn_assign(lj.data * protos.tau / SINKHORN_EPS, spec.sinkhorn_iters)
        else:
            qi = _softmax_np(li.data)
            qj = _softmax_np(lj.data)
        return 0.5 * (soft_cross_entropy(li, qj) + soft_cross_entropy(lj, qi))
    r = reps
    if np.any(np.linalg.norm(r.data, axis=-1) < 1e-12):
        raise NetError("zero-norm representation cannot be assigned to a prototype")
    d2 = ((r.data[:, None, :] - protos.C.data[None, :, :]) ** 2).sum(axis=-1)
    assign = d2.argmin(axis=1)
    return loss_classification(prototype_logits(protos, r), assign)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
