"""Parametric building blocks on top of the tensor engine."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as tn
from .prng import PrngStream, STREAM_EXTRACTOR
from .tensor import Tensor

LOGVAR_CLAMP = (-10.0, 10.0)
DEFAULT_HIDDEN = (64, 64)
EMBED_DIM = 8


class NetError(ValueError):
    pass


class Module:
    """Minimal parameter registry with dotted names for checkpoints."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._modules: dict[str, Module] = {}

    def param(self, name: str, value) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, mod in self._modules.items():
            out.update(mod.named_parameters(f"{prefix}{name}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise NetError(f"state is missing parameters: {sorted(missing)}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise NetError(f"parameter {k}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def post_step(self) -> None:
        for mod in self._modules.values():
            mod.post_step()


def _activation(name: str, x: Tensor) -> Tensor:
    if name == "leaky_relu":
        return tn.leaky_relu(x)
    if name == "tanh":
        return tn.tanh(x)
    if name == "relu":
        return tn.relu(x)
    if name == "identity":
        return x
    raise NetError(f"unknown activation {name!r}")


def _activation_slope(name: str, pre: Tensor, post: Tensor):
    """Derivative of the activation at ``pre`` (a tensor or a constant array)."""
    if name == "leaky_relu":
        return np.where(pre.data > 0, 1.0, tn.LEAKY_SLOPE)
    if name == "relu":
        return (pre.data > 0).astype(float)
    if name == "tanh":
        return 1.0 - tn.square(post)
    if name == "identity":
        return None
    raise NetError(f"unknown activation {name!r}")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, stream: PrngStream | None, zero: bool = False):
        super().__init__()
        if zero or stream is None:
            w = np.zeros((n_in, n_out))
        else:
            w = stream.generator().standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        self.W = self.param("W", w)
        self.b = self.param("b", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b


class Mlp(Module):
    """Fully connected network; the activation is applied after every layer but the last."""

    def __init__(self, widths: Sequence[int], stream: PrngStream, activation: str = "leaky_relu",
                 zero_last: bool = False):
        super().__init__()
        widths = list(widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise NetError(f"bad MLP widths {widths}")
        self.widths = widths
        self.activation = activation
        self.layers = [
            self.add(f"l{i}", Linear(widths[i], widths[i + 1], stream,
                                     zero=zero_last and i == len(widths) - 2))
            for i in range(len(widths) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = _activation(self.activation, h)
        return h

    def jacobian(self, z: Tensor) -> Tensor:
        """Per-sample Jacobian ``d out / d z`` of shape (B, n_out, n_in).

        Built by forward-mode tangent propagation out of tape ops, so the
        result is itself differentiable with respect to the weights.
        """
        if z.ndim != 2:
            raise NetError("jacobian expects a (batch, dim) input")
        B, d = z.shape
        h = z
        tangent = None
        for i, layer in enumerate(self.layers):
            pre = layer(h)
            width = layer.W.shape[1]
            if tangent is None:
                tangent = tn.broadcast_to(tn.reshape(layer.W, (1, d, width)), (B, d, width))
            else:
                tangent = tangent @ layer.W
            if i < len(self.layers) - 1:
                h = _activation(self.activation, pre)
                slope = _activation_slope(self.activation, pre, h)
                if slope is not None:
                    slope_t = slope if isinstance(slope, Tensor) else tn.constant(slope)
                    tangent = tangent * tn.broadcast_to(tn.reshape(slope_t, (B, 1, width)), (B, d, width))
            else:
                h = pre
        return tn.transpose(tangent, (0, 2, 1))


class GaussianEncoder(Module):
    """Trunk MLP with mean and log-variance heads for a diagonal Gaussian posterior."""

    def __init__(self, n_in: int, latent_dim: int, stream: PrngStream, hidden=DEFAULT_HIDDEN,
                 activation: str = "leaky_relu"):
        super().__init__()
        hidden = list(hidden)
        self.latent_dim = latent_dim
        self.activation = activation
        self.trunk = self.add("trunk", Mlp([n_in] + hidden, stream, activation))
        self.mu_head = self.add("mu", Linear(hidden[-1], latent_dim, stream))
        self.logvar_head = self.add("logvar", Linear(hidden[-1], latent_dim, stream))
        self.logvar_head.W.data *= 0.1

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = _activation(self.activation, self.trunk(x))
        return self.mu_head(h), tn.clip(self.logvar_head(h), *LOGVAR_CLAMP)


def encode(enc: GaussianEncoder, x: Tensor) -> tuple[Tensor, Tensor]:
    return enc(x)


def reparameterize(mu: Tensor, logvar: Tensor, noise) -> Tensor:
    noise = noise if isinstance(noise, Tensor) else tn.constant(noise)
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise tn.ShapeError("reparameterize", [mu.shape, logvar.shape, noise.shape])
    return mu + noise * tn.exp(0.5 * logvar)


def history_window(z: Tensor, lag: int) -> Tensor:
    """``s_t = [z_{t-L}, ..., z_t]`` along the last axis, zero padded at the start.

    ``z`` is (batch, T, D); the result is (batch, T, (L+1) D).
    """
    if lag < 1:
        raise NetError("lag must be >= 1")
    B, T, D = z.shape
    padded = tn.concat([tn.zeros((B, lag, D)), z], axis=1)
    return tn.concat([padded[:, k:k + T] for k in range(lag + 1)], axis=-1)


def lagged_context(z: Tensor, lag: int) -> tuple[Tensor, Tensor]:
    """Split (B, T, D) into the history ``[z_{t-L}..z_{t-1}]`` and current ``z_t`` for t > L."""
    B, T, D = z.shape
    prev = tn.concat([z[:, k:k + T - lag] for k in range(lag)], axis=-1)
    return prev, z[:, lag:]


class ComponentwiseFlow(Module):
    """Conditional per-dimension affine transition flow.

    ``r_{t,i} = (z_{t,i} - m_i(ctx)) * exp(-a_i(ctx))`` where the context is the
    gated history ``E[i] * [z_{t-L}..z_{t-1}]`` (plus an environment embedding).
    ``log|det dr/dz_t| = -sum_i a_i``. Zero-initialised output layers make the
    initial flow the identity.
    """

    def __init__(self, latent_dim: int, lag: int, stream: PrngStream, hidden: int = 32,
                 n_envs: int = 1, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.latent_dim, self.lag = latent_dim, lag
        ctx = lag * latent_dim
        self.use_env = n_envs > 1
        self.n_envs = n_envs
        gen = stream.generator()
        if self.use_env:
            self.embed = self.param("embed", gen.standard_normal((n_envs, embed_dim)))
            ctx += embed_dim
        self.E = self.param("E", np.ones((latent_dim, lag * latent_dim)))
        self.W1 = self.param("W1", gen.standard_normal((latent_dim, ctx, hidden)) * np.sqrt(2.0 / ctx))
        self.b1 = self.param("b1", np.zeros((latent_dim, 1, hidden)))
        self.W2 = self.param("W2", np.zeros((latent_dim, hidden, 2)))
        self.b2 = self.param("b2", np.zeros((latent_dim, 1, 2)))

    def conditioner(self, history: Tensor, u=None) -> tuple[Tensor, Tensor]:
        """Shift ``m`` and log-scale ``a`` (each (N, D)) from a flat (N, L*D) history."""
        N = history.shape[0]
        D = self.latent_dim
        for name in ("E", "W1", "b1", "W2", "b2"):
            if not np.isfinite(self._params[name].data).all():
                raise tn.NumericError(f"flow parameter {name} is not finite")
        gated = gated_transition_inputs(self.E, history)  # (N, D, L*D)
        if self.use_env:
            if u is None:
                raise NetError("flow is environment-conditioned; pass u")
            u = np.asarray(u, dtype=int)
            if u.min() < 0 or u.max() >= self.n_envs:
                raise NetError(f"environment index out of range [0, {self.n_envs})")
            emb = self.embed[u]
            emb = tn.broadcast_to(tn.reshape(emb, (N, 1, emb.shape[-1])), (N, D, emb.shape[-1]))
            gated = tn.concat([gated, emb], axis=-1)
        x = tn.transpose(gated, (1, 0, 2))  # (D, N, ctx)
        h = tn.leaky_relu(x @ self.W1 + tn.broadcast_to(self.b1, (D, N, self.b1.shape[-1])))
        out = h @ self.W2 + tn.broadcast_to(self.b2, (D, N, 2))
        m = tn.transpose(out[:, :, 0])
        a = tn.transpose(out[:, :, 1])
        return m, a

    def __call__(self, z: Tensor, u=None) -> tuple[Tensor, Tensor]:
        return temporal_flow_forward(self, z, u)

    def inverse_step(self, r: Tensor, history: Tensor, u=None) -> Tensor:
        m, a = self.conditioner(history, u)
        return r * tn.exp(a) + m


def gated_transition_inputs(E: Tensor, history: Tensor) -> Tensor:
    """Multiply each history coordinate by its edge weight, per output dimension.

    ``history`` is (N, L*D), ``E`` is (D, L*D); the result is (N, D, L*D).
    """
    N, C = history.shape
    D = E.shape[0]
    if E.shape[1] != C:
        raise tn.ShapeError("gated_transition_inputs", [E.shape, history.shape])
    rep = tn.broadcast_to(tn.reshape(history, (N, 1, C)), (N, D, C))
    return rep * E


def temporal_flow_forward(flow: ComponentwiseFlow, z: Tensor, u=None) -> tuple[Tensor, Tensor]:
    """Residuals ``r_{L+1:T}`` (B, T-L, D) and per-sequence log|det J| (B,)."""
    B, T, D = z.shape
    L = flow.lag
    if T <= L:
        raise NetError(f"sequence length {T} must exceed lag {L}")
    prev, cur = lagged_context(z, L)
    N = B * (T - L)
    hist = tn.reshape(prev, (N, L * D))
    cur2 = tn.reshape(cur, (N, D))
    uu = None if u is None else np.repeat(np.asarray(u, dtype=int), T - L)
    m, a = flow.conditioner(hist, uu)
    r = (cur2 - m) * tn.exp(-a)
    logdet = tn.sum(tn.reshape(-tn.sum(a, axis=1), (B, T - L)), axis=1)
    return tn.reshape(r, (B, T - L, D)), logdet


class DomainFlow(Module):
    """Per-dimension affine map of the style code, generated from a domain embedding."""

    def __init__(self, style_dim: int, n_domains: int, stream: PrngStream, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.style_dim, self.n_domains = style_dim, n_domains
        self.embed = self.param("embed", stream.generator().standard_normal((n_domains, embed_dim)))
        self.head = self.add("head", Linear(embed_dim, 2 * style_dim, None, zero=True))

    def __call__(self, z_s: Tensor, u) -> tuple[Tensor, Tensor]:
        return domain_flow_forward(self, z_s, u)


def domain_flow_forward(flow: DomainFlow, z_s: Tensor, u) -> tuple[Tensor, Tensor]:
    u = np.asarray(u, dtype=int)
    if u.size and (u.min() < 0 or u.max() >= flow.n_domains):
        raise NetError(f"unknown domain index; valid range is [0, {flow.n_domains})")
    s = flow.style_dim
    p = flow.head(flow.embed[u])
    log_scale, shift = p[:, :s], p[:, s:]
    return z_s * tn.exp(log_scale) + shift, tn.sum(log_scale, axis=1)


class AdditiveDecoder(Module):
    """``g(Z) = sum_k alpha_k(Z) g_k(Z_{B_k})`` with softmax gates on a detached input."""

    def __init__(self, blocks: Sequence[Sequence[int]], out_dim: int, stream: PrngStream,
                 hidden=DEFAULT_HIDDEN, activation: str = "leaky_relu"):
        super().__init__()
        blocks = [list(map(int, b)) for b in blocks]
        flat = [i for b in blocks for i in b]
        if len(flat) != len(set(flat)):
            raise NetError("decoder blocks overlap")
        if sorted(flat) != list(range(len(flat))):
            raise NetError("decoder blocks must partition the latent coordinates")
        self.blocks = blocks
        self.latent_dim = len(flat)
        self.out_dim = out_dim
        self.branches = [self.add(f"branch{k}", Mlp([len(b)] + list(hidden) + [out_dim], stream, activation))
                         for k, b in enumerate(blocks)]
        self.gate = self.add("gate", Mlp([self.latent_dim, hidden[0], len(blocks)], stream, activation,
                                         zero_last=True))

    def gates(self, z: Tensor) -> Tensor:
        return tn.softmax(self.gate(tn.stop_gradient(z)), axis=-1)

    def branch_output(self, k: int, z: Tensor) -> Tensor:
        return self.branches[k](z[:, self.blocks[k]])

    def __call__(self, z: Tensor) -> Tensor:
        return additive_decode(self, z)


def additive_decode(dec: AdditiveDecoder, z: Tensor) -> Tensor:
    B = z.shape[0]
    alpha = dec.gates(z)
    out = None
    for k in range(len(dec.blocks)):
        w = tn.broadcast_to(alpha[:, k:k + 1], (B, dec.out_dim))
        term = w * dec.branch_output(k, z)
        out = term if out is None else out + term
    return out


def l2_normalize(x: Tensor, axis: int = -1, what: str = "input") -> Tensor:
    norms = np.sqrt((x.data ** 2).sum(axis=axis))
    if np.any(norms < 1e-12):
        raise NetError(f"zero-norm {what} cannot be normalized")
    n = tn.sqrt(tn.sum(tn.square(x), axis=axis, keepdims=True))
    return x / tn.broadcast_to(n, x.shape)


class Prototypes(Module):
    def __init__(self, k: int, dim: int, stream: PrngStream, tau: float = 0.1):
        super().__init__()
        if k < 1:
            raise NetError("need at least one prototype")
        if tau <= 0:
            raise NetError("prototype temperature must be positive")
        c = stream.generator().standard_normal((k, dim))
        self.C = self.param("C", c / np.linalg.norm(c, axis=1, keepdims=True))
        self.tau = tau

    def post_step(self) -> None:
        n = np.linalg.norm(self.C.data, axis=1, keepdims=True)
        self.C.data[...] = self.C.data / np.maximum(n, 1e-12)
        super().post_step()


def prototype_logits(protos: Prototypes, z: Tensor) -> Tensor:
    """Cosine similarity to each prototype divided by the temperature; (B, K)."""
    zn = l2_normalize(z, what="representation")
    cn = l2_normalize(protos.C, what="prototype")
    return (zn @ tn.transpose(cn)) / protos.tau


class FrozenExtractor:
    """Seed-pinned random leaky-ReLU feature map; numpy only, never trained."""

    def __init__(self, n_in: int, n_out: int, seed: int, hidden: Sequence[int] = (64,)):
        gen = PrngStream(seed, STREAM_EXTRACTOR).generator()
        widths = [n_in] + list(hidden) + [n_out]
        self.weights = []
        for a, b in zip(widths[:-1], widths[1:]):
            self.weights.append((gen.standard_normal((a, b)) * np.sqrt(2.0 / a), 0.1 * gen.standard_normal(b)))
        for w, bias in self.weights:
            w.setflags(write=False)
            bias.setflags(write=False)
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for i, (w, b) in enumerate(self.weights):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.where(h > 0, h, tn.LEAKY_SLOPE * h)
        return h
