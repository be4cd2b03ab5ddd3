"""Finite-difference cases: one builder per primitive and per loss/constraint op.

Each builder takes a numpy Generator and returns ``(f, x)`` with ``f`` mapping a
leaf tensor to a scalar. Scalars are formed as ``sum(w * op(x))`` with random
``w`` so no gradient coordinate is structurally zero. Inputs to kinked ops are
kept at least 0.05 away from the kink.
"""
import zlib

import numpy as np

from taskcrl import constraints as cs
from taskcrl import nets
from taskcrl import tasks as tk
from taskcrl import tensor as tn
from taskcrl.prng import PrngStream


def _away(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _wsum(rng, shape):
    w = tn.constant(rng.normal(size=shape))
    return lambda y: tn.sum(w * y)


def _unary(op, domain="real"):
    def build(rng):
        shape = (3, 4)
        if domain == "positive":
            x = rng.uniform(0.3, 2.0, shape)
        elif domain == "kink":
            x = _away(rng, shape)
        else:
            x = rng.normal(size=shape)
        ws = _wsum(rng, shape)
        return (lambda t: ws(op(t))), x
    return build


def _binary(op, rhs_positive=False):
    def build(rng):
        other = rng.uniform(0.5, 2.0, (3, 4)) if rhs_positive else rng.normal(size=(3, 4))
        ws = _wsum(rng, (3, 4))
        o = tn.constant(other)
        return (lambda t: ws(op(t, o))), rng.normal(size=(3, 4))
    return build


def _binary_rhs(op):
    def build(rng):
        left = tn.constant(rng.normal(size=(3, 4)))
        ws = _wsum(rng, (3, 4))
        return (lambda t: ws(op(left, t))), rng.uniform(0.5, 2.0, (3, 4))
    return build


def _broadcast_add(rng):
    ws = _wsum(rng, (3, 4))
    m = tn.constant(rng.normal(size=(3, 4)))
    return (lambda t: ws(tn.add(m, t))), rng.normal(size=(4,))


def _matmul_left(rng):
    b = tn.constant(rng.normal(size=(4, 2)))
    ws = _wsum(rng, (3, 2))
    return (lambda t: ws(tn.matmul(t, b))), rng.normal(size=(3, 4))


def _matmul_right(rng):
    a = tn.constant(rng.normal(size=(3, 4)))
    ws = _wsum(rng, (3, 2))
    return (lambda t: ws(tn.matmul(a, t))), rng.normal(size=(4, 2))


def _matmul_batched(rng):
    b = tn.constant(rng.normal(size=(2, 4, 3)))
    ws = _wsum(rng, (2, 3, 3))
    return (lambda t: ws(tn.matmul(t, b))), rng.normal(size=(2, 3, 4))


def _matmul_vec(rng):
    a = tn.constant(rng.normal(size=(3, 4)))
    ws = _wsum(rng, (3,))
    return (lambda t: ws(tn.matmul(a, t))), rng.normal(size=(4,))


def _reduce(op, **kw):
    def build(rng):
        x = rng.normal(size=(3, 4))
        out_shape = np.asarray(op(tn.constant(x), **kw).data).shape
        ws = _wsum(rng, out_shape)
        return (lambda t: ws(op(t, **kw))), x
    return build


def _concat(rng):
    other = tn.constant(rng.normal(size=(2, 4)))
    ws = _wsum(rng, (5, 4))
    return (lambda t: ws(tn.concat([t, other], axis=0))), rng.normal(size=(3, 4))


def _stack(rng):
    other = tn.constant(rng.normal(size=(3, 4)))
    ws = _wsum(rng, (2, 3, 4))
    return (lambda t: ws(tn.stack([t, other], axis=0))), rng.normal(size=(3, 4))


def _slice(rng):
    ws = _wsum(rng, (2, 2))
    return (lambda t: ws(t[1:, ::2])), rng.normal(size=(3, 4))


def _fancy_index(rng):
    idx = np.array([0, 2, 2, 1])
    ws = _wsum(rng, (4, 4))
    return (lambda t: ws(t[idx])), rng.normal(size=(3, 4))


def _transpose(rng):
    ws = _wsum(rng, (4, 2, 3))
    return (lambda t: ws(tn.transpose(t, (2, 0, 1)))), rng.normal(size=(2, 3, 4))


def _reshape(rng):
    ws = _wsum(rng, (6, 2))
    return (lambda t: ws(tn.reshape(t, (6, 2)))), rng.normal(size=(3, 4))


def _broadcast_to(rng):
    ws = _wsum(rng, (2, 3, 4))
    return (lambda t: ws(tn.broadcast_to(t, (2, 3, 4)))), rng.normal(size=(3, 1))


def _clip(rng):
    x = rng.normal(size=(3, 4))
    # keep every entry 0.05 away from both bounds
    x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x + 0.1 * np.sign(x), x)
    ws = _wsum(rng, (3, 4))
    return (lambda t: ws(tn.clip(t, -0.5, 0.5))), x


PRIMITIVES = {
    "add": _binary(tn.add),
    "add_broadcast": _broadcast_add,
    "sub": _binary(tn.sub),
    "mul": _binary(tn.mul),
    "div_numerator": _binary(tn.div, rhs_positive=True),
    "div_denominator": _binary_rhs(tn.div),
    "neg": _unary(tn.neg),
    "matmul_left": _matmul_left,
    "matmul_right": _matmul_right,
    "matmul_batched": _matmul_batched,
    "matmul_vector": _matmul_vec,
    "relu": _unary(tn.relu, "kink"),
    "leaky_relu": _unary(tn.leaky_relu, "kink"),
    "tanh": _unary(tn.tanh),
    "sigmoid": _unary(tn.sigmoid),
    "exp": _unary(tn.exp),
    "log": _unary(tn.log, "positive"),
    "square": _unary(tn.square),
    "sqrt": _unary(tn.sqrt, "positive"),
    "abs": _unary(tn.abs, "kink"),
    "clip": _clip,
    "sum_all": _reduce(tn.sum),
    "sum_axis": _reduce(tn.sum, axis=1),
    "mean_axis": _reduce(tn.mean, axis=0, keepdims=True),
    "logsumexp": _reduce(tn.logsumexp, axis=-1),
    "softmax": _reduce(tn.softmax, axis=-1),
    "log_softmax": _reduce(tn.log_softmax, axis=0),
    "concat": _concat,
    "stack": _stack,
    "slice": _slice,
    "fancy_index": _fancy_index,
    "transpose": _transpose,
    "reshape": _reshape,
    "broadcast_to": _broadcast_to,
}


# ---------------------------------------------------------------- losses and constraints

def _squared(kind):
    def build(rng):
        if kind in ("next_frame", "autoregressive"):
            shape = (2, 4, 3)
        else:
            shape = (4, 3)
        target = tn.constant(rng.normal(size=shape))
        if kind == "masked":
            mask = (rng.random(shape) < 0.5).astype(float)
            mask[0, 0] = 0.0
            return (lambda t: tk.loss_squared_family(kind, t, target, mask)), rng.normal(size=shape)
        if kind == "cross_view":
            other = tn.constant(rng.normal(size=shape))
            t2 = tn.constant(rng.normal(size=shape))
            return (lambda t: tk.loss_squared_family(kind, (t, other), (target, t2))), rng.normal(size=shape)
        return (lambda t: tk.loss_squared_family(kind, t, target)), rng.normal(size=shape)
    return build


def _infonce(rng):
    keys = tn.constant(rng.normal(size=(5, 3)))
    return (lambda t: tk.loss_infonce(t, keys, tau=0.5)), rng.normal(size=(5, 3))


def _infonce_symmetric(rng):
    other = tn.constant(rng.normal(size=(5, 3)))
    return (lambda t: tk.loss_infonce_symmetric(t, other, tau=0.5)), rng.normal(size=(5, 3))


def _classification(rng):
    labels = rng.integers(0, 4, 6)
    return (lambda t: tk.loss_classification(t, labels)), rng.normal(size=(6, 4))


def _soft_ce(rng):
    q = rng.random((6, 4))
    q /= q.sum(axis=1, keepdims=True)
    return (lambda t: tk.soft_cross_entropy(t, q)), rng.normal(size=(6, 4))


def _frozen_targets(fn):
    """Run ``fn`` with Sinkhorn targets pinned to their values at the first call.

    Swapped-prediction targets are detached, so finite differences must not see them move.
    """
    cache = []

    def wrapped(t):
        calls = iter(cache) if cache else None
        real = tk.sinkhorn_assign

        def pinned(*a, **kw):
            if calls is None:
                q = real(*a, **kw)
                cache.append(q)
                return q
            return next(calls)
        tk.sinkhorn_assign = pinned
        try:
            return fn(t)
        finally:
            tk.sinkhorn_assign = real
    return wrapped


def _prototype(paired):
    def build(rng):
        protos = nets.Prototypes(4, 3, PrngStream(int(rng.integers(1 << 30)), 2), tau=0.5)
        if paired:
            other = tn.constant(rng.normal(size=(6, 3)))
            return _frozen_targets(lambda t: tk.loss_prototype((t, other), protos)), rng.normal(size=(6, 3))
        x = rng.normal(size=(6, 3))
        return (lambda t: tk.loss_prototype(t, protos)), x
    return build


def _kl_std(which):
    def build(rng):
        mu, lv = rng.normal(size=(4, 3)), 0.5 * rng.normal(size=(4, 3))
        if which == "mu":
            lvt = tn.constant(lv)
            return (lambda t: cs.kl_standard_gaussian(t, lvt)), mu
        mut = tn.constant(mu)
        return (lambda t: cs.kl_standard_gaussian(mut, t)), lv
    return build


def _kl_gauss(rng):
    lvq = tn.constant(0.5 * rng.normal(size=(4, 3)))
    mup = tn.constant(rng.normal(size=(4, 3)))
    lvp = tn.constant(0.5 * rng.normal(size=(4, 3)))
    return (lambda t: cs.kl_gaussians(t, lvq, mup, lvp)), rng.normal(size=(4, 3))


def _kl_gauss_prior(rng):
    muq = tn.constant(rng.normal(size=(4, 3)))
    lvq = tn.constant(0.5 * rng.normal(size=(4, 3)))
    mup = tn.constant(rng.normal(size=(4, 3)))
    return (lambda t: cs.kl_gaussians(muq, lvq, mup, t)), 0.5 * rng.normal(size=(4, 3))


def _capacity_kl(rng):
    lv = tn.constant(0.3 * rng.normal(size=(4, 3)))
    mu = rng.normal(size=(4, 3)) * 2.0
    # the capacity is far from the KL value so the abs stays on one side
    return (lambda t: cs.capacity_kl(cs.kl_standard_gaussian(t, lv), 10, 2.0, 100.0, 1000.0)), mu


def _cond_prior(rng):
    u = rng.integers(0, 3, 5)
    pm = tn.constant(rng.normal(size=(3, 2)))
    plv = tn.constant(0.3 * rng.normal(size=(3, 2)))
    lv = tn.constant(0.3 * rng.normal(size=(5, 2)))
    return (lambda t: cs.cond_prior_static_kl(t, lv, u, pm, plv)), rng.normal(size=(5, 2))


def _cond_prior_table(rng):
    u = rng.integers(0, 3, 5)
    mu = tn.constant(rng.normal(size=(5, 2)))
    lv = tn.constant(0.3 * rng.normal(size=(5, 2)))
    plv = tn.constant(0.3 * rng.normal(size=(3, 2)))
    return (lambda t: cs.cond_prior_static_kl(mu, lv, u, t, plv)), rng.normal(size=(3, 2))


def _gauss_logpdf(rng):
    mu = tn.constant(rng.normal(size=(3, 4)))
    lv = tn.constant(0.3 * rng.normal(size=(3, 4)))
    ws = _wsum(rng, (3, 4))
    return (lambda t: ws(cs.gaussian_log_density(t, mu, lv))), rng.normal(size=(3, 4))


def _l1(rng):
    return cs.l1_sparsity, _away(rng, (4, 3))


def _bernoulli(rng):
    return (lambda t: cs.bernoulli_kl(0.1, t)), rng.uniform(0.05, 0.95, 5)


def _target_sparsity(rng):
    return (lambda t: cs.target_sparsity(t, 0.2)), rng.normal(size=(6, 3))


def _energy_fixed(rng):
    return cs.energy_penalty, rng.normal(size=(5, 3))


def _energy_learned(rng):
    z = tn.constant(rng.normal(size=(5, 3)))
    return (lambda t: cs.energy_penalty(z, t)), rng.normal(size=(3, 3))


def _vq_codebook(rng):
    # only the codebook term reaches the codebook; the straight-through pieces are checked by contract
    z_e = tn.constant(rng.normal(size=(6, 2)))

    def f(t):
        z_q, loss, _ = cs.vector_quantize(z_e, t, beta_commit=0.0)
        return loss
    return f, rng.normal(size=(4, 2))


def _style_gaussian(rng):
    return cs.style_gaussian, rng.normal(size=(4, 2))


def _invariance(statistic):
    def build(rng):
        other = tn.constant(rng.normal(size=(6, 4)))
        return (lambda t: cs.invariance_penalty(t, other, [0, 2], statistic)), rng.normal(size=(6, 4))
    return build


def _mechanism_sparsity(rng):
    return cs.mechanism_sparsity, _away(rng, (3, 3))


def _aux(which):
    def build(rng):
        h = tn.constant(rng.normal(size=(2, 4, 3)))

        def f(t):
            lat, delta = cs.aux_latent_and_delta(h, t)
            return lat if which == "latent" else delta
        return f, rng.normal(size=(2, 4, 3))
    return build


def _random_flow(rng, d, lag, n_envs=1):
    flow = nets.ComponentwiseFlow(d, lag, PrngStream(int(rng.integers(1 << 30)), 2), hidden=5, n_envs=n_envs)
    flow.W2.data[...] = 0.3 * rng.normal(size=flow.W2.shape)
    flow.b2.data[...] = 0.1 * rng.normal(size=flow.b2.shape)
    flow.E.data[...] = rng.uniform(0.5, 1.5, flow.E.shape)
    return flow


def _temporal_prior(which):
    def build(rng):
        B, T, D, L = 2, 4, 2, 1
        flow = _random_flow(rng, D, L)
        mu = rng.normal(size=(B, T, D))
        lv = 0.3 * rng.normal(size=(B, T, D))
        z = rng.normal(size=(B, T, D))
        if which == "z":
            mut, lvt = tn.constant(mu), tn.constant(lv)
            return (lambda t: cs.temporal_prior_kl(mut, lvt, t, flow, L)), z
        if which == "mu":
            lvt, zt = tn.constant(lv), tn.constant(z)
            return (lambda t: cs.temporal_prior_kl(t, lvt, zt, flow, L)), mu
        mut, zt = tn.constant(mu), tn.constant(z)
        # flow parameters: swap the leaf in for W2
        return (lambda t: _with_param(flow, "W2", t, lambda: cs.temporal_prior_kl(mut, tn.constant(lv), zt, flow, L))), \
            flow.W2.data.copy()
    return build


def _with_param(module, attr, value, fn):
    old = getattr(module, attr)
    setattr(module, attr, value)
    try:
        return fn()
    finally:
        setattr(module, attr, old)


def _jacobian_l1(rng):
    dec = nets.Mlp([3, 5, 4], PrngStream(int(rng.integers(1 << 30)), 2), activation="tanh")
    z = tn.constant(rng.normal(size=(3, 3)))
    layer = dec.layers[0]
    return (lambda t: _with_param(layer, "W", t, lambda: cs.decoder_jacobian_l1(dec, z))), layer.W.data.copy()


def _jacobian_l1_z(rng):
    dec = nets.Mlp([3, 5, 4], PrngStream(int(rng.integers(1 << 30)), 2), activation="tanh")
    return (lambda t: cs.decoder_jacobian_l1(dec, t)), rng.normal(size=(3, 3))


LOSSES = {
    **{f"task_{k}": _squared(k) for k in ("reconstruction", "denoising", "multi_view", "mid_latent",
                                          "next_frame", "autoregressive", "masked", "cross_view")},
    "task_infonce": _infonce,
    "task_infonce_symmetric": _infonce_symmetric,
    "task_classification": _classification,
    "task_soft_cross_entropy": _soft_ce,
    "task_prototype_hard": _prototype(False),
    "task_prototype_swapped": _prototype(True),
    "kl_standard_mu": _kl_std("mu"),
    "kl_standard_logvar": _kl_std("logvar"),
    "kl_gaussians_q": _kl_gauss,
    "kl_gaussians_p": _kl_gauss_prior,
    "capacity_kl": _capacity_kl,
    "cond_prior_static_posterior": _cond_prior,
    "cond_prior_static_table": _cond_prior_table,
    "gaussian_log_density": _gauss_logpdf,
    "l1_sparsity": _l1,
    "bernoulli_kl": _bernoulli,
    "target_sparsity": _target_sparsity,
    "energy_fixed": _energy_fixed,
    "energy_learned": _energy_learned,
    "vq_codebook": _vq_codebook,
    "style_gaussian": _style_gaussian,
    "invariance_identity": _invariance("identity"),
    "invariance_moments": _invariance("moments"),
    "mechanism_sparsity": _mechanism_sparsity,
    "latent_recon": _aux("latent"),
    "delta_match": _aux("delta"),
    "temporal_prior_z": _temporal_prior("z"),
    "temporal_prior_mu": _temporal_prior("mu"),
    "temporal_prior_flow": _temporal_prior("flow"),
    "jacobian_sparsity_weights": _jacobian_l1,
    "jacobian_sparsity_latent": _jacobian_l1_z,
}

def case_rng(name: str, instance: int) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(name.encode()), instance])


ALL_CASES = {**{f"primitive:{k}": v for k, v in PRIMITIVES.items()}, **{f"loss:{k}": v for k, v in LOSSES.items()}}
