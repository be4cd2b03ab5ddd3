import math

import numpy as np
import pytest

from taskcrl import nets
from taskcrl import tensor as tn
from taskcrl.prng import PrngStream


def _s(seed=0):
    return PrngStream(seed, 2)


def test_reparameterize_examples(rng):
    mu = tn.constant(rng.normal(size=(2, 3)))
    lv = tn.constant(np.zeros((2, 3)))
    assert np.array_equal(nets.reparameterize(mu, lv, np.zeros((2, 3))).data, mu.data)
    assert np.allclose(nets.reparameterize(mu, lv, np.ones((2, 3))).data, mu.data + 1)
    with pytest.raises(tn.ShapeError):
        nets.reparameterize(mu, lv, np.ones((3, 2)))


def test_history_window_padding():
    z = tn.constant(np.arange(1.0, 5.0).reshape(1, 4, 1))
    s = nets.history_window(z, 2).data[0]
    assert np.array_equal(s[0], [0, 0, 1])
    assert np.array_equal(s[-1], [2, 3, 4])


def test_encoder_logvar_clamped(rng):
    enc = nets.GaussianEncoder(3, 2, _s(), hidden=(4,))
    enc.logvar_head.b.data[...] = 50.0
    mu, lv = enc(tn.constant(rng.normal(size=(5, 3))))
    assert mu.shape == (5, 2) and np.all(lv.data <= nets.LOGVAR_CLAMP[1])


def test_zero_flow_is_identity(rng):
    flow = nets.ComponentwiseFlow(3, 1, _s(), hidden=4)
    z = tn.constant(rng.normal(size=(2, 5, 3)))
    r, logdet = flow(z)
    assert np.array_equal(r.data, z.data[:, 1:]) and np.all(logdet.data == 0)


def test_constant_scale_flow_logdet():
    D, L, T = 3, 2, 6
    flow = nets.ComponentwiseFlow(D, L, _s(), hidden=4)
    flow.b2.data[:, 0, 1] = math.log(2.0)
    for z in (np.zeros((2, T, D)), np.random.default_rng(1).normal(size=(2, T, D))):
        _, logdet = flow(tn.constant(z))
        assert np.allclose(logdet.data, -(T - L) * D * math.log(2.0), atol=1e-12)


def test_flow_inverse_round_trip(rng):
    flow = nets.ComponentwiseFlow(2, 1, _s(), hidden=4)
    flow.W2.data[...] = 0.3 * rng.normal(size=flow.W2.shape)
    z = rng.normal(size=(1, 2, 2))
    r, _ = flow(tn.constant(z))
    back = flow.inverse_step(tn.constant(r.data[:, 0]), tn.constant(z[:, 0]))
    assert np.allclose(back.data, z[:, 1])


def test_zeroed_gate_row_cuts_dependence(rng):
    D = 3
    flow = nets.ComponentwiseFlow(D, 1, _s(), hidden=4)
    flow.W2.data[...] = rng.normal(size=flow.W2.shape)
    flow.E.data[1, :] = 0.0
    hist = tn.Tensor(rng.normal(size=(4, D)), requires_grad=True)
    m, a = flow.conditioner(hist)
    tn.backward(tn.sum(m[:, 1]) + tn.sum(a[:, 1]))
    assert np.all(hist.grad == 0.0)


def test_env_flow_needs_u(rng):
    flow = nets.ComponentwiseFlow(2, 1, _s(), n_envs=3)
    z = tn.constant(rng.normal(size=(2, 4, 2)))
    with pytest.raises(nets.NetError):
        flow(z)
    with pytest.raises(nets.NetError):
        flow(z, u=np.array([0, 3]))
    assert flow(z, u=np.array([0, 2]))[0].shape == (2, 3, 2)


def test_domain_flow_examples(rng):
    flow = nets.DomainFlow(3, 2, _s())
    z = tn.constant(rng.normal(size=(4, 3)))
    out, logdet = flow(z, np.zeros(4, dtype=int))
    assert np.array_equal(out.data, z.data) and np.all(logdet.data == 0)
    flow.head.b.data[:3] = math.log(2.0)
    out, logdet = flow(z, np.zeros(4, dtype=int))
    assert np.allclose(out.data, 2 * z.data) and np.allclose(logdet.data, 3 * math.log(2))
    with pytest.raises(nets.NetError):
        flow(z, np.array([0, 0, 0, 5]))


def test_additive_decoder_single_block_is_plain(rng):
    dec = nets.AdditiveDecoder([[0, 1, 2]], 4, _s(), hidden=(5,))
    z = tn.constant(rng.normal(size=(3, 3)))
    assert np.allclose(dec(z).data, dec.branches[0](z).data)


def test_additive_decoder_uniform_gates(rng):
    dec = nets.AdditiveDecoder([[0], [1]], 3, _s(), hidden=(5,))
    last = dec.branches[1].layers[-1]
    last.W.data[...] = 0.0
    last.b.data[...] = 0.0
    z = tn.constant(rng.normal(size=(4, 2)))
    assert np.allclose(dec(z).data, 0.5 * dec.branch_output(0, z).data)


def test_additive_decoder_rejects_bad_blocks():
    with pytest.raises(nets.NetError):
        nets.AdditiveDecoder([[0, 1], [1]], 2, _s())
    with pytest.raises(nets.NetError):
        nets.AdditiveDecoder([[0], [2]], 2, _s())


def test_prototype_logits_examples():
    protos = nets.Prototypes(2, 2, _s(), tau=1.0)
    protos.C.data[...] = [[1.0, 0.0], [0.0, 1.0]]
    logits = nets.prototype_logits(protos, tn.constant([[3.0, 0.0]])).data
    assert np.allclose(logits, [[1.0, 0.0]])
    single = nets.Prototypes(1, 2, _s())
    assert tn.softmax(nets.prototype_logits(single, tn.constant([[1.0, 2.0]]))).item() == 1.0
    with pytest.raises(nets.NetError):
        nets.prototype_logits(protos, tn.constant([[0.0, 0.0]]))


def test_mlp_jacobian_matches_numeric(rng):
    mlp = nets.Mlp([3, 6, 4], _s(), activation="tanh")
    z = rng.normal(size=(2, 3))
    jac = mlp.jacobian(tn.constant(z)).data
    h = 1e-6
    for i in range(3):
        zp, zm = z.copy(), z.copy()
        zp[:, i] += h
        zm[:, i] -= h
        col = (mlp(tn.constant(zp)).data - mlp(tn.constant(zm)).data) / (2 * h)
        assert np.allclose(jac[:, :, i], col, atol=1e-7)


def test_state_dict_round_trip(rng):
    a = nets.Mlp([2, 3, 1], _s(0))
    b = nets.Mlp([2, 3, 1], _s(1))
    b.load_state_dict(a.state_dict())
    x = tn.constant(rng.normal(size=(4, 2)))
    assert np.array_equal(a(x).data, b(x).data)
    with pytest.raises(nets.NetError):
        b.load_state_dict({})


def test_frozen_extractor_is_fixed(rng):
    ex = nets.FrozenExtractor(4, 3, seed=5)
    x = rng.normal(size=(6, 4))
    assert np.array_equal(ex(x), nets.FrozenExtractor(4, 3, seed=5)(x))
    with pytest.raises(ValueError):
        ex.weights[0][0][0, 0] = 1.0
