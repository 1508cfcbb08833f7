import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairgan_reprogram import diffnet
from fairgan_reprogram.diffnet import MlpConfig, MlpParams


def _net(widths, hidden="relu", out="identity", groups=(), seed=0):
    """Glorot weights plus random biases (zero biases park dead-input units on the relu kink)."""
    cfg = MlpConfig(tuple(widths), hidden, out, groups)
    params = diffnet.init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    params.biases = [rng.normal(scale=0.1, size=b.shape) for b in params.biases]
    return cfg, params


def _fd_params(params, fn, step=1e-5):
    """Central finite differences of fn(params) w.r.t. every parameter entry."""
    out = params.zeros_like()
    for src, dst in zip(params.arrays(), out.arrays()):
        flat, g = src.reshape(-1), dst.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp = fn(params)
            flat[j] = orig - step
            lm = fn(params)
            flat[j] = orig
            g[j] = (lp - lm) / (2 * step)
    return out


def test_identity_layer_passes_input_through():
    cfg = MlpConfig((3, 3))
    params = MlpParams([np.eye(3)], [np.zeros(3)])
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(diffnet.forward(cfg, params, x)[-1], x)


def test_sigmoid_of_zero_logit_is_half():
    cfg = MlpConfig((2, 1), output_activation="sigmoid")
    params = MlpParams([np.zeros((2, 1))], [np.zeros(1)])
    assert diffnet.predict(cfg, params, np.ones((1, 2)))[0, 0] == 0.5


def test_softmax_of_equal_logits_is_uniform():
    cfg = MlpConfig((2, 3), output_activation="softmax")
    params = MlpParams([np.zeros((2, 3))], [np.zeros(3)])
    np.testing.assert_allclose(diffnet.predict(cfg, params, np.ones((1, 2))), [[1 / 3] * 3])


def test_softmax_groups_sum_to_one():
    cfg, params = _net((4, 8, 7), out="grouped", groups=((0, 3, "softmax"), (3, 4, "sigmoid"), (4, 7, "softmax")))
    out = diffnet.predict(cfg, params, np.random.default_rng(1).normal(size=(50, 4)) * 5)
    np.testing.assert_allclose(out[:, 0:3].sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(out[:, 4:7].sum(axis=1), 1.0, atol=1e-9)
    assert ((out[:, 3] > 0) & (out[:, 3] < 1)).all()


def test_groups_must_tile_output():
    with pytest.raises(ValueError):
        MlpConfig((2, 4), output_activation="softmax", groups=((0, 2), (3, 4)))


def test_forward_rejects_wrong_width():
    cfg, params = _net((3, 2))
    with pytest.raises(ValueError):
        diffnet.forward(cfg, params, np.zeros((1, 4)))


def test_linear_net_gradient_is_outer_product():
    # y = xW, L = sum(y): dL/dW = x^T 1
    cfg, params = _net((3, 2))
    x = np.random.default_rng(2).normal(size=(5, 3))
    acts = diffnet.forward(cfg, params, x)
    grads, gx = diffnet.backward(cfg, params, acts, np.ones((5, 2)))
    np.testing.assert_allclose(grads.weights[0], x.T @ np.ones((5, 2)))
    fd = _fd_params(params, lambda p: diffnet.predict(cfg, p, x).sum())
    assert diffnet.relative_error(grads.weights[0], fd.weights[0]).max() < 1e-4
    np.testing.assert_allclose(gx, np.ones((5, 2)) @ params.weights[0].T)


def test_zero_upstream_gives_zero_gradients():
    cfg, params = _net((3, 5, 2), out="softmax")
    acts = diffnet.forward(cfg, params, np.ones((2, 3)))
    grads, gx = diffnet.backward(cfg, params, acts, np.zeros((2, 2)))
    assert all(not a.any() for a in grads.arrays())
    assert not gx.any()


@pytest.mark.parametrize("hidden", ["relu", "leaky_relu", "tanh"])
@pytest.mark.parametrize("out,groups", [
    ("identity", ()),
    ("sigmoid", ()),
    ("softmax", ((0, 2), (2, 4))),
    ("grouped", ((0, 3, "softmax"), (3, 4, "sigmoid"))),
])
def test_backward_matches_finite_differences(hidden, out, groups):
    cfg, params = _net((3, 6, 5, 4), hidden, out, groups, seed=3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 4))

    def loss(p):
        return float((diffnet.predict(cfg, p, x) * w).sum())

    acts = diffnet.forward(cfg, params, x)
    grads, gx = diffnet.backward(cfg, params, acts, w)
    fd = _fd_params(params, loss)
    for a, n in zip(grads.arrays(), fd.arrays()):
        assert diffnet.relative_error(a, n).max() < 1e-4
    fdx = diffnet.numeric_input_grad(lambda xx: float((diffnet.predict(cfg, params, xx) * w).sum()), x)
    assert diffnet.relative_error(gx, fdx).max() < 1e-4


def test_input_grad_chains_through_frozen_network():
    trainable, tp = _net((3, 5, 4), seed=5)
    frozen, fp = _net((4, 6, 2), "tanh", "sigmoid", seed=6)
    x = np.random.default_rng(7).normal(size=(4, 3))

    def composed(p):
        return float(diffnet.predict(frozen, fp, diffnet.predict(trainable, p, x)).sum())

    a1 = diffnet.forward(trainable, tp, x)
    a2 = diffnet.forward(frozen, fp, a1[-1])
    _, g_mid = diffnet.backward(frozen, fp, a2, np.ones_like(a2[-1]))
    grads, _ = diffnet.backward(trainable, tp, a1, g_mid)
    fd = _fd_params(tp, composed)
    for a, n in zip(grads.arrays(), fd.arrays()):
        assert diffnet.relative_error(a, n).max() < 1e-4


def test_cross_entropy_values():
    assert diffnet.cross_entropy(np.array([[0.0, 1.0]]), np.array([1]))[0] == 0.0
    assert diffnet.cross_entropy(np.array([[0.5, 0.5]]), np.array([0]))[0] == pytest.approx(math.log(2), rel=1e-12)
    assert diffnet.cross_entropy(np.array([[0.9, 0.1]]), np.array([0]))[0] == pytest.approx(-math.log(0.9), rel=1e-12)
    assert diffnet.cross_entropy(np.array([[0.9, 0.1]]), np.array([0]))[0] == pytest.approx(0.1054, abs=1e-4)


def test_cross_entropy_logit_gradient_matches_probability_path():
    logits = np.random.default_rng(8).normal(size=(5, 2))
    t = np.array([0, 1, 1, 0, 1])
    cfg = MlpConfig((2, 2), output_activation="softmax")
    params = MlpParams([np.eye(2)], [np.zeros(2)])
    acts = diffnet.forward(cfg, params, logits)
    loss_p, g_p = diffnet.cross_entropy(acts[-1], t)
    _, g_logits = diffnet.backward(cfg, params, acts, g_p)
    loss_l, g_l = diffnet.cross_entropy_logits(logits, t)
    assert loss_p == pytest.approx(loss_l, rel=1e-12)
    np.testing.assert_allclose(g_logits, g_l, rtol=1e-9, atol=1e-15)


def test_bce_values():
    assert diffnet.bce(np.array([0.5]), np.array([1]))[0] == pytest.approx(math.log(2))
    assert diffnet.bce(np.array([0.5]), np.array([0]))[0] == pytest.approx(math.log(2))
    assert diffnet.bce(np.array([1.0]), np.array([1]))[0] == pytest.approx(0.0, abs=1e-11)
    assert diffnet.bce(np.array([1e-12]), np.array([1]))[0] == pytest.approx(-math.log(1e-12), rel=1e-9)
    assert -math.log(1e-12) == pytest.approx(27.6, abs=0.05)


def test_bce_gradient_matches_finite_differences():
    s = np.array([0.2, 0.7, 0.55])
    y = np.array([1.0, 0.0, 0.5])
    _, g = diffnet.bce(s, y)
    fd = diffnet.numeric_input_grad(lambda v: diffnet.bce(v, y)[0], s[None, :])[0]
    assert diffnet.relative_error(g, fd).max() < 1e-6


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=10), st.data())
def test_losses_are_nonnegative(ps, data):
    p = np.array(ps)
    y = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(ps), max_size=len(ps))))
    assert diffnet.bce(p, y)[0] >= 0
    probs = np.stack([1 - p, p], axis=1)
    assert diffnet.cross_entropy(probs, y)[0] >= 0


def test_l2_penalty():
    cfg, params = _net((2, 3, 1))
    loss, grads = diffnet.l2_penalty(params, 0.0)
    assert loss == 0.0 and all(not a.any() for a in grads.arrays())
    single = MlpParams([np.array([[3.0]])], [np.array([5.0])])
    loss, grads = diffnet.l2_penalty(single, 1.0)
    assert loss == 9.0 and grads.weights[0][0, 0] == 6.0 and grads.biases[0][0] == 0.0
    params = diffnet.init_params(MlpConfig((7, 11, 5)), 9)
    brute = 0.0
    for w in params.weights:
        for v in w.reshape(-1):
            brute += v * v
    assert diffnet.l2_penalty(params, 0.3)[0] == pytest.approx(0.3 * brute, abs=1e-9)


def test_adam_zero_gradient_is_fixed_point():
    _, params = _net((3, 4, 2))
    state = diffnet.adam_init(params)
    new, state = diffnet.adam_step(params, params.zeros_like(), state)
    for a, b in zip(params.arrays(), new.arrays()):
        np.testing.assert_array_equal(a, b)


def test_adam_first_step_size():
    params = MlpParams([np.array([[0.0]])], [np.array([0.0])])
    grads = MlpParams([np.array([[1.0]])], [np.array([0.0])])
    new, state = diffnet.adam_step(params, grads, diffnet.adam_init(params, lr=1e-3))
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert new.weights[0][0, 0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert state.t == 1


def test_adam_is_deterministic():
    def run():
        cfg, params = _net((3, 4, 2), seed=10)
        state = diffnet.adam_init(params)
        rng = np.random.default_rng(11)
        for _ in range(20):
            g = params.map(lambda a: rng.normal(size=a.shape))
            params, state = diffnet.adam_step(params, g, state)
        return params

    assert run().digest() == run().digest()


def test_grad_check_quadratic_linear_net():
    cfg, params = _net((3, 2), seed=12)
    x = np.random.default_rng(13).normal(size=(5, 3))

    def loss_fn(p):
        acts = diffnet.forward(cfg, p, x)
        out = acts[-1]
        grads, _ = diffnet.backward(cfg, p, acts, 2 * out)
        return float((out ** 2).sum()), grads

    rep = diffnet.grad_check(params, loss_fn, tolerance=1e-6)
    assert rep.passed, rep


def test_grad_check_random_deep_nets():
    rng = np.random.default_rng(14)
    for draw in range(100):
        cfg, params = _net((3, 5, 4, 1), "relu", "sigmoid", seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=(4, 3))
        y = rng.integers(0, 2, size=4)

        def loss_fn(p):
            acts = diffnet.forward(cfg, p, x)
            loss, g = diffnet.bce(acts[-1], y[:, None])
            return loss, diffnet.backward(cfg, p, acts, g)[0]

        rep = diffnet.grad_check(params, loss_fn, tolerance=1e-4)
        assert rep.passed, (draw, rep)


def test_grad_check_rejects_corrupted_gradient():
    cfg, params = _net((3, 4, 1), seed=15)
    x = np.random.default_rng(16).normal(size=(4, 3))

    def loss_fn(p):
        acts = diffnet.forward(cfg, p, x)
        grads, _ = diffnet.backward(cfg, p, acts, np.ones_like(acts[-1]))
        return float(acts[-1].sum()), grads.scale(2.0)

    assert not diffnet.grad_check(params, loss_fn, tolerance=1e-4).passed


def test_checkpoint_roundtrip():
    cfg, params = _net((4, 6, 5), "tanh", "grouped", ((0, 2, "softmax"), (2, 5, "sigmoid")), seed=17)
    d = diffnet.params_to_dict(cfg, params)
    cfg2, params2 = diffnet.params_from_dict(d)
    assert cfg2 == cfg and params2.digest() == params.digest()
    with pytest.raises(ValueError):
        diffnet.params_from_dict({**d, "format": "other/9"})


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_backward_matches_fd_property(seed):
    rng = np.random.default_rng(seed)
    widths = [int(rng.integers(1, 5)) for _ in range(3)]
    cfg, params = _net(widths, "tanh", "identity", seed=seed)
    x = rng.normal(size=(3, widths[0]))
    w = rng.normal(size=(3, widths[-1]))
    acts = diffnet.forward(cfg, params, x)
    grads, _ = diffnet.backward(cfg, params, acts, w)
    fd = _fd_params(params, lambda p: float((diffnet.predict(cfg, p, x) * w).sum()))
    for a, n in zip(grads.arrays(), fd.arrays()):
        assert diffnet.relative_error(a, n).max() < 1e-4
