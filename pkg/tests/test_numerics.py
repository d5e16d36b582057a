import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cs2.errors import DataError, DivergenceError, ShapeError
from cs2.numerics import (
    OptimizerState,
    Tensor,
    adain,
    channel_stats,
    conv2d,
    cross_entropy,
    grad_check,
    gram,
    instance_norm,
    mse,
    optimizer_step,
    parameter,
    upsample_nearest,
)


def direct_conv(x, k, stride, pad):
    """Quadruple-loop reference convolution (cross-correlation)."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i * stride + a, j * stride + b] * k[o, c, a, b]
                out[o, i, j] = acc
    return out


# -- conv2d ------------------------------------------------------------------


def test_conv2d_scalar_kernel():
    out = conv2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), Tensor([[[[2.0]]]]))
    np.testing.assert_array_equal(out.data, [[[2.0, 4.0], [6.0, 8.0]]])


def test_conv2d_summation():
    out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_array_equal(out.data, [[[9.0]]])


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 8))
    k = rng.normal(size=(4, 2, 3, 3))
    got = conv2d(Tensor(x), Tensor(k), stride=1, padding=1).data
    np.testing.assert_allclose(got, direct_conv(x, k, 1, 1), atol=1e-12, rtol=0)


def test_conv2d_random_configs_match_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        c_in, c_out = rng.integers(1, 4, size=2)
        kh, kw = rng.integers(1, 4, size=2)
        stride = int(rng.integers(1, 4))
        pad = int(rng.integers(0, 3))
        h = int(rng.integers(max(kh - 2 * pad, 1), 9))
        w = int(rng.integers(max(kw - 2 * pad, 1), 9))
        x = rng.normal(size=(c_in, h, w))
        k = rng.normal(size=(c_out, c_in, kh, kw))
        got = conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
        np.testing.assert_allclose(got, direct_conv(x, k, stride, pad), atol=1e-12, rtol=0)


def test_conv2d_output_size_floor():
    out = conv2d(Tensor(np.zeros((1, 7, 6))), Tensor(np.zeros((2, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 4, 3)


def test_conv2d_batched_equals_unbatched():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 2, 6, 6))
    k = rng.normal(size=(4, 2, 3, 3))
    b = rng.normal(size=4)
    batched = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1).data
    for n in range(3):
        single = conv2d(Tensor(x[n]), Tensor(k), Tensor(b), stride=2, padding=1).data
        np.testing.assert_allclose(batched[n], single, atol=1e-13)


def test_conv2d_shape_errors_name_dimensions():
    with pytest.raises(ShapeError, match="C_in=2"):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="exceeds padded input"):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


# -- normalization ---------------------------------------------------------------


def test_instance_norm_constant_channel_is_zero():
    out = instance_norm(Tensor(np.full((1, 4, 4), 5.0)), eps=1e-5)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_instance_norm_known_values():
    out = instance_norm(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), eps=0.0)
    # population std of [1,2,3,4] is sqrt(1.25)
    expected = (np.array([1, 2, 3, 4]) - 2.5) / math.sqrt(1.25)
    np.testing.assert_allclose(out.data.ravel(), expected, atol=1e-12)
    np.testing.assert_allclose(out.data.ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_instance_norm_zero_mean(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(loc=rng.normal() * 100, scale=rng.uniform(0.1, 50), size=(3, 5, 7))
    mean, _ = channel_stats(instance_norm(Tensor(x)))
    assert np.all(np.abs(mean) < 1e-10)


def test_adain_identity_statistics():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6, 6))
    np.testing.assert_allclose(adain(Tensor(x), Tensor(x)).data, x, atol=1e-6)
    # a different style tensor with the same statistics
    style = x[:, ::-1, :].copy()
    np.testing.assert_allclose(adain(Tensor(x), Tensor(style)).data, x, atol=1e-6)


def test_adain_known_values():
    content = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    style = Tensor(np.array([[[-2.0, 2.0], [2.0, -2.0]]]))  # mean 0, population std 2
    out = adain(content, style)
    np.testing.assert_allclose(out.data.ravel(), [-2.6833, -0.8944, 0.8944, 2.6833], atol=1e-4)


def test_adain_constant_style():
    rng = np.random.default_rng(4)
    out = adain(Tensor(rng.normal(size=(2, 5, 5))), Tensor(np.full((2, 3, 3), 7.0)))
    np.testing.assert_array_equal(out.data, 7.0)


def test_adain_channel_mismatch():
    with pytest.raises(ShapeError):
        adain(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((3, 3, 3))))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_adain_matches_style_statistics(seed):
    rng = np.random.default_rng(seed)
    content = rng.normal(rng.normal(), rng.uniform(0.5, 3), size=(3, 6, 5))
    style = rng.normal(rng.normal(), rng.uniform(0.5, 3), size=(3, 4, 7))
    out = adain(Tensor(content), Tensor(style), eps=1e-5)
    m_out, s_out = channel_stats(out)
    m_sty, s_sty = channel_stats(Tensor(style))
    np.testing.assert_allclose(m_out, m_sty, atol=1e-5)
    np.testing.assert_allclose(s_out, s_sty, atol=1e-5)


def test_instance_norm_then_adain_reconstructs():
    rng = np.random.default_rng(5)
    x = rng.normal(3.0, 2.0, size=(4, 8, 8))
    back = adain(instance_norm(Tensor(x)), Tensor(x))
    np.testing.assert_allclose(back.data, x, atol=1e-5)


def test_upsample_nearest_and_grad():
    x = Tensor(np.arange(4.0).reshape(1, 2, 2))
    up = upsample_nearest(x, 2)
    assert up.shape == (1, 4, 4)
    np.testing.assert_array_equal(up.data[0, :2, :2], 0.0)
    assert grad_check(lambda t: (upsample_nearest(t, 2) ** 2).sum(), np.random.default_rng(0).normal(size=(2, 3, 3))) < 1e-7


# -- losses ---------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((4, 3, 3))), np.zeros((3, 3), dtype=int))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_confident_pixel():
    loss = cross_entropy(Tensor(np.array([[[10.0]], [[-10.0]]])), np.array([[0]]))
    assert loss.item() == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
    assert loss.item() == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_large_one_hot():
    targets = np.random.default_rng(0).integers(0, 3, size=(4, 4))
    logits = 200.0 * np.moveaxis(np.eye(3)[targets], -1, 0)
    assert cross_entropy(Tensor(logits), targets).item() < 1e-12


def test_cross_entropy_label_out_of_range_reports_pixel():
    targets = np.zeros((3, 3), dtype=int)
    targets[1, 2] = 5
    with pytest.raises(DataError, match=r"\(1, 2\)"):
        cross_entropy(Tensor(np.zeros((4, 3, 3))), targets)


def test_mse_examples():
    assert mse(Tensor([0.0, 0.0]), Tensor([1.0, 3.0])).item() == 5.0
    a = np.random.default_rng(1).normal(size=(3, 4))
    assert mse(Tensor(a), Tensor(a)).item() == 0.0
    b = np.random.default_rng(2).normal(size=(3, 4))
    assert mse(Tensor(a), Tensor(b)).item() == mse(Tensor(b), Tensor(a)).item()
    with pytest.raises(ShapeError):
        mse(Tensor([1.0]), Tensor([1.0, 2.0]))


# -- optimizer ------------------------------------------------------------------


def test_sgd_step():
    p = {"w": parameter([1.0])}
    state = OptimizerState(learning_rate=0.1, mode="sgd")
    optimizer_step(p, state, {"w": np.array([2.0])})
    assert p["w"].data[0] == pytest.approx(0.8)
    assert state.step_count == 1


def test_zero_gradient_leaves_params():
    p = {"w": parameter([1.5, -2.0])}
    for mode in ("sgd", "adam"):
        optimizer_step(p, OptimizerState(mode=mode), {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"].data, [1.5, -2.0])


def test_adam_converges_on_quadratic():
    p = {"x": parameter([3.0, -3.0])}
    state = OptimizerState(learning_rate=0.1, mode="adam", betas=(0.9, 0.999))
    for _ in range(100):
        p["x"].zero_grad()
        (p["x"] * p["x"]).sum().backward()
        optimizer_step(p, state)
    assert np.linalg.norm(p["x"].data) < 0.1
    assert state.step_count == 100


def test_nonfinite_gradient_names_parameter():
    p = {"good": parameter([1.0]), "bad": parameter([1.0])}
    with pytest.raises(DivergenceError, match="bad"):
        optimizer_step(p, OptimizerState(), {"good": np.array([1.0]), "bad": np.array([np.nan])})
    assert p["good"].data[0] == 1.0


def test_optimizer_deterministic():
    def run():
        rng = np.random.default_rng(7)
        p = {"w": parameter(rng.normal(size=5))}
        state = OptimizerState()
        for _ in range(20):
            p["w"].zero_grad()
            ((p["w"] - 1.0) ** 2).sum().backward()
            optimizer_step(p, state)
        return p["w"].data.tobytes()

    assert run() == run()


# -- gradient checks ----------------------------------------------------------------


def test_grad_check_quadratic():
    assert grad_check(lambda t: (t * t).sum(), np.array([1.0, 2.0]), h=1e-5) < 1e-7


def test_grad_check_conv_cross_entropy():
    rng = np.random.default_rng(8)
    k = rng.normal(size=(3, 1, 3, 3))
    targets = rng.integers(0, 3, size=(8, 8))
    x = rng.normal(size=(1, 8, 8))
    assert grad_check(lambda t: cross_entropy(conv2d(t, Tensor(k), padding=1), targets), x) < 1e-4
    assert grad_check(lambda t: cross_entropy(conv2d(Tensor(x), t, padding=1), targets), k) < 1e-4


def _layer_cases():
    rng = np.random.default_rng(12)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    x25 = Tensor(rng.normal(size=(2, 5, 5)))
    w44 = Tensor(rng.normal(size=(2, 4, 4)))
    s33 = Tensor(rng.normal(size=(2, 3, 3)))
    c44 = Tensor(rng.normal(size=(2, 4, 4)))
    g33 = Tensor(rng.normal(size=(3, 3)))
    m34 = Tensor(rng.normal(size=(3, 4)))
    v5 = Tensor(rng.normal(size=(5,)))
    w42 = Tensor(rng.normal(size=(4, 2)))
    labels = rng.integers(0, 4, size=6)
    return {
        "conv2d_input": (lambda t: (conv2d(t, k, stride=2, padding=1) ** 2).sum(), (2, 7, 7)),
        "conv2d_kernel": (lambda t: (conv2d(x25, t, stride=2, padding=1) ** 2).sum(), (3, 2, 3, 3)),
        "conv2d_bias": (lambda t: (conv2d(x25, k, t, padding=1) ** 2).sum(), (3,)),
        "upsample": (lambda t: (upsample_nearest(t, 2) * Tensor(np.ones((2, 8, 8)))).sum(), (2, 4, 4)),
        "instance_norm": (lambda t: (instance_norm(t) * w44).sum(), (2, 4, 4)),
        "adain_content": (lambda t: (adain(t, s33) * w44).sum(), (2, 4, 4)),
        "adain_style": (lambda t: (adain(c44, t) * w44).sum(), (2, 3, 3)),
        "gram": (lambda t: (gram(t) * g33).sum(), (3, 4, 4)),
        "mse": (lambda t: mse(t, m34), (3, 4)),
        "sigmoid": (lambda t: (t.sigmoid() * v5).sum(), (5,)),
        "tanh": (lambda t: (t.tanh() * v5).sum(), (5,)),
        "leaky_relu": (lambda t: (t.leaky_relu(0.2) * v5).sum(), (5,)),
        "matmul": (lambda t: ((t @ w42) ** 2).sum(), (3, 4)),
        "log_softmax_ce": (lambda t: cross_entropy(t, labels), (6, 4)),
        "div_exp_log": (lambda t: ((t.exp() + 1.0).log() / (t * t + 1.0)).sum(), (5,)),
    }


LAYERS = _layer_cases()


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_gradients(name):
    f, shape = LAYERS[name]
    x = np.random.default_rng(11).normal(size=shape)
    assert grad_check(f, x, h=1e-5) < 1e-4


def test_shared_subexpression_gradient_accumulates():
    x = parameter([2.0])
    y = x * x
    (y + y * x).sum().backward()
    # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(4.0 + 12.0)


def test_validate_flags_nonfinite():
    with pytest.raises(DataError):
        Tensor([1.0, np.inf]).validate()
    Tensor([1.0, 2.0], requires_grad=True).validate()


def test_pad_edge_replicates_and_backprops():
    from cs2.numerics import pad_edge

    x = np.arange(6.0).reshape(1, 2, 3)
    out = pad_edge(Tensor(x), 1).data
    np.testing.assert_array_equal(out[0], np.pad(x[0], 1, mode="edge"))
    w = np.random.default_rng(3).normal(size=(2, 4, 5))
    assert grad_check(lambda t: (pad_edge(t, 1) * Tensor(w)).sum(), np.random.default_rng(4).normal(size=(2, 2, 3))) < 1e-7
