import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from dcvit.tensor import (
    Conv2dSpec,
    Tensor,
    concat,
    conv2d,
    conv2d_output_hw,
    dropout,
    finite_diff_grad,
    gelu,
    layer_norm,
    linear,
    softmax,
)
from oracles import conv2d_loops, conv_output_len_by_walk, rel_err


# ---------------------------------------------------------------- conv2d

def test_conv_allones_window_sum():
    x = Tensor(np.ones((1, 1, 4, 8)))
    w = Tensor(np.ones((1, 1, 1, 4)))
    spec = Conv2dSpec(1, 1, kernel=(1, 4), stride=(1, 4))
    out = conv2d(x, w, None, spec)
    assert out.shape == (1, 1, 4, 2)
    npt.assert_array_equal(out.data, 4.0)


def test_conv_paper_scale_temporal_shape():
    # 129x500 input, (1,36) kernel, (1,36) stride, (0,2) padding, 256 filters
    spec = Conv2dSpec(1, 256, kernel=(1, 36), stride=(1, 36), padding=(0, 2))
    assert spec.output_hw(129, 500) == (129, 14)
    assert conv_output_len_by_walk(500, 36, 36, 2) == 14
    assert conv_output_len_by_walk(129, 1, 1, 0) == 129
    x = Tensor(np.zeros((1, 1, 129, 500), dtype=np.float32))
    w = Tensor(np.zeros((256, 1, 1, 36), dtype=np.float32))
    assert conv2d(x, w, None, spec).shape == (1, 256, 129, 14)


def test_conv_identity_depthwise():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 3)))
    w = Tensor(np.ones((2, 1, 1, 1)))
    spec = Conv2dSpec(2, 2, kernel=(1, 1), groups=2)
    out = conv2d(x, w, None, spec)
    npt.assert_array_equal(out.data, x.data)


def test_conv_matches_loop_reference():
    rng = np.random.default_rng(7)
    cases = [
        dict(b=2, cin=3, cout=4, h=5, w=6, k=(2, 3), s=(1, 2), p=(1, 0), g=1),
        dict(b=1, cin=4, cout=4, h=6, w=5, k=(3, 2), s=(2, 1), p=(0, 1), g=4),
        dict(b=2, cin=6, cout=4, h=4, w=4, k=(2, 2), s=(2, 2), p=(1, 1), g=2),
        dict(b=1, cin=2, cout=6, h=7, w=3, k=(3, 3), s=(1, 1), p=(2, 2), g=2),
    ]
    for c in cases:
        x = rng.normal(size=(c["b"], c["cin"], c["h"], c["w"]))
        wt = rng.normal(size=(c["cout"], c["cin"] // c["g"], *c["k"]))
        bias = rng.normal(size=c["cout"])
        spec = Conv2dSpec(c["cin"], c["cout"], kernel=c["k"], stride=c["s"],
                          padding=c["p"], groups=c["g"])
        got = conv2d(Tensor(x), Tensor(wt), Tensor(bias), spec)
        want = conv2d_loops(x, wt, bias, c["s"], c["p"], c["g"])
        npt.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 8), k=st.integers(1, 8),
    s=st.integers(1, 4), p=st.integers(0, 3),
)
def test_conv_shape_law_matches_walk(n, k, s, p):
    want = conv_output_len_by_walk(n, k, s, p)
    if want < 1:
        with pytest.raises(ValueError):
            conv2d_output_hw((n, n), (k, k), (s, s), (p, p))
    else:
        got = conv2d_output_hw((n, 1), (k, 1), (s, 1), (p, 0))
        assert got[0] == want


def test_depthwise_equals_independent_single_channel_convs():
    rng = np.random.default_rng(3)
    cin, h, w = 5, 6, 7
    x = rng.normal(size=(2, cin, h, w))
    wt = rng.normal(size=(cin, 1, 3, 3))
    spec = Conv2dSpec(cin, cin, kernel=(3, 3), padding=(1, 1), groups=cin)
    full = conv2d(Tensor(x), Tensor(wt), None, spec).data
    single = Conv2dSpec(1, 1, kernel=(3, 3), padding=(1, 1))
    for c in range(cin):
        one = conv2d(Tensor(x[:, c:c + 1]), Tensor(wt[c:c + 1]), None, single)
        npt.assert_allclose(full[:, c:c + 1], one.data, rtol=1e-12, atol=1e-12)


def test_conv_rejects_bad_shapes():
    spec = Conv2dSpec(2, 2, kernel=(3, 3))
    x = Tensor(np.zeros((1, 3, 5, 5)))
    w = Tensor(np.zeros((2, 2, 3, 3)))
    with pytest.raises(ValueError):
        conv2d(x, w, None, spec)
    with pytest.raises(ValueError):
        conv2d_output_hw((2, 2), (3, 3), (1, 1), (0, 0))
    with pytest.raises(ValueError):
        Conv2dSpec(3, 4, kernel=(1, 1), groups=2)


# ---------------------------------------------------------------- linear

def test_linear_identity_and_hand_case():
    x = Tensor(np.array([[1.0, 2.0]]))
    eye = Tensor(np.eye(2))
    zero = Tensor(np.zeros(2))
    npt.assert_array_equal(linear(x, eye, zero).data, x.data)

    w = Tensor(np.array([[1.0, 1.0], [1.0, -1.0]]))
    out = linear(x, w, zero)
    npt.assert_allclose(out.data, [[3.0, -1.0]])


def test_linear_preserves_leading_dims():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 5, 4)))
    w = Tensor(np.random.default_rng(1).normal(size=(7, 4)))
    b = Tensor(np.zeros(7))
    assert linear(x, w, b).shape == (3, 5, 7)
    with pytest.raises(ValueError):
        linear(x, Tensor(np.zeros((7, 5))), b)


# ---------------------------------------------------------------- norm ops

def test_layer_norm_constant_slice_is_zero():
    x = Tensor(np.full((4, 6), 3.25))
    out = layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-5)
    npt.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_standardizes():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(2.0, 3.0, size=(5, 9, 32)))
    out = layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32)), eps=1e-12)
    m = out.data.mean(axis=-1)
    v = out.data.var(axis=-1)
    assert np.abs(m).max() < 1e-10
    assert np.abs(v - 1.0).max() < 1e-6


def test_softmax_symmetry_and_closed_form():
    npt.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, np.full(3, 1 / 3))
    out = softmax(Tensor(np.log([1.0, 2.0, 3.0])))
    npt.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], rtol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(scale=30.0, size=(17, 25)))
    out = softmax(x, axis=-1)
    npt.assert_allclose(out.data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert (out.data >= 0).all()


# ---------------------------------------------------------------- activations

def test_gelu_zero_and_monotone_grid():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    # exact gelu has its minimum near -0.75; nondecreasing from there up
    grid = np.linspace(-0.7, 6, 301)
    vals = gelu(Tensor(grid)).data
    assert (np.diff(vals) >= 0).all()
    npt.assert_allclose(gelu(Tensor([6.0])).data, 6.0, rtol=1e-8)


def test_dropout_eval_identity_and_train_scaling():
    x = Tensor(np.ones(100_000))
    out = dropout(x, p=0.5, training=False, seed=1)
    assert out is x
    trained = dropout(x, p=0.5, training=True, seed=1)
    assert 0.98 < trained.data.mean() < 1.02
    kept = trained.data != 0
    npt.assert_allclose(trained.data[kept], 2.0)


def test_dropout_deterministic_masks():
    x = Tensor(np.random.default_rng(0).normal(size=(50, 50)))
    a = dropout(x, p=0.3, training=True, seed=99)
    b = dropout(x, p=0.3, training=True, seed=99)
    npt.assert_array_equal(a.data, b.data)
    c = dropout(x, p=0.3, training=True, seed=100)
    assert (a.data != c.data).any()
    with pytest.raises(ValueError):
        dropout(x, p=1.0, training=True)


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = Tensor(np.array([1.0, 5.0, -2.0]), requires_grad=True)
    x.sum().backward()
    npt.assert_array_equal(x.grad, np.ones(3))


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    npt.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_accumulates_and_zero_grad_resets():
    x = Tensor(np.array([3.0]), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    npt.assert_allclose(x.grad, [12.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(4), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_finite_diff_trivial_cases():
    x = Tensor(np.array([1.0, -2.0, 0.5]))
    est = finite_diff_grad(lambda t: t.sum().item(), x)
    npt.assert_allclose(est, 1.0, atol=1e-9)
    x = Tensor(np.array([3.0]))
    est = finite_diff_grad(lambda t: (t * t).sum().item(), x, h=1e-5)
    npt.assert_allclose(est, 6.0, atol=1e-6)
    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(FloatingPointError):
            finite_diff_grad(lambda t: t.log().sum().item(), Tensor(np.array([0.0])))


def _check_grad(build, x0, tol=1e-4, h=1e-5):
    x = Tensor(x0.copy(), requires_grad=True)
    build(x).backward()
    est = finite_diff_grad(lambda t: build(t).item(), Tensor(x0.copy()), h=h)
    err = rel_err(x.grad, est)
    assert err < tol, f"gradient mismatch: rel err {err:.3e}"


@pytest.mark.parametrize("seed", range(5))
def test_grad_elementwise_ops(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
    x0 = rng.normal(size=shape)
    other = rng.normal(size=shape) + 2.5

    _check_grad(lambda t: (t * Tensor(other) + t - 0.5 * t).sum(), x0)
    _check_grad(lambda t: (t / Tensor(other)).sum(), x0)
    _check_grad(lambda t: ((t * t + 1.0) ** 0.5).mean(), x0)
    _check_grad(lambda t: t.exp().sum(), x0)
    _check_grad(lambda t: (t * t + 0.1).log().sum(), x0)
    _check_grad(lambda t: gelu(t).sum(), x0)


@pytest.mark.parametrize("seed", range(5))
def test_grad_matmul_and_linear(seed):
    rng = np.random.default_rng(100 + seed)
    b, n, din, dout = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
    x0 = rng.normal(size=(b, n, din))
    w0 = rng.normal(size=(dout, din))
    bias = Tensor(rng.normal(size=dout))
    _check_grad(lambda t: linear(t, Tensor(w0), bias).sum(), x0)
    # weight path
    w = Tensor(w0.copy(), requires_grad=True)
    linear(Tensor(x0), w, bias).sum().backward()
    est = finite_diff_grad(
        lambda t: linear(Tensor(x0), t, bias).sum().item(), Tensor(w0.copy()))
    assert rel_err(w.grad, est) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_grad_softmax_layernorm(seed):
    rng = np.random.default_rng(200 + seed)
    x0 = rng.normal(size=(3, 7))
    weights = rng.normal(size=(3, 7))
    gain = Tensor(rng.normal(size=7) + 1.0)
    offset = Tensor(rng.normal(size=7))

    _check_grad(lambda t: (softmax(t, axis=-1) * Tensor(weights)).sum(), x0)
    _check_grad(lambda t: (layer_norm(t, gain, offset) * Tensor(weights)).sum(),
                x0)
    # gain / offset paths
    g = Tensor(gain.data.copy(), requires_grad=True)
    (layer_norm(Tensor(x0), g, offset) * Tensor(weights)).sum().backward()
    est = finite_diff_grad(
        lambda t: (layer_norm(Tensor(x0), t, offset) * Tensor(weights)).sum().item(),
        Tensor(gain.data.copy()))
    assert rel_err(g.grad, est) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_grad_conv2d_all_paths(seed):
    rng = np.random.default_rng(300 + seed)
    g = int(rng.choice([1, 2]))
    cin = g * int(rng.integers(1, 3))
    cout = g * int(rng.integers(1, 3))
    spec = Conv2dSpec(cin, cout, kernel=(2, 3), stride=(int(rng.integers(1, 3)), 1),
                      padding=(1, int(rng.integers(0, 2))), groups=g)
    x0 = rng.normal(size=(2, cin, 5, 6))
    w0 = rng.normal(size=(cout, cin // g, 2, 3))
    b0 = rng.normal(size=cout)

    _check_grad(lambda t: conv2d(t, Tensor(w0), Tensor(b0), spec).sum(), x0)

    w = Tensor(w0.copy(), requires_grad=True)
    bias = Tensor(b0.copy(), requires_grad=True)
    conv2d(Tensor(x0), w, bias, spec).sum().backward()
    est_w = finite_diff_grad(
        lambda t: conv2d(Tensor(x0), t, Tensor(b0), spec).sum().item(),
        Tensor(w0.copy()))
    est_b = finite_diff_grad(
        lambda t: conv2d(Tensor(x0), Tensor(w0), t, spec).sum().item(),
        Tensor(b0.copy()))
    assert rel_err(w.grad, est_w) < 1e-4
    assert rel_err(bias.grad, est_b) < 1e-4


def test_grad_shape_ops():
    rng = np.random.default_rng(42)
    x0 = rng.normal(size=(2, 3, 4))
    w = Tensor(rng.normal(size=(2, 3, 4)))
    m = Tensor(rng.normal(size=(4, 2)))
    _check_grad(lambda t: (t.reshape(6, 4) @ m).sum(), x0)
    _check_grad(lambda t: (t.transpose(2, 0, 1) * Tensor(w.data.transpose(2, 0, 1))).sum(), x0)
    _check_grad(lambda t: (concat([t, t * 2.0], axis=1) * 1.5).sum(), x0)
    _check_grad(lambda t: (t[:, 0, :] * t[:, 1, :]).sum(), x0)
    _check_grad(lambda t: t.mean(axis=(0, 2)).sum(), x0)


def test_grad_full_composite_conv_linear_layernorm():
    # conv2d -> flatten -> linear -> layer_norm chain, checked against the
    # finite-difference oracle at 64-bit precision
    rng = np.random.default_rng(1234)
    spec = Conv2dSpec(2, 4, kernel=(2, 2), stride=(1, 1), padding=(0, 1))
    w_conv = Tensor(rng.normal(size=(4, 2, 2, 2)))
    b_conv = Tensor(rng.normal(size=4))
    hout, wout = spec.output_hw(4, 3)
    feat = 4 * hout * wout
    w_lin = Tensor(rng.normal(size=(6, feat)) / np.sqrt(feat))
    b_lin = Tensor(rng.normal(size=6))
    gain = Tensor(rng.normal(size=6) + 1.0)
    offset = Tensor(rng.normal(size=6))
    mix = Tensor(rng.normal(size=(3, 6)))

    def f(t):
        y = conv2d(t, w_conv, b_conv, spec)
        y = y.reshape(3, feat)
        y = linear(y, w_lin, b_lin)
        y = layer_norm(y, gain, offset)
        return (gelu(y) * mix).sum()

    x0 = rng.normal(size=(3, 2, 4, 3))
    _check_grad(f, x0, tol=1e-4)


def test_dropout_grad_scales_mask():
    x = Tensor(np.ones((40, 40)), requires_grad=True)
    out = dropout(x, p=0.25, training=True, seed=5)
    out.sum().backward()
    npt.assert_allclose(x.grad[out.data != 0], 1.0 / 0.75)
    npt.assert_allclose(x.grad[out.data == 0], 0.0)


def test_float32_graph_stays_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = ((1.0 - x) * 2.0 + x / 3.0).sum()
    assert y.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32
