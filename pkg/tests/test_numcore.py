import numpy as np
import pytest

from dancount import numcore as nc
from dancount.errors import OddDimension, ShapeMismatch
from dancount.lossopt import huber


def conv_loops(x, w, b):
    """Dense convolution written as explicit loops, zero padded, stride 1."""
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((N, O, H, W))
    for n in range(N):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    acc = b[o]
                    for c in range(C):
                        for a in range(kh):
                            for e in range(kw):
                                ii, jj = i + a - ph, j + e - pw
                                if 0 <= ii < H and 0 <= jj < W:
                                    acc += w[o, c, a, e] * x[n, c, ii, jj]
                    out[n, o, i, j] = acc
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(a)) + np.max(np.abs(b)))


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 6))
    out = nc.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out, x)


def test_conv_zero_input_gives_bias():
    out = nc.conv2d_forward(np.zeros((1, 2, 4, 4)), np.ones((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5]))
    assert np.all(out[0, 0] == 1.0) and np.all(out[0, 1] == -2.0) and np.all(out[0, 2] == 0.5)


def test_conv_3x3_on_5x5_matches_loops():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(1, 1, 5, 5)), rng.normal(size=(1, 1, 3, 3)), rng.normal(size=1)
    assert np.max(np.abs(nc.conv2d_forward(x, w, b) - conv_loops(x, w, b))) < 1e-6


@pytest.mark.parametrize("O,C,H,W,k", [(1, 1, 1, 1, 1), (2, 3, 4, 5, 3), (4, 4, 8, 8, 3),
                                       (3, 2, 8, 6, 5), (4, 1, 2, 7, 5), (1, 4, 8, 8, 1)])
def test_conv_matches_loops(O, C, H, W, k):
    rng = np.random.default_rng(O * 100 + C * 10 + H)
    x = rng.normal(size=(2, C, H, W))
    w = rng.normal(size=(O, C, k, k))
    b = rng.normal(size=O)
    assert np.max(np.abs(nc.conv2d_forward(x, w, b) - conv_loops(x, w, b))) < 1e-6


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        nc.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        nc.conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        nc.conv2d_backward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 3, 4)))


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(2)
    gx, gw, gb = nc.conv2d_backward(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)),
                                    np.zeros((1, 3, 4, 4)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_1x1_closed_form():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 4, 5))
    g = rng.normal(size=(1, 1, 4, 5))
    _, gw, gb = nc.conv2d_backward(x, np.ones((1, 1, 1, 1)), g)
    assert gw[0, 0, 0, 0] == pytest.approx((g * x).sum(), abs=1e-12)
    assert gb[0] == pytest.approx(g.sum(), abs=1e-12)


@pytest.mark.parametrize("trial", range(100))
def test_conv_backward_finite_diff(trial):
    rng = np.random.default_rng(1000 + trial)
    C, O = rng.integers(1, 3, size=2)
    H, W = rng.integers(2, 5, size=2)
    k = int(rng.choice([1, 3]))
    x = rng.normal(size=(1, C, H, W))
    w = rng.normal(size=(O, C, k, k))
    b = rng.normal(size=O)
    up = rng.normal(size=(1, O, H, W))
    gx, gw, gb = nc.conv2d_backward(x, w, up)
    assert rel_err(gx, nc.finite_diff_grad(lambda v: (nc.conv2d_forward(v, w, b) * up).sum(), x)) < 1e-4
    assert rel_err(gw, nc.finite_diff_grad(lambda v: (nc.conv2d_forward(x, v, b) * up).sum(), w)) < 1e-4
    assert rel_err(gb, nc.finite_diff_grad(lambda v: (nc.conv2d_forward(x, w, v) * up).sum(), b)) < 1e-4


def away_from_zero(rng, shape, margin=1e-2):
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < margin, margin * np.sign(v + 1e-300) + v, v)


def test_leaky_relu_values():
    x = np.array([-1.0, 0.0, 2.0])
    assert np.allclose(nc.leaky_relu_forward(x, 0.01), [-0.01, 0.0, 2.0])
    assert np.array_equal(nc.leaky_relu_forward(x, 1.0), x)
    assert np.allclose(nc.leaky_relu_backward(np.array([-3.0, 5.0]), np.ones(2), 0.01), [0.01, 1.0])
    assert nc.leaky_relu_grad_mask(np.array([0.0]), 0.01)[0] == 1.0


def test_relu_values():
    x = np.array([-1.0, 0.0, 2.0])
    assert np.array_equal(nc.relu_forward(x), [0.0, 0.0, 2.0])
    assert np.array_equal(nc.relu_backward(x, np.ones(3)), [0.0, 0.0, 1.0])
    assert np.allclose(nc.relu_forward(x), nc.leaky_relu_forward(x, 1e-12), atol=1e-11)


@pytest.mark.parametrize("trial", range(100))
def test_activation_finite_diff(trial):
    rng = np.random.default_rng(2000 + trial)
    x = away_from_zero(rng, (1, 2, 3, 3))
    up = rng.normal(size=x.shape)
    fd = nc.finite_diff_grad(lambda v: (nc.leaky_relu_forward(v, 0.01) * up).sum(), x)
    assert rel_err(nc.leaky_relu_backward(x, up, 0.01), fd) < 1e-4
    fd = nc.finite_diff_grad(lambda v: (nc.relu_forward(v) * up).sum(), x)
    assert rel_err(nc.relu_backward(x, up), fd) < 1e-4


def test_maxpool_values_and_ties():
    assert nc.maxpool2_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))[0, 0, 0, 0] == 4.0
    x = np.full((1, 1, 4, 4), 2.0)
    assert np.array_equal(nc.maxpool2_forward(x), np.full((1, 1, 2, 2), 2.0))
    g = nc.maxpool2_backward(x, np.ones((1, 1, 2, 2)))
    expect = np.zeros((4, 4))
    expect[::2, ::2] = 1.0
    assert np.array_equal(g[0, 0], expect)


def test_maxpool_odd():
    with pytest.raises(OddDimension):
        nc.maxpool2_forward(np.zeros((1, 1, 3, 4)))


@pytest.mark.parametrize("trial", range(100))
def test_maxpool_finite_diff(trial):
    rng = np.random.default_rng(3000 + trial)
    # a random permutation keeps every window free of ties by a wide margin
    x = rng.permutation(2 * 4 * 6).reshape(1, 2, 4, 6).astype(np.float64)
    up = rng.normal(size=(1, 2, 2, 3))
    fd = nc.finite_diff_grad(lambda v: (nc.maxpool2_forward(v) * up).sum(), x)
    assert rel_err(nc.maxpool2_backward(x, up), fd) < 1e-4


def test_finite_diff_known():
    g = nc.finite_diff_grad(lambda v: (v ** 2).sum(), np.array([1.0, 2.0]))
    assert np.allclose(g, [2.0, 4.0], atol=1e-8)
    assert not nc.finite_diff_grad(lambda v: 3.0, np.array([1.0, 2.0])).any()
    g = nc.finite_diff_grad(lambda v: huber(v, 0.2)[0], np.array([1.0]))
    assert g[0] == pytest.approx(huber(np.array([1.0]), 0.2)[1][0], abs=1e-8)


def test_graph_chain_matches_kernels():
    rng = np.random.default_rng(7)
    x = nc.Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    layer = nc.ConvLayer(nc.Tensor(rng.normal(size=(3, 2, 3, 3)), True), nc.Tensor(rng.normal(size=3), True))
    y = nc.maxpool2(nc.leaky_relu(layer(x)))
    loss = (y * 3.0).sum()
    loss.backward()

    def f(v):
        z = nc.leaky_relu_forward(nc.conv2d_forward(v, layer.weight.data, layer.bias.data), 0.01)
        return 3.0 * nc.maxpool2_forward(z).sum()

    assert rel_err(x.grad, nc.finite_diff_grad(f, x.data)) < 1e-4


def test_graph_shared_node_and_multiple_roots():
    a = nc.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = a + a
    c = b * a  # 2a^2
    nc.backward([c, b], [np.ones(2), np.ones(2)])
    assert np.allclose(a.grad, 4 * a.data + 2)


def test_graph_channel_slice():
    x = nc.Tensor(np.arange(12.0).reshape(1, 3, 2, 2), requires_grad=True)
    s = nc.channel(x, 1)
    assert s.shape == (1, 1, 2, 2)
    s.sum().backward()
    assert np.array_equal(x.grad[0, 1], np.ones((2, 2))) and x.grad[0, [0, 2]].sum() == 0


def test_dtype_preserved():
    x = nc.Tensor(np.ones((1, 1, 4, 4), dtype=np.float32))
    w = nc.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    b = nc.Tensor(np.zeros(1, dtype=np.float32))
    assert nc.maxpool2(nc.leaky_relu(nc.conv2d(x, w, b))).dtype == np.float32


def test_forward_deterministic():
    rng = np.random.default_rng(8)
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    assert np.array_equal(nc.conv2d_forward(x, w, b), nc.conv2d_forward(x.copy(), w.copy(), b.copy()))


def test_debug_catches_nonfinite():
    nc.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            nc.conv2d_forward(np.full((1, 1, 2, 2), np.inf), np.ones((1, 1, 1, 1)), np.zeros(1))
    finally:
        nc.set_debug(False)


def test_xavier_bounds():
    rng = np.random.default_rng(0)
    w = nc.xavier_uniform(rng, (16, 8, 3, 3))
    assert np.abs(w).max() <= np.sqrt(6.0 / (24 * 9))
