import numpy as np
import pytest

import samri.tensor_core as tc
from samri.errors import ChecksumMismatch, NonFiniteLoss, ShapeMismatch
from samri.tensor_core import Parameter, Tensor, grad_check

RNG = np.random.default_rng(42)

GRAD_TOL = 1e-6


def _param(name, shape, scale=1.0):
    return Parameter(name, scale * RNG.standard_normal(shape))


def _weighted_sum(t: Tensor, weights: np.ndarray) -> Tensor:
    return tc.tsum(t * Tensor(weights))


def check(fn, params):
    err = grad_check(fn, params)
    assert err < GRAD_TOL, f"max rel err {err}"


# --------------------------------------------------------- forward contracts

def test_matmul_shapes():
    a = Tensor(RNG.standard_normal((2, 3)))
    b = Tensor(RNG.standard_normal((3, 4)))
    assert tc.matmul(a, b).shape == (2, 4)
    with pytest.raises(ShapeMismatch):
        tc.matmul(a, Tensor(RNG.standard_normal((5, 4))))


def test_softmax_uniform_and_rows_sum():
    out = tc.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3)
    x = Tensor(RNG.standard_normal((6, 9)))
    rows = tc.softmax(x).data.sum(axis=-1)
    np.testing.assert_allclose(rows, np.ones(6), atol=1e-12)


def test_sigmoid_range():
    y = tc.sigmoid(Tensor(np.linspace(-30, 30, 1000)))
    assert ((y.data > 0) & (y.data < 1)).all()


def test_layer_norm_hand_case():
    # [1,2,3] with unit gain / zero bias -> mean 0, unit variance
    out = tc.layer_norm(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert abs(out.data.mean()) < 1e-9
    assert abs(out.data.var() - 1.0) < 1e-5


def test_broadcasting_trailing_alignment():
    a = Tensor(np.ones((4, 3)))
    b = Tensor(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose((a + b).data, np.tile([2.0, 3.0, 4.0], (4, 1)))
    np.testing.assert_allclose((a * b).data, np.tile([1.0, 2.0, 3.0], (4, 1)))


def test_conv2d_transpose_shape_rule():
    x = Tensor(RNG.standard_normal((5, 4, 6)))
    w = Tensor(RNG.standard_normal((5, 3, 2, 2)))
    b = Tensor(np.zeros(3))
    assert tc.conv2d_transpose(x, w, b).shape == (3, 8, 12)
    with pytest.raises(ShapeMismatch):
        tc.conv2d_transpose(x, Tensor(RNG.standard_normal((4, 3, 2, 2))), b)


def test_conv2d_transpose_hand_value():
    # one input cell, kernel 2x2: output block equals x * w
    x = Tensor(np.array([[[2.0]]]))
    w = Tensor(np.arange(4, dtype=float).reshape(1, 1, 2, 2))
    out = tc.conv2d_transpose(x, w, Tensor(np.zeros(1)))
    np.testing.assert_allclose(out.data[0], [[0.0, 2.0], [4.0, 6.0]])


def test_bilinear_resize_identity_and_doubling():
    x = Tensor(RNG.standard_normal((8, 8)))
    np.testing.assert_allclose(tc.bilinear_resize(x, (8, 8)).data, x.data)
    doubled = tc.bilinear_resize(x, (16, 16))
    assert doubled.shape == (16, 16)
    # row-stochastic weights keep constants constant
    const = tc.bilinear_resize(Tensor(np.full((4, 4), 3.5)), (9, 7))
    np.testing.assert_allclose(const.data, 3.5)


def test_embedding_lookup_rows():
    table = Tensor(np.arange(12, dtype=float).reshape(4, 3))
    out = tc.embedding_lookup(table, [2, 0, 2])
    np.testing.assert_allclose(out.data, table.data[[2, 0, 2]])


def test_concat_and_narrow_roundtrip():
    a = Tensor(RNG.standard_normal((2, 3)))
    b = Tensor(RNG.standard_normal((4, 3)))
    joined = tc.concat([a, b], axis=0)
    np.testing.assert_allclose(tc.narrow(joined, 0, 0, 2).data, a.data)
    np.testing.assert_allclose(tc.narrow(joined, 0, 2, 4).data, b.data)


def test_backward_requires_scalar():
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_no_grad_blocks_graph():
    p = _param("p", (3,))
    with tc.no_grad():
        out = tc.tsum(p.tensor * p.tensor)
    assert not out.requires_grad


# ------------------------------------------------------- gradient oracles

def test_grad_square_hand_case():
    # f(theta) = theta^2 at theta=3 -> derivative 6
    p = Parameter("theta", np.array([3.0]))
    err = grad_check(lambda: tc.tsum(p.tensor * p.tensor), [p])
    assert err < 1e-8
    p.tensor.zero_grad()
    loss = tc.tsum(p.tensor * p.tensor)
    loss.backward()
    np.testing.assert_allclose(p.tensor.grad, [6.0], rtol=1e-12)


@pytest.mark.parametrize("name", [
    "add", "sub", "mul", "div", "matmul", "matmul_batched", "pow", "log",
    "exp", "clip", "sum_axis", "mean", "reshape_transpose", "concat",
    "narrow", "embedding", "sigmoid", "gelu", "softmax", "layer_norm",
    "conv2d_transpose", "bilinear_resize",
])
def test_primitive_gradients(name):
    w1 = RNG.standard_normal((3, 4))
    w35 = RNG.standard_normal((3, 5))
    w235 = RNG.standard_normal((2, 3, 5))
    w31 = RNG.standard_normal((3, 1))
    w62 = RNG.standard_normal((6, 2))
    w32 = RNG.standard_normal((3, 2))
    w34 = RNG.standard_normal((3, 4))
    w244 = RNG.standard_normal((2, 4, 4))
    w79 = RNG.standard_normal((7, 9))
    if name == "add":
        p = _param("a", (3, 4))
        q = _param("b", (4,))
        check(lambda: _weighted_sum(p.tensor + q.tensor, w1), [p, q])
    elif name == "sub":
        p = _param("a", (3, 4))
        q = _param("b", (3, 1))
        check(lambda: _weighted_sum(p.tensor - q.tensor, w1), [p, q])
    elif name == "mul":
        p = _param("a", (3, 4))
        q = _param("b", (4,))
        check(lambda: _weighted_sum(p.tensor * q.tensor, w1), [p, q])
    elif name == "div":
        p = _param("a", (3, 4))
        q = Parameter("b", 2.0 + np.abs(RNG.standard_normal((3, 4))))
        check(lambda: _weighted_sum(p.tensor / q.tensor, w1), [p, q])
    elif name == "matmul":
        p = _param("a", (3, 4))
        q = _param("b", (4, 5))
        check(lambda: _weighted_sum(tc.matmul(p.tensor, q.tensor), w35), [p, q])
    elif name == "matmul_batched":
        p = _param("a", (2, 3, 4))
        q = _param("b", (4, 5))
        check(lambda: _weighted_sum(tc.matmul(p.tensor, q.tensor), w235), [p, q])
    elif name == "pow":
        p = Parameter("a", 0.5 + np.abs(RNG.standard_normal((3, 4))))
        check(lambda: _weighted_sum(tc.pow_const(p.tensor, 2.7), w1), [p])
    elif name == "log":
        p = Parameter("a", 0.5 + np.abs(RNG.standard_normal((3, 4))))
        check(lambda: _weighted_sum(tc.log(p.tensor), w1), [p])
    elif name == "exp":
        p = _param("a", (3, 4))
        check(lambda: _weighted_sum(tc.exp(p.tensor), w1), [p])
    elif name == "clip":
        p = Parameter("a", np.linspace(-2, 2, 12).reshape(3, 4))
        check(lambda: _weighted_sum(tc.clip(p.tensor, -1.5, 1.5), w1), [p])
    elif name == "sum_axis":
        p = _param("a", (3, 4))
        check(lambda: _weighted_sum(tc.tsum(p.tensor, axis=1, keepdims=True), w31), [p])
    elif name == "mean":
        p = _param("a", (3, 4))
        check(lambda: tc.tmean(p.tensor * p.tensor), [p])
    elif name == "reshape_transpose":
        p = _param("a", (3, 4))
        check(lambda: _weighted_sum(
            tc.transpose(tc.reshape(p.tensor, (2, 6)), (1, 0)), w62), [p])
    elif name == "concat":
        p = _param("a", (2, 4))
        q = _param("b", (1, 4))
        check(lambda: _weighted_sum(tc.concat([p.tensor, q.tensor], axis=0), w1), [p, q])
    elif name == "narrow":
        p = _param("a", (3, 4))
        check(lambda: _weighted_sum(tc.narrow(p.tensor, 1, 1, 2), w32), [p])
    elif name == "embedding":
        p = _param("table", (5, 4))
        check(lambda: _weighted_sum(tc.embedding_lookup(p.tensor, [0, 3, 3]), w34), [p])
    elif name == "sigmoid":
        p = _param("a", (3, 4))
        check(lambda: _weighted_sum(tc.sigmoid(p.tensor), w1), [p])
    elif name == "gelu":
        p = _param("a", (3, 4))
        check(lambda: _weighted_sum(tc.gelu(p.tensor), w1), [p])
    elif name == "softmax":
        p = _param("a", (3, 4))
        check(lambda: _weighted_sum(tc.softmax(p.tensor), w1), [p])
    elif name == "layer_norm":
        p = _param("a", (3, 4))
        g = Parameter("g", 1.0 + 0.1 * RNG.standard_normal(4))
        b = _param("b", (4,))
        check(lambda: _weighted_sum(tc.layer_norm(p.tensor, g.tensor, b.tensor), w1),
              [p, g, b])
    elif name == "conv2d_transpose":
        p = _param("x", (3, 2, 2))
        w = _param("w", (3, 2, 2, 2))
        b = _param("b", (2,))
        check(lambda: _weighted_sum(tc.conv2d_transpose(p.tensor, w.tensor, b.tensor),
                                    w244), [p, w, b])
    elif name == "bilinear_resize":
        p = _param("x", (4, 4))
        check(lambda: _weighted_sum(tc.bilinear_resize(p.tensor, (7, 9)), w79), [p])
    else:
        raise AssertionError(name)


def test_two_layer_perceptron_grad():
    w1 = _param("w1", (6, 8), 0.5)
    b1 = _param("b1", (8,), 0.1)
    w2 = _param("w2", (8, 1), 0.5)
    x = Tensor(RNG.standard_normal((4, 6)))
    target = RNG.random((4, 1))

    def loss():
        h = tc.sigmoid(tc.matmul(x, w1.tensor) + b1.tensor)
        y = tc.sigmoid(tc.matmul(h, w2.tensor))
        return tc.tmean((y - Tensor(target)) * (y - Tensor(target)))

    assert grad_check(loss, [w1, b1, w2]) < 1e-6


def test_grad_check_raises_on_nonfinite():
    p = Parameter("p", np.array([0.0]))
    with np.errstate(divide="ignore"), pytest.raises(NonFiniteLoss):
        grad_check(lambda: tc.log(p.tensor), [p])


def test_grad_accumulates_across_backwards():
    p = _param("p", (3,))
    first = tc.tsum(p.tensor * 2.0)
    first.backward()
    second = tc.tsum(p.tensor * 3.0)
    second.backward()
    np.testing.assert_allclose(p.tensor.grad, np.full(3, 5.0))


# ------------------------------------------------------------- snapshots

def test_snapshot_roundtrip(tmp_path):
    params = [Parameter("w", RNG.standard_normal((3, 4)).astype(np.float32).astype(np.float64)),
              Parameter("b", np.zeros(7), frozen=True)]
    path = tmp_path / "params.snap"
    tc.save_params(params, str(path))
    loaded = tc.load_params(str(path))
    assert set(loaded) == {"w", "b"}
    np.testing.assert_array_equal(loaded["w"], params[0].data)
    np.testing.assert_array_equal(loaded["b"], params[1].data)


def test_snapshot_checksum_detects_corruption(tmp_path):
    params = [Parameter("w", RNG.standard_normal((4, 4)))]
    path = tmp_path / "params.snap"
    tc.save_params(params, str(path))
    blob = bytearray(path.read_bytes())
    blob[40] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatch):
        tc.load_params(str(path))
