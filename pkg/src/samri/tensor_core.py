"""Minimal dense-array compute with reverse-mode gradients.

Arrays are numpy under the hood; each primitive records a backward closure so
a scalar loss can back-propagate through the whole mask-decoder graph.
Training runs in float64 (gradient checks need the headroom); float32 is used
only for on-disk storage.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .checksum import xxh64
from .errors import ChecksumMismatch, NonFiniteLoss, ShapeMismatch

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense array plus an optional gradient slot and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; accumulates into .grad slots."""
        if self.data.size != 1:
            raise ShapeMismatch(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph construction (validation/inference)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions."""
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeMismatch("matmul needs >=1-d operands")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    data = np.power(a.data, exponent)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * np.power(a.data, exponent - 1.0))

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with the usual subgradient: zero outside [lo, hi]."""
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * inside)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(part)

    return _make(data, tensors, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis`."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)

    return _make(data, (a,), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    data = table.data[idx]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accumulate(full)

    return _make(data, (table,), backward)


# ------------------------------------------------------------- nonlinearities

def sigmoid(a: Tensor) -> Tensor:
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) gelu."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def backward(g):
        if a.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
            a._accumulate(g * (cdf + a.data * pdf))

    return _make(data, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            a._accumulate(data * (g - inner))

    return _make(data, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeMismatch(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} vs input {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - m1 - xhat * m2))

    return _make(data, (a, gain, bias), backward)


# ------------------------------------------------------------- spatial ops

def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Transposed conv, kernel 2 stride 2: (Cin,H,W) -> (Cout,2H,2W).

    With kernel == stride the output tiles do not overlap, so each output
    2x2 block is a linear map of one input cell.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeMismatch(f"conv2d_transpose shapes {x.shape}, {weight.shape}")
    cin, h, w = x.shape
    wc_in, cout, kh, kw = weight.shape
    if wc_in != cin or (kh, kw) != (2, 2):
        raise ShapeMismatch(f"conv2d_transpose weight {weight.shape} vs input {x.shape}")
    # t[o,d,k,h,w] = sum_c w[c,o,d,k] * x[c,h,w]
    t = np.tensordot(weight.data, x.data, axes=([0], [0]))
    data = t.transpose(0, 3, 1, 4, 2).reshape(cout, 2 * h, 2 * w) + bias.data[:, None, None]

    def backward(g):
        g6 = g.reshape(cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2)))
        if weight.requires_grad:
            gw = np.tensordot(x.data, g6, axes=([1, 2], [3, 4]))
            weight._accumulate(gw)
        if x.requires_grad:
            gx = np.tensordot(weight.data, g6, axes=([1, 2, 3], [0, 1, 2]))
            x._accumulate(gx)

    return _make(data, (x, weight, bias), backward)


_RESIZE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-d bilinear interpolation matrix (half-pixel centers)."""
    key = (n_in, n_out)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        mat[i, lo_c] += 1.0 - frac
        mat[i, hi_c] += frac
    _RESIZE_CACHE[key] = mat
    return mat


def bilinear_resize(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resample of the two trailing axes."""
    h, w = x.shape[-2], x.shape[-1]
    ry = _resize_matrix(h, out_hw[0])
    rx = _resize_matrix(w, out_hw[1])
    data = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.matmul(np.matmul(ry.T, g), rx))

    return _make(data, (x,), backward)


def bilinear_resize_array(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Gradient-free resize for plain arrays (same weights as the primitive)."""
    ry = _resize_matrix(x.shape[-2], out_hw[0])
    rx = _resize_matrix(x.shape[-1], out_hw[1])
    return np.matmul(np.matmul(ry, x), rx.T)


# ------------------------------------------------------------- parameters

class Parameter:
    """Named weight; frozen parameters take no gradient and no updates."""

    def __init__(self, name: str, values: np.ndarray, frozen: bool = False):
        self.name = name
        self.tensor = Tensor(values, requires_grad=not frozen)
        self.frozen = frozen

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self) -> str:
        tag = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name!r}, {self.tensor.shape}, {tag})"


def count_params(params: Iterable[Parameter]) -> int:
    return sum(p.data.size for p in params)


# ------------------------------------------------------------- grad check

def grad_check(scalar_function: Callable[[], Tensor],
               params: Sequence[Parameter],
               h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads."""
    for p in params:
        p.tensor.zero_grad()
    loss = scalar_function()
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss("loss is not finite at the evaluation point")
    loss.backward()
    analytic = {id(p): (np.zeros_like(p.data) if p.tensor.grad is None
                        else p.tensor.grad.copy()) for p in params}
    max_err = 0.0
    for p in params:
        flat = p.tensor.data.reshape(-1)
        a_flat = analytic[id(p)].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(scalar_function().data)
            flat[i] = orig - h
            f_minus = float(scalar_function().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(a_flat[i] - fd) / max(1.0, abs(fd))
            if err > max_err:
                max_err = err
    for p in params:
        p.tensor.zero_grad()
    return max_err


# ------------------------------------------------------------- snapshots

_SNAP_MAGIC = b"SAMRIPS1"


def save_params(params: Sequence[Parameter], path: str) -> None:
    """Ordered (name, shape, f32le values) records plus a trailing checksum."""
    body = bytearray()
    body += struct.pack("<I", len(params))
    for p in params:
        name_bytes = p.name.encode("utf-8")
        body += struct.pack("<H", len(name_bytes))
        body += name_bytes
        body += struct.pack("<B", p.data.ndim)
        body += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        body += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    digest = xxh64(bytes(body))
    with open(path, "wb") as f:
        f.write(_SNAP_MAGIC)
        f.write(body)
        f.write(struct.pack("<Q", digest))


def load_params(path: str) -> dict[str, np.ndarray]:
    """Read a snapshot back as {name: float64 array}; verifies the checksum."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _SNAP_MAGIC:
        raise ChecksumMismatch(f"{path}: not a parameter snapshot")
    body, (digest,) = blob[8:-8], struct.unpack("<Q", blob[-8:])
    if xxh64(body) != digest:
        raise ChecksumMismatch(f"{path}: snapshot checksum failed")
    out: dict[str, np.ndarray] = {}
    off = 0
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(body, dtype="<f4", count=n, offset=off)
        off += 4 * n
        out[name] = values.reshape(shape).astype(np.float64)
    return out
