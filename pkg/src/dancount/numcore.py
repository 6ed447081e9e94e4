"""A small reverse-mode autodiff core on top of numpy arrays.

The functional kernels (``conv2d_forward``/``conv2d_backward`` and friends)
work on plain arrays laid out as (N, C, H, W). ``Tensor`` wraps an array and
records the graph so ``backward`` can chain those kernels. Every op keeps the
dtype of its inputs: float32 for training, float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import OddDimension, ShapeMismatch

DEBUG = False


def set_debug(flag: bool) -> None:
    """Turn on finite-value checks after every forward op."""
    global DEBUG
    DEBUG = bool(flag)


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if DEBUG and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return arr


# --- functional kernels -------------------------------------------------

def _conv_shapes(x: np.ndarray, w: np.ndarray):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4D input and weight, got {x.shape} and {w.shape}")
    O, C, kh, kw = w.shape
    if x.shape[1] != C:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, weight expects {C}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch(f"kernel dims must be odd, got {kh}x{kw}")
    return O, C, kh, kw


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, C, H, W, kh, kw)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1 convolution with same-size zero padding."""
    O, C, kh, kw = _conv_shapes(x, w)
    if b.shape != (O,):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {O} output channels")
    out = np.tensordot(_windows(x, kh, kw), w, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return _check(np.ascontiguousarray(out), "conv2d")


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    """Returns (grad_x, grad_w, grad_b)."""
    O, C, kh, kw = _conv_shapes(x, w)
    N, _, H, W = x.shape
    if grad_out.shape != (N, O, H, W):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape}, expected {(N, O, H, W)}")
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.tensordot(grad_out, _windows(x, kh, kw), axes=([0, 2, 3], [0, 2, 3]))
    flipped = w[:, :, ::-1, ::-1]
    grad_x = np.tensordot(_windows(grad_out, kh, kw), flipped, axes=([1, 4, 5], [0, 2, 3]))
    grad_x = np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2))
    return grad_x, np.ascontiguousarray(grad_w), grad_b


def leaky_relu_forward(x: np.ndarray, slope: float) -> np.ndarray:
    return np.maximum(x * x.dtype.type(slope), x)


def leaky_relu_grad_mask(x: np.ndarray, slope: float) -> np.ndarray:
    # subgradient 1 at x == 0
    return np.where(x >= 0, x.dtype.type(1), x.dtype.type(slope))


def leaky_relu_backward(x: np.ndarray, grad: np.ndarray, slope: float) -> np.ndarray:
    return grad * leaky_relu_grad_mask(x, slope)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def relu_grad_mask(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(x.dtype)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * relu_grad_mask(x)


def _pool_blocks(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2 expects (N, C, H, W), got {x.shape}")
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise OddDimension(f"maxpool2 needs even spatial dims, got {H}x{W}")
    # last axis enumerates the window in row-major order
    return x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        N, C, H // 2, W // 2, 4
    )


def maxpool2_forward(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(_pool_blocks(x).max(axis=-1))


def maxpool2_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Routes each window's gradient to its first maximum in scan order."""
    blocks = _pool_blocks(x)
    N, C, h, w, _ = blocks.shape
    if grad_out.shape != (N, C, h, w):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape}, expected {(N, C, h, w)}")
    arg = blocks.argmax(axis=-1)
    routed = np.zeros_like(blocks)
    np.put_along_axis(routed, arg[..., None], grad_out[..., None], axis=-1)
    return np.ascontiguousarray(
        routed.reshape(N, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, 2 * h, 2 * w)
    )


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# --- autodiff graph -----------------------------------------------------

class Tensor:
    """An array plus the closure that pushes its gradient to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        backward([self], [grad])

    # a few elementwise helpers, same-shape or scalar only

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def sum(self):
        return tsum(self)


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else ())
    if req:
        out._backward = backward_fn
    return out


def _topo(roots: Sequence[Tensor]) -> list[Tensor]:
    order, seen = [], set()
    for root in roots:
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(roots: Sequence[Tensor], seeds: Sequence[np.ndarray]) -> None:
    """Backpropagate several outputs at once, seeding each with its upstream gradient."""
    if len(roots) != len(seeds):
        raise ShapeMismatch("one seed gradient per root is required")
    for r, s in zip(roots, seeds):
        s = np.asarray(s, dtype=r.dtype)
        if s.shape != r.shape:
            raise ShapeMismatch(f"seed shape {s.shape} does not match output {r.shape}")
        r._accum(s)
    for node in reversed(_topo(roots)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    if a.shape != b.shape and b.data.size != 1:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g if b.shape == a.shape else g.sum().reshape(b.shape))

    return _node(a.data + b.data, (a, b), bw)


def mul(a, k) -> Tensor:
    """Elementwise product with a same-shape tensor or a constant."""
    if not isinstance(k, Tensor):
        kk = a.dtype.type(k)

        def bw_const(g):
            a._accum(g * kk)

        return _node(a.data * kk, (a,), bw_const)
    if a.shape != k.shape:
        raise ShapeMismatch(f"mul: shapes {a.shape} and {k.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g * k.data)
        if k.requires_grad:
            k._accum(g * a.data)

    return _node(a.data * k.data, (a, k), bw)


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(np.broadcast_to(g, a.shape))

    return _node(a.data.sum(), (a,), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out = conv2d_forward(x.data, w.data, b.data)

    def bw(g):
        gx, gw, gb = conv2d_backward(x.data, w.data, g)
        if x.requires_grad:
            x._accum(gx)
        if w.requires_grad:
            w._accum(gw)
        if b.requires_grad:
            b._accum(gb)

    return _node(out, (x, w, b), bw)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    def bw(g):
        x._accum(leaky_relu_backward(x.data, g, slope))

    return _node(leaky_relu_forward(x.data, slope), (x,), bw)


def relu(x: Tensor) -> Tensor:
    def bw(g):
        x._accum(relu_backward(x.data, g))

    return _node(relu_forward(x.data), (x,), bw)


def maxpool2(x: Tensor) -> Tensor:
    def bw(g):
        x._accum(maxpool2_backward(x.data, g))

    return _node(maxpool2_forward(x.data), (x,), bw)


def channel(x: Tensor, idx: int) -> Tensor:
    """Slice x[:, idx:idx+1] keeping the channel axis."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, idx : idx + 1] = g
        x._accum(full)

    return _node(np.ascontiguousarray(x.data[:, idx : idx + 1]), (x,), bw)


@dataclass
class ConvLayer:
    weight: Tensor  # (out, in, kh, kw)
    bias: Tensor  # (out,)

    def __post_init__(self):
        O, C, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeMismatch(f"kernel dims must be odd, got {kh}x{kw}")
        if self.bias.shape != (O,):
            raise ShapeMismatch(f"bias shape {self.bias.shape} vs {O} output channels")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    @property
    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


def xavier_uniform(rng: np.random.Generator, shape, gain: float = 1.0) -> np.ndarray:
    O, C, kh, kw = shape
    limit = gain * np.sqrt(6.0 / ((C + O) * kh * kw))
    return rng.uniform(-limit, limit, size=shape)
