"""Dense float tensors with reverse-mode automatic differentiation.

Just enough machinery for a small convolutional detector and toy
cross-attention blocks: elementwise arithmetic, 2-D matmul, direct
convolution, pooling, sigmoid/softplus/relu, row softmax, and full
reductions.  Storage is float32 by default (float64 tensors are
supported for verification); reductions accumulate in float64.

Tensors are immutable values once created.  Any op that produces a
NaN or Inf raises :class:`KernelError` naming the op, rather than
letting the poison propagate.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "KernelError",
    "Tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "shift",
    "matmul",
    "transpose",
    "reshape",
    "narrow",
    "relu",
    "sigmoid",
    "softplus",
    "softmax",
    "tensor_sum",
    "tensor_mean",
    "avg_pool2d",
    "conv2d",
    "add_bias",
    "attention",
    "conv_output_size",
]

_DTYPES = (np.float32, np.float64)


class KernelError(ValueError):
    """Raised on shape mismatches or non-finite op results."""


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _DTYPES:
        return arr.astype(np.float32)
    return arr


class Tensor:
    """A numpy-backed value node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise KernelError("backward: output must be a scalar")
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # Convenience operators; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"


def _check_finite(op: str, data: np.ndarray):
    if not np.isfinite(data).all():
        raise KernelError(f"{op}: produced non-finite values")


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward):
    _check_finite(op, data)
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise KernelError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise KernelError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _sum64(arr: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    # 64-bit accumulation, cast back to the storage dtype.
    return arr.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(arr.dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("shift", a.data + a.dtype.type(c), (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise KernelError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise KernelError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise KernelError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise KernelError(f"transpose: expects a 2-D tensor, got {a.shape}")
    return _result("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(
        "reshape", a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(a.shape),)
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along one axis."""
    if not 0 <= axis < a.data.ndim:
        raise KernelError(f"narrow: axis {axis} out of range for rank {a.data.ndim}")
    if start < 0 or start + length > a.shape[axis]:
        raise KernelError(f"narrow: [{start}, {start + length}) outside extent {a.shape[axis]}")
    index = tuple(
        slice(start, start + length) if d == axis else slice(None) for d in range(a.data.ndim)
    )

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result("narrow", a.data[index].copy(), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_raw(a.data)
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) in a form that never overflows.
    y = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))
    return _result("softplus", y, (a,), lambda g: (g * _sigmoid_raw(a.data),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    y = (e / denom).astype(a.dtype)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)
        return (y * (g - inner),)

    return _result("softmax", y, (a,), backward)


def tensor_sum(a: Tensor) -> Tensor:
    total = np.array(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return _result("sum", total, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def tensor_mean(a: Tensor) -> Tensor:
    n = a.size
    total = np.array(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)
    return _result(
        "mean", total, (a,), lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype),)
    )


def avg_pool2d(a: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k mean pooling over the trailing two axes."""
    h, w = a.shape[-2], a.shape[-1]
    if h % k or w % k:
        raise KernelError(f"avg_pool2d: spatial extents {h}x{w} not divisible by {k}")
    lead = a.shape[:-2]
    blocks = a.data.reshape(*lead, h // k, k, w // k, k)
    y = blocks.sum(axis=(-3, -1), dtype=np.float64)
    y = (y / (k * k)).astype(a.dtype)

    def backward(g):
        g = g / (k * k)
        up = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1)
        return (up.astype(a.dtype),)

    return _result("avg_pool2d", y, (a,), backward)


def conv_output_size(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation.

    `x` is (C, H, W) or batched (B, C, H, W); `w` is (OC, C, KH, KW);
    `b`, when given, is a per-output-channel bias (OC,).
    """
    if stride < 1:
        raise KernelError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise KernelError(f"conv2d: padding must be >= 0, got {padding}")
    if w.data.ndim != 4:
        raise KernelError(f"conv2d: weights must be rank 4, got {w.shape}")
    squeeze = x.data.ndim == 3
    if x.data.ndim not in (3, 4):
        raise KernelError(f"conv2d: input must be rank 3 or 4, got {x.shape}")
    xd = x.data[None] if squeeze else x.data
    batch, cin, h, wid = xd.shape
    oc, wc, kh, kw = w.shape
    if wc != cin:
        raise KernelError(f"conv2d: input has {cin} channels, weights expect {wc}")
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise KernelError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wid + 2 * padding}"
        )
    if b is not None and b.shape != (oc,):
        raise KernelError(f"conv2d: bias shape {b.shape} != ({oc},)")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = windows[:, :, ::stride, ::stride]  # (B, C, OH, OW, KH, KW)
    y = np.tensordot(w.data, cols, axes=([1, 2, 3], [1, 4, 5]))  # (OC, B, OH, OW)
    y = np.ascontiguousarray(np.moveaxis(y, 0, 1))
    if b is not None:
        y = y + b.data.reshape(1, oc, 1, 1)
    oh, ow = y.shape[2], y.shape[3]
    full_h = h + 2 * padding - kh + 1
    full_w = wid + 2 * padding - kw + 1

    def backward(g):
        g4 = g[None] if squeeze else g
        dw = np.tensordot(g4, cols, axes=([0, 2, 3], [0, 2, 3]))
        db = None
        if b is not None:
            db = g4.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.dtype)
        gz = g4
        if stride > 1:
            gz = np.zeros((batch, oc, full_h, full_w), dtype=g4.dtype)
            gz[:, :, ::stride, ::stride] = g4
        gp = np.pad(gz, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        wf = w.data[:, :, ::-1, ::-1]
        dxp = np.tensordot(gwin, wf, axes=([1, 4, 5], [0, 2, 3]))  # (B, H+2p, W+2p, C)
        dxp = np.moveaxis(dxp, 3, 1)
        dx = dxp[:, :, padding : padding + h, padding : padding + wid]
        dx = np.ascontiguousarray(dx[0] if squeeze else dx)
        if b is None:
            return dx.astype(x.dtype), dw.astype(w.dtype)
        return dx.astype(x.dtype), dw.astype(w.dtype), db

    parents = (x, w) if b is None else (x, w, b)
    out = y[0] if squeeze else y
    return _result("conv2d", out, parents, backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to a (C, ...) or (B, C, ...) tensor."""
    axis = 0 if x.data.ndim == 3 else 1
    c = x.shape[axis]
    if b.shape != (c,):
        raise KernelError(f"add_bias: bias shape {b.shape} != ({c},)")
    view = b.data.reshape(tuple(c if d == axis else 1 for d in range(x.data.ndim)))

    def backward(g):
        axes = tuple(d for d in range(x.data.ndim) if d != axis)
        return g, g.sum(axis=axes, dtype=np.float64).astype(b.dtype)

    return _result("add_bias", x.data + view, (x, b), backward)


def attention(k: Tensor, q: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Cross-attention between P key rows and N query/value rows.

    Returns ``(output, cam)`` where ``cam`` holds the raw logits
    ``K @ Q^T`` (shape P x N) and the output is
    ``softmax(cam / sqrt(d)) @ V`` so each output row is a convex
    combination of the rows of V.
    """
    if k.data.ndim != 2 or q.data.ndim != 2 or v.data.ndim != 2:
        raise KernelError("attention: K, Q, V must be 2-D")
    if k.shape[1] != q.shape[1]:
        raise KernelError(f"attention: K dim {k.shape[1]} != Q dim {q.shape[1]}")
    if q.shape[0] != v.shape[0]:
        raise KernelError(f"attention: Q has {q.shape[0]} rows but V has {v.shape[0]}")
    d = k.shape[1]
    cam = matmul(k, transpose(q))
    weights = softmax(scale(cam, 1.0 / np.sqrt(d)), axis=-1)
    return matmul(weights, v), cam
