"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op records itself (when any operand requires a gradient) with a
monotonically increasing sequence number.  ``backward`` replays the recorded
nodes in exact reverse execution order, so gradient accumulation order is
fixed and results are bit-reproducible.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_counter = itertools.count()

KERNEL_SIZES = (1, 3, 5)
STRIDES = (1, 2)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._seq = next(_counter)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
        out = object.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._seq = next(_counter)
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = object.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._seq = next(_counter)
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar, same semantics as the functional ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap an array as a non-differentiable tensor without a finiteness scan."""
    out = object.__new__(Tensor)
    out.data = np.asarray(x, dtype=np.float64)
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._seq = next(_counter)
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


class Tape:
    """Nodes reachable from an output, ordered by execution sequence."""

    def __init__(self, output: Tensor):
        seen = set()
        nodes = []
        stack = [output]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq)
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def reversed(self):
        return reversed(self.nodes)


def backward(output: Tensor) -> None:
    if output.data.size != 1 or output.data.ndim != 0:
        raise ShapeError(f"backward() needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    pending = {id(output): np.ones_like(output.data)}
    for node in Tape(output).reversed():
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# pointwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return Tensor._from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form; sigmoid(0) is exactly 0.5
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return Tensor._from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return Tensor._from_op(t, (a,), lambda g: (g * (1.0 - t * t),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(_softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= floor
    return Tensor._from_op(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(a.data + float(c), (a,), lambda g: (g,))


POINTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "neg": neg,
    "add": add,
    "mul": mul,
    "sub": sub,
}


def pointwise(op_id: str, *operands) -> Tensor:
    try:
        fn = POINTWISE[op_id]
    except KeyError:
        raise ValueError(f"unknown pointwise op {op_id!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),)
    )


def broadcast_spatial(v, H: int, W: int) -> Tensor:
    """Repeat a [B, C] tensor over an H x W grid, giving [B, C, H, W]."""
    v = as_tensor(v)
    if v.data.ndim != 2:
        raise ShapeError(f"broadcast_spatial expects [B, C], got {v.shape}")
    if H < 1 or W < 1:
        raise ShapeError(f"broadcast_spatial needs H, W >= 1, got {H}x{W}")
    B, C = v.shape
    out = np.repeat(v.data.reshape(B, C, 1), H * W, axis=2).reshape(B, C, H, W)
    return Tensor._from_op(out, (v,), lambda g: (g.reshape(B, C, H * W).sum(axis=2),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return Tensor._from_op(
        np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),)
    )


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return Tensor._from_op(
        np.asarray(a.data.sum() / n), (a,), lambda g: (np.full(shape, float(g) / n),)
    )


def reduce(op_id: str, a) -> Tensor:
    if op_id == "sum":
        return sum(a)
    if op_id == "mean":
        return mean(a)
    raise ValueError(f"unknown reduction {op_id!r}")


# ---------------------------------------------------------------------------
# linear ops
# ---------------------------------------------------------------------------


def dense(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x [B, n], weight [m, n], bias [m]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(
            f"dense expects x [B,n], weight [m,n], bias [m]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ShapeError(
            f"dense: incompatible shapes x {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    out = x.data @ weight.data.T + bias.data

    def grad(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return Tensor._from_op(out, (x, weight, bias), grad)


def bmm(a, b) -> Tensor:
    """Batched matrix product of [N, p, q] and [N, q, r]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad(g):
        return np.matmul(g, b.data.transpose(0, 2, 1)), np.matmul(a.data.transpose(0, 2, 1), g)

    return Tensor._from_op(out, (a, b), grad)


def _check_conv_args(kind: str, x: Tensor, kernel: Tensor, bias: Tensor | None, stride, pad, in_axis):
    if x.data.ndim != 4:
        raise ShapeError(f"{kind}: input must be [B,C,H,W], got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"{kind}: kernel must be square 4-d, got {kernel.shape}")
    k = kernel.shape[2]
    if k not in KERNEL_SIZES:
        raise ShapeError(f"{kind}: kernel size {k} not in {KERNEL_SIZES}")
    if stride not in STRIDES:
        raise ShapeError(f"{kind}: stride {stride} not in {STRIDES}")
    if pad < 0:
        raise ShapeError(f"{kind}: negative padding {pad}")
    if x.shape[1] != kernel.shape[in_axis]:
        raise ShapeError(
            f"{kind}: input has {x.shape[1]} channels but kernel {kernel.shape} expects {kernel.shape[in_axis]}"
        )
    out_ch = kernel.shape[1 - in_axis]
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"{kind}: bias shape {bias.shape} does not match {out_ch} output channels")
    return k


def _windows(xp: np.ndarray, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]


def _scatter_windows(dwin: np.ndarray, padded_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of ``_windows``: dwin [B, Ho, Wo, C, k, k] -> padded input grad."""
    B, Ho, Wo = dwin.shape[:3]
    out = np.zeros(padded_shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += (
                dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def _conv_core(xp: np.ndarray, K: np.ndarray, stride: int, Ho: int, Wo: int) -> np.ndarray:
    k = K.shape[2]
    win = _windows(xp, k, stride, Ho, Wo)  # [B, C, Ho, Wo, k, k]
    return np.tensordot(win, K, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_kernel_grad(xp: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    Ho, Wo = g.shape[2:]
    win = _windows(xp, k, stride, Ho, Wo)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, k, k]


def _conv_input_grad(g: np.ndarray, K: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    dwin = np.tensordot(g, K, axes=([1], [0]))  # [B, Ho, Wo, C, k, k]
    return _scatter_windows(dwin, padded_shape, K.shape[2], stride)


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x [B,Cin,H,W] with kernel [Cout,Cin,k,k]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    bias = None if bias is None else as_tensor(bias)
    k = _check_conv_args("conv2d", x, kernel, bias, stride, pad, in_axis=1)
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {H}x{W} too small for k={k}, pad={pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = _conv_core(xp, kernel.data, stride, Ho, Wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad(g):
        gx = None
        if x.requires_grad:
            gp = _conv_input_grad(g, kernel.data, xp.shape, stride)
            gx = gp[:, :, pad : pad + H, pad : pad + W]
        gk = _conv_kernel_grad(xp, g, k, stride) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, grad)


def transposed_conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`.

    kernel is [Cin, Cout, k, k] (the same array a conv2d from Cout to Cin
    channels would use).  Output spatial size is
    ``(H - 1) * stride - 2 * pad + k + output_padding``; ``output_padding``
    adds rows/columns at the bottom/right so stride-2 layers can exactly
    double odd-kernel geometries.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    bias = None if bias is None else as_tensor(bias)
    k = _check_conv_args("transposed_conv2d", x, kernel, bias, stride, pad, in_axis=0)
    if not 0 <= output_padding < stride:
        raise ShapeError(f"transposed_conv2d: output_padding {output_padding} must be in [0, stride)")
    B, Cin, H, W = x.shape
    Cout = kernel.shape[1]
    Hp = (H - 1) * stride + k + output_padding
    Wp = (W - 1) * stride + k + output_padding
    Ho, Wo = Hp - 2 * pad, Wp - 2 * pad
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"transposed_conv2d: output size {Ho}x{Wo} is empty")
    full = _conv_input_grad(x.data, kernel.data, (B, Cout, Hp, Wp), stride)
    out = full[:, :, pad : pad + Ho, pad : pad + Wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def grad(g):
        gp = np.zeros((B, Cout, Hp, Wp))
        gp[:, :, pad : pad + Ho, pad : pad + Wo] = g
        gx = _conv_core(gp, kernel.data, stride, H, W) if x.requires_grad else None
        # windows of the padded output grad against the input give [Cin, Cout, k, k]
        gk = _conv_kernel_grad(gp, x.data, k, stride) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, grad)
