"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape`.  Outside a
tape nothing is recorded, which is the cheap path used for inference::

    x = Tensor(np.zeros(5), requires_grad=True)
    with Tape() as tape:
        y = sigmoid(x).sum()
    grads = backward(tape, y)
    grads[x]            # Tensor of 0.25s
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

logger = logging.getLogger(__name__)

__all__ = [
    "Tensor", "Tape", "Gradients", "ShapeError", "AutodiffError",
    "backward", "grad_of", "finite_difference_check",
    "matmul", "conv2d", "deconv2d", "add", "sub", "mul", "div", "neg",
    "sigmoid", "tanh", "exp", "log", "square", "relu", "clip", "sum",
    "slice_", "concat", "reshape", "transpose", "conv_output_size",
    "deconv_output_size",
]


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    """Incompatible operand shapes for a primitive."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{primitive}: incompatible shapes " + " and ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    """Immutable n-dimensional float64 array that may take part in a tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the reflected Tensor op

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]
    forward: Callable[..., np.ndarray]


_ACTIVE: list["Tape"] = []


@dataclass(eq=False)
class Tape:
    """Ordered record of the primitive operations executed while active."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from the recorded inputs.

        Intermediate results are taken from the replay itself, so the return
        value is an independent re-execution of the forward pass.
        """
        values: dict[int, np.ndarray] = {}
        out = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            res = np.asarray(node.forward(*args), dtype=np.float64)
            values[id(node.output)] = res
            out.append(res)
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray,
            vjp: Callable, forward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].nodes.append(Node(op, inputs, result, vjp, forward))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
                   np.add)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
                   np.subtract)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   np.multiply)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _record("div", (a, b), out, vjp, np.divide)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,), np.negative)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),), _sigmoid)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),), np.tanh)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,), np.exp)


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _record("log", (a,), np.log(ad), lambda g: (g / ad,), np.log)


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _record("square", (a,), ad * ad, lambda g: (2.0 * g * ad,), np.square)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,),
                   lambda x: np.where(x > 0, x, 0.0))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,),
                   lambda x: np.clip(x, lo, hi))


# ------------------------------------------------------------ structural ops

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), vjp,
                   lambda x: x.sum(axis=axis, keepdims=keepdims))


def slice_(a, index) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as e:
        raise ShapeError("slice", a.shape, detail=str(e)) from None
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record("slice", (a,), out, vjp, lambda x: x[index])


def _is_fancy(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise AutodiffError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", ts, out, vjp, lambda *xs: np.concatenate(xs, axis=axis))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    old = a.shape
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),),
                   lambda x: x.reshape(shape))


def transpose(a, axes=None) -> Tensor:
    """Permute axes; by default swap the last two."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape, detail="rank < 2")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),),
                   lambda x: x.transpose(axes))


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dimensions broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", (a, b), ad @ bd, vjp, np.matmul)


# -------------------------------------------------------------- convolutions

def conv_output_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def deconv_output_size(n: int, k: int, stride: int) -> int:
    return (n - 1) * stride + k


def _windows(x: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (B, C, H, W) -> read-only view (B, C, ho, wo, k, k)
    sb, sc, sh, sw = x.strides
    return as_strided(x, shape=x.shape[:2] + (ho, wo, k, k),
                      strides=(sb, sc, sh * stride, sw * stride, sh, sw),
                      writeable=False)


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    k = w.shape[-1]
    ho = conv_output_size(x.shape[2], k, stride)
    wo = conv_output_size(x.shape[3], k, stride)
    cols = _windows(np.ascontiguousarray(x), k, stride, ho, wo)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, ho, wo, F)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_bwd_input(g: np.ndarray, w: np.ndarray, stride: int, in_hw: tuple[int, int]) -> np.ndarray:
    # g: (B, F, ho, wo), w: (F, C, k, k) -> (B, C, H, W)
    k = w.shape[-1]
    bsz, _, ho, wo = g.shape
    cols = np.tensordot(g, w, axes=([1], [0]))  # (B, ho, wo, C, k, k)
    out = np.zeros((bsz, w.shape[1]) + tuple(in_hw))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _conv_bwd_weight(g: np.ndarray, x: np.ndarray, stride: int, k: int) -> np.ndarray:
    # g: (B, F, ho, wo), x: (B, C, H, W) -> (F, C, k, k)
    ho, wo = g.shape[2], g.shape[3]
    cols = _windows(np.ascontiguousarray(x), k, stride, ho, wo)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


def _batched(x: Tensor, op: str, w: Tensor) -> bool:
    if x.ndim == 4:
        return True
    if x.ndim == 3:
        return False
    raise ShapeError(op, x.shape, w.shape, detail="input must be (C,H,W) or (B,C,H,W)")


def conv2d(x, w, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation.

    x: (B, C, H, W) or (C, H, W); w: (F, C, k, k).  Output spatial size is
    ``(n - k) // stride + 1``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if stride < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail=f"stride {stride} < 1")
    batched = _batched(x, "conv2d", w)
    xd = x.data if batched else x.data[None]
    if w.ndim != 4 or w.shape[1] != xd.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d", x.shape, w.shape)
    k = w.shape[-1]
    if k > xd.shape[2] or k > xd.shape[3]:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than input")
    wd = w.data
    out = _conv_fwd(xd, wd, stride)
    hw = xd.shape[2:]

    def vjp(g):
        g4 = g if batched else g[None]
        gx = _conv_bwd_input(g4, wd, stride, hw)
        gw = _conv_bwd_weight(g4, xd, stride, k)
        return (gx if batched else gx[0]), gw

    def fwd(xv, wv):
        r = _conv_fwd(xv if batched else xv[None], wv, stride)
        return r if batched else r[0]

    return _record("conv2d", (x, w), out if batched else out[0], vjp, fwd)


def deconv2d(x, w, stride: int = 1) -> Tensor:
    """Transpose of :func:`conv2d`.

    x: (B, Cin, H, W) or (Cin, H, W); w: (Cin, Cout, k, k).  Output spatial
    size is ``(n - 1) * stride + k``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if stride < 1:
        raise ShapeError("deconv2d", x.shape, w.shape, detail=f"stride {stride} < 1")
    batched = _batched(x, "deconv2d", w)
    xd = x.data if batched else x.data[None]
    if w.ndim != 4 or w.shape[0] != xd.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError("deconv2d", x.shape, w.shape)
    k = w.shape[-1]
    wd = w.data
    hw = (deconv_output_size(xd.shape[2], k, stride), deconv_output_size(xd.shape[3], k, stride))
    out = _conv_bwd_input(xd, wd, stride, hw)

    def vjp(g):
        g4 = g if batched else g[None]
        gx = _conv_fwd(g4, wd, stride)
        gw = _conv_bwd_weight(xd, g4, stride, k)
        return (gx if batched else gx[0]), gw

    def fwd(xv, wv):
        r = _conv_bwd_input(xv if batched else xv[None], wv, stride, hw)
        return r if batched else r[0]

    return _record("deconv2d", (x, w), out if batched else out[0], vjp, fwd)


# ------------------------------------------------------------------ backward

class Gradients(dict):
    """Leaf -> gradient mapping.  ``detached`` lists leaves the output does not reach."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.detached: list[Tensor] = []


def backward(tape: Tape, output: Tensor, wrt: Sequence[Tensor] | None = None) -> Gradients:
    """Reverse sweep over ``tape`` from a single-element ``output``.

    Without ``wrt`` every grad-requiring leaf seen on the tape is returned.
    Leaves in ``wrt`` that ``output`` does not depend on get zeros and are
    listed in ``Gradients.detached``.
    """
    if output.size != 1:
        raise AutodiffError(f"backward needs a single-element output, got shape {output.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if output.requires_grad and id(output) not in produced and not (wrt and any(t is output for t in wrt)):
        raise AutodiffError("output was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    if wrt is None:
        seen: dict[int, Tensor] = {}
        for node in tape.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        wrt = list(seen.values())

    result = Gradients()
    for leaf in wrt:
        g = grads.get(id(leaf))
        if g is None:
            result.detached.append(leaf)
            g = np.zeros(leaf.shape)
        result[leaf] = Tensor._wrap(np.array(g, dtype=np.float64).reshape(leaf.shape), False)
    if result.detached:
        warnings.warn(f"{len(result.detached)} leaf tensor(s) not connected to the output; "
                      "returning zero gradients", stacklevel=2)
    return result


def grad_of(f: Callable[[Tensor], Tensor], point) -> tuple[float, np.ndarray]:
    """Value and gradient of a tensor -> scalar function at ``point``."""
    x = Tensor(point, requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise AutodiffError(f"function must return a single element, got shape {y.shape}")
    if not y.requires_grad:
        return y.item(), np.zeros(x.shape)
    return y.item(), backward(tape, y, [x])[x].data


def finite_difference_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max elementwise relative error between autodiff and central differences.

    The error for each element is ``|ad - fd| / max(1e-8, |fd|)``.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    base = np.array(point, dtype=np.float64)
    _, ad = grad_of(f, base)
    fd = np.empty(base.size)
    flat = base.reshape(-1)
    for i in range(flat.size):
        vals = []
        for sign in (1.0, -1.0):
            p = flat.copy()
            p[i] += sign * step
            v = float(f(Tensor(p.reshape(base.shape))).data.reshape(-1)[0])
            if not np.isfinite(v):
                raise AutodiffError(f"non-finite function value at perturbed element {i}")
            vals.append(v)
        fd[i] = (vals[0] - vals[1]) / (2.0 * step)
    err = np.abs(ad.reshape(-1) - fd) / np.maximum(1e-8, np.abs(fd))
    return float(err.max()) if err.size else 0.0
