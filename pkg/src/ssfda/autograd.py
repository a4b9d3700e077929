"""Minimal dense reverse-mode differentiation on float64 numpy arrays.

Every op builds a node holding its parents and a backward closure. ``backward``
replays the graph in reverse topological order and accumulates into leaf
``grad`` buffers. Convolution uses the cross-correlation convention (no kernel
flip), matching the usual deep-learning definition.

Ops accept an optional leading batch axis where it is cheap to support
(conv2d, bilinear_resize, matmul); broadcasting is otherwise limited to
scalar-with-tensor.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CLAMP_EPS = 1e-7


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._backward = backward if out.requires_grad else None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back to a size-1 operand that was broadcast as a scalar."""
    if g.shape == shape:
        return g
    return np.array(g.sum()).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(g, b.shape))

    return _node(a.values + b.values, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(-g, b.shape))

    return _node(a.values - b.values, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        _accumulate(a, _reduce_to(g * b.values, a.shape))
        _accumulate(b, _reduce_to(g * a.values, b.shape))

    return _node(a.values * b.values, "mul", (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.values * c, "scale", (a,), lambda g: _accumulate(a, g * c))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _node(np.where(mask, x.values, 0.0), "relu", (x,), lambda g: _accumulate(x, g * mask))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.values)  # subgradient 0 at 0
    return _node(np.abs(x.values), "abs", (x,), lambda g: _accumulate(x, g * sign))


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(s, "sigmoid", (x,), lambda g: _accumulate(x, g * s * (1.0 - s)))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.values)
    return _node(e, "exp", (x,), lambda g: _accumulate(x, g * e))


def log(x: Tensor) -> Tensor:
    v = x.values
    if np.any(v <= 0):
        raise ValueError("log: non-positive input; clamp before taking logs")
    return _node(np.log(v), "log", (x,), lambda g: _accumulate(x, g / v))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    v = x.values
    inside = (v >= lo) & (v <= hi)
    return _node(np.clip(v, lo, hi), "clamp", (x,), lambda g: _accumulate(x, g * inside))


def clamp_prob(p: Tensor, eps: float = CLAMP_EPS) -> Tensor:
    return clamp(p, eps, 1.0 - eps)


# ---------------------------------------------------------------- reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum(x: Tensor, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ax = _norm_axes(axes, x.values.ndim)
    out = x.values.sum(axis=ax)
    kept = tuple(1 if i in ax else n for i, n in enumerate(x.shape))

    def backward(g):
        _accumulate(x, np.broadcast_to(np.reshape(g, kept), x.shape))

    return _node(np.asarray(out, dtype=np.float64), "sum", (x,), backward)


def mean(x: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(axes, x.values.ndim)
    n = int(np.prod([x.shape[i] for i in ax])) if ax else 1
    return _rename(scale(sum(x, ax), 1.0 / n), "mean")


def _rename(t: Tensor, op: str) -> Tensor:
    t.op = op
    return t


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.values.reshape(shape)
    return _node(out, "reshape", (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.values.transpose(axes))
    return _node(out, "transpose", (x,), lambda g: _accumulate(x, g.transpose(inv)))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-d operands, or batched 3-d operands with equal batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != b.values.ndim or a.values.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    A, B = a.values, b.values

    def backward(g):
        _accumulate(a, g @ np.swapaxes(B, -1, -2))
        _accumulate(b, np.swapaxes(A, -1, -2) @ g)

    return _node(A @ B, "matmul", (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.values.ndim <= axis < x.values.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, "softmax", (x,), backward)


# ---------------------------------------------------------------- convolution


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C×H×W or N×C×H×W) with ``kernel`` (O×C×kh×kw)."""
    batched = x.values.ndim == 4
    X = x.values if batched else x.values[None]
    K = kernel.values
    if X.ndim != 4 or K.ndim != 4:
        raise ShapeError(f"conv2d: expected C×H×W input and O×C×kh×kw kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = X.shape
    o, kc, kh, kw = K.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}×{kw}")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output size {ho}×{wo}")

    Xp = np.pad(X, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else X
    # windows: N×C×Ho×Wo×kh×kw
    win = sliding_window_view(Xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    Kmat = K.reshape(o, c * kh * kw)
    out = (cols @ Kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.values.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        G = g if batched else g[None]
        Gm = G.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if kernel.requires_grad:
            _accumulate(kernel, (Gm.T @ cols).reshape(K.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, G.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (Gm @ Kmat).reshape(n, ho, wo, c, kh, kw)
            dXp = np.zeros_like(Xp)
            for i in range(kh):
                for j in range(kw):
                    dXp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dX = dXp[:, :, pad:pad + h, pad:pad + w] if pad else dXp
            _accumulate(x, dX if batched else dX[0])

    return _node(out if batched else out[0], "conv2d", parents, backward)


# ---------------------------------------------------------------- resampling


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-d interpolation matrix, half-pixel centres (align_corners=False)."""
    M = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        M[i, lo] += 1.0 - frac
        M[i, hi] += frac
    return M


def bilinear_resize(x: Tensor, factor: float) -> Tensor:
    """Resize the last two axes by 2 or 0.5 with separable bilinear weights."""
    h, w = x.shape[-2:]
    if factor == 0.5:
        if h % 2 or w % 2:
            raise ShapeError(f"bilinear_resize: factor 0.5 needs even size, got {h}×{w}")
        ho, wo = h // 2, w // 2
    elif factor == 2:
        ho, wo = 2 * h, 2 * w
    else:
        raise ValueError(f"bilinear_resize: factor must be 0.5 or 2, got {factor}")
    Mh, Mw = bilinear_matrix(h, ho), bilinear_matrix(w, wo)
    out = Mh @ x.values @ Mw.T

    def backward(g):
        _accumulate(x, Mh.T @ g @ Mw)

    return _node(out, "bilinear_resize", (x,), backward)


# ---------------------------------------------------------------- backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; interior buffers are released.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    interior = [t for t in order if t._backward is not None]
    for t in interior:
        t.grad = None
    if loss._backward is None:
        _accumulate(loss, np.ones(loss.shape))
        return
    loss.grad = np.ones(loss.shape)
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    for t in interior:
        t.grad = None


# ---------------------------------------------------------------- verification


def grad_check(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` takes one Tensor per input and returns a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    worst = 0.0
    for idx, arr in enumerate(arrays):
        analytic = leaves[idx].grad if leaves[idx].grad is not None else np.zeros_like(arr)
        flat = arr.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = fn(*[Tensor(a) for a in arrays]).item()
            flat[k] = orig - eps
            fm = fn(*[Tensor(a) for a in arrays]).item()
            flat[k] = orig
            numeric = (fp - fm) / (2 * eps)
            a_k = analytic.reshape(-1)[k]
            err = np.abs(a_k - numeric) / max(1e-12, np.abs(a_k) + np.abs(numeric))
            worst = max(worst, err)
    return worst
