"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is a copy, row-major and C-contiguous; there are no strided views.
Each op validates that its output is finite and, when gradients are enabled,
records its parents plus a vector-Jacobian closure. ``backward`` replays the
recorded graph once in reverse topological order.

The graph is confined to whatever thread built it; ``no_grad`` is tracked
per-thread so concurrent forward passes on disjoint graphs are safe.
"""

import threading

import numpy as np

from widecap import kernels
from widecap.errors import (
    ContractError,
    DegenerateInputError,
    NumericError,
    ShapeError,
)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev


def _as_array(value) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, opname: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{opname} produced NaN or Inf")
    return arr


class Tensor:
    """A float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("array", "requires_grad", "grad", "_parents", "_vjp", "_opname")

    def __init__(self, value, requires_grad: bool = False):
        self.array = _check_finite(_as_array(value), "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._opname = "leaf"

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the underlying storage."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ContractError(f"item() needs a single element, shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.array.copy())

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._opname}{grad})"

    # Operator sugar; all routed through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(out: np.ndarray, opname: str, parents, vjp) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.array = _check_finite(np.ascontiguousarray(out), opname)
    t.grad = None
    t._opname = opname
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise and broadcasting ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.array + b.array

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.array - b.array

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.array * b.array

    def vjp(g):
        return (
            _unbroadcast(g * b.array, a.shape),
            _unbroadcast(g * a.array, b.shape),
        )

    return _node(out, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.array / b.array

    def vjp(g):
        return (
            _unbroadcast(g / b.array, a.shape),
            _unbroadcast(-g * a.array / (b.array * b.array), b.shape),
        )

    return _node(out, "div", (a, b), vjp)


def power(a, p) -> Tensor:
    a = _wrap(a)
    p = float(p)
    out = a.array**p

    def vjp(g):
        return (g * p * a.array ** (p - 1.0),)

    return _node(out, "power", (a,), vjp)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.array)

    def vjp(g):
        return (g * out,)

    return _node(out, "exp", (a,), vjp)


def log(a) -> Tensor:
    a = _wrap(a)
    out = np.log(a.array)

    def vjp(g):
        return (g / a.array,)

    return _node(out, "log", (a,), vjp)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.array)

    def vjp(g):
        return (g * 0.5 / out,)

    return _node(out, "sqrt", (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 1.0 / (1.0 + np.exp(-a.array))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, "sigmoid", (a,), vjp)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.array)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, "tanh", (a,), vjp)


def gelu(a) -> Tensor:
    a = _wrap(a)
    out = kernels.gelu_fwd(a.array)

    def vjp(g):
        return (kernels.gelu_bwd(a.array, g),)

    return _node(out, "gelu", (a,), vjp)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    out = np.clip(a.array, lo, hi)
    passthrough = (a.array >= lo) & (a.array <= hi)

    def vjp(g):
        return (g * passthrough,)

    return _node(out, "clamp", (a,), vjp)


# ----------------------------------------------------------------------------
# shape ops


def reshape(a, *shape) -> Tensor:
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.array.reshape(shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _node(out, "reshape", (a,), vjp)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    out = a.array.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _node(out, "transpose", (a,), vjp)


def swap_last(a) -> Tensor:
    """Transpose the trailing two axes, keeping any batch axes in place."""
    a = _wrap(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    first = tensors[0].shape
    for t in tensors:
        if t.shape != first:
            raise ShapeError(f"stack needs equal shapes, got {first} and {t.shape}")
    out = np.stack([t.array for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.ascontiguousarray(s) for s in np.moveaxis(g, axis, 0))

    return _node(out, "stack", tuple(tensors), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.array for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(s) for s in np.split(g, splits, axis=axis))

    return _node(out, "concat", tuple(tensors), vjp)


# ----------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return axis % ndim
    return tuple(a % ndim for a in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axis = _norm_axis(axis, a.ndim)
    out = a.array.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, "sum", (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[i] for i in axis]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands or stacked operands with equal batch dims."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shapes do not agree: {a.shape} and {b.shape}")
    out = np.matmul(a.array, b.array)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.array, -1, -2))
        gb = np.matmul(np.swapaxes(a.array, -1, -2), g)
        return np.ascontiguousarray(ga), np.ascontiguousarray(gb)

    return _node(out, "matmul", (a, b), vjp)


# ----------------------------------------------------------------------------
# fused kernels


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction; rows sum to one."""
    a = _wrap(a)
    axis = axis % a.ndim
    moved = np.moveaxis(a.array, axis, -1)
    lead = moved.shape[:-1]
    rows = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
    y = kernels.softmax_fwd(rows)
    out = np.moveaxis(y.reshape(*lead, -1), -1, axis)

    def vjp(g):
        gm = np.moveaxis(g, axis, -1).reshape(-1, rows.shape[-1])
        gin = kernels.softmax_bwd(y, np.ascontiguousarray(gm))
        return (np.ascontiguousarray(np.moveaxis(gin.reshape(*lead, -1), -1, axis)),)

    return _node(out, "softmax", (a,), vjp)


def causal_softmax(scores) -> Tensor:
    """Row softmax of (..., t, t) attention scores where key j > query m is masked."""
    s = _wrap(scores)
    t = s.shape[-1]
    if s.shape[-2] != t:
        raise ShapeError(f"causal_softmax needs square trailing dims, got {s.shape}")
    flat = np.ascontiguousarray(s.array.reshape(-1, t, t))
    y = kernels.causal_softmax_fwd(flat)
    out = y.reshape(s.shape)

    def vjp(g):
        gin = kernels.causal_softmax_bwd(y, np.ascontiguousarray(g.reshape(-1, t, t)))
        return (gin.reshape(s.shape),)

    return _node(out, "causal_softmax", (s,), vjp)


def masked_softmax(scores, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; a row with no valid
    entry is an error rather than a silent uniform row."""
    s = _wrap(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
    if not mask.any(axis=-1).all():
        raise DegenerateInputError("softmax row with every entry masked")
    neg = np.where(mask, s.array, -np.inf)
    shifted = neg - neg.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _node(y, "masked_softmax", (s,), vjp)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis followed by gain/bias."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    cols = a.shape[-1]
    if gain.shape != (cols,) or bias.shape != (cols,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({cols},), "
            f"got {gain.shape} and {bias.shape}"
        )
    rows = np.ascontiguousarray(a.array.reshape(-1, cols))
    y, mean, rstd = kernels.layernorm_fwd(rows, gain.array, bias.array, eps)
    out = y.reshape(a.shape)

    def vjp(g):
        gx, ggain, gbias = kernels.layernorm_bwd(
            rows, gain.array, mean, rstd, np.ascontiguousarray(g.reshape(-1, cols))
        )
        return gx.reshape(a.shape), ggain, gbias

    return _node(out, "layer_norm", (a, gain, bias), vjp)


def rope_apply(a, positions: np.ndarray, theta: np.ndarray) -> Tensor:
    """Rotate consecutive coordinate pairs of the last axis by position*theta.

    ``positions`` must match the product of the leading axes after raveling;
    the rotation is orthonormal so the backward pass rotates by the negated
    positions.
    """
    a = _wrap(a)
    d = a.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rope_apply needs an even trailing dim, got {d}")
    if 2 * len(theta) != d:
        raise ShapeError(f"theta has {len(theta)} entries for trailing dim {d}")
    pos = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1)
    rows = np.ascontiguousarray(a.array.reshape(-1, d))
    if len(pos) != rows.shape[0]:
        raise ShapeError(
            f"positions cover {len(pos)} rows but input has {rows.shape[0]}"
        )
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    out = kernels.rope_fwd(rows, pos, theta).reshape(a.shape)

    def vjp(g):
        back = kernels.rope_fwd(
            np.ascontiguousarray(g.reshape(-1, d)), -pos, theta
        )
        return (back.reshape(a.shape),)

    return _node(out, "rope_apply", (a,), vjp)


# ----------------------------------------------------------------------------
# indexing


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup into (vocab, dim); gradients scatter-add into the table."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.array[ids]
    vocab = table.shape[0]

    def vjp(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g.reshape(*ids.shape, -1))
        return (gt,)

    return _node(out, "embedding", (table,), vjp)


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Pick row idx[i] from each (t, d) block of a (b, t, d) tensor."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    b = a.shape[0]
    out = a.array[np.arange(b), idx]

    def vjp(g):
        gx = np.zeros(a.shape)
        gx[np.arange(b), idx] = g
        return (gx,)

    return _node(out, "gather_rows", (a,), vjp)


def gather_last(a, idx: np.ndarray) -> Tensor:
    """take_along_axis over the last axis with integer indices of equal rank."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(a.array, idx, axis=-1)

    def vjp(g):
        gx = np.zeros(a.shape)
        lead = np.indices(idx.shape)
        np.add.at(gx, tuple(lead[:-1]) + (idx,), g)
        return (gx,)

    return _node(out, "gather_last", (a,), vjp)


def rev_cumsum(a) -> Tensor:
    """Suffix cumulative sum along the last axis."""
    a = _wrap(a)
    out = np.flip(np.cumsum(np.flip(a.array, axis=-1), axis=-1), axis=-1)

    def vjp(g):
        return (np.ascontiguousarray(np.cumsum(g, axis=-1)),)

    return _node(out, "rev_cumsum", (a,), vjp)


# ----------------------------------------------------------------------------
# backward driver


def topo_order(root: Tensor) -> list:
    """Reverse-topological schedule of the graph below ``root``; every node
    appears exactly once."""
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.array.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad; nothing to differentiate")
    loss.grad = np.ones_like(loss.array)
    for node in reversed(topo_order(loss)):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = g.reshape(parent.shape)
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
