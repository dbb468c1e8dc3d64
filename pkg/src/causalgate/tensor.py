"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are plain numpy arrays in row-major order; every differentiable
operation records its parents and a backward closure, and ``backward`` on a
scalar root walks the recorded graph once in reverse topological order.
Accumulation order is fixed by the graph, so identical graphs and values give
bit-identical gradients.

Shapes are validated on every op.  In checked mode (the default) non-finite
values are additionally rejected whenever a tensor is constructed; the
training loop turns this off in its hot path and guards the loss instead.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager

import numpy as np

from . import kernels

_logger = logging.getLogger(__name__)


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(TensorError):
    """A NaN or Inf reached a tensor in checked mode."""


class GraphError(TensorError):
    """Backward misuse: non-scalar root, or a second run without reset."""


_CHECKED = True
_GRAD_ENABLED = True
_warned_zero_norm = False


def set_checked(flag: bool) -> None:
    """Globally enable/disable the non-finite construction check."""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


@contextmanager
def no_grad():
    """Suspend graph recording (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def checked(flag: bool):
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(flag)
    try:
        yield
    finally:
        _CHECKED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value entering '{_op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = _op
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph machinery -----------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None
        self._backward_done = False

    def backward(self) -> None:
        """Populate grads of every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {self.data.shape}")
        if self._backward_done:
            raise GraphError("backward already ran on this root; rebuild the graph or zero_grad first")
        self._backward_done = True

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    out = Tensor(data, _op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_finite(op: str, *tensors: Tensor) -> None:
    if _CHECKED:
        for t in tensors:
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"non-finite input to '{op}'")


# -- arithmetic ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), bwd, "div")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _result(a.data * c, (a,), bwd, "scale")


def matmul(a, b) -> Tensor:
    """Matrix product for the shapes the model uses.

    Supported: (m,k)@(k,n), (B,m,k)@(k,n) with the weight shared over the
    batch, and (B,m,k)@(B,k,n).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("matmul", a, b)
    ok = (
        (a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0])
        or (a.ndim == 3 and b.ndim == 2 and a.shape[2] == b.shape[0])
        or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
    )
    if not ok:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            if b.ndim == 2:
                a._accumulate(np.matmul(g, b.data.T))
            else:
                a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if a.ndim == 2:
                b._accumulate(np.matmul(a.data.T, g))
            elif b.ndim == 2:
                k = a.shape[-1]
                b._accumulate(np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1])))
            else:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(data, (a, b), bwd, "matmul")


# -- nonlinearities and normalizations -------------------------------------------


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return _result(data, (a,), bwd, "tanh")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("exp", a)
    data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _result(data, (a,), bwd, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("log", a)
    data = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _result(data, (a,), bwd, "log")


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    _check_finite("softmax_rows", a)
    y = kernels.softmax_rows_fwd(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(kernels.softmax_rows_bwd(y, g))

    return _result(y, (a,), bwd, "softmax_rows")


def masked_softmax_rows(a, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where mask != 0.

    Masked positions receive weight exactly 0; the mask is a constant and
    takes no gradient.
    """
    a = _as_tensor(a)
    _check_finite("masked_softmax_rows", a)
    y = kernels.masked_softmax_rows_fwd(a.data, np.asarray(mask))

    def bwd(g):
        # masked entries have y == 0, so the standard softmax backward
        # already sends them zero gradient
        if a.requires_grad:
            a._accumulate(kernels.softmax_rows_bwd(y, g))

    return _result(y, (a,), bwd, "masked_softmax_rows")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must both be ({d},)"
        )
    _check_finite("layer_norm", x)
    y, mu, rstd = kernels.layer_norm_fwd(x.data, gain.data, bias.data, eps)

    def bwd(g):
        dx, dgain, dbias = kernels.layer_norm_bwd(x.data, gain.data, mu, rstd, g)
        if x.requires_grad:
            x._accumulate(dx)
        if gain.requires_grad:
            gain._accumulate(dgain)
        if bias.requires_grad:
            bias._accumulate(dbias)

    return _result(y, (x, gain, bias), bwd, "layer_norm")


# -- reductions -----------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _result(data, (a,), bwd, "sum")


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_rows(a) -> Tensor:
    """Mean over the row axis (second-to-last): (..., T, d) -> (..., d)."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"mean_rows needs >= 2 dims, got {a.shape}")
    return mean_(a, axis=a.ndim - 2)


def mse(pred, target) -> Tensor:
    """Mean over elements of the squared difference (scalar)."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    _check_finite("mse", pred, target)
    diff = pred.data - target.data
    n = diff.size
    data = np.array(np.mean(diff * diff))

    def bwd(g):
        coeff = 2.0 * float(g) / n
        if pred.requires_grad:
            pred._accumulate(coeff * diff)
        if target.requires_grad:
            target._accumulate(-coeff * diff)

    return _result(data, (pred, target), bwd, "mse")


# -- similarity -------------------------------------------------------------------


def l2_normalize_rows(a) -> Tensor:
    """Scale each last-axis row to unit norm; zero rows stay zero with zero grad."""
    global _warned_zero_norm
    a = _as_tensor(a)
    _check_finite("l2_normalize_rows", a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    zero = norm == 0.0
    if zero.any() and not _warned_zero_norm:
        _logger.warning("l2_normalize_rows: zero-norm row, similarity defined as 0")
        _warned_zero_norm = True
    safe = np.where(zero, 1.0, norm)
    y = a.data / safe

    def bwd(g):
        if a.requires_grad:
            inner = np.sum(g * y, axis=-1, keepdims=True)
            da = (g - y * inner) / safe
            a._accumulate(np.where(zero, 0.0, da))

    return _result(y, (a,), bwd, "l2_normalize_rows")


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity along the last axis; zero-norm operands give 0."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim: shapes {a.shape} and {b.shape} differ")
    return sum_(mul(l2_normalize_rows(a), l2_normalize_rows(b)), axis=-1)


# -- structural ops ---------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from None

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _result(data, (a,), bwd, "reshape")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(g.transpose(inv)))

    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd, "transpose")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(idx)]))

    return _result(data, tuple(tensors), bwd, "concat")


def embedding(table, ids: np.ndarray) -> Tensor:
    """Gather rows of a (V, d) table by an integer id array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(dt)

    return _result(data, (table,), bwd, "embedding")


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Select rows of a (N, d) tensor: out[i] = a[idx[i]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D tensor, got {a.shape}")
    data = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            da = np.zeros_like(a.data)
            np.add.at(da, idx, g)
            a._accumulate(da)

    return _result(data, (a,), bwd, "gather_rows")


def index_last(a, i: int) -> Tensor:
    """Drop the last axis by picking channel i: (..., C) -> (...)."""
    a = _as_tensor(a)
    data = np.ascontiguousarray(a.data[..., i])

    def bwd(g):
        if a.requires_grad:
            da = np.zeros_like(a.data)
            da[..., i] = g
            a._accumulate(da)

    return _result(data, (a,), bwd, "index_last")


def take_per_row(a, cols: np.ndarray) -> Tensor:
    """Pick one column per row of a 2-D tensor: out[i] = a[i, cols[i]]."""
    a = _as_tensor(a)
    cols = np.asarray(cols)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row: tensor {a.shape} with cols {cols.shape}")
    rows = np.arange(a.shape[0])
    data = a.data[rows, cols]

    def bwd(g):
        if a.requires_grad:
            da = np.zeros_like(a.data)
            da[rows, cols] = g
            a._accumulate(da)

    return _result(data, (a,), bwd, "take_per_row")


def gated_pool(h, w) -> Tensor:
    """Weight-normalized pooling over tokens: (B,T,d) with weights (B,T) -> (B,d)."""
    h, w = _as_tensor(h), _as_tensor(w)
    if h.ndim != 3 or w.shape != h.shape[:2]:
        raise ShapeError(f"gated_pool: hidden {h.shape} with weights {w.shape}")
    _check_finite("gated_pool", h, w)
    pooled, wsum = kernels.gated_pool_fwd(h.data, w.data)

    def bwd(g):
        dh, dw = kernels.gated_pool_bwd(h.data, w.data, wsum, pooled, g)
        if h.requires_grad:
            h._accumulate(dh)
        if w.requires_grad:
            w._accumulate(dw)

    return _result(pooled, (h, w), bwd, "gated_pool")


# Dispatch table used by the finite-difference suite to sweep every op kind.
OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "softmax_rows": softmax_rows,
    "layer_norm": layer_norm,
    "tanh": tanh,
    "mean_rows": mean_rows,
    "concat": lambda a, b: concat([a, b], axis=-1),
    "cosine_sim": cosine_sim,
    "mse": mse,
    "log": log,
    "exp": exp,
    "scale": lambda a: scale(a, 0.7),
}


def forward_op(kind: str, *inputs):
    """Apply a primitive by name; unknown kinds raise with the valid list."""
    if kind not in OP_TABLE:
        raise ValueError(f"unknown op kind {kind!r}; valid: {sorted(OP_TABLE)}")
    return OP_TABLE[kind](*inputs)
