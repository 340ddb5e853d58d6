"""
Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation returns a new ``Tensor`` holding its parents and a closure
mapping the output gradient to one gradient per parent. ``backward`` walks
the recorded graph in reverse topological order and accumulates gradients
into the leaf tensors that require them (parameters, or inputs under a
gradient check).

Tensors are 32-bit by default; ``default_dtype(np.float64)`` switches new
tensors to 64-bit, which the gradient checks use.
"""

import contextlib
import itertools
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .errors import ShapeError, TemporalLatticeError

_node_ids = itertools.count()
_state = {"dtype": np.float32, "grad_enabled": True}

ArrayLike = Union["Tensor", np.ndarray, float, int]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the floating point type of newly created tensors."""
    previous = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = previous


def get_default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, used by inference."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


class Tensor:
    """
    An n-dimensional array participating in the gradient tape.

    Attributes:
        data (np.ndarray): The values, in the default floating point type.
        grad (Optional[np.ndarray]): Accumulated gradient, same shape as data.
        requires_grad (bool): Whether gradients flow into this tensor.
        id (int): Tape node id, strictly increasing in creation order.
        name (Optional[str]): Parameter name, for diagnostics.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable] = None,
        _op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_node_ids)
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{label}, requires_grad={self.requires_grad})"

    # Operators
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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("Division by a Tensor is not supported, multiply by a constant instead.")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Create a leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _lift(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    requires = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    if requires:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)
    return Tensor(data, requires_grad=False, _op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# --- Elementwise arithmetic ---


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def neg(a: ArrayLike) -> Tensor:
    a = _lift(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (n, k) @ (k, m), got {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise minimum; on ties the gradient goes to ``b``."""
    a, b = _lift(a), _lift(b)
    take_a = a.data < b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _result(np.where(take_a, a.data, b.data), (a, b), backward, "minimum")


# --- Nonlinearities ---


def relu(a: ArrayLike) -> Tensor:
    a = _lift(a)
    positive = a.data > 0
    return _result(a.data * positive, (a,), lambda g: (g * positive,), "relu")


def sigmoid(a: ArrayLike) -> Tensor:
    a = _lift(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: ArrayLike) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: ArrayLike) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = _lift(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# --- Reductions and shape manipulation ---


def sum_(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _lift(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = _lift(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / max(count, 1))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    original = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# --- Sparse gathers and scatters used by the lattice operators ---


def gather_rows(x: ArrayLike, index: np.ndarray) -> Tensor:
    """
    Gather rows of a 2D tensor.

    Args:
        x: (n, C) tensor.
        index: Integer array of any shape; -1 selects a zero row.

    Returns:
        Tensor: Shape ``index.shape + (C,)``.
    """
    x = _lift(x)
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2D tensor, got shape {x.shape}")
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = x.data[safe] * valid[..., None]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index[valid], g[valid])
        return (grad,)

    return _result(out, (x,), backward, "gather_rows")


def segment_sum(x: ArrayLike, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum the rows of ``x`` that share a segment id into ``num_segments`` rows."""
    x = _lift(x)
    segments = np.asarray(segments, dtype=np.int64)
    out = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, segments, x.data)
    return _result(out, (x,), lambda g: (g[segments],), "segment_sum")


def segment_max(x: ArrayLike, segments: np.ndarray, num_segments: int) -> Tensor:
    """
    Elementwise maximum over the rows of each segment.

    Empty segments produce zero rows. On ties the gradient goes to the first
    record of the segment.
    """
    x = _lift(x)
    if x.ndim != 2:
        raise ShapeError(f"segment_max expects a 2D tensor, got shape {x.shape}")
    segments = np.asarray(segments, dtype=np.int64)
    rows, channels = x.shape
    out = np.full((num_segments, channels), -np.inf, dtype=x.dtype)
    if rows:
        np.maximum.at(out, segments, x.data)
    empty = np.isneginf(out)
    out[empty] = 0.0

    sentinel = rows
    first = np.full((num_segments, channels), sentinel, dtype=np.int64)
    if rows:
        is_max = x.data == out[segments]
        candidates = np.where(is_max, np.arange(rows)[:, None], sentinel)
        np.minimum.at(first, segments, candidates)

    def backward(g):
        grad = np.zeros_like(x.data)
        seg_idx, chan_idx = np.nonzero(first < sentinel)
        np.add.at(grad, (first[seg_idx, chan_idx], chan_idx), g[seg_idx, chan_idx])
        return (grad,)

    return _result(out, (x,), backward, "segment_max")


def take_along_rows(x: ArrayLike, columns: np.ndarray) -> Tensor:
    """Pick ``x[i, columns[i]]`` for every row i."""
    x = _lift(x)
    columns = np.asarray(columns, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (rows, columns), g)
        return (grad,)

    return _result(x.data[rows, columns], (x,), backward, "take_along_rows")


def row_norm(x: ArrayLike) -> Tensor:
    """Euclidean norm over the last axis. The gradient at a zero vector is zero."""
    x = _lift(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1))
    safe = np.where(norm > 0, norm, 1.0)

    def backward(g):
        return ((g * (norm > 0) / safe)[..., None] * x.data,)

    return _result(norm, (x,), backward, "row_norm")


def log_softmax(x: ArrayLike) -> Tensor:
    """Log-softmax over the last axis."""
    x = _lift(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    softmax = np.exp(out)

    def backward(g):
        return (g - softmax * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    ignore_index: int = 0,
    class_weights: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Mean cross-entropy over the points whose label is not ``ignore_index``.

    Args:
        logits: (m, K) unnormalised class scores.
        labels: (m,) integer labels.
        ignore_index: Label excluded from the loss.
        class_weights: Optional (K,) per-class weights; the mean is weighted.

    Returns:
        Tensor: Scalar loss.

    Raises:
        TemporalLatticeError: If every point is ignored.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy got logits {logits.shape} for {labels.shape[0]} labels")
    keep = labels != ignore_index
    if not keep.any():
        raise TemporalLatticeError("cross_entropy: every point carries the ignore label")
    weights = keep.astype(np.float64)
    if class_weights is not None:
        weights = weights * np.asarray(class_weights, dtype=np.float64)[np.where(keep, labels, 0)]
    picked = take_along_rows(log_softmax(logits), np.where(keep, labels, 0))
    return mul(sum_(mul(picked, weights)), -1.0 / weights.sum())


# --- Backward pass ---


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in visited:
            continue
        visited.add(node.id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.id not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """
    Propagate gradients from a scalar loss to every reachable leaf.

    Args:
        loss: Scalar tensor produced by taped operations.
        params: Optional parameters; those not reachable from the loss get a
                zero gradient instead of None.

    Raises:
        ShapeError: If the loss is not a scalar.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending = {loss.id: np.ones_like(loss.data)}
    order = _topological_order(loss) if loss.requires_grad else []
    logger.trace(f"Backward over {len(order)} taped nodes")
    for node in reversed(order):
        grad = pending.pop(node.id, None)
        if grad is None:
            continue
        if node._backward is None:
            grad = grad.astype(node.data.dtype, copy=False)
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.id in pending:
                pending[parent.id] = pending[parent.id] + parent_grad
            else:
                pending[parent.id] = parent_grad
    if params is not None:
        for param in params:
            if param.grad is None:
                param.grad = np.zeros_like(param.data)


# Differentiable primitives covered by the gradient-check registry.
PRIMITIVES = (
    "add",
    "sub",
    "mul",
    "matmul",
    "minimum",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sum",
    "reshape",
    "concat",
    "gather_rows",
    "segment_sum",
    "segment_max",
    "take_along_rows",
    "row_norm",
    "log_softmax",
    "cross_entropy",
)
