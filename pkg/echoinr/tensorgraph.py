"""
Reverse-mode automatic differentiation over dense 0-D, 1-D and 2-D arrays

Every differentiable operation records itself on the active ``Tape`` when at
least one operand requires a gradient. ``Tape.backward`` replays the recording
in exact reverse order and accumulates gradients into the leaf tensors.

A fresh tape is meant to be opened for every training iteration::

    with Tape() as tape:
        loss = mean(square(sub(affine(x, W, b), target)))
    tape.backward(loss)
    W.grad  # dL/dW
"""

import math
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from echoinr.errors import DomainError, ShapeError


_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64
_local = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int]
VectorJacobian = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def set_default_dtype(name: str) -> None:
    """
    Select the scalar type used for new tensors

    Args:
        name: 'float64' (default) or 'float32'
    """
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"Unsupported dtype: {name}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> type:
    return _default_dtype


class Tensor:
    """Dense array with an optional gradient slot"""

    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(value, dtype=get_default_dtype())
        if array.ndim > 2:
            raise ShapeError("tensor", array.shape, (), "only 0-D, 1-D and 2-D tensors exist")
        self.value = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.value = array
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass(frozen=True)
class TapeEntry:
    """One recorded operation; ``vjp`` holds the saved forward context"""

    op: str
    inputs: Tuple[int, ...]
    output: int
    vjp: VectorJacobian


class Tape:
    """Ordered record of the operations of one forward pass"""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._nodes: List[Tensor] = []
        self._index: Dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def node_id(self, tensor: Tensor) -> int:
        key = id(tensor)
        if key not in self._index:
            self._index[key] = len(self._nodes)
            self._nodes.append(tensor)
        return self._index[key]

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp: VectorJacobian):
        input_ids = tuple(self.node_id(t) for t in inputs)
        self.entries.append(TapeEntry(op, input_ids, self.node_id(output), vjp))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """
        Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf

        Args:
            loss: Output tensor; must hold a single value unless ``seed`` is given
            seed: Upstream gradient with the shape of ``loss``
        """
        if seed is None:
            if loss.size != 1:
                raise ShapeError("backward", loss.shape, (), "seed required for non-scalar output")
            seed = np.ones_like(loss.value)
        elif seed.shape != loss.shape:
            raise ShapeError("backward", loss.shape, seed.shape)

        start = self._index.get(id(loss))
        if start is None:
            if loss.requires_grad:
                _accumulate(loss, seed)
            return

        grads: Dict[int, np.ndarray] = {start: seed}
        for entry in reversed(self.entries):
            upstream = grads.pop(entry.output, None)
            if upstream is None:
                continue
            for node, contribution in zip(entry.inputs, entry.vjp(upstream)):
                if contribution is None or not self._nodes[node].requires_grad:
                    continue
                if node in grads:
                    grads[node] = grads[node] + contribution
                else:
                    grads[node] = contribution

        for node, grad in grads.items():
            _accumulate(self._nodes[node], grad)

    def first_non_finite(self) -> Optional[Tuple[int, str]]:
        """Return (entry index, op name) of the first recorded non-finite output"""
        for position, entry in enumerate(self.entries):
            for node in entry.inputs + (entry.output,):
                if not np.all(np.isfinite(self._nodes[node].value)):
                    return position, entry.op
        return None


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    grad = np.asarray(grad, dtype=tensor.value.dtype).reshape(tensor.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VectorJacobian) -> Tensor:
    tape = current_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(value, dtype=get_default_dtype()), tracked)
    if tracked:
        tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# Elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit(
        "add",
        (a, b),
        a.value + b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit(
        "sub",
        (a, b),
        a.value - b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit(
        "mul",
        (a, b),
        a.value * b.value,
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    quotient = a.value / b.value

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * quotient / b.value, b.shape),
        )

    return _emit("div", (a, b), quotient, vjp)


def square(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _emit("square", (x,), x.value * x.value, lambda g: (2.0 * x.value * g,))


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return _emit("exp", (x,), out, lambda g: (out * g,))


def abs_(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _emit("abs", (x,), np.abs(x.value), lambda g: (np.sign(x.value) * g,))


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    active = x.value > 0
    return _emit("relu", (x,), np.where(active, x.value, 0.0), lambda g: (g * active,))


def softplus(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    # logistic via tanh stays finite for large |x|
    slope = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _emit("softplus", (x,), np.logaddexp(0.0, x.value), lambda g: (g * slope,))


def clamp(x: ArrayLike, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    if lo > hi:
        raise DomainError(f"clamp: lo={lo} exceeds hi={hi}")
    inside = (x.value >= lo) & (x.value <= hi)
    return _emit("clamp", (x,), np.clip(x.value, lo, hi), lambda g: (g * inside,))


def log10_guarded(x: ArrayLike, eps: float) -> Tensor:
    """
    log10(x + eps), defined for x >= 0

    Args:
        x: Non-negative tensor
        eps: Positive floor added before the logarithm

    Returns:
        Tensor of the same shape
    """
    x = as_tensor(x)
    if eps <= 0:
        raise DomainError(f"log10_guarded: eps must be positive, got {eps}")
    if np.any(x.value < 0):
        raise DomainError(f"log10_guarded: negative input (min {x.value.min():.4g})")
    shifted = x.value + eps
    return _emit(
        "log10_guarded",
        (x,),
        np.log10(shifted),
        lambda g: (g / (shifted * math.log(10.0)),),
    )


# Reductions and reshaping


def sum_(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _emit("sum", (x,), np.sum(x.value), lambda g: (np.full(x.shape, g, dtype=g.dtype),))


def mean(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _emit(
        "mean", (x,), np.mean(x.value), lambda g: (np.full(x.shape, g / n, dtype=g.dtype),)
    )


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    return _emit("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(x.shape),))


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Join 2-D tensors with equal row counts side by side"""
    tensors = [as_tensor(t) for t in tensors]
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.ndim != 2 or t.shape[0] != rows:
            raise ShapeError("concat_cols", tensors[0].shape, t.shape)
    edges = np.cumsum([t.shape[1] for t in tensors])[:-1]
    return _emit(
        "concat_cols",
        tensors,
        np.concatenate([t.value for t in tensors], axis=1),
        lambda g: tuple(np.split(g, edges, axis=1)),
    )


def diff(x: ArrayLike, axis: int) -> Tensor:
    """Forward difference x[i+1] - x[i] along one axis"""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[axis] < 2:
        raise ShapeError("diff", x.shape, (), f"need at least 2 samples along axis {axis}")

    def vjp(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        head = [slice(None)] * 2
        tail = [slice(None)] * 2
        head[axis] = slice(1, None)
        tail[axis] = slice(None, -1)
        grad[tuple(head)] += g
        grad[tuple(tail)] -= g
        return (grad,)

    return _emit("diff", (x,), np.diff(x.value, axis=axis), vjp)


def avg_pool(x: ArrayLike, factor: int) -> Tensor:
    """Average non-overlapping factor x factor blocks"""
    x = as_tensor(x)
    rows, cols = x.shape
    if factor < 1 or rows % factor or cols % factor:
        raise ShapeError("avg_pool", x.shape, (factor, factor), "size not divisible by factor")
    if factor == 1:
        return x
    pooled = x.value.reshape(rows // factor, factor, cols // factor, factor).mean(axis=(1, 3))
    area = float(factor * factor)

    def vjp(g):
        return (np.repeat(np.repeat(g, factor, axis=0), factor, axis=1) / area,)

    return _emit("avg_pool", (x,), pooled, vjp)


# Dense layer and table lookup


def affine(x: ArrayLike, W: ArrayLike, b: ArrayLike) -> Tensor:
    """
    y = W x + b for a vector x, or row-wise for a batch x of shape (N, n)

    Args:
        x: Input of shape (n,) or (N, n)
        W: Weights of shape (m, n)
        b: Bias of shape (m,)

    Returns:
        Tensor of shape (m,) or (N, m)
    """
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeError("affine", x.shape, W.shape, "x last dim must equal W columns")
    if b.shape != (W.shape[0],):
        raise ShapeError("affine", b.shape, W.shape, "bias length must equal W rows")

    def vjp(g):
        if x.ndim == 1:
            return g @ W.value, np.outer(g, x.value), g
        return g @ W.value, g.T @ x.value, g.sum(axis=0)

    return _emit("affine", (x, W, b), x.value @ W.value.T + b.value, vjp)


def gather_rows(table: ArrayLike, idx: Iterable[int]) -> Tensor:
    """
    Copy rows of a (T, F) table; the backward pass scatter-adds into the table

    Args:
        table: Tensor of shape (T, F)
        idx: Integer row indices, 0 <= idx < T

    Returns:
        Tensor of shape (len(idx), F)
    """
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if table.ndim != 2:
        raise ShapeError("gather_rows", table.shape, idx.shape, "table must be 2-D")
    size, features = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexError(
            f"gather_rows: index out of bounds [{idx.min()}, {idx.max()}] for table of {size} rows"
        )

    def vjp(g):
        grad = np.empty((size, features), dtype=g.dtype)
        for column in range(features):
            grad[:, column] = np.bincount(idx, weights=g[:, column], minlength=size)
        return (grad,)

    return _emit("gather_rows", (table,), table.value[idx], vjp)


# Convolution


def _rank_one_factors(weights: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    pivot_index = np.unravel_index(np.argmax(np.abs(weights)), weights.shape)
    pivot = weights[pivot_index]
    if pivot == 0:
        return None
    column = weights[:, pivot_index[1]].copy()
    row = weights[pivot_index[0], :] / pivot
    if np.max(np.abs(np.outer(column, row) - weights)) <= 1e-14 * abs(pivot):
        return column, row
    return None


class _Stencil:
    """Valid-mode correlation weights; rank-one weights run as two 1-D passes"""

    def __init__(self, weights: np.ndarray):
        self.weights = weights
        self.factors = _rank_one_factors(weights)

    def correlate_valid(self, padded: np.ndarray) -> np.ndarray:
        kh, kw = self.weights.shape
        if self.factors is not None:
            column, row = self.factors
            axial = sliding_window_view(padded, kh, axis=0) @ column
            return sliding_window_view(axial, kw, axis=1) @ row
        windows = sliding_window_view(padded, (kh, kw))
        return np.tensordot(windows, self.weights, axes=([2, 3], [0, 1]))


def _edge_pad_adjoint(padded: np.ndarray, a: int, b: int, shape: Tuple[int, int]) -> np.ndarray:
    rows, cols = shape
    body = padded[a : a + rows, :].copy()
    if a:
        body[0] += padded[:a].sum(axis=0)
        body[-1] += padded[a + rows :].sum(axis=0)
    out = body[:, b : b + cols].copy()
    if b:
        out[:, 0] += body[:, :b].sum(axis=1)
        out[:, -1] += body[:, b + cols :].sum(axis=1)
    return out


def conv2d_same(x: ArrayLike, kernel: np.ndarray) -> Tensor:
    """
    Same-size 2-D convolution with replicate (edge-clamp) padding

    Args:
        x: Image tensor of shape (H, W)
        kernel: Constant array with odd dimensions no larger than the image

    Returns:
        Tensor of shape (H, W)
    """
    x = as_tensor(x)
    kernel = np.asarray(kernel, dtype=get_default_dtype())
    if x.ndim != 2 or kernel.ndim != 2:
        raise ShapeError("conv2d_same", x.shape, kernel.shape, "both operands must be 2-D")
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d_same", x.shape, kernel.shape, "kernel dims must be odd")
    if kh > x.shape[0] or kw > x.shape[1]:
        raise ShapeError("conv2d_same", x.shape, kernel.shape, "kernel larger than image")

    a, b = kh // 2, kw // 2
    padded = np.pad(x.value, ((a, a), (b, b)), mode="edge")
    out = _Stencil(kernel[::-1, ::-1]).correlate_valid(padded)

    def vjp(g):
        spread = np.pad(g, ((kh - 1, kh - 1), (kw - 1, kw - 1)))
        grad_padded = _Stencil(kernel).correlate_valid(spread)
        return (_edge_pad_adjoint(grad_padded, a, b, x.shape),)

    return _emit("conv2d_same", (x,), out, vjp)


# Verification


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
    atol: float = 1e-6,
) -> float:
    """
    Compare the reverse-mode gradient of a scalar function with central differences

    ``x`` is perturbed in place, so ``f`` may close over objects that hold ``x``
    (for example a model whose parameter is ``x``).

    Args:
        f: Scalar-valued function of x
        x: Point of evaluation
        h: Finite-difference step
        indices: Flat indices of x to check (all when omitted)
        atol: Floor of the relative-error denominator for near-zero gradients

    Returns:
        Maximum relative error over the checked coordinates
    """
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        with Tape() as tape:
            out = f(x)
        tape.backward(out)
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.reshape(x.shape).copy()
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad

    flat = x.value.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for position in positions:
        original = flat[position]
        flat[position] = original + h
        upper = f(x).item()
        flat[position] = original - h
        lower = f(x).item()
        flat[position] = original
        numeric = (upper - lower) / (2.0 * h)
        exact = analytic.reshape(-1)[position]
        scale = max(abs(exact), abs(numeric), atol)
        worst = max(worst, abs(exact - numeric) / scale)
    return worst
