"""
Dense tensors with tape-based reverse-mode automatic differentiation.

Operations record themselves on the active ``Tape`` while one is open on the
current thread and at least one operand requires a gradient. ``backward``
replays the tape in reverse recording order, accumulating vector-Jacobian
products into the ``grad`` slot of every leaf tensor reached from the root.

Broadcasting is limited to operands of identical shape or a 0-d scalar.
"""

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .config.errors import DimensionError, NumericError, UsageError
from .config.settings import (
    DEFAULT_DTYPE,
    DTYPES,
    GRADCHECK_DENOMINATOR_FLOOR,
    GRADCHECK_STEP,
)

Scalar = Union[int, float]
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def dtype_of(precision: str = DEFAULT_DTYPE) -> np.dtype:
    if precision not in DTYPES:
        raise UsageError(f"unknown precision '{precision}', expected one of {sorted(DTYPES)}")
    return np.dtype(DTYPES[precision])


def precision_of(dtype: np.dtype) -> str:
    for name, code in DTYPES.items():
        if np.dtype(code) == np.dtype(dtype):
            return name
    raise UsageError(f"unsupported dtype {dtype}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(dtype_of(DEFAULT_DTYPE))
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


@dataclass(frozen=True)
class TapeRecord:
    name: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: VJP


class Tape:
    """Ordered record of differentiable operations; nodes are numbered in recording order."""

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.leaves: dict[int, Tensor] = {}
        self._next_node = 0

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def _number(self, tensor: Tensor) -> None:
        tensor.tape = self
        tensor.node = self._next_node
        self._next_node += 1

    def record(self, name: str, output: Tensor, inputs: Sequence[Tensor], vjp: VJP) -> None:
        for tensor in inputs:
            if tensor.requires_grad and tensor.tape is not self:
                self._number(tensor)
                self.leaves[tensor.node] = tensor
        self._number(output)
        self.records.append(TapeRecord(name, output, tuple(inputs), vjp))


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    tapes = _stack()
    return tapes[-1] if tapes else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspends recording, including inside an open tape."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def apply_op(data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP, name: str) -> Tensor:
    """
    Wraps a forward result and, when recording, registers its backward rule.

    Args:
        data (np.ndarray): The forward value.
        inputs (Sequence[Tensor]): Operands in the order ``vjp`` returns contributions.
        vjp (VJP): Maps the output cotangent to one cotangent (or None) per operand.
        name (str): Operation name, kept on the tape for inspection.

    Returns:
        Tensor: The output tensor.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, out, inputs, vjp)
    return out


def _lift(value: Union[Tensor, Scalar], like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if shape == grad.shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


def add(a: Union[Tensor, Scalar], b: Union[Tensor, Scalar]) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return apply_op(a.data + b.data, (a, b), vjp, "add")


def sub(a: Union[Tensor, Scalar], b: Union[Tensor, Scalar]) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return apply_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Union[Tensor, Scalar], b: Union[Tensor, Scalar]) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return apply_op(a.data * b.data, (a, b), vjp, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    def vjp(g):
        return (g * factor,)

    return apply_op(x.data * factor, (x,), vjp, "scale")


def _sigmoid(values: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * values))


def silu(x: Tensor) -> Tensor:
    sig = _sigmoid(x.data)

    def vjp(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return apply_op(x.data * sig, (x,), vjp, "silu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return apply_op(a.data @ b.data, (a, b), vjp, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    if (
        a.ndim != 3
        or b.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        return (
            np.matmul(g, b.data.transpose(0, 2, 1)),
            np.matmul(a.data.transpose(0, 2, 1), g),
        )

    return apply_op(np.matmul(a.data, b.data), (a, b), vjp, "bmm")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row maximum."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: need a non-empty last axis, got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return apply_op(probs, (x,), vjp, "softmax_rows")


def rmsnorm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    width = x.shape[-1] if x.ndim else 0
    if weight.ndim != 1 or weight.shape[0] != width:
        raise DimensionError(f"rmsnorm: weight {weight.shape} does not match input {x.shape}")
    if eps < 0:
        raise UsageError(f"rmsnorm: eps must be non-negative, got {eps}")
    inv_rms = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv_rms

    def vjp(g):
        grad_weight = (g * normed).reshape(-1, width).sum(axis=0)
        u = g * weight.data
        grad_x = inv_rms * (u - normed * np.mean(u * normed, axis=-1, keepdims=True))
        return grad_x, grad_weight

    return apply_op(normed * weight.data, (x, weight), vjp, "rmsnorm")


def cross_entropy(
    logits: Tensor, targets: np.ndarray, ignore_index: Optional[int] = None
) -> Tensor:
    """
    Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``.

    Args:
        logits (Tensor): Scores of shape (tokens, V).
        targets (np.ndarray): Integer class per token.
        ignore_index (int, optional): Target value excluded from the mean.

    Returns:
        Tensor: 0-d loss.

    Raises:
        IndexError: If a counted target lies outside [0, V).
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} do not match targets {targets.shape}"
        )
    vocab = logits.shape[1]
    counted = np.ones_like(targets, dtype=bool) if ignore_index is None else targets != ignore_index
    chosen = targets[counted]
    if chosen.size and (chosen.min() < 0 or chosen.max() >= vocab):
        raise IndexError(f"cross_entropy: target outside [0, {vocab})")
    total = int(counted.sum())
    if total == 0:
        raise UsageError("cross_entropy: every target is ignored")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    sums = exps.sum(axis=1)
    rows = np.nonzero(counted)[0]
    losses = np.log(sums[rows]) - shifted[rows, chosen]
    loss = np.asarray(losses.sum() / total, dtype=logits.dtype)

    def vjp(g):
        grad = exps / sums[:, None]
        grad[rows, chosen] -= 1.0
        grad[~counted] = 0.0
        return (grad * (g / total),)

    return apply_op(loss, (logits,), vjp, "cross_entropy")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def vjp(g):
        return (g.reshape(x.shape),)

    return apply_op(x.data.reshape(shape), (x,), vjp, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return apply_op(x.data.transpose(axes), (x,), vjp, "transpose")


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Gathers rows of a 2-D tensor; repeated rows accumulate in the backward pass."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    if x.ndim != 2:
        raise DimensionError(f"take_rows: expected a matrix, got {x.shape}")
    if rows.size and (rows.min() < 0 or rows.max() >= x.shape[0]):
        raise IndexError(f"take_rows: row index outside [0, {x.shape[0]})")

    def vjp(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, rows, g)
        return (grad,)

    return apply_op(x.data[rows], (x,), vjp, "take_rows")


def scatter_rows(x: Tensor, rows: np.ndarray, num_rows: int) -> Tensor:
    """Places the rows of ``x`` at distinct positions ``rows`` of a zero matrix."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != rows.shape[0]:
        raise DimensionError(f"scatter_rows: {x.shape} rows do not match {rows.shape} indices")
    out = np.zeros((num_rows, x.shape[1]), dtype=x.dtype)
    out[rows] = x.data

    def vjp(g):
        return (g[rows],)

    return apply_op(out, (x,), vjp, "scatter_rows")


def scale_rows(x: Tensor, weights: Tensor) -> Tensor:
    if x.ndim != 2 or weights.ndim != 1 or weights.shape[0] != x.shape[0]:
        raise DimensionError(f"scale_rows: cannot scale {x.shape} by {weights.shape}")

    def vjp(g):
        return g * weights.data[:, None], (g * x.data).sum(axis=1)

    return apply_op(x.data * weights.data[:, None], (x, weights), vjp, "scale_rows")


def causal_mask(scores: Tensor) -> Tensor:
    """Sets entries above the diagonal of the last two axes to -inf."""
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"causal_mask: last two axes must be square, got {scores.shape}")
    future = np.triu(np.ones(scores.shape[-2:], dtype=bool), k=1)

    def vjp(g):
        return (np.where(future, 0.0, g),)

    return apply_op(np.where(future, -np.inf, scores.data), (scores,), vjp, "causal_mask")


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotates feature pairs (i, i + half) of the last axis by position-dependent angles."""
    half = x.shape[-1] // 2
    if x.shape[-1] % 2 or cos.shape != (x.shape[-2], half) or sin.shape != cos.shape:
        raise DimensionError(f"rotary: tables {cos.shape} do not fit input {x.shape}")
    first, second = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([first * cos - second * sin, second * cos + first * sin], axis=-1)

    def vjp(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return apply_op(out, (x,), vjp, "rotary")


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return apply_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), vjp, "sum_all")


def backward(tape: Tape, root: Tensor) -> None:
    """
    Accumulates d(root)/d(leaf) into ``grad`` of every leaf reachable from ``root``.

    Repeated calls add to existing gradients; use ``zero_grads`` to reset.

    Raises:
        UsageError: If ``root`` is not a scalar recorded on ``tape``.
    """
    if root.size != 1:
        raise UsageError(f"backward: root must be a scalar, got shape {root.shape}")
    if root.tape is not tape or root.node is None:
        raise UsageError("backward: root was not recorded on this tape")

    cotangents: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
    for record in reversed(tape.records):
        g = cotangents.pop(record.output.node, None)
        if g is None:
            continue
        for operand, contribution in zip(record.inputs, record.vjp(g)):
            if contribution is None or not operand.requires_grad:
                continue
            if operand.node in cotangents:
                cotangents[operand.node] = cotangents[operand.node] + contribution
            else:
                cotangents[operand.node] = contribution

    for node, leaf in tape.leaves.items():
        g = cotangents.get(node)
        if g is None:
            continue
        leaf.grad = g.astype(leaf.dtype, copy=True) if leaf.grad is None else leaf.grad + g


@dataclass(eq=False)
class Parameter:
    """A named trainable tensor registered by a model component."""

    name: str
    tensor: Tensor
    trainable: bool = True
    weight_decay: bool = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    @property
    def size(self) -> int:
        return self.tensor.size


def normal_parameter(
    name: str,
    shape: Sequence[int],
    rng: np.random.Generator,
    std: float,
    dtype: np.dtype,
    weight_decay: bool = True,
) -> Parameter:
    values = rng.normal(0.0, std, size=tuple(shape)).astype(dtype)
    return Parameter(name, Tensor(values, requires_grad=True), weight_decay=weight_decay)


def ones_parameter(name: str, width: int, dtype: np.dtype) -> Parameter:
    return Parameter(name, Tensor(np.ones(width, dtype=dtype), requires_grad=True), weight_decay=False)


def zero_grads(params: Iterable[Union[Parameter, Tensor]]) -> None:
    for param in params:
        tensor = param.tensor if isinstance(param, Parameter) else param
        tensor.grad = None


def relative_error(analytic: float, numeric: float) -> float:
    denominator = max(abs(analytic), abs(numeric), GRADCHECK_DENOMINATOR_FLOOR)
    return abs(analytic - numeric) / denominator


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = GRADCHECK_STEP,
    coords: Optional[Iterable[int]] = None,
) -> float:
    """
    Compares the taped gradient of ``f`` at ``point`` with central differences.

    Args:
        f (Callable[[Tensor], Tensor]): Scalar-valued function of one tensor.
        point (Tensor): Where to differentiate; perturbed in place and restored.
        h (float): Finite-difference step.
        coords (Iterable[int], optional): Flat coordinates to check; all when omitted.

    Returns:
        float: Maximum relative error, denominator max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise UsageError(f"finite_diff_check: h must be positive, got {h}")
    requires_grad, saved_grad = point.requires_grad, point.grad
    point.requires_grad, point.grad = True, None
    try:
        with Tape() as tape:
            out = f(point)
        backward(tape, out)
        analytic = np.zeros_like(point.data) if point.grad is None else point.grad
    finally:
        point.requires_grad, point.grad = requires_grad, saved_grad

    if not point.data.flags.c_contiguous:
        point.data = np.ascontiguousarray(point.data)
    flat = point.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for index in range(flat.size) if coords is None else coords:
            original = flat[index]
            flat[index] = original + h
            upper = f(point).item()
            flat[index] = original - h
            lower = f(point).item()
            flat[index] = original
            numeric = (upper - lower) / (2.0 * h)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[index]), numeric))
    return worst
