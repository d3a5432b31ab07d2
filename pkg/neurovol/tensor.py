"""
Tensor - Dense 2-D reverse-mode automatic differentiation
Just enough operators for attention stacks: matmul, elementwise maps, softmax, layer norm, GELU

A Tape records every operation whose inputs live on it, in execution order,
so reversing the record is a valid topological order for backprop. Tensors
without a tape are plain constants: operations on them record nothing.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import ndtr

from .errors import NotScalar, ShapeMismatch

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    A float64 matrix with an optional gradient and tape membership

    Attributes:
        data: Row-major float64 array of shape (rows, cols)
        grad: Accumulated gradient of the last backward passes, or None
        tape: Tape recording operations on this tensor, or None for constants
    """

    __slots__ = ("data", "grad", "tape", "name")

    def __init__(self, data, tape: Optional["Tape"] = None, name: str = ""):
        array = np.asarray(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise ShapeMismatch(f"tensors are 2-D, got shape {array.shape}")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, taped={self.tape is not None})"

    def __add__(self, other): return add(self, _lift(other))
    def __radd__(self, other): return add(_lift(other), self)
    def __sub__(self, other): return sub(self, _lift(other))
    def __rsub__(self, other): return sub(_lift(other), self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class _Record:
    output: Tensor
    parents: Tuple[Tensor, ...]
    backward: Backward


class Tape:
    """
    Ordered record of differentiable operations

    One tape belongs to one thread. Gradients written by `backward` accumulate
    into `.grad` across calls; call `zero_grad` to reset them.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.leaves: List[Tensor] = []

    def leaf(self, data, name: str = "") -> Tensor:
        """Create a differentiable input living on this tape"""
        tensor = Tensor(data, tape=self, name=name)
        self.leaves.append(tensor)
        return tensor

    def record(self, output: Tensor, parents: Tuple[Tensor, ...], backward: Backward) -> None:
        output.tape = self
        self.records.append(_Record(output, parents, backward))

    def zero_grad(self) -> None:
        for tensor in self.leaves:
            tensor.grad = None
        for record in self.records:
            record.output.grad = None

    def backward(self, loss: Tensor) -> None:
        """
        Reverse-mode sweep from a scalar loss

        Populates `.grad` of the loss and every taped ancestor, adding to any
        gradient already present.
        """
        if loss.shape != (1, 1):
            raise NotScalar(f"backward needs a 1x1 loss, got {loss.shape}")
        if loss.tape is not self:
            raise ShapeMismatch("loss was not produced on this tape")
        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        touched: Dict[int, Tensor] = {id(loss): loss}
        for record in reversed(self.records):
            upstream = adjoints.get(id(record.output))
            if upstream is None:
                continue
            for parent, grad in zip(record.parents, record.backward(upstream)):
                if grad is None or parent.tape is not self:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + grad
                else:
                    adjoints[key] = grad
                    touched[key] = parent
        for key, tensor in touched.items():
            tensor.grad = adjoints[key] if tensor.grad is None else tensor.grad + adjoints[key]


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the tape that produced it"""
    if loss.tape is None:
        raise NotScalar("loss is a constant; nothing to differentiate")
    loss.tape.backward(loss)


def constant(data) -> Tensor:
    return Tensor(data)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.full((1, 1), float(value)))


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for tensor in tensors:
        if tensor.tape is not None:
            if tape is not None and tensor.tape is not tape:
                raise ShapeMismatch("operands belong to different tapes")
            tape = tensor.tape
    return tape


def _emit(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: Backward) -> Tensor:
    out = Tensor(data)
    tape = _tape_of(*parents)
    if tape is not None:
        tape.record(out, parents, backward_fn)
    return out


def _broadcast_rows(a: Tensor, b: Tensor, op: str) -> None:
    """Same shape, or one operand a 1 x n row (or 1 x 1 scalar) broadcast over rows"""
    if a.shape == b.shape:
        return
    for x, y in ((a, b), (b, a)):
        if x.shape[0] == 1 and (x.shape[1] == y.shape[1] or x.shape[1] == 1):
            return
    raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_rows(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_rows(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product"""
    _broadcast_rows(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _emit(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)
    return _emit(value, (a,), lambda g: (g * value,))


def log(a: Tensor) -> Tensor:
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU x * Phi(x)"""
    cdf = ndtr(a.data)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
    return _emit(a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; the gradient is zero where the clip is active"""
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeMismatch(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return _emit(
        np.concatenate([p.data for p in parts], axis=0),
        tuple(parts),
        lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))),
    )


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeMismatch(f"concat_cols: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return _emit(
        np.concatenate([p.data for p in parts], axis=1),
        tuple(parts),
        lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))),
    )


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeMismatch(f"slice_cols: [{start}:{stop}] outside {a.shape}")

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _emit(a.data[:, start:stop].copy(), (a,), grad_fn)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over each row, stabilized by subtracting the row maximum"""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    return _emit(y, (a,), lambda g: (y * (g - np.sum(g * y, axis=1, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize each row to zero mean and unit variance, then apply gain and bias

    Args:
        x: (rows, d) input
        gain: (1, d) scale
        bias: (1, d) shift
        eps: Added to the variance before the square root
    """
    d = x.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ShapeMismatch(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs width {d}")
    centered = x.data - x.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        g_hat = g * gain.data
        dx = inv_std * (
            g_hat
            - g_hat.mean(axis=1, keepdims=True)
            - xhat * (g_hat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, np.sum(g * xhat, axis=0, keepdims=True), np.sum(g, axis=0, keepdims=True)

    return _emit(out, (x, gain, bias), grad_fn)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return _emit(np.full((1, 1), a.data.sum()), (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit(np.full((1, 1), a.data.mean()), (a,), lambda g: (np.full(a.shape, g[0, 0] / n),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ W (+ b) with b a (1, out) row"""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, h: float = 1e-5, points: int = 2) -> np.ndarray:
    """
    Central finite differences of a scalar function of `array`, perturbed in place

    Args:
        fn: Re-evaluates the function after each perturbation
        array: Input to perturb; restored entry by entry
        h: Step
        points: 2 for the (f(x+h) - f(x-h)) / 2h stencil, 4 for the fourth-order one
    """
    if points not in (2, 4):
        raise ShapeMismatch(f"numeric_gradient supports 2 or 4 point stencils, got {points}")
    grad = np.zeros(array.shape)
    for idx in np.ndindex(array.shape):
        saved = float(array[idx])

        def at(offset: float) -> float:
            array[idx] = saved + offset
            return fn()

        if points == 2:
            grad[idx] = (at(h) - at(-h)) / (2.0 * h)
        else:
            grad[idx] = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
        array[idx] = saved
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / (|numeric| + 1e-8)"""
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))
