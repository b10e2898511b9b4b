"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op is a ``Function`` subclass. ``Function.apply`` runs the forward pass on
the operands' numpy arrays and, when any operand requires a gradient, records
itself as the creator of the output. ``backward`` rebuilds the tape from the
loss by topological sort and walks it in reverse.

Tensors that do not require a gradient (the frozen backbone, inputs) are never
recorded, so a forward pass over frozen weights costs no graph bookkeeping.
"""

from __future__ import annotations

import hashlib
import itertools
import threading
from collections.abc import Callable, Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ContractError, ShapeError

Array = NDArray[np.float64]
Index = Any

_node_ids = itertools.count()
_grad_state = threading.local()

# sqrt(2/pi) and the cubic coefficient of the tanh approximation of GELU
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


def is_grad_enabled() -> bool:
    return bool(getattr(_grad_state, "enabled", True))


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording for the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum out the axes numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class for differentiable primitives."""

    def __init__(self, *parents: Tensor) -> None:
        self.parents = parents
        self.saved: tuple[Any, ...] = ()

    def save(self, *values: Any) -> None:
        self.saved = values

    def forward(self, *arrays: Array, **kwargs: Any) -> Array:
        raise NotImplementedError

    def backward(self, grad: Array) -> Sequence[Array | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*parents)
        out = fn.forward(*(p.data for p in parents), **kwargs)
        requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        return Tensor._wrap(out, requires_grad, fn if requires_grad else None)


class Tensor:
    """A float64 array plus an optional gradient slot.

    ``data`` of a leaf is always a private contiguous copy, so optimizers may
    update it in place.
    """

    def __init__(
        self, data: ArrayLike, requires_grad: bool = False, name: str | None = None
    ) -> None:
        self.data: Array = np.array(data, dtype=np.float64, copy=True, order="C")
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)
        self._creator: Function | None = None

    @classmethod
    def _wrap(cls, data: Array, requires_grad: bool, creator: Function | None) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.requires_grad = requires_grad
        out.name = None
        out.node_id = next(_node_ids)
        out._creator = creator
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, False, None)

    def zero_grad(self) -> None:
        self.grad = None

    # Arithmetic
    def __add__(self, other: TensorLike) -> Tensor:
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: TensorLike) -> Tensor:
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: TensorLike) -> Tensor:
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: TensorLike) -> Tensor:
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: TensorLike) -> Tensor:
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: TensorLike) -> Tensor:
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other: TensorLike) -> Tensor:
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other: TensorLike) -> Tensor:
        return Div.apply(as_tensor(other), self)

    def __neg__(self) -> Tensor:
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> Tensor:
        if exponent == 0:
            return Tensor._wrap(np.ones_like(self.data), False, None)
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Index) -> Tensor:
        return GetItem.apply(self, index=index)

    # Reductions and views
    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in _axes(axis, self.ndim)]))
        return self.sum(axis=axis, keepdims=keepdims) / float(max(count, 1))

    def reshape(self, *shape: int) -> Tensor:
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> Tensor:
        return Transpose.apply(self, axes=axes or tuple(reversed(range(self.ndim))))

    def exp(self) -> Tensor:
        return Exp.apply(self)

    def log(self) -> Tensor:
        return Log.apply(self)


TensorLike = Tensor | float | int | np.ndarray


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64), False, None)


def parameter(data: ArrayLike, name: str | None = None) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def _axes(axis: int | tuple[int, ...], ndim: int) -> tuple[int, ...]:
    items = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in items)


# ---------------------------------------------------------------------------
# Elementwise primitives


class Add(Function):
    def forward(self, a: Array, b: Array) -> Array:
        self.save(a.shape, b.shape)
        return a + b

    def backward(self, grad: Array) -> Sequence[Array | None]:
        sa, sb = self.saved
        return unbroadcast(grad, sa), unbroadcast(grad, sb)


class Sub(Function):
    def forward(self, a: Array, b: Array) -> Array:
        self.save(a.shape, b.shape)
        return a - b

    def backward(self, grad: Array) -> Sequence[Array | None]:
        sa, sb = self.saved
        return unbroadcast(grad, sa), unbroadcast(-grad, sb)


class Mul(Function):
    def forward(self, a: Array, b: Array) -> Array:
        self.save(a, b)
        return a * b

    def backward(self, grad: Array) -> Sequence[Array | None]:
        a, b = self.saved
        return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


class Div(Function):
    def forward(self, a: Array, b: Array) -> Array:
        self.save(a, b)
        return a / b

    def backward(self, grad: Array) -> Sequence[Array | None]:
        a, b = self.saved
        return unbroadcast(grad / b, a.shape), unbroadcast(-grad * a / (b * b), b.shape)


class Neg(Function):
    def forward(self, a: Array) -> Array:
        return -a

    def backward(self, grad: Array) -> Sequence[Array | None]:
        return (-grad,)


class Pow(Function):
    def forward(self, a: Array, exponent: float) -> Array:
        self.save(a, exponent)
        return a**exponent

    def backward(self, grad: Array) -> Sequence[Array | None]:
        a, exponent = self.saved
        return (grad * exponent * a ** (exponent - 1.0),)


class Exp(Function):
    def forward(self, a: Array) -> Array:
        out = np.exp(a)
        self.save(out)
        return out

    def backward(self, grad: Array) -> Sequence[Array | None]:
        (out,) = self.saved
        return (grad * out,)


class Log(Function):
    def forward(self, a: Array) -> Array:
        self.save(a)
        return np.log(a)

    def backward(self, grad: Array) -> Sequence[Array | None]:
        (a,) = self.saved
        return (grad / a,)


class Maximum(Function):
    def forward(self, a: Array, floor: float) -> Array:
        self.save(a > floor)
        return np.maximum(a, floor)

    def backward(self, grad: Array) -> Sequence[Array | None]:
        (mask,) = self.saved
        return (grad * mask,)


class Clip(Function):
    def forward(self, a: Array, low: float, high: float) -> Array:
        self.save((a >= low) & (a <= high))
        return np.clip(a, low, high)

    def backward(self, grad: Array) -> Sequence[Array | None]:
        (mask,) = self.saved
        return (grad * mask,)


class Activation(Function):
    def forward(self, a: Array, kind: str) -> Array:
        self.save(a, kind)
        if kind == "relu":
            return np.maximum(a, 0.0)
        inner = _GELU_C * (a + _GELU_K * a**3)
        return 0.5 * a * (1.0 + np.tanh(inner))

    def backward(self, grad: Array) -> Sequence[Array | None]:
        a, kind = self.saved
        if kind == "relu":
            return (grad * (a > 0.0),)
        t = np.tanh(_GELU_C * (a + _GELU_K * a**3))
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * a**2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)


# ---------------------------------------------------------------------------
# Shape primitives


class Sum(Function):
    def forward(self, a: Array, axis: int | tuple[int, ...] | None, keepdims: bool) -> Array:
        axes = None if axis is None else _axes(axis, a.ndim)
        self.save(a.shape, axes, keepdims)
        return np.asarray(a.sum(axis=axes, keepdims=keepdims))

    def backward(self, grad: Array) -> Sequence[Array | None]:
        shape, axes, keepdims = self.saved
        if axes is not None and not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, shape),)


class Reshape(Function):
    def forward(self, a: Array, shape: tuple[int, ...]) -> Array:
        self.save(a.shape)
        return a.reshape(shape)

    def backward(self, grad: Array) -> Sequence[Array | None]:
        (shape,) = self.saved
        return (grad.reshape(shape),)


class Transpose(Function):
    def forward(self, a: Array, axes: tuple[int, ...]) -> Array:
        self.save(axes)
        return a.transpose(axes)

    def backward(self, grad: Array) -> Sequence[Array | None]:
        (axes,) = self.saved
        return (grad.transpose(tuple(np.argsort(axes))),)


class Expand(Function):
    def forward(self, a: Array, shape: tuple[int, ...]) -> Array:
        self.save(a.shape)
        return np.broadcast_to(a, shape)

    def backward(self, grad: Array) -> Sequence[Array | None]:
        (shape,) = self.saved
        return (unbroadcast(grad, shape),)


class Concat(Function):
    def forward(self, *arrays: Array, axis: int) -> Array:
        axis = axis % arrays[0].ndim
        self.save(axis, [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: Array) -> Sequence[Array | None]:
        axis, sizes = self.saved
        return np.split(grad, np.cumsum(sizes)[:-1], axis=axis)


class Take(Function):
    def forward(self, a: Array, indices: NDArray[np.intp]) -> Array:
        self.save(a.shape, indices)
        return np.take(a, indices, axis=0)

    def backward(self, grad: Array) -> Sequence[Array | None]:
        shape, indices = self.saved
        out = np.zeros(shape)
        np.add.at(out, indices, grad)
        return (out,)


class GetItem(Function):
    def forward(self, a: Array, index: Index) -> Array:
        self.save(a.shape, index)
        return np.asarray(a[index])

    def backward(self, grad: Array) -> Sequence[Array | None]:
        shape, index = self.saved
        out = np.zeros(shape)
        np.add.at(out, index, grad)
        return (out,)


# ---------------------------------------------------------------------------
# Linear algebra and normalisation


class MatMul(Function):
    def forward(self, a: Array, b: Array) -> Array:
        self.save(a, b)
        return np.matmul(a, b)

    def backward(self, grad: Array) -> Sequence[Array | None]:
        a, b = self.saved
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


class Softmax(Function):
    def forward(self, a: Array, axis: int) -> Array:
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
        self.save(out, axis)
        return out

    def backward(self, grad: Array) -> Sequence[Array | None]:
        out, axis = self.saved
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)


class LayerNorm(Function):
    def forward(self, x: Array, gain: Array, bias: Array, eps: float) -> Array:
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        self.save(xhat, inv_std, gain)
        return xhat * gain + bias

    def backward(self, grad: Array) -> Sequence[Array | None]:
        xhat, inv_std, gain = self.saved
        width = xhat.shape[-1]
        lead = tuple(range(grad.ndim - 1))
        grad_gain = (grad * xhat).sum(axis=lead)
        grad_bias = grad.sum(axis=lead)
        g = grad * gain
        grad_x = (
            inv_std
            / width
            * (
                width * g
                - g.sum(axis=-1, keepdims=True)
                - xhat * (g * xhat).sum(axis=-1, keepdims=True)
            )
        )
        return grad_x, grad_gain, grad_bias


class L2Normalize(Function):
    def forward(self, a: Array, floor: float) -> Array:
        norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
        clamped = np.maximum(norm, floor)
        out = a / clamped
        self.save(out, clamped, norm > floor)
        return out

    def backward(self, grad: Array) -> Sequence[Array | None]:
        out, clamped, above = self.saved
        radial = out * (grad * out).sum(axis=-1, keepdims=True)
        return ((grad - above * radial) / clamped,)


# ---------------------------------------------------------------------------
# Functional API


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Raises:
        ShapeError: When the inner extents differ or an operand is not a matrix.

    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return MatMul.apply(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; rows sum to one along ``axis``."""
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply gain and bias."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} and bias {bias.shape} must be ({width},)"
        )
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    return LayerNorm.apply(x, gain, bias, eps=eps)


def activation(x: Tensor, kind: Literal["gelu", "relu"] = "gelu") -> Tensor:
    """Elementwise nonlinearity.

    ``gelu`` is the tanh approximation
    ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``.
    """
    if kind not in ("gelu", "relu"):
        raise ContractError(f"unknown activation {kind!r}")
    return Activation.apply(x, kind=kind)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat: nothing to concatenate")
    return Concat.apply(*tensors, axis=axis)


def take(x: Tensor, indices: ArrayLike) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate gradient."""
    return Take.apply(x, indices=np.asarray(indices, dtype=np.intp))


def expand(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Expand.apply(x, shape=tuple(shape))


def maximum(x: Tensor, floor: float) -> Tensor:
    return Maximum.apply(x, floor=float(floor))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    return Clip.apply(x, low=float(low), high=float(high))


def l2_normalize(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Unit-normalise the last axis; norms below ``floor`` divide by ``floor``."""
    return L2Normalize.apply(x, floor=float(floor))


# ---------------------------------------------------------------------------
# Tape and backward pass


@dataclass
class Tape:
    """Recorded ops reachable from a loss, inputs before outputs."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, loss: Tensor) -> Tape:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in visited:
                continue
            visited.add(node.node_id)
            stack.append((node, True))
            if node._creator is not None:
                for parent in reversed(node._creator.parents):
                    if parent.requires_grad and parent.node_id not in visited:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def records(self) -> list[tuple[int, str, tuple[int, ...]]]:
        """(node id, op name, input node ids) for every recorded op."""
        rows = []
        for node in self.nodes:
            creator = node._creator
            if creator is None:
                rows.append((node.node_id, "leaf", ()))
            else:
                rows.append(
                    (node.node_id, type(creator).__name__, tuple(p.node_id for p in creator.parents))
                )
        return rows


def backward(loss: Tensor) -> dict[int, Array]:
    """Propagate d(loss)/d(leaf) to every trainable leaf reachable from ``loss``.

    Sets ``grad`` on each such leaf (overwriting) and returns the same
    gradients keyed by node id. Frozen tensors are never visited.

    Raises:
        ContractError: When ``loss`` is not a scalar.

    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    tape = Tape.record(loss)
    pending: dict[int, Array] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Array] = {}
    for node in reversed(tape.nodes):
        grad = pending.pop(node.node_id, None)
        if grad is None:
            continue
        creator = node._creator
        if creator is None:
            node.grad = grad
            leaves[node.node_id] = grad
            continue
        for parent, parent_grad in zip(creator.parents, creator.backward(grad), strict=True):
            if parent_grad is None or not parent.requires_grad:
                continue
            previous = pending.get(parent.node_id)
            pending[parent.node_id] = parent_grad if previous is None else previous + parent_grad
    return leaves


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-3,
) -> float:
    """Largest relative error between ``backward`` and central differences.

    The error of one element is ``|a - n| / max(|a|, |n|, floor)``.

    Raises:
        ContractError: When ``h`` is outside (0, 1e-2] or ``f`` is not scalar.

    """
    if not 0.0 < h <= 1e-2:
        raise ContractError(f"grad_check: step h={h} outside (0, 1e-2]")
    for tensor in inputs:
        tensor.grad = None
    backward(f(*inputs))
    worst = 0.0
    for tensor in inputs:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = f(*inputs).item()
            flat[i] = original - h
            lower = f(*inputs).item()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * h)
            exact = float(analytic.reshape(-1)[i])
            denom = max(abs(exact), abs(numeric), floor)
            error = abs(exact - numeric) / denom
            worst = max(worst, error if np.isfinite(error) else np.inf)
    return worst


def digest(tensors: Mapping[str, Tensor | Array]) -> str:
    """SHA-256 over sorted names, shapes and little-endian float64 bytes."""
    sha = hashlib.sha256()
    for name in sorted(tensors):
        value = tensors[name]
        array = value.data if isinstance(value, Tensor) else np.asarray(value)
        array = np.ascontiguousarray(array, dtype="<f8")
        sha.update(name.encode("utf-8"))
        sha.update(repr(array.shape).encode("ascii"))
        sha.update(array.tobytes())
    return sha.hexdigest()
