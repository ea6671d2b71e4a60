"""
Tensors and tape-based reverse-mode differentiation.

A ``Tensor`` wraps a C-contiguous (row-major) numpy array. Operations are
``Function`` subclasses; when a ``Tape`` is active and any input requires a
gradient, ``Function.apply`` records a node on the tape and the output gets a
``node_id`` pointing at it. ``backward(loss)`` replays the recorded backward
rules in reverse insertion order and accumulates into ``.grad`` of leaves.

Broadcasting is limited to leading dimensions: the smaller operand's shape has
to be a suffix of the larger one (matmul broadcasts its batch dimensions the
numpy way).
"""

import logging
import math
import threading
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from dwvit.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.float32, np.float64)

Scalar = Union[int, float]
ArrayLike = Union[np.ndarray, Scalar, Sequence[Any]]


class Tensor:
    """
    n-dimensional float array with optional gradient tracking.

    ``data`` is always C-contiguous so ``data.ravel()`` is the flat row-major
    storage. ``grad`` has the same shape as ``data`` once populated.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
    ):
        if dtype is None:
            dtype = (
                data.dtype
                if isinstance(data, (np.ndarray, np.generic)) and data.dtype in FLOAT_DTYPES
                else DEFAULT_DTYPE
            )
        # 0-d stays 0-d
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def astype(self, dtype: np.dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return AddScalar.apply(self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return AddScalar.apply(self, value=-float(other))

    def __rsub__(self, other):
        return AddScalar.apply(neg(self), value=float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return MulScalar.apply(self, value=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: Scalar):
        return MulScalar.apply(self, value=1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other: "Tensor"):
        return matmul(self, other)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


@dataclass
class Node:
    function: "Function"
    output: Tensor


class Tape:
    """
    Ordered record of operations; one tape per thread.

    Used as a context manager, it becomes the active tape for the current
    thread until the block exits.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, function: "Function", output: Tensor) -> None:
        output.node_id = len(self.nodes)
        output.tape = self
        self.nodes.append(Node(function, output))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("loss was not produced under this tape")

        pending = {loss.node_id: np.ones_like(loss.data)}
        for node_id in range(loss.node_id, -1, -1):
            grad = pending.pop(node_id, None)
            if grad is None:
                continue
            function = self.nodes[node_id].function
            input_grads = function.backward(grad)
            for tensor, input_grad in zip(function.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                input_grad = np.asarray(input_grad, dtype=tensor.dtype)
                if tensor.tape is self and tensor.node_id is not None:
                    if tensor.node_id in pending:
                        pending[tensor.node_id] = pending[tensor.node_id] + input_grad
                    else:
                        pending[tensor.node_id] = input_grad
                elif tensor.grad is None:
                    tensor.grad = input_grad.copy()
                else:
                    tensor.grad = tensor.grad + input_grad
        logger.debug(f"backward replayed {loss.node_id + 1} tape nodes")


_local = threading.local()


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """
    Populate ``.grad`` of every leaf that feeds ``loss``; repeated calls accumulate.

    Leaves with no path to ``loss`` are left untouched: ``grad`` stays None
    (read as zero) or keeps the zeros of an earlier ``zero_grad()``.
    """
    if loss.tape is None:
        raise ContractError("loss was not produced under an active tape")
    loss.tape.backward(loss)


class Function:
    """
    A differentiable operation.

    Subclasses implement ``forward`` on numpy arrays, stashing whatever the
    backward rule needs on ``self``, and ``backward`` returning one gradient
    (or None) per input tensor.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        function = cls(*inputs)
        out = Tensor(function.forward(*(t.data for t in inputs), **kwargs))
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            tape.record(function, out)
        return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` over the dimensions that were broadcast."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_suffix(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> None:
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    if long[len(long) - len(short) :] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} are not compatible")


class Add(Function):
    def forward(self, a, b):
        _check_suffix(a.shape, b.shape, "add")
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _check_suffix(a.shape, b.shape, "sub")
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), -unbroadcast(grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _check_suffix(a.shape, b.shape, "mul")
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return (
            unbroadcast(grad * b.data, a.shape),
            unbroadcast(grad * a.data, b.shape),
        )


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class AddScalar(Function):
    def forward(self, a, value: float):
        return a + value

    def backward(self, grad):
        return (grad,)


class MulScalar(Function):
    def forward(self, a, value: float):
        self.value = value
        return a * value

    def backward(self, grad):
        return (grad * self.value,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(
                f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast"
            )
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.inputs
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


class Transpose(Function):
    def forward(self, a, axes: Optional[Tuple[int, ...]]):
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        if sorted(axes) != list(range(a.ndim)):
            raise DimensionError(f"transpose: {axes} is not a permutation of {a.shape}")
        self.axes = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    def forward(self, a, shape: Tuple[int, ...]):
        try:
            return a.reshape(shape)
        except ValueError:
            raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    normalized = set()
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim} dimensions")
        normalized.add(ax % ndim)
    return tuple(sorted(normalized))


class Sum(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        shape = self.inputs[0].shape
        kept = tuple(1 if i in self.axes else n for i, n in enumerate(shape))
        grad = np.reshape(grad, kept)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Sum):
    def forward(self, a, axis=None, keepdims: bool = False):
        out = super().forward(a, axis=axis, keepdims=keepdims)
        self.count = math.prod(a.shape[i] for i in self.axes)
        return out / self.count

    def backward(self, grad):
        (full,) = super().backward(grad)
        return (full / self.count,)


class Concat(Function):
    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            shapes = [a.shape for a in arrays]
            raise DimensionError(f"concat: shapes {shapes} differ off axis {axis}")

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class Slice(Function):
    def forward(self, a, start: int, stop: int, axis: int):
        self.index = [slice(None)] * a.ndim
        self.index[axis] = slice(start, stop)
        self.index = tuple(self.index)
        return np.ascontiguousarray(a[self.index])

    def backward(self, grad):
        full = np.zeros(self.inputs[0].shape, dtype=grad.dtype)
        full[self.index] = grad
        return (full,)


class RepeatLeading(Function):
    def forward(self, a, count: int):
        return np.ascontiguousarray(np.broadcast_to(a, (count, *a.shape)))

    def backward(self, grad):
        return (grad.sum(axis=0),)


class Embedding(Function):
    def forward(self, table, indices: np.ndarray):
        if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
            raise ContractError(
                f"embedding: index out of range for table of {table.shape[0]} rows"
            )
        self.indices = indices
        return table[indices]

    def backward(self, grad):
        table = self.inputs[0]
        full = np.zeros(table.shape, dtype=grad.dtype)
        np.add.at(full, self.indices, grad)
        return (full,)


class Softmax(Function):
    def forward(self, a, axis: int = -1):
        if not -a.ndim <= axis < a.ndim:
            raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
        self.axis = axis
        shifted = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        dot = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - dot),)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Gelu(Function):
    def forward(self, a):
        self.cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))
        return a * self.cdf

    def backward(self, grad):
        x = self.inputs[0].data
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (grad * (self.cdf + x * pdf),)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(a, axes=tuple(axes) if axes is not None else None)


def swapaxes(a: Tensor, first: int, second: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[first], axes[second] = axes[second], axes[first]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    axis = axis % a.ndim
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover axis of {a.shape}")
    parts, start = [], 0
    for size in sizes:
        parts.append(Slice.apply(a, start=start, stop=start + size, axis=axis))
        start += size
    return parts


def repeat_leading(a: Tensor, count: int) -> Tensor:
    """Stack ``count`` copies of ``a`` along a new leading axis."""
    return RepeatLeading.apply(a, count=count)


def embedding(table: Tensor, indices: Union[np.ndarray, Sequence[int]]) -> Tensor:
    return Embedding.apply(table, indices=np.asarray(indices, dtype=np.int64))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi from erf."""
    return Gelu.apply(a)


def zeros(shape: Sequence[int], dtype: np.dtype = DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype))


def ones(shape: Sequence[int], dtype: np.dtype = DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype))


def parameter(data: np.ndarray, dtype: np.dtype = DEFAULT_DTYPE) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Seeded PCG64 generator.

    Extra ``stream`` integers select an independent child stream, so two
    consumers seeded alike never share draws.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def trunc_normal(
    rng: np.random.Generator,
    shape: Sequence[int],
    std: float = 0.02,
    dtype: np.dtype = DEFAULT_DTYPE,
) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside two standard deviations."""
    out = rng.normal(0.0, std, size=tuple(shape))
    outside = np.abs(out) > 2.0 * std
    while outside.any():
        out[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(out) > 2.0 * std
    return out.astype(dtype)
