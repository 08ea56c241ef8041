"""Dense float64 tensors with reverse-mode differentiation.

Every operation returns a new read-only `Tensor`. Outputs of operations whose
inputs require gradients remember their parents and a vector-Jacobian closure;
`backward` traces those links into a `CompGraph` and accumulates gradients in
reverse topological order.
"""

import math
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt
from scipy.special import expit

from .exceptions import (
    ConfigurationError,
    ContractError,
    DegenerateSequenceError,
    DimensionError,
)


Array = npt.NDArray[np.float64]
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]
Operand = Union["Tensor", float, int]


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data: npt.ArrayLike, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64)
        if any(dim < 1 for dim in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.setflags(write=False)

        self.data: Array = arr
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return np.array(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, _as_tensor(other))

    def __radd__(self, other: Operand) -> "Tensor":
        return add(_as_tensor(other), self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, _as_tensor(other))

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(_as_tensor(other), self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, _as_tensor(other))

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(_as_tensor(other), self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


def _as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(
    data: Array, parents: tuple[Tensor, ...], backward: BackwardFn, op: str
) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    arr.setflags(write=False)
    out.data = arr
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    out.parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if len(axes) > 0:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ContractError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def seeded_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator; the stream is identical on every platform.

    Args:
        seed: unsigned 64-bit seed.
    """
    if isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), _backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _backward, "mul")


def neg(x: Tensor) -> Tensor:
    def _backward(g: Array) -> Sequence[Optional[Array]]:
        return (-g,)

    return _result(-x.data, (x,), _backward, "neg")


def relu(x: Tensor) -> Tensor:
    def _backward(g: Array) -> Sequence[Optional[Array]]:
        return (g * (x.data > 0),)

    return _result(np.maximum(x.data, 0.0), (x,), _backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out_data = expit(x.data)

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        return (g * out_data * (1.0 - out_data),)

    return _result(out_data, (x,), _backward, "sigmoid")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        return (g / x.data,)

    return _result(out_data, (x,), _backward, "log")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Raises:
        DimensionError: if either operand has rank below 2, the inner
            dimensions differ or the leading axes do not broadcast.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch axes differ: {a.shape} @ {b.shape}")

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), _backward, "matmul")


def pointwise_conv(x: Tensor, weight: Tensor) -> Tensor:
    """1x1 convolution: mixes the channel (last) axis of `x` with `weight`."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"pointwise_conv: input {x.shape} does not match weight {weight.shape}"
        )
    return matmul(x, weight)


# ---------------------------------------------------------------------------
# Reductions and normalization
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = _normalize_axis(axis, x.ndim)

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), _backward, "sum")


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[_normalize_axis(axis, x.ndim)]
    return mul(sum(x, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def amax(x: Tensor, axis: int) -> Tensor:
    """Maximum along `axis`; on ties the gradient goes to the lowest index."""
    axis = _normalize_axis(axis, x.ndim)
    idx = np.argmax(x.data, axis=axis)

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        grad = np.zeros_like(x.data)
        np.put_along_axis(
            grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return (grad,)

    return _result(np.max(x.data, axis=axis), (x,), _backward, "amax")


def global_max_pool(x: Tensor) -> Tensor:
    """Max over the position axis of a (positions, channels) matrix."""
    if x.ndim != 2:
        raise DimensionError(f"global_max_pool expects a matrix, got {x.shape}")
    return amax(x, axis=0)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _normalize_axis(axis, x.ndim)
    e = np.exp(x.data - np.max(x.data, axis=axis, keepdims=True))
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _result(out_data, (x,), _backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """log(softmax(x)) computed as x - max - log(sum(exp(x - max))).

    Stays finite for logits of any magnitude.
    """
    axis = _normalize_axis(axis, x.ndim)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out_data = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        return (g - np.exp(out_data) * np.sum(g, axis=axis, keepdims=True),)

    return _result(out_data, (x,), _backward, "log_softmax")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out_data = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}")

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        return (g.reshape(x.shape),)

    return _result(out_data, (x,), _backward, "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), (x,), _backward, "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 0:
        raise ContractError("concat needs at least one tensor")
    axis = _normalize_axis(axis, tensors[0].ndim)
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat shapes do not agree off axis {axis}: {shapes}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        return tuple(np.split(g, splits, axis=axis))

    return _result(out_data, tuple(tensors), _backward, "concat")


# ---------------------------------------------------------------------------
# Temporal operations
# ---------------------------------------------------------------------------


def depthwise_conv1d(
    x: Tensor, kernel: Tensor, stride: int = 1, axis: int = -3
) -> Tensor:
    """Per-channel 1-D convolution along `axis` with symmetric zero padding.

    Args:
        x: input whose last axis holds the channels.
        kernel: (channels, k) weights, k odd.
        stride: temporal stride.
        axis: the convolved (time) axis.

    Returns:
        Tensor with the time axis reduced to floor((T - 1) / stride) + 1.
    """
    axis = _normalize_axis(axis, x.ndim)
    channels, k = kernel.shape if kernel.ndim == 2 else (-1, -1)
    if kernel.ndim != 2 or channels != x.shape[-1] or axis == x.ndim - 1:
        raise DimensionError(
            f"depthwise_conv1d: input {x.shape} does not match kernel {kernel.shape}"
        )
    steps = x.shape[axis]
    if k % 2 == 0:
        raise ConfigurationError(f"temporal kernel size must be odd, got {k}")
    if k > steps:
        raise ConfigurationError(f"temporal kernel {k} longer than sequence {steps}")
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")

    pad = (k - 1) // 2
    moved = np.moveaxis(x.data, axis, 0)
    padded = np.zeros((steps + 2 * pad,) + moved.shape[1:])
    padded[pad : pad + steps] = moved
    length = (steps + 2 * pad - k) // stride + 1
    span = stride * (length - 1) + 1

    out = np.zeros((length,) + moved.shape[1:])
    for s in range(k):
        out += padded[s : s + span : stride] * kernel.data[:, s]

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        gm = np.moveaxis(g, axis, 0)
        g_padded = np.zeros_like(padded)
        g_kernel = np.zeros_like(kernel.data)
        for s in range(k):
            g_padded[s : s + span : stride] += gm * kernel.data[:, s]
            g_kernel[:, s] = (gm * padded[s : s + span : stride]).reshape(
                -1, channels
            ).sum(axis=0)
        gx = np.moveaxis(g_padded[pad : pad + steps], 0, axis)
        return gx, g_kernel

    return _result(np.moveaxis(out, 0, axis), (x, kernel), _backward, "depthwise_conv1d")


def overlap_avg_pool(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Mean over overlapping windows of axis 0.

    Produces floor((T - kernel) / stride) + 1 rows.

    Raises:
        ConfigurationError: if kernel > T or the stride does not satisfy
            1 <= stride < kernel.
    """
    steps = x.shape[0]
    if kernel > steps:
        raise ConfigurationError(f"pool kernel {kernel} longer than input {steps}")
    if not 1 <= stride < kernel:
        raise ConfigurationError(
            f"overlapping pooling needs 1 <= stride < kernel, got {stride}, {kernel}"
        )

    length = (steps - kernel) // stride + 1
    span = stride * (length - 1) + 1
    total = np.zeros((length,) + x.shape[1:])
    for s in range(kernel):
        total += x.data[s : s + span : stride]

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        gx = np.zeros_like(x.data)
        for s in range(kernel):
            gx[s : s + span : stride] += g / kernel
        return (gx,)

    return _result(total / kernel, (x,), _backward, "overlap_avg_pool")


def temporal_difference(x: Tensor, axis: int = 0) -> Tensor:
    """out[t] = x[t + 1] - x[t] along `axis`."""
    axis = _normalize_axis(axis, x.ndim)
    if x.shape[axis] < 2:
        raise DegenerateSequenceError(
            f"temporal difference needs at least 2 steps, got {x.shape[axis]}"
        )

    def _backward(g: Array) -> Sequence[Optional[Array]]:
        gm = np.moveaxis(g, axis, 0)
        gx = np.zeros((gm.shape[0] + 1,) + gm.shape[1:])
        gx[1:] += gm
        gx[:-1] -= gm
        return (np.moveaxis(gx, 0, axis),)

    return _result(np.diff(x.data, axis=axis), (x,), _backward, "temporal_difference")


def quantile_mask(x: Tensor, q: float) -> Tensor:
    """Binary mask switching off values below the q-quantile of `x`.

    The threshold is the element at index floor(q * N) of the ascending sort;
    entries strictly below it are 0. The mask is a constant.
    """
    if not 0.0 <= q < 1.0:
        raise ConfigurationError(f"quantile must lie in [0, 1), got {q}")
    flat = np.sort(x.data, axis=None)
    threshold = flat[int(math.floor(q * flat.size))]
    return Tensor((x.data >= threshold).astype(np.float64))


# ---------------------------------------------------------------------------
# Graph and gradients
# ---------------------------------------------------------------------------


class GraphNode(NamedTuple):
    op: str
    inputs: tuple[int, ...]
    output: Tensor


class CompGraph:
    """Computation graph recorded from an output tensor.

    Nodes are stored in topological order: every node's inputs precede it.
    """

    def __init__(self, nodes: list[GraphNode]) -> None:
        self.nodes = nodes
        self._position = {id(node.output): i for i, node in enumerate(nodes)}

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def trace(cls, output: Tensor) -> "CompGraph":
        index: dict[int, int] = {}
        order: list[Tensor] = []
        stack: list[tuple[Tensor, bool]] = [(output, False)]

        # Iterative post-order walk, deep graphs would exceed the recursion limit.
        while len(stack) > 0:
            tensor, expanded = stack.pop()
            if id(tensor) in index:
                continue
            if expanded:
                index[id(tensor)] = len(order)
                order.append(tensor)
                continue
            stack.append((tensor, True))
            for parent in reversed(tensor.parents):
                if id(parent) not in index:
                    stack.append((parent, False))

        nodes = [
            GraphNode(t.op, tuple(index[id(p)] for p in t.parents), t) for t in order
        ]
        return cls(nodes)

    def position(self, tensor: Tensor) -> Optional[int]:
        return self._position.get(id(tensor))

    def first_nonfinite(self) -> Optional[GraphNode]:
        """Return the first node producing a non-finite value from finite inputs."""
        for node in self.nodes:
            if np.all(np.isfinite(node.output.data)):
                continue
            inputs_finite = all(
                np.all(np.isfinite(self.nodes[i].output.data)) for i in node.inputs
            )
            if inputs_finite:
                return node
        return None


def backward(
    loss: Tensor, params: Sequence[Tensor], graph: Optional[CompGraph] = None
) -> list[Array]:
    """Gradients of a scalar `loss` with respect to each of `params`.

    Args:
        loss: scalar tensor.
        params: tensors to differentiate against.
        graph: a graph already traced from `loss`, traced here if None.

    Returns:
        One gradient array per parameter, shaped like the parameter. Parameters
        the loss does not depend on get zeros.

    Raises:
        ContractError: if `loss` holds more than one value.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = CompGraph.trace(loss)

    grads: list[Optional[Array]] = [None] * len(graph)
    grads[-1] = np.ones_like(loss.data)

    for i in range(len(graph) - 1, -1, -1):
        node = graph.nodes[i]
        g = grads[i]
        if g is None or node.output._backward is None:
            continue
        for j, pg in zip(node.inputs, node.output._backward(g)):
            if pg is None:
                continue
            current = grads[j]
            grads[j] = pg if current is None else current + pg

    result: list[Array] = []
    for p in params:
        pos = graph.position(p)
        g = grads[pos] if pos is not None else None
        result.append(np.zeros_like(p.data) if g is None else np.asarray(g))
    return result
