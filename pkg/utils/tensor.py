# acrkn/utils/tensor.py
"""
Small reverse-mode differentiation engine on top of numpy.

Every public operation goes through `apply_primitive`, which computes the
value in float64, rejects non-finite results and, when a Graph is active,
records the application so that `backward` can walk it in reverse.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from domain.errors import NumericsError

logger = logging.getLogger(__name__)


class Tensor:
    __slots__ = ("value", "requires_grad", "node", "name")

    def __init__(self, value: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: Optional["Node"] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise NumericsError(f"item() needs a single value, got shape {self.value.shape}")
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{label})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """
    Trainable leaf. `grad` accumulates across backward calls until zeroed.
    `mask` (same shape, 0/1) marks entries that are structurally zero.
    """
    __slots__ = ("grad", "mask")

    def __init__(self, value: Any, name: str, mask: Optional[np.ndarray] = None):
        super().__init__(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)
        self.mask = None if mask is None else np.asarray(mask, dtype=np.float64)
        if self.mask is not None:
            if self.mask.shape != self.value.shape:
                raise NumericsError(f"Mask shape {self.mask.shape} != parameter shape {self.value.shape} for {name}")
            self.value *= self.mask

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def as_tensor(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# ---------- Graph ----------

@dataclass(eq=False)
class Node:
    index: int
    kind: str
    inputs: Tuple[Tensor, ...]
    attrs: Dict[str, Any]
    output: Tensor


class Graph:
    """
    Topologically ordered record of primitive applications.
    Use as a context manager to make it the active graph.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: Tuple[Tensor, ...], attrs: Dict[str, Any], output: Tensor) -> Node:
        node = Node(index=len(self.nodes), kind=kind, inputs=inputs, attrs=attrs, output=output)
        self.nodes.append(node)
        return node

    def replay(self) -> List[np.ndarray]:
        """Re-run every node from the current leaf values; returns the outputs in node order."""
        values: Dict[int, np.ndarray] = {}
        outputs: List[np.ndarray] = []
        for node in self.nodes:
            in_vals = [values.get(id(t), t.value) for t in node.inputs]
            with np.errstate(all="ignore"):
                out = np.asarray(PRIMITIVES[node.kind].forward(*in_vals, **node.attrs), dtype=np.float64)
            values[id(node.output)] = out
            outputs.append(out)
        return outputs

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> List[Optional[Graph]]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_graph() -> Optional[Graph]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_graph() -> Iterator[None]:
    """Evaluate without recording, even inside an active Graph."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


# ---------- primitives ----------

@dataclass(frozen=True)
class Primitive:
    kind: str
    forward: Callable[..., np.ndarray]
    backward: Callable[[Node, np.ndarray], Sequence[Optional[np.ndarray]]]


PRIMITIVES: Dict[str, Primitive] = {}


def _register(kind: str, forward: Callable[..., np.ndarray], backward: Callable[[Node, np.ndarray], Sequence]) -> None:
    PRIMITIVES[kind] = Primitive(kind=kind, forward=forward, backward=backward)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _div_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.any(b == 0.0):
        raise NumericsError("divide: divisor contains zeros")
    return a / b


def _softmax_forward(a: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return shifted / np.sum(shifted, axis=axis, keepdims=True)


def _softmax_backward(node: Node, g: np.ndarray):
    s = node.output.value
    axis = node.attrs.get("axis", -1)
    return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)


def _elu_plus_one_forward(a: np.ndarray) -> np.ndarray:
    return np.where(a >= 0.0, a + 1.0, np.exp(np.minimum(a, 0.0)))


def _elu_plus_one_backward(node: Node, g: np.ndarray):
    a = node.inputs[0].value
    return (g * np.where(a >= 0.0, 1.0, np.exp(np.minimum(a, 0.0))),)


def _sqrt_backward(node: Node, g: np.ndarray):
    out = node.output.value
    safe = np.where(out > 0.0, out, 1.0)
    return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)


def _matvec_forward(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.matmul(a, x[..., None])[..., 0]


def _matvec_backward(node: Node, g: np.ndarray):
    a, x = node.inputs[0].value, node.inputs[1].value
    return g[..., :, None] * x[..., None, :], np.matmul(_swap(a), g[..., None])[..., 0]


def _concat_backward(node: Node, g: np.ndarray):
    axis = node.attrs.get("axis", -1)
    sizes = [t.value.shape[axis] for t in node.inputs]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _take_forward(a: np.ndarray, start: int, stop: int, axis: int = -1) -> np.ndarray:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return a[tuple(index)]


def _take_backward(node: Node, g: np.ndarray):
    a = node.inputs[0].value
    out = np.zeros_like(a)
    index = [slice(None)] * a.ndim
    index[node.attrs.get("axis", -1)] = slice(node.attrs["start"], node.attrs["stop"])
    out[tuple(index)] = g
    return (out,)


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
    return np.broadcast_to(g, shape)


def _sum_backward(node: Node, g: np.ndarray):
    a = node.inputs[0].value
    return (_expand_reduced(g, a.shape, node.attrs.get("axis"), node.attrs.get("keepdims", False)).copy(),)


def _mean_backward(node: Node, g: np.ndarray):
    a = node.inputs[0].value
    count = a.size / max(node.output.value.size, 1)
    return (_expand_reduced(g, a.shape, node.attrs.get("axis"), node.attrs.get("keepdims", False)) / count,)


def _diag_embed_forward(a: np.ndarray) -> np.ndarray:
    return a[..., :, None] * np.eye(a.shape[-1])


def _diagonal_indices(n_rows: int, n_cols: int, offset: int) -> Tuple[np.ndarray, np.ndarray]:
    length = min(n_rows, n_cols - offset) if offset >= 0 else min(n_rows + offset, n_cols)
    i = np.arange(length)
    return (i, i + offset) if offset >= 0 else (i - offset, i)


def _diagonal_forward(a: np.ndarray, offset: int = 0) -> np.ndarray:
    rows, cols = _diagonal_indices(a.shape[-2], a.shape[-1], offset)
    return a[..., rows, cols]


def _diagonal_backward(node: Node, g: np.ndarray):
    a = node.inputs[0].value
    rows, cols = _diagonal_indices(a.shape[-2], a.shape[-1], node.attrs.get("offset", 0))
    out = np.zeros_like(a)
    out[..., rows, cols] = g
    return (out,)


def _select_backward(node: Node, g: np.ndarray):
    cond = node.attrs["cond"]
    return np.where(cond, g, 0.0), np.where(cond, 0.0, g)


def _clamp_abs_forward(x: np.ndarray, bound: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.minimum(np.abs(x), bound)


def _clamp_abs_backward(node: Node, g: np.ndarray):
    x, bound = node.inputs[0].value, node.inputs[1].value
    clamped = np.abs(x) > bound
    return np.where(clamped, 0.0, g), np.where(clamped, g * np.sign(x), 0.0)


_register("add", lambda a, b: a + b, lambda n, g: (g, g))
_register("sub", lambda a, b: a - b, lambda n, g: (g, -g))
_register("mul", lambda a, b: a * b, lambda n, g: (g * n.inputs[1].value, g * n.inputs[0].value))
_register("div", _div_forward,
          lambda n, g: (g / n.inputs[1].value, -g * n.inputs[0].value / n.inputs[1].value ** 2))
_register("neg", lambda a: -a, lambda n, g: (-g,))
_register("exp", np.exp, lambda n, g: (g * n.output.value,))
_register("log", np.log, lambda n, g: (g / n.inputs[0].value,))
_register("sqrt", np.sqrt, _sqrt_backward)
_register("relu", lambda a: np.maximum(a, 0.0), lambda n, g: (g * (n.inputs[0].value > 0.0),))
_register("elu_plus_one", _elu_plus_one_forward, _elu_plus_one_backward)
_register("softmax", _softmax_forward, _softmax_backward)
_register("matmul", np.matmul,
          lambda n, g: (np.matmul(g, _swap(n.inputs[1].value)), np.matmul(_swap(n.inputs[0].value), g)))
_register("matvec", _matvec_forward, _matvec_backward)
_register("concat", lambda *xs, axis=-1: np.concatenate(xs, axis=axis), _concat_backward)
_register("take", _take_forward, _take_backward)
_register("sum", lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims), _sum_backward)
_register("mean", lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims), _mean_backward)
_register("reshape", lambda a, shape: np.reshape(a, shape), lambda n, g: (g.reshape(n.inputs[0].value.shape),))
_register("transpose", _swap, lambda n, g: (_swap(g),))
_register("diag_embed", _diag_embed_forward,
          lambda n, g: (np.diagonal(g, axis1=-2, axis2=-1).copy(),))
_register("diagonal", _diagonal_forward, _diagonal_backward)
_register("select", lambda a, b, cond: np.where(cond, a, b), _select_backward)
_register("clamp_abs", _clamp_abs_forward, _clamp_abs_backward)


def apply_primitive(kind: str, inputs: Sequence[Any], **attrs) -> Tensor:
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise NumericsError(f"Unknown primitive: {kind}")

    tensors = tuple(as_tensor(x) for x in inputs)
    try:
        with np.errstate(all="ignore"):
            value = np.asarray(prim.forward(*(t.value for t in tensors), **attrs), dtype=np.float64)
    except ValueError as e:
        shapes = ", ".join(str(t.value.shape) for t in tensors)
        raise NumericsError(f"{kind}: shape mismatch ({shapes}): {e}") from e

    if not np.all(np.isfinite(value)):
        logger.debug("Non-finite output from %s with input shapes %s", kind, [t.value.shape for t in tensors])
        raise NumericsError(f"{kind} produced non-finite values")

    out = Tensor(value, requires_grad=any(t.requires_grad for t in tensors))
    graph = active_graph()
    if graph is not None:
        out.node = graph.record(kind, tensors, attrs, out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(graph: Graph, loss: Tensor) -> Dict[str, np.ndarray]:
    """
    Accumulate d(loss)/d(param) into every reachable Parameter's `grad`.
    Returns the gradients contributed by this call, keyed by parameter name.
    The graph is left intact.
    """
    if loss.value.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.value.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    reached: Dict[int, Parameter] = {}
    if isinstance(loss, Parameter):
        reached[id(loss)] = loss

    stop = loss.node.index if loss.node is not None and loss.node.index < len(graph.nodes) \
        and graph.nodes[loss.node.index] is loss.node else -1

    for node in reversed(graph.nodes[: stop + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = PRIMITIVES[node.kind].backward(node, g)
        for t, tg in zip(node.inputs, input_grads):
            if tg is None or not t.requires_grad:
                continue
            tg = _unbroadcast(np.asarray(tg, dtype=np.float64), t.value.shape)
            key = id(t)
            grads[key] = grads[key] + tg if key in grads else tg
            if isinstance(t, Parameter):
                reached[key] = t

    result: Dict[str, np.ndarray] = {}
    for key, param in reached.items():
        g = grads[key]
        if param.mask is not None:
            g = g * param.mask
        param.grad += g
        result[param.name] = g
    return result


# ---------- functional wrappers ----------

def add(a, b) -> Tensor:
    return apply_primitive("add", (a, b))


def sub(a, b) -> Tensor:
    return apply_primitive("sub", (a, b))


def mul(a, b) -> Tensor:
    return apply_primitive("mul", (a, b))


def div(a, b) -> Tensor:
    return apply_primitive("div", (a, b))


def neg(a) -> Tensor:
    return apply_primitive("neg", (a,))


def exp(a) -> Tensor:
    return apply_primitive("exp", (a,))


def log(a) -> Tensor:
    return apply_primitive("log", (a,))


def sqrt(a) -> Tensor:
    return apply_primitive("sqrt", (a,))


def relu(a) -> Tensor:
    return apply_primitive("relu", (a,))


def elu_plus_one(a) -> Tensor:
    return apply_primitive("elu_plus_one", (a,))


def softmax(a, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", (a,), axis=axis)


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", (a, b))


def matvec(a, x) -> Tensor:
    return apply_primitive("matvec", (a, x))


def concat(tensors: Sequence[Any], axis: int = -1) -> Tensor:
    return apply_primitive("concat", tuple(tensors), axis=axis)


def take(a, start: int, stop: int, axis: int = -1) -> Tensor:
    return apply_primitive("take", (a,), start=start, stop=stop, axis=axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", (a,), axis=axis, keepdims=keepdims)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", (a,), axis=axis, keepdims=keepdims)


def reshape(a, shape: Tuple[int, ...]) -> Tensor:
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def transpose(a) -> Tensor:
    return apply_primitive("transpose", (a,))


def diag_embed(a) -> Tensor:
    return apply_primitive("diag_embed", (a,))


def diagonal(a, offset: int = 0) -> Tensor:
    return apply_primitive("diagonal", (a,), offset=offset)


def select(cond: np.ndarray, a, b) -> Tensor:
    return apply_primitive("select", (a, b), cond=np.asarray(cond, dtype=bool))


def clamp_abs(x, bound) -> Tensor:
    return apply_primitive("clamp_abs", (x, bound))
