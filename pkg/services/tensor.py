"""
Dense tensors with reverse-mode automatic differentiation.

Every primitive returns the forward value together with a vector-Jacobian product closure;
the closure is attached to the output when any input requires a gradient, and the output is
recorded on the active ComputeGraph if one is open.
"""
import logging
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager

import numpy as np

from errors import ShapeError
from schemas import GradCheckReport

logger = logging.getLogger(__name__)

_local = threading.local()
_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    """Process-wide default floating dtype for new tensors; threads without an override use it."""
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return getattr(_local, "dtype", None) or _default_dtype


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Override the default dtype for the current thread only."""
    previous = getattr(_local, "dtype", None)
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class ComputeGraph:
    """
    Tape of the primitive applications of one step, in creation (hence topological) order.
    Open it with a with-block; it is active for the current thread only.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._members: set[int] = set()

    def record(self, tensor: "Tensor") -> None:
        self.nodes.append(tensor)
        self._members.add(id(tensor))

    def __contains__(self, tensor: "Tensor") -> bool:
        return id(tensor) in self._members

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "ComputeGraph":
        stack = getattr(_local, "graphs", None)
        if stack is None:
            stack = _local.graphs = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.graphs.pop()


def _active_graph() -> ComputeGraph | None:
    stack = getattr(_local, "graphs", None)
    return stack[-1] if stack else None


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.number)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.number)):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, vjp: Callable) -> Tensor:
    requires = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires, dtype=data.dtype if np.issubdtype(data.dtype, np.floating) else None)
    if requires:
        out._node = Node(op, inputs, vjp)
        graph = _active_graph()
        if graph is not None:
            graph.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    return grad.reshape(-1, shape[0]).sum(axis=0)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise ShapeError(op, a.shape, b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def vjp(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data
    return _make("matmul", (a, b), np.asarray(out), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim > a.ndim:
        a, b = b, a
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make("add", (a, b), a.data + b.data, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim >= b.ndim:
        _check_broadcast("sub", a, b)
    else:
        _check_broadcast("sub", b, a)

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _make("sub", (a, b), a.data - b.data, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError("mul", a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make("mul", (a, b), a.data * b.data, vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.ndim != 0:
        raise ShapeError("div", a.shape, b.shape)
    out = a.data / b.data

    def vjp(g):
        return g / b.data, _unbroadcast(-g * out / b.data, b.shape)
    return _make("div", (a, b), out, vjp)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return _make("scalar_mul", (a,), a.data * a.data.dtype.type(c), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make("concat", tensors, out, vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data)))).astype(a.data.dtype)
    return _make("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", (a,), a.data * mask, lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make("softmax", (a,), out, vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _make("log_softmax", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    return _make("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def vjp(g):
        expanded = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, a.shape).astype(a.data.dtype),)
    return _make("sum", (a,), out, vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = np.asarray(a.data.mean(axis=axis))

    def vjp(g):
        expanded = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded / count, a.shape).astype(a.data.dtype),)
    return _make("mean", (a,), out, vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
        raise ShapeError("embedding_lookup", table.shape, ids.shape)

    def vjp(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)
    return _make("embedding_lookup", (table,), table.data[ids], vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def vjp(g):
        g_normed = g * gain.data
        g_x = inv_std * (g_normed - g_normed.mean(axis=-1, keepdims=True)
                         - normed * (g_normed * normed).mean(axis=-1, keepdims=True))
        return g_x, _unbroadcast(g * normed, gain.shape), _unbroadcast(g, bias.shape)
    return _make("layer_norm", (x, gain, bias), normed * gain.data + bias.data, vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim > 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", (a,), a.data.T, lambda g: (g.T,))


def slice_(a: Tensor, key) -> Tensor:

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)
    return _make("slice", (a,), np.asarray(a.data[key]), vjp)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError("masked_fill", a.shape, mask.shape)
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return _make("masked_fill", (a,), out, lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def diag(v: Tensor) -> Tensor:
    if v.ndim != 1:
        raise ShapeError("diag", v.shape)
    return _make("diag", (v,), np.diag(v.data), lambda g: (np.diagonal(g).copy(),))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data >= low) & (a.data <= high)
    return _make("clip", (a,), np.clip(a.data, low, high), lambda g: (g * inside,))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div, "scalar_mul": scalar_mul,
    "concat": concat, "sigmoid": sigmoid, "relu": relu, "softmax": softmax, "log_softmax": log_softmax,
    "log": log, "mean": mean, "sum": sum_, "embedding_lookup": embedding_lookup, "layer_norm": layer_norm,
    "transpose": transpose, "slice": slice_, "masked_fill": masked_fill, "sqrt": sqrt, "reshape": reshape,
    "diag": diag, "clip": clip,
}


def apply_primitive(op: str, *inputs, **params) -> Tensor:

    """
    The apply_primitive function applies a named primitive; see PRIMITIVES for the available set.

    :param op: str: Primitive name
    :param inputs: Tensors (and for concat, one sequence of tensors)
    :param params: Primitive options such as axis, key, mask or value
    :return: The output tensor, recorded on the active graph when an input requires a gradient
    """
    if op not in PRIMITIVES:
        raise ValueError(f"unknown primitive {op!r}")
    return PRIMITIVES[op](*inputs, **params)


def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            stack.extend((parent, False) for parent in tensor._node.inputs if id(parent) not in seen)
    return order


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> None:

    """
    The backward function propagates dLoss/dx to every leaf that requires a gradient.
    Gradients accumulate into leaf.grad, so a tensor used twice receives the sum of both paths.

    :param loss: Tensor: A scalar tensor
    :param graph: ComputeGraph | None: The tape to replay; when omitted the graph is rebuilt from loss
    """
    if loss.shape != ():
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires a gradient")
    if graph is not None:
        if loss.is_leaf or loss not in graph:
            raise ValueError("loss is not recorded on the given graph")
        order = graph.nodes[:graph.nodes.index(loss) + 1] if loss is not graph.nodes[-1] else graph.nodes
        leaves = {id(p): p for t in order for p in t._node.inputs if p.is_leaf and p.requires_grad}
        order = list(leaves.values()) + order
    else:
        order = _topological(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for tensor in reversed(order):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.is_leaf:
            tensor.grad = g.astype(tensor.data.dtype) if tensor.grad is None else tensor.grad + g
            continue
        for parent, parent_grad in zip(tensor._node.inputs, tensor._node.vjp(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = np.asarray(parent_grad)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, tol: float = 1e-4, h: float = 1e-5) -> GradCheckReport:

    """
    The grad_check function compares the analytic gradient of a scalar function with central differences.
    The error of each entry is |analytic - numeric| / max(|analytic|, |numeric|, floor), where the floor is
    1e-5 times the largest of |f(x)| and every gradient entry, so gradients of any scale are compared
    relatively and a function with zero gradient passes.

    :param f: Callable[[Tensor], Tensor]: Scalar-valued function of x (may close over other tensors)
    :param x: Tensor: Point of evaluation; it must require a gradient
    :param tol: float: Pass threshold
    :param h: float: Finite-difference step
    :return: A GradCheckReport
    """
    x.grad = None
    out = f(x)
    if out.requires_grad:
        backward(out)
    analytic = np.zeros_like(x.data, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
    numeric = np.zeros_like(analytic)
    with no_grad():
        for index in np.ndindex(x.shape):
            original = x.data[index].copy()
            x.data[index] = original + h
            upper = float(f(x).data)
            x.data[index] = original - h
            lower = float(f(x).data)
            x.data[index] = original
            numeric[index] = (upper - lower) / (2.0 * h)
    scale = max(abs(float(out.data)), float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    floor = max(1e-5 * scale, np.finfo(np.float64).tiny)
    errors = np.abs(analytic - numeric) / np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    worst = float(errors.max()) if errors.size else 0.0
    x.grad = None
    return GradCheckReport(max_rel_error=worst, tol=tol, passed=worst <= tol)


class Module:
    """Container of named parameters; sub-modules and lists of sub-modules are walked recursively."""

    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        found: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                found[f"{prefix}{name}"] = value
            elif isinstance(value, Module):
                found.update(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.update(item.named_parameters(f"{prefix}{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        found[f"{prefix}{name}.{i}"] = item
        return found

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for value in vars(self).values():
            children = value if isinstance(value, (list, tuple)) else [value]
            for child in children:
                if isinstance(child, Module):
                    child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, tensor in self.named_parameters().items():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            if state[name].shape != tensor.shape:
                raise ShapeError(f"load {name}", tensor.shape, state[name].shape)
            tensor.data = np.array(state[name], dtype=tensor.data.dtype)


def parameter(rng: np.random.Generator, shape: tuple[int, ...], scale: float) -> Tensor:
    """A trainable tensor drawn from normal(0, scale)."""
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def zeros_parameter(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_parameter(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) for a vector x, computed as a two-way log-softmax against zero so it never underflows."""
    column = reshape(x, (x.shape[0], 1))
    pair = concat([column, Tensor(np.zeros_like(column.data))], axis=1)
    return log_softmax(pair, axis=1)[:, 0]
