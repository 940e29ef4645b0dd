"""
Tape-based reverse-mode differentiation over numpy arrays.

Every primitive builds a :class:`Node` that remembers its parents and a vector-Jacobian product closure. Graphs
are built per forward pass, so separate passes on separate threads never share state; :func:`no_grad` is scoped
with a context variable for the same reason.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Optional, Sequence, Union

import black
import graphviz
import numpy as np

from .tensor import ContractError, conv_nd, conv_nd_backward, conv_transpose_nd, conv_transpose_nd_backward, dct_along

__all__ = [
    "Node",
    "Parameter",
    "Module",
    "ArrayLike",
    "VJP",
    "no_grad",
    "grad_enabled",
    "as_node",
    "apply_op",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv",
    "conv_transpose",
    "leaky_relu",
    "sigmoid",
    "silu",
    "softplus",
    "exp",
    "log",
    "softmax",
    "sum_",
    "mean",
    "normalize",
    "reshape",
    "moveaxis",
    "dct",
    "concat",
    "sgd_step",
    "AdamState",
    "adam_step",
    "zero_grad",
    "tape_source",
    "tape_graphviz",
]

# Takes the gradient of the output and returns one gradient (or None) per parent.
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

# Binary primitives which are rendered infix in the tape listing.
INFIX_OPS = {
    "add": "+",
    "sub": "-",
    "mul": "*",
    "div": "/",
    "matmul": "@",
}

_GRAD_ENABLED: ContextVar[bool] = ContextVar("heatseg_grad_enabled", default=True)


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Evaluate without recording the tape.
    """
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@dataclass(eq=False)
class Node:
    """
    A value in the differentiation graph.

    Leaves that require a gradient start with a zeroed ``grad`` of the same shape as ``value``.
    """

    value: np.ndarray
    parents: tuple[Node, ...] = ()
    op: str = "leaf"
    requires_grad: bool = False
    vjp: Optional[VJP] = field(default=None, repr=False)
    grad: Optional[np.ndarray] = field(default=None, repr=False)
    # Keyword arguments of the op, only used when rendering the tape
    attrs: tuple[tuple[str, Any], ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value)
        if self.requires_grad and self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __add__(self, other: ArrayLike) -> Node:
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> Node:
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> Node:
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> Node:
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> Node:
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> Node:
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> Node:
        return div(self, other)

    def __neg__(self) -> Node:
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> Node:
        return matmul(self, other)

    def sum(self, axis: Union[None, int, tuple[int, ...]] = None, keepdims: bool = False) -> Node:
        return sum_(self, axis, keepdims)

    def mean(self, axis: Union[None, int, tuple[int, ...]] = None, keepdims: bool = False) -> Node:
        return mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> Node:
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


@dataclass(eq=False)
class Parameter(Node):
    """
    A trainable leaf, addressed by a dotted path such as ``enc.0.block0.conv1.weight``.
    """

    name: str = ""

    def __post_init__(self) -> None:
        self.requires_grad = True
        super().__post_init__()


class Module:
    """
    Base for layers. Parameters are discovered by walking attributes, lists and dicts of sub-modules.
    """

    def parameters(self) -> list[Parameter]:
        """
        Every parameter reachable from this module, in attribute order. A parameter reachable twice, or two
        parameters sharing a name, is a registration error.
        """
        found: list[Parameter] = []
        seen_ids: set[int] = set()
        seen_names: set[str] = set()
        for param in _walk_parameters(self):
            if id(param) in seen_ids or param.name in seen_names:
                raise ContractError(f"Parameter {param.name!r} is registered more than once")
            seen_ids.add(id(param))
            seen_names.add(param.name)
            found.append(param)
        return found

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())


def _walk_parameters(obj: object) -> Iterator[Parameter]:
    if isinstance(obj, Parameter):
        yield obj
    elif isinstance(obj, Module):
        for value in vars(obj).values():
            yield from _walk_parameters(value)
    elif isinstance(obj, (list, tuple)):
        for value in obj:
            yield from _walk_parameters(value)
    elif isinstance(obj, dict):
        for value in obj.values():
            yield from _walk_parameters(value)


ArrayLike = Union[Node, np.ndarray, float, int]


def as_node(x: ArrayLike) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=np.float64), op="const")


def apply_op(
    value: np.ndarray,
    parents: Sequence[Node],
    op: str,
    vjp: VJP,
    attrs: Iterable[tuple[str, Any]] = (),
) -> Node:
    """
    Wraps the result of a primitive. The tape entry is only kept when some parent needs a gradient.
    """
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), op, True, vjp, attrs=tuple(attrs))
    return Node(value, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """
    Sums ``grad`` down to ``shape``, undoing numpy broadcasting.
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """
    Accumulates d(root)/d(node) into ``grad`` of every reachable node that requires a gradient.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.value, dtype=np.float64)}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node.vjp is None:
            continue
        for parent, parent_grad in zip(node.parents, node.vjp(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad


##
# Pointwise and broadcasting primitives
##


def add(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    return apply_op(
        a.value + b.value,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    return apply_op(
        a.value - b.value,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    return apply_op(
        a.value * b.value,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value / b.value
    return apply_op(
        out,
        (a, b),
        "div",
        lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
    )


def neg(a: ArrayLike) -> Node:
    a = as_node(a)
    return apply_op(-a.value, (a,), "neg", lambda g: (-g,))


def exp(a: ArrayLike) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return apply_op(out, (a,), "exp", lambda g: (g * out,))


def log(a: ArrayLike, floor: float = 1e-12) -> Node:
    """
    Natural log with the input clamped at ``floor``; the clamped region has zero gradient.
    """
    a = as_node(a)
    clamped = np.maximum(a.value, floor)
    return apply_op(
        np.log(clamped),
        (a,),
        "log",
        lambda g: (np.where(a.value > floor, g / clamped, 0.0),),
        (("floor", floor),),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    ez = np.exp(x[~positive])
    out[~positive] = ez / (1.0 + ez)
    return out


def sigmoid(a: ArrayLike) -> Node:
    a = as_node(a)
    out = _sigmoid(a.value)
    return apply_op(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def silu(a: ArrayLike) -> Node:
    a = as_node(a)
    s = _sigmoid(a.value)
    return apply_op(a.value * s, (a,), "silu", lambda g: (g * s * (1.0 + a.value * (1.0 - s)),))


def softplus(a: ArrayLike) -> Node:
    a = as_node(a)
    return apply_op(np.logaddexp(0.0, a.value), (a,), "softplus", lambda g: (g * _sigmoid(a.value),))


def leaky_relu(a: ArrayLike, slope: float = 0.01) -> Node:
    a = as_node(a)
    scale = np.where(a.value > 0, 1.0, slope)
    return apply_op(a.value * scale, (a,), "leaky_relu", lambda g: (g * scale,), (("slope", slope),))


##
# Reductions and normalization
##

Axis = Union[None, int, tuple[int, ...]]


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis: Axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis: Axis = None, keepdims: bool = False) -> Node:
    a = as_node(a)
    return apply_op(
        np.sum(a.value, axis=axis, keepdims=keepdims),
        (a,),
        "sum",
        lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),),
        (("axis", axis),),
    )


def mean(a: ArrayLike, axis: Axis = None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.value.size // max(np.sum(a.value, axis=axis, keepdims=keepdims).size, 1)
    return apply_op(
        np.mean(a.value, axis=axis, keepdims=keepdims),
        (a,),
        "mean",
        lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,),
        (("axis", axis),),
    )


def softmax(a: ArrayLike, axis: int = 1) -> Node:
    a = as_node(a)
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return apply_op(
        out,
        (a,),
        "softmax",
        lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),),
        (("axis", axis),),
    )


def normalize(a: ArrayLike, axes: tuple[int, ...], eps: float = 1e-5) -> Node:
    """
    Zero-mean, unit-variance over ``axes`` (instance norm over spatial axes, layer norm over the feature axis).
    """
    a = as_node(a)
    mu = np.mean(a.value, axis=axes, keepdims=True)
    centered = a.value - mu
    inv_std = 1.0 / np.sqrt(np.mean(centered**2, axis=axes, keepdims=True) + eps)
    xhat = centered * inv_std

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        g_mean = np.mean(g, axis=axes, keepdims=True)
        gx_mean = np.mean(g * xhat, axis=axes, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return apply_op(xhat, (a,), "normalize", vjp, (("axes", axes), ("eps", eps)))


##
# Layout
##


def reshape(a: ArrayLike, shape: Sequence[int]) -> Node:
    a = as_node(a)
    return apply_op(
        a.value.reshape(tuple(shape)),
        (a,),
        "reshape",
        lambda g: (g.reshape(a.shape),),
        (("shape", tuple(shape)),),
    )


def moveaxis(a: ArrayLike, source: int, destination: int) -> Node:
    a = as_node(a)
    return apply_op(
        np.moveaxis(a.value, source, destination),
        (a,),
        "moveaxis",
        lambda g: (np.moveaxis(g, destination, source),),
        (("source", source), ("destination", destination)),
    )


def dct(a: ArrayLike, axes: Sequence[int], inverse: bool = False) -> Node:
    """
    Orthonormal DCT-II (or its inverse) along ``axes``. The transform is orthogonal, so its adjoint is the other
    direction.
    """
    a = as_node(a)
    axes = tuple(axes)
    return apply_op(
        dct_along(a.value, axes, inverse=inverse),
        (a,),
        "dct",
        lambda g: (dct_along(g, axes, inverse=not inverse),),
        (("axes", axes), ("inverse", inverse)),
    )


def concat(nodes: Sequence[ArrayLike], axis: int = 1) -> Node:
    parts = [as_node(n) for n in nodes]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return apply_op(
        np.concatenate([p.value for p in parts], axis=axis),
        parts,
        "concat",
        lambda g: tuple(np.split(g, splits, axis=axis)),
        (("axis", axis),),
    )


##
# Linear maps
##


def matmul(x: ArrayLike, w: ArrayLike) -> Node:
    """
    ``x @ w`` where ``w`` is a matrix acting on the last axis of ``x``.
    """
    x, w = as_node(x), as_node(w)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        flat_x = x.value.reshape(-1, x.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        return g @ w.value.T, flat_x.T @ flat_g

    return apply_op(x.value @ w.value, (x, w), "matmul", vjp)


def _channel_bias(b: np.ndarray, ndim: int) -> np.ndarray:
    return b.reshape((1, -1) + (1,) * (ndim - 2))


def conv(
    x: ArrayLike,
    w: ArrayLike,
    b: Optional[ArrayLike] = None,
    stride: Sequence[int] = (1, 1),
    padding: Sequence[int] = (0, 0),
) -> Node:
    """
    Batched cross-correlation, ``x`` ``(B, Cin, *S)`` and ``w`` ``(Cout, Cin, *K)``, optional per-channel bias.
    """
    x, w = as_node(x), as_node(w)
    stride, padding = tuple(stride), tuple(padding)
    out = conv_nd(x.value, w.value, stride, padding)
    parents = [x, w]
    if b is not None:
        b = as_node(b)
        out = out + _channel_bias(b.value, out.ndim)
        parents.append(b)

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        grads = list(conv_nd_backward(g, x.value, w.value, stride, padding))
        if b is not None:
            grads.append(g.sum(axis=(0, *range(2, g.ndim))))
        return grads

    return apply_op(out, parents, "conv", vjp, (("stride", stride), ("padding", padding)))


def conv_transpose(x: ArrayLike, w: ArrayLike, b: Optional[ArrayLike] = None, stride: Sequence[int] = (2, 2)) -> Node:
    x, w = as_node(x), as_node(w)
    stride = tuple(stride)
    out = conv_transpose_nd(x.value, w.value, stride)
    parents = [x, w]
    if b is not None:
        b = as_node(b)
        out = out + _channel_bias(b.value, out.ndim)
        parents.append(b)

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        grads = list(conv_transpose_nd_backward(g, x.value, w.value, stride))
        if b is not None:
            grads.append(g.sum(axis=(0, *range(2, g.ndim))))
        return grads

    return apply_op(out, parents, "conv_transpose", vjp, (("stride", stride),))


##
# Optimizers
##


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


def sgd_step(params: Sequence[Parameter], lr: float, weight_decay: float = 0.0) -> None:
    """
    ``p <- p - lr * (grad + weight_decay * p)``, then zeroes the gradients.
    """
    for p in params:
        assert p.grad is not None
        p.value = p.value - lr * (p.grad + weight_decay * p.value)
    zero_grad(params)


@dataclass
class AdamState:
    """
    First and second moment estimates, keyed by parameter name.
    """

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Sequence[Parameter],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """
    Bias-corrected Adam. A positive ``weight_decay`` is applied decoupled from the moments (AdamW).
    """
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for p in params:
        assert p.grad is not None
        key = p.name or str(id(p))
        m = state.m.get(key, np.zeros_like(p.value))
        v = state.v.get(key, np.zeros_like(p.value))
        m = beta1 * m + (1.0 - beta1) * p.grad
        v = beta2 * v + (1.0 - beta2) * p.grad**2
        state.m[key], state.v[key] = m, v
        value = p.value
        if weight_decay > 0:
            value = value - lr * weight_decay * value
        p.value = value - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    zero_grad(params)


##
# Tape rendering
##


def _names(order: Sequence[Node]) -> dict[int, str]:
    names: dict[int, str] = {}
    counter = 0
    for node in order:
        if isinstance(node, Parameter) and node.name:
            names[id(node)] = f"params[{node.name!r}]"
        elif node.op in ("leaf", "const"):
            names[id(node)] = f"{'x' if node.requires_grad else 'c'}{counter}"
            counter += 1
        else:
            names[id(node)] = f"v{counter}"
            counter += 1
    return names


def tape_source(root: Node) -> str:
    """
    The recorded graph as straight-line Python, one assignment per primitive, formatted with black.
    """
    order = _topological_order(root)
    names = _names(order)
    lines = []
    for node in order:
        if not node.parents:
            continue
        args = [names[id(p)] for p in node.parents]
        if node.op in INFIX_OPS and len(args) == 2:
            expr = f"{args[0]} {INFIX_OPS[node.op]} {args[1]}"
        else:
            kwargs = [f"{k}={v!r}" for k, v in node.attrs]
            expr = f"{node.op}({', '.join(args + kwargs)})"
        lines.append(f"{names[id(node)]} = {expr}  # {node.shape}")
    return black.format_str("\n".join(lines) + "\n", mode=black.Mode(line_length=120))


def tape_graphviz(root: Node) -> graphviz.Digraph:
    """
    The recorded graph as a graphviz digraph, parameters drawn as boxes.
    """
    order = _topological_order(root)
    names = _names(order)
    graph = graphviz.Digraph()
    for node in order:
        label = names[id(node)] if not node.parents else node.op
        shape = "box" if isinstance(node, Parameter) else "ellipse"
        graph.node(str(id(node)), f"{label}\n{node.shape}", shape=shape)
        for parent in node.parents:
            graph.edge(str(id(parent)), str(id(node)))
    return graph
