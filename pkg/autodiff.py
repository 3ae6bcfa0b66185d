"""
Reverse-mode automatic differentiation over numpy arrays.

A Tape records every operation as a Value node in creation order. Payloads are
numpy arrays (0-d for scalars), so a whole batch of frames or a weight matrix
is a single node. backward() walks the tape in reverse and accumulates
gradients additively into each node's grad.

Every functional op in this module also accepts plain numpy inputs and then
simply returns numpy, which lets kinematics and metrics run the exact same
code with or without a tape.
"""
import logging
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from errors import ConfigurationError, DegeneratePointError, EvaluationError, UsageError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _has_index_array(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


class OpRule(NamedTuple):
    forward: Optional[Callable]
    backward: Optional[Callable]


def _matmul_backward(g, xs, out, attrs):
    a, b = xs
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _sum_forward(xs, attrs):
    return np.sum(xs[0], axis=attrs.get("axis"))


def _sum_backward(g, xs, out, attrs):
    axis = attrs.get("axis")
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, xs[0].shape),)


def _concat_backward(g, xs, out, attrs):
    axis = attrs["axis"]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


def _getitem_backward(g, xs, out, attrs):
    key = attrs["key"]
    grad = np.zeros_like(xs[0])
    if _has_index_array(key):
        np.add.at(grad, key, g)
    else:
        grad[key] += g
    return (grad,)


def _segment_sum_forward(xs, attrs):
    axis = attrs["axis"]
    moved = np.moveaxis(xs[0], axis, 0)
    out = np.zeros((attrs["n"],) + moved.shape[1:])
    np.add.at(out, attrs["ids"], moved)
    return np.moveaxis(out, 0, axis)


def _segment_sum_backward(g, xs, out, attrs):
    axis = attrs["axis"]
    moved = np.moveaxis(g, axis, 0)[attrs["ids"]]
    return (np.moveaxis(moved, 0, axis),)


def _sigmoid(x):
    # stable for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


OPS: Dict[str, OpRule] = {
    "const": OpRule(None, None),
    "var": OpRule(None, None),
    "add": OpRule(lambda xs, a: xs[0] + xs[1],
                  lambda g, xs, o, a: (_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape))),
    "sub": OpRule(lambda xs, a: xs[0] - xs[1],
                  lambda g, xs, o, a: (_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape))),
    "mul": OpRule(lambda xs, a: xs[0] * xs[1],
                  lambda g, xs, o, a: (_unbroadcast(g * xs[1], xs[0].shape),
                                       _unbroadcast(g * xs[0], xs[1].shape))),
    "div": OpRule(lambda xs, a: xs[0] / xs[1],
                  lambda g, xs, o, a: (_unbroadcast(g / xs[1], xs[0].shape),
                                       _unbroadcast(-g * xs[0] / xs[1] ** 2, xs[1].shape))),
    "neg": OpRule(lambda xs, a: -xs[0], lambda g, xs, o, a: (-g,)),
    "sum": OpRule(_sum_forward, _sum_backward),
    "matmul": OpRule(lambda xs, a: np.matmul(xs[0], xs[1]), _matmul_backward),
    "tanh": OpRule(lambda xs, a: np.tanh(xs[0]), lambda g, xs, o, a: (g * (1.0 - o * o),)),
    "leaky_relu": OpRule(
        lambda xs, a: np.where(xs[0] >= 0, xs[0], a["slope"] * xs[0]),
        lambda g, xs, o, a: (g * np.where(xs[0] >= 0, 1.0, a["slope"]),)),
    "relu": OpRule(lambda xs, a: np.where(xs[0] >= 0, xs[0], 0.0),
                   lambda g, xs, o, a: (g * (xs[0] >= 0),)),
    "sigmoid": OpRule(lambda xs, a: _sigmoid(xs[0]), lambda g, xs, o, a: (g * o * (1.0 - o),)),
    "exp": OpRule(lambda xs, a: np.exp(xs[0]), lambda g, xs, o, a: (g * o,)),
    "square": OpRule(lambda xs, a: xs[0] * xs[0], lambda g, xs, o, a: (2.0 * g * xs[0],)),
    "sqrt": OpRule(lambda xs, a: np.sqrt(xs[0]), lambda g, xs, o, a: (0.5 * g / o,)),
    "sin": OpRule(lambda xs, a: np.sin(xs[0]), lambda g, xs, o, a: (g * np.cos(xs[0]),)),
    "cos": OpRule(lambda xs, a: np.cos(xs[0]), lambda g, xs, o, a: (-g * np.sin(xs[0]),)),
    # kinks take the right-hand subgradient
    "min": OpRule(lambda xs, a: np.minimum(xs[0], a["c"]),
                  lambda g, xs, o, a: (g * (xs[0] < a["c"]),)),
    "max": OpRule(lambda xs, a: np.maximum(xs[0], a["c"]),
                  lambda g, xs, o, a: (g * (xs[0] >= a["c"]),)),
    "concat": OpRule(lambda xs, a: np.concatenate(xs, axis=a["axis"]), _concat_backward),
    "getitem": OpRule(lambda xs, a: xs[0][a["key"]], _getitem_backward),
    "reshape": OpRule(lambda xs, a: np.reshape(xs[0], a["shape"]),
                      lambda g, xs, o, a: (np.reshape(g, xs[0].shape),)),
    "transpose": OpRule(lambda xs, a: np.swapaxes(xs[0], -1, -2),
                        lambda g, xs, o, a: (np.swapaxes(g, -1, -2),)),
    "segment_sum": OpRule(_segment_sum_forward, _segment_sum_backward),
}

# kink location of each kinked op, read from the node attrs
_KINKS = {"leaky_relu": lambda a: 0.0, "relu": lambda a: 0.0,
          "min": lambda a: a["c"], "max": lambda a: a["c"]}


class Value:
    """A node on a Tape: an array payload plus the op and parent handles that produced it."""

    __slots__ = ("tape", "id", "payload", "op", "parents", "attrs", "requires_grad", "_grad")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, node_id, payload, op, parents, attrs, requires_grad):
        self.tape = tape
        self.id = node_id
        self.payload = payload
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.requires_grad = requires_grad
        self._grad = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.payload)
        return self._grad

    @property
    def shape(self):
        return self.payload.shape

    @property
    def ndim(self) -> int:
        return self.payload.ndim

    def item(self) -> float:
        return float(self.payload)

    def __repr__(self):
        return f"Value(id={self.id}, op={self.op}, shape={self.payload.shape})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


Handle = Union[int, Value]


class Tape:
    """Append-only record of operations with additive gradient accumulation."""

    def __init__(self):
        self.nodes: List[Value] = []
        self.checkpoints: List[int] = []
        self._kinks: List[tuple] = []

    def __len__(self):
        return len(self.nodes)

    def _resolve(self, handle: Handle) -> Value:
        if isinstance(handle, Value):
            if handle.tape is not self:
                raise UsageError("value belongs to another tape")
            node_id = handle.id
        else:
            node_id = int(handle)
        if node_id < 0 or node_id >= len(self.nodes):
            raise UsageError(f"handle {node_id} out of range (tape has {len(self.nodes)} nodes)")
        node = self.nodes[node_id]
        if isinstance(handle, Value) and node is not handle:
            raise UsageError(f"handle {node_id} was truncated from the tape")
        return node

    def _append(self, op, parents, payload, attrs, requires_grad) -> Value:
        node = Value(self, len(self.nodes), payload, op, parents, attrs, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, data) -> Value:
        return self.record("const", [], value=data)

    def variable(self, data) -> Value:
        return self.record("var", [], value=data)

    def lift(self, x) -> Value:
        """Return x as a node on this tape, recording plain data as a constant."""
        if isinstance(x, Value):
            return self._resolve(x)
        return self.constant(x)

    def record(self, op: str, inputs: Sequence[Handle], value=None, **attrs) -> Value:
        """Append a node for `op` applied to `inputs`; its forward value is computed unless given."""
        rule = OPS.get(op)
        if rule is None:
            raise ConfigurationError(f"unknown op kind '{op}'")
        parents = [self._resolve(h) for h in inputs]
        if op in ("const", "var"):
            if value is None:
                raise UsageError(f"'{op}' node needs a value")
            payload = np.array(value, dtype=float)
            return self._append(op, (), payload, attrs, op == "var")
        if op == "leaky_relu":
            attrs.setdefault("slope", LEAKY_SLOPE)
        xs = [p.payload for p in parents]
        if value is None:
            payload = np.asarray(rule.forward(xs, attrs), dtype=float)
        else:
            payload = np.array(value, dtype=float)
        requires_grad = any(p.requires_grad for p in parents)
        if requires_grad and op in _KINKS and xs[0].size:
            self.note_kink(np.abs(xs[0] - _KINKS[op](attrs)))
        return self._append(op, tuple(p.id for p in parents), payload, attrs, requires_grad)

    def backward(self, root: Handle) -> Dict[int, np.ndarray]:
        """Accumulate d(root)/d(node) into every ancestor of root and return this pass's gradients."""
        root = self._resolve(root)
        adjoints = {root.id: np.ones_like(root.payload)}
        grads = {}
        for node in reversed(self.nodes[:root.id + 1]):
            g = adjoints.pop(node.id, None)
            if g is None:
                continue
            g = np.asarray(g, dtype=float)
            grads[node.id] = g
            node._grad = g.copy() if node._grad is None else node._grad + g
            if not node.parents:
                continue
            xs = [self.nodes[p].payload for p in node.parents]
            parent_grads = OPS[node.op].backward(g, xs, node.payload, node.attrs)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None or not self.nodes[pid].requires_grad:
                    continue
                adjoints[pid] = adjoints[pid] + pg if pid in adjoints else pg
        return grads

    def checkpoint(self) -> int:
        position = len(self.nodes)
        self.checkpoints.append(position)
        return position

    def truncate(self, position: Optional[int] = None) -> None:
        """Drop every node recorded after `position` (default: the latest checkpoint)."""
        if position is None:
            position = self.checkpoints[-1] if self.checkpoints else 0
        if position < 0 or position > len(self.nodes):
            raise UsageError(f"cannot truncate tape of {len(self.nodes)} nodes to {position}")
        del self.nodes[position:]
        self.checkpoints = [c for c in self.checkpoints if c <= position]
        self._kinks = [k for k in self._kinks if k[0] < position]

    def reset_grads(self) -> None:
        for node in self.nodes:
            node._grad = None

    def note_kink(self, margin) -> None:
        """Remember how far an input sits from a non-differentiable point."""
        margin = np.asarray(margin, dtype=float)
        if margin.size:
            self._kinks.append((len(self.nodes), float(np.min(margin))))

    def kink_distance(self) -> float:
        if not self._kinks:
            return float("inf")
        return min(k[1] for k in self._kinks)


def _tape_of(args) -> Optional[Tape]:
    tape = None
    for a in args:
        if isinstance(a, Value):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise UsageError("operands live on different tapes")
    return tape


def _apply(op: str, args, **attrs):
    tape = _tape_of(args)
    if tape is None:
        if op == "leaky_relu":
            attrs.setdefault("slope", LEAKY_SLOPE)
        xs = [np.asarray(a, dtype=float) for a in args]
        return np.asarray(OPS[op].forward(xs, attrs), dtype=float)
    return tape.record(op, [tape.lift(a) for a in args], **attrs)


def payload(x) -> np.ndarray:
    """The numeric array behind a Value, or x itself as an array."""
    if isinstance(x, Value):
        return x.payload
    return np.asarray(x, dtype=float)


def add(a, b):
    return _apply("add", (a, b))


def sub(a, b):
    return _apply("sub", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def div(a, b):
    return _apply("div", (a, b))


def neg(x):
    return _apply("neg", (x,))


def matmul(a, b):
    if payload(a).ndim < 2 or payload(b).ndim < 2:
        raise UsageError("matmul operands need at least two dimensions")
    return _apply("matmul", (a, b))


def tanh(x):
    return _apply("tanh", (x,))


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    return _apply("leaky_relu", (x,), slope=slope)


def relu(x):
    return _apply("relu", (x,))


def sigmoid(x):
    return _apply("sigmoid", (x,))


def exp(x):
    return _apply("exp", (x,))


def square(x):
    return _apply("square", (x,))


def sqrt(x):
    return _apply("sqrt", (x,))


def sin(x):
    return _apply("sin", (x,))


def cos(x):
    return _apply("cos", (x,))


def minimum(x, c: float):
    return _apply("min", (x,), c=float(c))


def maximum(x, c: float):
    return _apply("max", (x,), c=float(c))


def reduce_sum(x, axis=None):
    return _apply("sum", (x,), axis=axis)


def concat(xs: Sequence, axis: int = -1):
    return _apply("concat", tuple(xs), axis=axis)


def take(x, key):
    return _apply("getitem", (x,), key=key)


def reshape(x, shape):
    return _apply("reshape", (x,), shape=tuple(shape))


def swap_last(x):
    return _apply("transpose", (x,))


def segment_sum(x, ids, n: int, axis: int = 0):
    """Scatter-add slices of x along `axis` into `n` buckets given by `ids`."""
    return _apply("segment_sum", (x,), ids=np.asarray(ids, dtype=int), n=int(n), axis=axis)


ACTIVATIONS = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
}


def activation(name: str) -> Callable:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigurationError(f"unknown activation '{name}' (expected one of {sorted(ACTIVATIONS)})")


def _evaluate_at(f: Callable, point: np.ndarray, coordinate: int) -> float:
    tape = Tape()
    out = payload(f(tape.constant(point)))
    if out.size != 1:
        raise UsageError("gradient check needs a scalar-valued function")
    value = float(out)
    if not np.isfinite(value):
        raise EvaluationError("non-finite function value during gradient check", coordinate)
    return value


def check_gradient(f: Callable[[Value], Value], point, h: float = 1e-5,
                   min_grad: float = 0.0, kink_margin: Optional[float] = None) -> float:
    """Compare reverse-mode gradients of a scalar function against central differences.

    Args:
        f: function taking a Value (the point, on a fresh tape) and returning a scalar Value
        point: parameter array
        h: finite-difference step
        min_grad: when positive, coordinates whose finite-difference gradient is below
            max(min_grad, roundoff floor) are not compared
        kink_margin: when given, raise DegeneratePointError if any kinked input lies
            closer than this to its kink

    Returns:
        float: max over coordinates of |g_ad - g_fd| / (|g_fd| + 1e-8)
    """
    if h <= 0:
        raise UsageError("finite-difference step must be positive")
    point = np.array(point, dtype=float)
    tape = Tape()
    x = tape.variable(point)
    y = f(x)
    if not isinstance(y, Value) or y.payload.size != 1:
        raise UsageError("gradient check needs a scalar-valued function of the point")
    f0 = float(y.payload)
    if not np.isfinite(f0):
        raise EvaluationError("non-finite function value at the base point")
    if kink_margin is not None and tape.kink_distance() < kink_margin:
        raise DegeneratePointError(
            f"point within {tape.kink_distance():.3g} of a kink (margin {kink_margin:.3g})")
    tape.backward(y)
    g_ad = x.grad.ravel()

    flat = point.ravel()
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        f_plus = _evaluate_at(f, plus.reshape(point.shape), i)
        f_minus = _evaluate_at(f, minus.reshape(point.shape), i)
        g_fd[i] = (f_plus - f_minus) / (2.0 * h)

    mask = np.ones(flat.size, dtype=bool)
    if min_grad > 0:
        floor = max(min_grad, 1e6 * np.finfo(float).eps * max(1.0, abs(f0)) / h)
        mask = np.abs(g_fd) >= floor
    if not mask.any():
        return 0.0
    errors = np.abs(g_ad - g_fd)[mask] / (np.abs(g_fd)[mask] + 1e-8)
    worst = float(np.max(errors))
    logger.debug(f"gradient check over {int(mask.sum())}/{flat.size} coordinates: max relative error {worst:.3e}")
    return worst
