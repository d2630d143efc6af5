"""Reverse-mode automatic differentiation on a flat tape of dense float64 arrays.

Nodes are referenced by integer ids. Every forward value is computed eagerly
when the op is recorded, and ``backward`` walks the tape in decreasing id
order. ``detach`` nodes pass their value through but block gradient flow.

Detach points also remember the value they observed. Passing those values back
in as ``frozen`` makes a new tape reuse them, which is how ``grad_check`` holds
stop-gradient quantities fixed while it perturbs leaves.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


class ShapeError(ValueError):
    pass


class UnknownOpError(ValueError):
    pass


@dataclass
class TapeNode:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    grad: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _elementwise_shape(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _check_matmul(a, b):
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} and {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} and {b.shape}")


def _matmul_backward(g, out, ins, attrs):
    a, b = ins
    if a.ndim == 1 and b.ndim == 1:
        return [g * b, g * a]
    if a.ndim == 1:
        return [b @ g, np.outer(a, g)]
    if b.ndim == 1:
        return [np.outer(g, b), a.T @ g]
    return [g @ b.T, a.T @ g]


def _slice_backward(g, out, ins, attrs):
    full = np.zeros_like(ins[0])
    full[attrs["index"]] = g
    return [full]


def _concat_backward(g, out, ins, attrs):
    axis = attrs.get("axis", -1)
    bounds = np.cumsum([x.shape[axis] for x in ins])[:-1]
    return np.split(g, bounds, axis=axis)


def _reduce_backward(g, x, axis, scale):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g * scale, x.shape).copy()


def _mean_backward(g, out, ins, attrs):
    x = ins[0]
    axis = attrs.get("axis")
    n = x.size if axis is None else x.shape[axis]
    return [_reduce_backward(g, x, axis, 1.0 / n)]


def _sum_backward(g, out, ins, attrs):
    return [_reduce_backward(g, ins[0], attrs.get("axis"), 1.0)]


# op -> (forward(values, attrs), backward(g, out, input values, attrs) -> per-input grads)
_OPS: dict[str, tuple[Callable, Callable | None]] = {
    "add": (lambda v, at: v[0] + v[1],
            lambda g, o, v, at: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)]),
    "sub": (lambda v, at: v[0] - v[1],
            lambda g, o, v, at: [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)]),
    "mul": (lambda v, at: v[0] * v[1],
            lambda g, o, v, at: [_unbroadcast(g * v[1], v[0].shape),
                                 _unbroadcast(g * v[0], v[1].shape)]),
    "matmul": (lambda v, at: v[0] @ v[1], _matmul_backward),
    "transpose": (lambda v, at: v[0].T, lambda g, o, v, at: [g.T]),
    "concat": (lambda v, at: np.concatenate(v, axis=at.get("axis", -1)), _concat_backward),
    "relu": (lambda v, at: np.maximum(v[0], 0.0), lambda g, o, v, at: [g * (v[0] > 0.0)]),
    "sigmoid": (lambda v, at: _sigmoid(v[0]), lambda g, o, v, at: [g * o * (1.0 - o)]),
    "tanh": (lambda v, at: np.tanh(v[0]), lambda g, o, v, at: [g * (1.0 - o * o)]),
    "log": (lambda v, at: np.log(v[0]), lambda g, o, v, at: [g / v[0]]),
    "square": (lambda v, at: v[0] * v[0], lambda g, o, v, at: [2.0 * g * v[0]]),
    "mean": (lambda v, at: np.mean(v[0], axis=at.get("axis")), _mean_backward),
    "sum": (lambda v, at: np.sum(v[0], axis=at.get("axis")), _sum_backward),
    "scalar_mul": (lambda v, at: at["c"] * v[0], lambda g, o, v, at: [at["c"] * g]),
    "slice": (lambda v, at: v[0][at["index"]], _slice_backward),
    "reshape": (lambda v, at: v[0].reshape(at["shape"]),
                lambda g, o, v, at: [g.reshape(v[0].shape)]),
    # gradient passes only strictly above the floor
    "clamp": (lambda v, at: np.maximum(v[0], at["lo"]),
              lambda g, o, v, at: [g * (v[0] > at["lo"])]),
}

LEAF_OPS = ("input", "const")
OP_KINDS = frozenset(_OPS) | frozenset(LEAF_OPS) | {"detach"}

# "-" in the op names used elsewhere maps onto the tape's identifiers
_ALIASES = {"elemwise-mul": "mul", "scalar-mul": "scalar_mul"}


class Tape:
    """A single-threaded computation record.

    Parameters
    ----------
    frozen : sequence of arrays, optional
        Values to substitute at detach points, in the order detach is called.
    """

    def __init__(self, frozen=None):
        self.ops: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.attrs: list[dict] = []
        self.detached: set[int] = set()
        self.grads: list[np.ndarray | None] = []
        self.frozen_values: list[np.ndarray] = []
        self._frozen = list(frozen) if frozen is not None else None
        self._transposes: dict[int, int] = {}

    def __len__(self):
        return len(self.ops)

    def _append(self, op, inputs, value, attrs):
        self.ops.append(op)
        self.inputs.append(inputs)
        self.values.append(value)
        self.attrs.append(attrs)
        return len(self.ops) - 1

    def _check(self, ids):
        n = len(self.ops)
        for i in ids:
            if not (0 <= i < n):
                raise KeyError(f"unknown node id {i}")

    def record(self, op: str, inputs=(), **attrs) -> int:
        op = _ALIASES.get(op, op)
        if op in LEAF_OPS:
            return self._leaf(op, attrs["value"])
        if op == "detach":
            (x,) = inputs
            return self.detach(x)
        if op not in _OPS:
            raise UnknownOpError(f"unknown op kind {op!r}")
        inputs = tuple(inputs)
        self._check(inputs)
        vals = [self.values[i] for i in inputs]
        if op in ("add", "sub", "mul"):
            _elementwise_shape(op, *vals)
        elif op == "matmul":
            _check_matmul(*vals)
        elif op == "concat":
            axis = attrs.get("axis", -1)
            ref = list(vals[0].shape)
            for v in vals[1:]:
                other = list(v.shape)
                if len(other) != len(ref):
                    raise ShapeError(f"concat: rank mismatch {vals[0].shape} and {v.shape}")
                other[axis] = ref[axis]
                if other != ref:
                    raise ShapeError(f"concat: incompatible shapes {vals[0].shape} and {v.shape}")
        forward = _OPS[op][0]
        value = np.asarray(forward(vals, attrs), dtype=np.float64)
        return self._append(op, inputs, value, attrs)

    def _leaf(self, op, value):
        value = np.array(value, dtype=np.float64)
        return self._append(op, (), value, {})

    # convenience constructors ------------------------------------------------

    def input(self, value) -> int:
        return self._leaf("input", value)

    def constant(self, value) -> int:
        return self._leaf("const", value)

    def detach(self, x: int) -> int:
        self._check((x,))
        if self._frozen is not None:
            k = len(self.frozen_values)
            value = np.array(self._frozen[k], dtype=np.float64)
            if value.shape != self.values[x].shape:
                raise ShapeError(f"detach: frozen value {value.shape} vs node {self.values[x].shape}")
        else:
            value = self.values[x]
        self.frozen_values.append(value)
        node = self._append("detach", (x,), value, {})
        self.detached.add(node)
        return node

    def add(self, a, b):
        return self.record("add", (a, b))

    def sub(self, a, b):
        return self.record("sub", (a, b))

    def mul(self, a, b):
        return self.record("mul", (a, b))

    def matmul(self, a, b):
        return self.record("matmul", (a, b))

    def transpose(self, a):
        # parameters are transposed many times per tape; reuse the node
        if a not in self._transposes:
            self._transposes[a] = self.record("transpose", (a,))
        return self._transposes[a]

    def concat(self, xs, axis=-1):
        return self.record("concat", tuple(xs), axis=axis)

    def relu(self, x):
        return self.record("relu", (x,))

    def sigmoid(self, x):
        return self.record("sigmoid", (x,))

    def tanh(self, x):
        return self.record("tanh", (x,))

    def log(self, x):
        return self.record("log", (x,))

    def square(self, x):
        return self.record("square", (x,))

    def mean(self, x, axis=None):
        return self.record("mean", (x,), axis=axis)

    def sum(self, x, axis=None):
        return self.record("sum", (x,), axis=axis)

    def scalar_mul(self, x, c):
        return self.record("scalar_mul", (x,), c=float(c))

    def slice(self, x, index):
        return self.record("slice", (x,), index=index)

    def reshape(self, x, shape):
        return self.record("reshape", (x,), shape=tuple(shape))

    def clamp(self, x, lo):
        return self.record("clamp", (x,), lo=float(lo))

    # inspection ---------------------------------------------------------------

    def value(self, x: int) -> np.ndarray:
        return self.values[x]

    def grad(self, x: int) -> np.ndarray:
        g = self.grads[x] if x < len(self.grads) else None
        return np.zeros_like(self.values[x]) if g is None else g

    def node(self, x: int) -> TapeNode:
        self._check((x,))
        return TapeNode(x, self.ops[x], self.inputs[x], self.values[x], self.grad(x))

    def leaves(self) -> list[int]:
        return [i for i, op in enumerate(self.ops) if op == "input"]

    # reverse pass -------------------------------------------------------------

    def backward(self, root: int) -> dict[int, np.ndarray]:
        """Propagate d(root)/d(node) to every node; return the grads of input leaves."""
        self._check((root,))
        if self.values[root].size != 1 or self.values[root].ndim > 1:
            raise ShapeError(f"backward: root must be scalar, got shape {self.values[root].shape}")
        grads: list[np.ndarray | None] = [None] * len(self.ops)
        grads[root] = np.ones_like(self.values[root])
        for i in range(root, -1, -1):
            g = grads[i]
            op = self.ops[i]
            if g is None or op in LEAF_OPS or i in self.detached:
                continue
            ins = self.inputs[i]
            in_grads = _OPS[op][1](g, self.values[i], [self.values[j] for j in ins], self.attrs[i])
            for j, gj in zip(ins, in_grads):
                grads[j] = gj if grads[j] is None else grads[j] + gj
        self.grads = grads
        return {i: self.grad(i) for i in self.leaves()}


def grad_check(forward_builder: Callable[[Tape, Mapping[str, int]], int],
               leaf_values: Mapping[str, np.ndarray],
               step: float = 1e-5,
               entries: Mapping[str, np.ndarray] | None = None,
               floor: float = 1.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``forward_builder(tape, ids)`` must rebuild the same graph from the leaves
    named in ``ids`` and return a scalar root. Detached values seen in the
    unperturbed pass are replayed in the perturbed ones, so stop-gradient
    paths stay constant. ``entries`` optionally restricts the check to given
    flat indices per leaf. The error of each entry is scaled by
    ``max(floor, |analytic|)``; a small ``floor`` makes the check purely relative.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in leaf_values.items()}

    def run(values, frozen=None):
        tape = Tape(frozen=frozen)
        ids = {k: tape.input(v) for k, v in values.items()}
        root = forward_builder(tape, ids)
        return tape, ids, root

    tape, ids, root = run(base)
    leaf_grads = tape.backward(root)
    frozen = tape.frozen_values
    worst = 0.0
    for name, value in base.items():
        analytic = leaf_grads[ids[name]].ravel()
        idx = range(value.size) if entries is None or name not in entries else entries[name]
        for k in idx:
            plus = {**base, name: value.copy()}
            plus[name].flat[k] += step
            minus = {**base, name: value.copy()}
            minus[name].flat[k] -= step
            tp, _, rp = run(plus, frozen)
            tm, _, rm = run(minus, frozen)
            numeric = (float(tp.values[rp].sum()) - float(tm.values[rm].sum())) / (2.0 * step)
            err = abs(analytic[k] - numeric) / max(floor, abs(analytic[k]))
            worst = max(worst, err)
    return worst
