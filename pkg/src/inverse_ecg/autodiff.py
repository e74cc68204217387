"""Reverse-mode automatic differentiation on an append-only tape.

Every node stores an op name, the ids of its inputs and its computed value
(a numpy array; scalars are 0-d arrays).  Because inputs are recorded before
the node that consumes them, node ids are already a topological order.

The vector-Jacobian rules are written once against a tiny generic vocabulary
(arithmetic, ``sum_to``, ``broadcast_to``, ``reshape``, ``transpose``) that
works on plain arrays and on :class:`Var` alike.  Running the backward sweep
on arrays gives numbers (:func:`gradient`); running it on ``Var`` records the
derivative as new tape nodes (:func:`gradient_as_graph`), which can then be
differentiated again.

    >>> tape = Tape()
    >>> x, t = tape.input(2.0), tape.input(3.0)
    >>> u = (2 * x - t).tanh()
    >>> [round(float(g), 4) for g in gradient(u, [x, t])]
    [0.8399, -0.42]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EXP_INPUT_CAP = 50.0


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)


class Tape:
    """Append-only record of operations.  Single-threaded; use one per worker."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, inputs, value, attrs=None) -> "Var":
        value = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by '{op}'")
        self.nodes.append(_Node(op, inputs, value, attrs or {}))
        return Var(self, len(self.nodes) - 1)

    def input(self, value) -> "Var":
        return self._push("input", (), np.array(value, dtype=float))

    def constant(self, value) -> "Var":
        return self._push("constant", (), np.array(value, dtype=float))

    def record(self, op: str, *operands, **attrs) -> "Var":
        """Append ``op`` applied to ``operands`` and return a reference to it."""
        if op in ("input", "constant"):
            (val,) = operands
            return self.input(val) if op == "input" else self.constant(val)
        if op not in _FORWARD:
            raise ValueError(f"unknown op '{op}'")
        refs = [self._lift(x) for x in operands]
        vals = [self.nodes[r.id].value for r in refs]
        return self._push(op, tuple(r.id for r in refs), _FORWARD[op](*vals, **attrs), attrs)

    def _lift(self, x) -> "Var":
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operands must live on the same tape")
            return x
        return self.constant(x)

    def value(self, ref: "Var") -> np.ndarray:
        return self.nodes[ref.id].value


class Var:
    """Reference to one node on a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100.0   # make ndarray <op> Var dispatch to Var

    def __init__(self, tape: Tape, id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, op={self.tape.nodes[self.id].op}, shape={self.shape})"

    def __add__(self, o):
        return self.tape.record("add", self, o)

    def __radd__(self, o):
        return self.tape.record("add", o, self)

    def __sub__(self, o):
        return self.tape.record("sub", self, o)

    def __rsub__(self, o):
        return self.tape.record("sub", o, self)

    def __mul__(self, o):
        return self.tape.record("mul", self, o)

    def __rmul__(self, o):
        return self.tape.record("mul", o, self)

    def __truediv__(self, o):
        return self.tape.record("div", self, o)

    def __rtruediv__(self, o):
        return self.tape.record("div", o, self)

    def __neg__(self):
        return self.tape.record("neg", self)

    def __matmul__(self, o):
        return self.tape.record("matmul", self, o)

    def __rmatmul__(self, o):
        return self.tape.record("matmul", o, self)

    def __pow__(self, p):
        if p != 2:
            raise ValueError("only squaring is supported")
        return self.square()

    def tanh(self):
        return self.tape.record("tanh", self)

    def exp(self):
        return self.tape.record("exp", self)

    def square(self):
        return self.tape.record("square", self)

    @property
    def T(self):
        return self.tape.record("transpose", self)

    def sum(self, axis=None, keepdims=False):
        if isinstance(axis, int):
            axis = (axis,)
        return self.tape.record("sum", self, axis=axis, keepdims=keepdims)

    def mean(self):
        return self.sum() * (1.0 / max(self.value.size, 1))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        shape = tuple(int(s) for s in np.empty(self.shape).reshape(shape).shape)
        return self.tape.record("reshape", self, shape=shape)


# ---------------------------------------------------------------- forward rules

def _div(a, b):
    if np.any(b == 0.0):
        raise ZeroDivisionError("division by exact zero on tape")
    return a / b


def _exp(a):
    if np.any(np.abs(a) > EXP_INPUT_CAP):
        raise OverflowError(f"exp input magnitude exceeds {EXP_INPUT_CAP:g}")
    return np.exp(a)


def _np_sum_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        k + lead for k, s in enumerate(shape) if s == 1 and x.shape[k + lead] != 1)
    return x.sum(axis=axes, keepdims=True).reshape(shape)


def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul on tape needs 2-D operands")
    return a @ b


_FORWARD = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": _div,
    "neg": np.negative,
    "tanh": np.tanh,
    "exp": _exp,
    "square": np.square,
    "matmul": _matmul,
    "transpose": lambda a: a.T,
    "sum": lambda a, axis=None, keepdims=False: a.sum(axis=axis, keepdims=keepdims),
    "sum_to": lambda a, shape: _np_sum_to(a, shape),
    "broadcast_to": lambda a, shape: np.broadcast_to(a, shape).copy(),
    "reshape": lambda a, shape: a.reshape(shape),
}


# ------------------------------------------- generic helpers (array or Var)

def sum_to(x, shape):
    shape = tuple(shape)
    if isinstance(x, Var):
        return x if x.shape == shape else x.tape.record("sum_to", x, shape=shape)
    return _np_sum_to(x, shape)


def broadcast_to(x, shape):
    shape = tuple(shape)
    if isinstance(x, Var):
        return x if x.shape == shape else x.tape.record("broadcast_to", x, shape=shape)
    return np.broadcast_to(x, shape)


def reshape(x, shape):
    shape = tuple(shape)
    if isinstance(x, Var):
        return x if x.shape == shape else x.tape.record("reshape", x, shape=shape)
    return x.reshape(shape)


def square(x):
    return x.square() if isinstance(x, Var) else x * x


def tanh(x):
    return x.tanh() if isinstance(x, Var) else np.tanh(x)


def exp(x):
    return x.exp() if isinstance(x, Var) else _exp(x)


def _shape(x):
    return x.shape


# ---------------------------------------------------------------- VJP rules
# Each rule maps (upstream grad g, input values/vars, output value/var, attrs)
# to one contribution per input.  ``need`` flags skip unused branches.

def _vjp_add(g, ins, out, attrs, need):
    a, b = ins
    return (sum_to(g, _shape(a)) if need[0] else None,
            sum_to(g, _shape(b)) if need[1] else None)


def _vjp_sub(g, ins, out, attrs, need):
    a, b = ins
    return (sum_to(g, _shape(a)) if need[0] else None,
            sum_to(-g, _shape(b)) if need[1] else None)


def _vjp_mul(g, ins, out, attrs, need):
    a, b = ins
    return (sum_to(g * b, _shape(a)) if need[0] else None,
            sum_to(g * a, _shape(b)) if need[1] else None)


def _vjp_div(g, ins, out, attrs, need):
    a, b = ins
    return (sum_to(g / b, _shape(a)) if need[0] else None,
            sum_to(-(g * out) / b, _shape(b)) if need[1] else None)


def _vjp_sum(g, ins, out, attrs, need):
    (a,) = ins
    axis, keepdims = attrs.get("axis"), attrs.get("keepdims", False)
    shp = _shape(a)
    if axis is not None and not keepdims:
        kept = list(shp)
        for ax in axis:
            kept[ax % len(shp)] = 1
        g = reshape(g, kept)
    elif axis is None and not keepdims:
        g = reshape(g, (1,) * len(shp))
    return (broadcast_to(g, shp),)


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda g, ins, out, attrs, need: (-g,),
    "tanh": lambda g, ins, out, attrs, need: (g * (1.0 - square(out)),),
    "exp": lambda g, ins, out, attrs, need: (g * out,),
    "square": lambda g, ins, out, attrs, need: (g * ins[0] * 2.0,),
    "matmul": lambda g, ins, out, attrs, need: (
        (g @ ins[1].T) if need[0] else None,
        (ins[0].T @ g) if need[1] else None),
    "transpose": lambda g, ins, out, attrs, need: (g.T,),
    "sum": _vjp_sum,
    "sum_to": lambda g, ins, out, attrs, need: (broadcast_to(g, _shape(ins[0])),),
    "broadcast_to": lambda g, ins, out, attrs, need: (sum_to(g, _shape(ins[0])),),
    "reshape": lambda g, ins, out, attrs, need: (reshape(g, _shape(ins[0])),),
}


def _backward(output: Var, wrt: list[Var], as_graph: bool):
    tape = output.tape
    nodes = tape.nodes
    if nodes[output.id].value.size != 1:
        raise ValueError("gradient needs a scalar output")
    for w in wrt:
        if w.tape is not tape:
            raise ValueError("wrt variables must live on the output's tape")
    top = output.id
    wrt_ids = {w.id for w in wrt if w.id <= top}

    def zeros(w):
        z = np.zeros_like(w.value)
        return tape.constant(z) if as_graph else z

    if not wrt_ids:
        return [zeros(w) for w in wrt]
    lo = min(wrt_ids)
    dep = {i: True for i in wrt_ids}
    for k in range(lo, top + 1):
        if k not in dep and any(dep.get(i, False) for i in nodes[k].inputs):
            dep[k] = True
    if top not in dep:
        return [zeros(w) for w in wrt]

    ones = np.ones_like(nodes[top].value)
    grads = {top: tape.constant(ones) if as_graph else ones}
    for k in range(top, lo - 1, -1):
        g = grads.get(k)
        if g is None:
            continue
        node = nodes[k]
        if not node.inputs:
            continue
        need = [dep.get(i, False) for i in node.inputs]
        if not any(need):
            continue
        if as_graph:
            ins = [Var(tape, i) for i in node.inputs]
            out = Var(tape, k)
        else:
            ins = [nodes[i].value for i in node.inputs]
            out = node.value
        contribs = _VJP[node.op](g, ins, out, node.attrs, need)
        for i, c, n in zip(node.inputs, contribs, need):
            if n and c is not None:
                grads[i] = grads[i] + c if i in grads else c
    out = []
    for w in wrt:
        g = grads.get(w.id)
        if g is None:
            out.append(zeros(w))
        elif as_graph:
            out.append(g)
        else:
            out.append(np.array(g, dtype=float).reshape(w.shape))
    return out


def gradient(output: Var, wrt) -> list[np.ndarray]:
    """Numeric d(output)/d(w) for each ``w`` in ``wrt`` (zeros if not an ancestor)."""
    single = isinstance(wrt, Var)
    res = _backward(output, [wrt] if single else list(wrt), as_graph=False)
    return res[0] if single else res


def gradient_as_graph(output: Var, wrt):
    """Like :func:`gradient`, but the derivative is built from new tape nodes."""
    single = isinstance(wrt, Var)
    res = _backward(output, [wrt] if single else list(wrt), as_graph=True)
    return res[0] if single else res
