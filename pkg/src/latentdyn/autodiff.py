"""Tensor computation graph with reverse-mode gradients and forward-mode tangents.

Three kinds of values flow through the operations defined here:

* plain ``numpy.ndarray`` (no derivative bookkeeping, used for fast inference),
* :class:`Node` (a vertex of the reverse-mode graph),
* :class:`Dual` (a primal/tangent pair whose two halves are themselves nodes or
  arrays, so reverse mode can differentiate through forward-mode tangents).

Every operation dispatches on the "highest" kind among its arguments, so the
same model code runs in all three regimes.

A tangent may carry extra leading axes.  A tangent of shape ``(k,) + p.shape``
holds ``k`` independent directions and is propagated in one sweep; this is how
a Jacobian diagonal is evaluated with a single forward pass.
"""
from __future__ import annotations

import numbers

import numpy as np

from .exceptions import GraphError, UsageError

__all__ = [
    "Node", "Dual", "constant", "value_of", "reverse_grad", "jvp",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "tanh", "exp", "log",
    "sqrt", "sin", "cos", "relu", "ceil", "stop_gradient", "square", "sum",
    "mean", "reshape", "swapaxes", "getitem", "concatenate", "stack",
]

_ARRAY_TYPES = (np.ndarray, numbers.Number, np.generic)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Node:
    """A vertex of the reverse-mode graph.

    ``vjp`` maps the adjoint of this node to a tuple of adjoints, one per
    parent (``None`` for parents that receive no gradient).
    """

    __slots__ = ("value", "parents", "vjp", "op", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    # operator sugar -------------------------------------------------------
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class Dual:
    """Primal value paired with a tangent (directional derivative).

    ``tangent`` is ``None`` for a zero tangent, otherwise it has shape
    ``lead + primal.shape`` where ``lead`` are direction axes.
    """

    __slots__ = ("primal", "tangent", "nlead")
    __array_ufunc__ = None

    def __init__(self, primal, tangent=None, nlead=0):
        self.primal = primal
        self.tangent = tangent
        self.nlead = nlead

    @property
    def shape(self):
        return np.shape(value_of(self.primal))

    @property
    def ndim(self):
        return len(self.shape)

    def __repr__(self):
        return f"Dual(shape={self.shape}, nlead={self.nlead})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def constant(x):
    """Wrap ``x`` as a graph leaf."""
    return x if isinstance(x, Node) else Node(x)


def value_of(x):
    """Numeric value of an array, node or dual (the primal for duals)."""
    if isinstance(x, Dual):
        return value_of(x.primal)
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _kind(*xs):
    k = 0
    for x in xs:
        if isinstance(x, Dual):
            return 2
        if isinstance(x, Node):
            k = 1
    return k


# ---------------------------------------------------------------------------
# dual helpers

def _primal(x):
    return x.primal if isinstance(x, Dual) else x


def _tangent(x):
    return x.tangent if isinstance(x, Dual) else None


def _nlead(*xs):
    n = {x.nlead for x in xs if isinstance(x, Dual) and x.tangent is not None}
    if len(n) > 1:
        raise UsageError("cannot combine tangents with different direction axes")
    return n.pop() if n else 0


def _lift(t, pndim, out_ndim, nlead):
    """Insert unit axes so a tangent for a rank-``pndim`` primal broadcasts to rank ``out_ndim``."""
    if t is None or pndim == out_ndim or nlead == 0:
        return t
    shape = value_of(t).shape
    new = shape[:nlead] + (1,) * (out_ndim - pndim) + shape[nlead:]
    return reshape(t, new)


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _dual_binary(x, y, rule):
    px, py = _primal(x), _primal(y)
    tx, ty = _tangent(x), _tangent(y)
    nl = _nlead(x, y)
    p = rule[0](px, py)
    out_ndim = np.ndim(value_of(p))
    tx = _lift(tx, np.ndim(value_of(px)), out_ndim, nl)
    ty = _lift(ty, np.ndim(value_of(py)), out_ndim, nl)
    t = rule[1](px, py, tx, ty, p)
    return Dual(p, t, nl)


def _dual_unary(x, f, df):
    p = f(x.primal)
    t = None if x.tangent is None else mul(x.tangent, df(x.primal, p))
    return Dual(p, t, x.nlead)


def _neg_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, tuple):
        return tuple(_neg_axis(a, ndim) for a in axis)
    return axis - ndim if axis >= 0 else axis


# ---------------------------------------------------------------------------
# binary elementwise ops

def add(x, y):
    k = _kind(x, y)
    if k == 0:
        return np.add(x, y)
    if k == 2:
        return _dual_binary(x, y, (add, lambda px, py, tx, ty, p: _tadd(tx, ty)))
    x, y = constant(x), constant(y)
    sx, sy = x.shape, y.shape
    return Node(x.value + y.value, (x, y),
                lambda g: (_unbroadcast(g, sx), _unbroadcast(g, sy)), "add")


def sub(x, y):
    k = _kind(x, y)
    if k == 0:
        return np.subtract(x, y)
    if k == 2:
        return _dual_binary(
            x, y, (sub, lambda px, py, tx, ty, p: _tadd(tx, None if ty is None else neg(ty))))
    x, y = constant(x), constant(y)
    sx, sy = x.shape, y.shape
    return Node(x.value - y.value, (x, y),
                lambda g: (_unbroadcast(g, sx), _unbroadcast(-g, sy)), "sub")


def mul(x, y):
    k = _kind(x, y)
    if k == 0:
        return np.multiply(x, y)
    if k == 2:
        def rule(px, py, tx, ty, p):
            return _tadd(None if tx is None else mul(tx, py),
                         None if ty is None else mul(px, ty))
        return _dual_binary(x, y, (mul, rule))
    x, y = constant(x), constant(y)
    xv, yv = x.value, y.value
    return Node(xv * yv, (x, y),
                lambda g: (_unbroadcast(g * yv, xv.shape), _unbroadcast(g * xv, yv.shape)),
                "mul")


def div(x, y):
    k = _kind(x, y)
    if k == 0:
        return np.divide(x, y)
    if k == 2:
        def rule(px, py, tx, ty, p):
            a = None if tx is None else div(tx, py)
            b = None if ty is None else neg(mul(ty, div(p, py)))
            return _tadd(a, b)
        return _dual_binary(x, y, (div, rule))
    x, y = constant(x), constant(y)
    xv, yv = x.value, y.value
    out = xv / yv
    return Node(out, (x, y),
                lambda g: (_unbroadcast(g / yv, xv.shape),
                           _unbroadcast(-g * out / yv, yv.shape)),
                "div")


# ---------------------------------------------------------------------------
# unary elementwise ops

def neg(x):
    k = _kind(x)
    if k == 0:
        return np.negative(x)
    if k == 2:
        return Dual(neg(x.primal), None if x.tangent is None else neg(x.tangent), x.nlead)
    return Node(-x.value, (x,), lambda g: (-g,), "neg")


def power(x, p):
    """``x ** p`` for a constant real exponent ``p``."""
    if not isinstance(p, numbers.Real):
        raise UsageError("power() supports constant real exponents only")
    k = _kind(x)
    if k == 0:
        return np.power(x, p)
    if k == 2:
        return _dual_unary(x, lambda a: power(a, p), lambda a, o: mul(p, power(a, p - 1)))
    xv = x.value
    return Node(xv ** p, (x,), lambda g: (g * p * xv ** (p - 1),), "pow")


def square(x):
    return mul(x, x)


def tanh(x):
    k = _kind(x)
    if k == 0:
        return np.tanh(x)
    if k == 2:
        return _dual_unary(x, tanh, lambda a, o: sub(1.0, mul(o, o)))
    out = np.tanh(x.value)
    return Node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x):
    k = _kind(x)
    if k == 0:
        return np.exp(x)
    if k == 2:
        return _dual_unary(x, exp, lambda a, o: o)
    out = np.exp(x.value)
    return Node(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    k = _kind(x)
    if k == 0:
        return np.log(x)
    if k == 2:
        return _dual_unary(x, log, lambda a, o: div(1.0, a))
    xv = x.value
    return Node(np.log(xv), (x,), lambda g: (g / xv,), "log")


def sqrt(x):
    k = _kind(x)
    if k == 0:
        return np.sqrt(x)
    if k == 2:
        return _dual_unary(x, sqrt, lambda a, o: div(0.5, o))
    out = np.sqrt(x.value)
    return Node(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def sin(x):
    k = _kind(x)
    if k == 0:
        return np.sin(x)
    if k == 2:
        return _dual_unary(x, sin, lambda a, o: cos(a))
    xv = x.value
    return Node(np.sin(xv), (x,), lambda g: (g * np.cos(xv),), "sin")


def cos(x):
    k = _kind(x)
    if k == 0:
        return np.cos(x)
    if k == 2:
        return _dual_unary(x, cos, lambda a, o: neg(sin(a)))
    xv = x.value
    return Node(np.cos(xv), (x,), lambda g: (-g * np.sin(xv),), "cos")


def relu(x):
    k = _kind(x)
    if k == 0:
        return np.maximum(x, 0.0)
    if k == 2:
        return _dual_unary(x, relu, lambda a, o: (value_of(a) > 0).astype(np.float64))
    pos = x.value > 0
    return Node(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,), "relu")


def stop_gradient(x):
    """Identity on values; blocks reverse gradients and zeroes tangents."""
    k = _kind(x)
    if k == 0:
        return np.asarray(x, dtype=np.float64)
    return Node(value_of(x), (), None, "stop")


def ceil(x):
    """Ceiling; gradient-stopped (piecewise constant)."""
    return Node(np.ceil(value_of(x)), (), None, "ceil") if _kind(x) else np.ceil(x)


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    k = _kind(x)
    if k == 0:
        return np.sum(x, axis=axis, keepdims=keepdims)
    if k == 2:
        nd = x.ndim
        t = None if x.tangent is None else sum(x.tangent, axis=_tangent_axis(axis, nd, x.nlead),
                                               keepdims=keepdims)
        return Dual(sum(x.primal, axis, keepdims), t, x.nlead)
    xv = x.value
    shape = xv.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return Node(np.sum(xv, axis=axis, keepdims=keepdims), (x,), vjp, "sum")


def _tangent_axis(axis, nd, nlead):
    if axis is None:
        return tuple(range(nlead, nlead + nd)) if nlead else None
    return _neg_axis(axis, nd)


def mean(x, axis=None, keepdims=False):
    shape = x.shape if not isinstance(x, _ARRAY_TYPES) else np.shape(x)
    if axis is None:
        n = int(np.prod(shape))
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    k = _kind(x)
    if k == 0:
        return np.reshape(x, shape)
    if k == 2:
        p = reshape(x.primal, shape)
        t = None
        if x.tangent is not None:
            lead = value_of(x.tangent).shape[:x.nlead]
            t = reshape(x.tangent, lead + value_of(p).shape)
        return Dual(p, t, x.nlead)
    old = x.shape
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(x, a1, a2):
    k = _kind(x)
    if k == 0:
        return np.swapaxes(x, a1, a2)
    if k == 2:
        nd = x.ndim
        t = None if x.tangent is None else swapaxes(x.tangent, _neg_axis(a1, nd), _neg_axis(a2, nd))
        return Dual(swapaxes(x.primal, a1, a2), t, x.nlead)
    return Node(np.swapaxes(x.value, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x, idx):
    """Basic and integer-array indexing."""
    k = _kind(x)
    if k == 0:
        return np.asarray(x)[idx]
    if k == 2:
        t = None
        if x.tangent is not None:
            tidx = idx if isinstance(idx, tuple) else (idx,)
            if any(i is Ellipsis or i is None for i in tidx):
                raise UsageError("Ellipsis/newaxis indexing is not supported on duals")
            tidx = (Ellipsis,) + tidx + (slice(None),) * (x.ndim - len(tidx))
            t = getitem(x.tangent, tidx)
        return Dual(getitem(x.primal, idx), t, x.nlead)
    xv = x.value

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, numbers.Integral)) or i is None or i is Ellipsis
                for i in parts)

    def vjp(g):
        out = np.zeros_like(xv)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)
    return Node(xv[idx], (x,), vjp, "getitem")


def concatenate(xs, axis=0):
    k = _kind(*xs)
    if k == 0:
        return np.concatenate(xs, axis=axis)
    if k == 2:
        nl = _nlead(*xs)
        nd = np.ndim(value_of(xs[0]))
        p = concatenate([_primal(x) for x in xs], axis)
        ts = [_tangent(x) for x in xs]
        t = None
        if any(ti is not None for ti in ts):
            ref = next(ti for ti in ts if ti is not None)
            lead = value_of(ref).shape[:nl]
            ts = [ti if ti is not None else np.zeros(lead + np.shape(value_of(x)))
                  for ti, x in zip(ts, xs)]
            t = concatenate(ts, _neg_axis(axis, nd))
        return Dual(p, t, nl)
    xs = [constant(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return Node(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(xs, axis=0):
    nd = np.ndim(value_of(xs[0]))
    ax = axis if axis >= 0 else axis + nd + 1
    return concatenate([reshape(x, np.shape(value_of(x))[:ax] + (1,) + np.shape(value_of(x))[ax:])
                        for x in xs], axis=ax)


def matmul(x, y):
    k = _kind(x, y)
    if k == 0:
        return np.matmul(x, y)
    if k == 2:
        px, py = _primal(x), _primal(y)
        tx, ty = _tangent(x), _tangent(y)
        nl = _nlead(x, y)
        if nl and ty is not None and np.ndim(value_of(py)) < 2:
            raise UsageError("matmul tangent requires a matrix right operand")
        t = _tadd(None if tx is None else matmul(tx, py),
                  None if ty is None else matmul(px, ty))
        return Dual(matmul(px, py), t, nl)
    x, y = constant(x), constant(y)
    xv, yv = x.value, y.value
    if xv.ndim < 2 or yv.ndim < 2:
        raise UsageError("matmul on nodes requires operands of rank >= 2")

    def vjp(g):
        gx = np.matmul(g, np.swapaxes(yv, -1, -2))
        gy = np.matmul(np.swapaxes(xv, -1, -2), g)
        return _unbroadcast(gx, xv.shape), _unbroadcast(gy, yv.shape)
    return Node(np.matmul(xv, yv), (x, y), vjp, "matmul")


# ---------------------------------------------------------------------------
# differentiation drivers

def _toposort(root):
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        nid = id(node)
        if expanded:
            state[nid] = 2
            order.append(node)
            continue
        s = state.get(nid)
        if s == 2:
            continue
        if s == 1:
            raise GraphError(f"cycle detected at {node!r}")
        state[nid] = 1
        stack.append((node, True))
        for p in node.parents:
            ps = state.get(id(p))
            if ps == 1:
                raise GraphError(f"cycle detected at {p!r}")
            if ps is None:
                stack.append((p, False))
    return order


def reverse_grad(output, inputs):
    """Gradients of a scalar ``output`` node with respect to each of ``inputs``.

    Inputs unreachable from ``output`` get a zero gradient.  Adjoints live in a
    pass-local table, so the graph carries no state after the call.
    """
    if isinstance(output, Dual):
        output = output.primal
    if not isinstance(output, Node):
        raise UsageError("reverse_grad needs a Node output")
    if output.value.size != 1:
        raise UsageError(f"reverse_grad needs a scalar output, got shape {output.shape}")
    adj = {id(output): np.ones_like(output.value)}
    for node in reversed(_toposort(output)):
        g = adj.pop(id(node), None)
        if g is None or node.vjp is None:
            if node.vjp is None and g is not None:
                adj[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            pid = id(parent)
            prev = adj.get(pid)
            adj[pid] = pg if prev is None else prev + pg
    return [adj.get(id(x), np.zeros_like(x.value)) for x in inputs]


def jvp(fn, point, direction):
    """Jacobian-vector product ``J_fn(point) @ direction`` by forward mode.

    ``fn`` maps a rank-1 array-like to an array-like using the operations of
    this module.  Returns a numpy array shaped like ``fn(point)``.
    """
    point = np.asarray(point, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if point.shape != direction.shape:
        raise UsageError(f"direction shape {direction.shape} != point shape {point.shape}")
    out = fn(Dual(point, direction))
    if not isinstance(out, Dual):
        return np.zeros_like(value_of(out))
    if out.tangent is None:
        return np.zeros_like(value_of(out.primal))
    return np.array(value_of(out.tangent), dtype=np.float64)
