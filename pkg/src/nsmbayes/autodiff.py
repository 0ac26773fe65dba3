"""Reverse-mode automatic differentiation over an explicit tape.

The engine exists to supply parameter gradients for the two training
objectives (negative log-likelihood and score matching). It works on f64
numpy arrays, records a flat list of nodes in construction order (which is
automatically a topological order) and differentiates a scalar root with a
single reverse sweep. Derivatives with respect to network *inputs* are never
taken here; those are closed-form recursions in :mod:`nsmbayes.nets`.

Supported primitives: matmul, add, multiply, divide, tanh, softplus, square,
log, exp, sum, logsumexp, plus shape-only bookkeeping (reshape, swapaxes,
getitem, concat) whose adjoints are pure index maps. Anything else raises at
construction time.
"""

import numpy as np

_SUPPORTED = (
    "leaf matmul add multiply divide tanh softplus square log exp "
    "sum logsumexp reshape swapaxes getitem concat"
).split()


class Node:
    """One tape entry: an op name, its forward value and its backward rules."""

    __slots__ = ("op", "value", "parents", "vjps", "adjoint", "index")

    def __init__(self, op, value, parents, vjps, index):
        self.op = op
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.adjoint = None
        self.index = index

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (the adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class Tape:
    """Single-use recording of a computation; not thread-safe."""

    def __init__(self, check_finite=True):
        self.nodes = []
        self.check_finite = check_finite

    # -- recording ---------------------------------------------------------

    def _record(self, op, value, parents, vjps):
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(
                f"non-finite value in tape node {len(self.nodes)} (op={op})"
            )
        node = Node(op, value, parents, vjps, len(self.nodes))
        self.nodes.append(node)
        return node

    def leaf(self, value):
        return self._record("leaf", value, (), ())

    def constant(self, value):
        # Constants are leaves too; they just never get their adjoint read.
        return self._record("leaf", value, (), ())

    def apply(self, op, *args, **kwargs):
        if op not in _SUPPORTED:
            raise ValueError(f"unsupported tape primitive: {op!r}")
        return getattr(self, op)(*args, **kwargs)

    # -- primitives --------------------------------------------------------

    def matmul(self, a, b):
        if a.value.ndim < 2 or b.value.ndim < 2:
            raise ValueError("matmul operands must have ndim >= 2")
        val = a.value @ b.value
        av, bv = a.value, b.value

        def vjp_a(g):
            return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

        def vjp_b(g):
            return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

        return self._record("matmul", val, (a, b), (vjp_a, vjp_b))

    def add(self, a, b):
        val = a.value + b.value
        ash, bsh = a.value.shape, b.value.shape
        return self._record(
            "add", val, (a, b),
            (lambda g: _unbroadcast(g, ash), lambda g: _unbroadcast(g, bsh)),
        )

    def multiply(self, a, b):
        val = a.value * b.value
        av, bv = a.value, b.value
        return self._record(
            "multiply", val, (a, b),
            (lambda g: _unbroadcast(g * bv, av.shape),
             lambda g: _unbroadcast(g * av, bv.shape)),
        )

    def divide(self, a, b):
        with np.errstate(divide="ignore", invalid="ignore"):
            val = a.value / b.value
        av, bv = a.value, b.value
        return self._record(
            "divide", val, (a, b),
            (lambda g: _unbroadcast(g / bv, av.shape),
             lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
        )

    def tanh(self, a):
        val = np.tanh(a.value)
        return self._record("tanh", val, (a,), (lambda g: g * (1.0 - val * val),))

    def softplus(self, a):
        val = softplus(a.value)
        sig = sigmoid(a.value)
        return self._record("softplus", val, (a,), (lambda g: g * sig,))

    def square(self, a):
        av = a.value
        return self._record("square", av * av, (a,), (lambda g: g * 2.0 * av,))

    def log(self, a):
        av = a.value
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.log(av)
        return self._record("log", val, (a,), (lambda g: g / av,))

    def exp(self, a):
        with np.errstate(over="ignore"):
            val = np.exp(a.value)
        return self._record("exp", val, (a,), (lambda g: g * val,))

    def sum(self, a, axis=None, keepdims=False):
        val = a.value.sum(axis=axis, keepdims=keepdims)
        ash = a.value.shape

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, ash).copy()
            if not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, ash).copy()

        return self._record("sum", val, (a,), (vjp,))

    def logsumexp(self, a, axis=-1, keepdims=False):
        av = a.value
        amax = np.max(av, axis=axis, keepdims=True)
        val = np.log(np.sum(np.exp(av - amax), axis=axis, keepdims=True)) + amax
        soft = np.exp(av - val)  # softmax along `axis`
        if not keepdims:
            val = np.squeeze(val, axis=axis)

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return g * soft

        return self._record("logsumexp", val, (a,), (vjp,))

    # -- shape bookkeeping (index-map adjoints) -----------------------------

    def reshape(self, a, shape):
        ash = a.value.shape
        return self._record(
            "reshape", a.value.reshape(shape), (a,),
            (lambda g: g.reshape(ash),),
        )

    def swapaxes(self, a, ax1, ax2):
        return self._record(
            "swapaxes", np.swapaxes(a.value, ax1, ax2), (a,),
            (lambda g: np.swapaxes(g, ax1, ax2),),
        )

    def getitem(self, a, idx):
        ash = a.value.shape

        def vjp(g):
            out = np.zeros(ash)
            np.add.at(out, idx, g)
            return out

        return self._record("getitem", a.value[idx], (a,), (vjp,))

    def concat(self, nodes, axis=0):
        sizes = [n.value.shape[axis] for n in nodes]
        offsets = np.cumsum([0] + sizes)
        val = np.concatenate([n.value for n in nodes], axis=axis)

        def make_vjp(i):
            sl = [slice(None)] * val.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            sl = tuple(sl)
            return lambda g: g[sl]

        return self._record(
            "concat", val, tuple(nodes), tuple(make_vjp(i) for i in range(len(nodes)))
        )

    # -- reverse pass --------------------------------------------------------

    def backward(self, root):
        """Accumulate adjoints of all nodes with respect to scalar `root`."""
        if root.value.size != 1:
            raise ValueError("backward root must be scalar")
        for node in self.nodes:
            node.adjoint = None
        root.adjoint = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.index + 1]):
            g = node.adjoint
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                if parent.adjoint is None:
                    parent.adjoint = contrib.copy()
                else:
                    parent.adjoint += contrib


def grad(objective, params):
    """Evaluate a tape-recorded scalar objective and its parameter gradient.

    `objective(tape, p)` must build and return a scalar node from the leaf
    node `p` holding the flat parameter vector. Returns (value, gradient).
    """
    params = np.asarray(params, dtype=np.float64)
    tape = Tape()
    p = tape.leaf(params)
    root = objective(tape, p)
    tape.backward(root)
    g = p.adjoint if p.adjoint is not None else np.zeros_like(params)
    return float(root.value), g
