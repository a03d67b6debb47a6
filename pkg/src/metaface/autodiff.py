"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive's vector-Jacobian product is itself written with
primitives, so calling :func:`gradient` with ``create_graph=True`` records
the backward pass and the result can be differentiated again. That is what
lets the meta-update differentiate through inner gradient steps.

Primitive set: matmul (with transpose flags), add, sub, mul, scale, sum,
mean, square, relu, tanh, exp, log, concat (last axis), slice (last axis),
broadcast. Elementwise binaries accept equal shapes or a rank-0 operand.
"""

import math
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NumericError",
    "Tensor",
    "Tape",
    "tensor",
    "constant",
    "no_grad",
    "grad_enabled",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "square",
    "relu",
    "tanh",
    "exp",
    "log",
    "concat",
    "slice_last",
    "broadcast",
    "detach",
    "gradient",
    "gradient_of_gradient",
    "hvp",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NumericError(AutodiffError, ArithmeticError):
    """A primitive produced NaN or Inf."""


_local = threading.local()


def grad_enabled():
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextmanager
def _grad_mode(enabled):
    prev = grad_enabled()
    _local.enabled = enabled
    try:
        yield
    finally:
        _local.enabled = prev


class _Node:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """Immutable float64 array, optionally attached to the recorded graph."""

    __slots__ = ("data", "requires_grad", "node", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("non-finite value in tensor data")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    @classmethod
    def _wrap(cls, arr, node):
        t = object.__new__(cls)
        if type(arr) is not np.ndarray:
            arr = np.array(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = node is not None
        t.node = node
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    __hash__ = object.__hash__


def tensor(data, requires_grad=False):
    """Create a leaf tensor (a variable when ``requires_grad``)."""
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data, requires_grad=False)


def _as_tensor(x):
    if type(x) is Tensor:
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(float(x))
    if isinstance(x, np.ndarray):
        return Tensor(x)
    raise TypeError(f"expected Tensor or number, got {type(x).__name__}")


def detach(x):
    """Same values, cut from the graph."""
    return Tensor._wrap(x.data, None)


def _emit(op, arr, parents, vjp):
    # a NaN or Inf anywhere makes the sum non-finite
    if not math.isfinite(arr.sum()):
        shapes = ", ".join(str(list(p.shape)) for p in parents)
        raise NumericError(f"{op} produced a non-finite value (operand shapes {shapes})")
    if grad_enabled():
        for p in parents:
            if p.requires_grad:
                return Tensor._wrap(arr, _Node(op, parents, vjp))
    return Tensor._wrap(arr, None)


# --- primitives --------------------------------------------------------------

def matmul(a, b, transpose_a=False, transpose_b=False):
    """op(a) @ op(b) for 2-D operands; op is the optional transpose."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {list(a.shape)} and {list(b.shape)}")
    x = a.data.T if transpose_a else a.data
    y = b.data.T if transpose_b else b.data
    if x.shape[1] != y.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {list(x.shape)} @ {list(y.shape)}"
            f" (operands {list(a.shape)}, {list(b.shape)})"
        )

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = matmul(b, g, transpose_b, True) if transpose_a else matmul(g, b, False, not transpose_b)
        if needs[1]:
            gb = matmul(g, a, True, transpose_a) if transpose_b else matmul(a, g, not transpose_a, False)
        return ga, gb

    return _emit("matmul", x @ y, (a, b), vjp)


def _check_elementwise(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} do not conform")


def _reduce_to(g, like):
    # undo the implicit rank-0 broadcast
    if like.ndim == 0 and g.ndim != 0:
        return sum(g)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("add", a, b)

    def vjp(g, needs):
        return (_reduce_to(g, a) if needs[0] else None, _reduce_to(g, b) if needs[1] else None)

    return _emit("add", a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("sub", a, b)

    def vjp(g, needs):
        return (
            _reduce_to(g, a) if needs[0] else None,
            _reduce_to(scale(g, -1.0), b) if needs[1] else None,
        )

    return _emit("sub", a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("mul", a, b)

    def vjp(g, needs):
        return (
            _reduce_to(mul(g, b), a) if needs[0] else None,
            _reduce_to(mul(g, a), b) if needs[1] else None,
        )

    return _emit("mul", a.data * b.data, (a, b), vjp)


def scale(a, c):
    """Multiply by a Python scalar (not differentiated)."""
    a = _as_tensor(a)
    c = float(c)

    def vjp(g, needs):
        return (scale(g, c),)

    return _emit("scale", a.data * c, (a,), vjp)


def sum(a, axis=None):
    """Full reduction to rank 0, or reduction over the leading axis of a 2-D tensor."""
    a = _as_tensor(a)
    if axis is None:
        shape = a.shape

        def vjp(g, needs):
            return (broadcast(g, shape),)

        return _emit("sum", np.asarray(a.data.sum()), (a,), vjp)
    if axis != 0 or a.ndim != 2:
        raise ShapeError(f"sum(axis=0) needs a 2-D tensor, got {list(a.shape)} axis={axis}")
    rows = a.shape[0]

    def vjp0(g, needs):
        return (broadcast(g, (rows, g.shape[0])),)

    return _emit("sum0", a.data.sum(axis=0), (a,), vjp0)


def mean(a, axis=None):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[0]
    return scale(sum(a, axis=axis), 1.0 / n)


def square(a):
    a = _as_tensor(a)

    def vjp(g, needs):
        return (mul(g, scale(a, 2.0)),)

    return _emit("square", a.data * a.data, (a,), vjp)


def relu(a):
    a = _as_tensor(a)
    mask = (a.data > 0).astype(np.float64)

    def vjp(g, needs):
        return (mul(g, Tensor._wrap(mask, None)),)

    return _emit("relu", a.data * mask, (a,), vjp)


# The output is recomputed inside the vjp when the backward pass is being
# recorded; holding the output tensor in the closure would create a cycle.

def tanh(a):
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def vjp(g, needs):
        y = tanh(a) if grad_enabled() else Tensor._wrap(data, None)
        return (mul(g, sub(1.0, square(y))),)

    return _emit("tanh", data, (a,), vjp)


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def vjp(g, needs):
        y = exp(a) if grad_enabled() else Tensor._wrap(data, None)
        return (mul(g, y),)

    return _emit("exp", data, (a,), vjp)


def log(a):
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def vjp(g, needs):
        y = log(a) if grad_enabled() else Tensor._wrap(data, None)
        return (mul(g, exp(scale(y, -1.0))),)

    return _emit("log", data, (a,), vjp)


def concat(parts):
    """Concatenate along the last axis."""
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat of nothing")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.ndim == 0 or p.shape[:-1] != lead:
            raise ShapeError("concat: shapes " + ", ".join(str(list(q.shape)) for q in parts) + " do not conform")
    bounds = []
    start = 0
    for p in parts:
        bounds.append((start, start + p.shape[-1]))
        start += p.shape[-1]

    def vjp(g, needs):
        return tuple(slice_last(g, lo, hi) if need else None for (lo, hi), need in zip(bounds, needs))

    return _emit("concat", np.concatenate([p.data for p in parts], axis=-1), parts, vjp)


def slice_last(a, start, stop):
    """a[..., start:stop]."""
    a = _as_tensor(a)
    width = a.shape[-1] if a.ndim else 0
    if a.ndim == 0 or not 0 <= start < stop <= width:
        raise ShapeError(f"slice [{start}:{stop}] out of range for shape {list(a.shape)}")
    lead = a.shape[:-1]

    def vjp(g, needs):
        pieces = []
        if start > 0:
            pieces.append(Tensor._wrap(np.zeros(lead + (start,)), None))
        pieces.append(g)
        if stop < width:
            pieces.append(Tensor._wrap(np.zeros(lead + (width - stop,)), None))
        return (concat(pieces) if len(pieces) > 1 else g,)

    return _emit("slice", np.ascontiguousarray(a.data[..., start:stop]), (a,), vjp)


def broadcast(a, shape):
    """Rank-0 -> any shape, or [n] -> [rows, n]."""
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if a.ndim == 0:
        def vjp(g, needs):
            return (sum(g),)
    elif a.ndim == 1 and len(shape) == 2 and shape[1] == a.shape[0]:
        def vjp(g, needs):
            return (sum(g, axis=0),)
    else:
        raise ShapeError(f"cannot broadcast {list(a.shape)} to {list(shape)}")
    return _emit("broadcast", np.broadcast_to(a.data, shape).copy(), (a,), vjp)


# --- differentiation ---------------------------------------------------------

class Tape:
    """Topologically ordered record of the primitives that produced ``outputs``."""

    def __init__(self, outputs):
        if isinstance(outputs, Tensor):
            outputs = [outputs]
        self.outputs = list(outputs)
        self.tensors = _topo(self.outputs)
        index = {id(t): i for i, t in enumerate(self.tensors)}
        self.nodes = [
            (t.node.op, tuple(index.get(id(p)) for p in t.node.parents), i)
            for i, t in enumerate(self.tensors)
            if t.node is not None
        ]

    def __len__(self):
        return len(self.nodes)


def _topo(outputs):
    order = []
    seen = set()
    for out in outputs:
        if id(out) in seen:
            continue
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
    return order


def gradient(output, wrt, create_graph=False):
    """d output / d wrt.

    ``wrt`` is a sequence of tensors (returns a list) or a mapping
    name -> tensor (returns a dict). Tensors that do not influence the
    output get zero gradients. With ``create_graph`` the backward pass is
    recorded and the returned gradients can be differentiated again.
    """
    if not isinstance(output, Tensor):
        raise TypeError("output must be a Tensor")
    if output.size != 1 or output.ndim > 1:
        raise ShapeError(f"gradient needs a scalar output, got shape {list(output.shape)}")
    named = hasattr(wrt, "keys")
    keys = list(wrt.keys()) if named else None
    targets = list(wrt.values()) if named else list(wrt)
    for t in targets:
        if not isinstance(t, Tensor):
            raise AutodiffError(f"cannot differentiate with respect to {type(t).__name__}")
    target_ids = {id(t) for t in targets}

    order = _topo([output])
    # keep only tensors lying on a path from some target to the output
    relevant = set(target_ids)
    for t in order:
        node = t.node
        if node is not None:
            for p in node.parents:
                if id(p) in relevant:
                    relevant.add(id(t))
                    break

    grads = {}
    with _grad_mode(create_graph):
        if id(output) in relevant:
            grads[id(output)] = Tensor._wrap(np.ones(output.shape), None)
        for t in reversed(order):
            g = grads.get(id(t))
            if g is None or t.node is None:
                continue
            if id(t) not in target_ids:
                del grads[id(t)]
            parents = t.node.parents
            needs = tuple(id(p) in relevant for p in parents)
            if not any(needs):
                continue
            contribs = t.node.vjp(g, needs)
            for p, need, c in zip(parents, needs, contribs):
                if not need:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = c if prev is None else add(prev, c)

    result = []
    for t in targets:
        g = grads.get(id(t))
        if g is None:
            g = Tensor._wrap(np.zeros(t.shape), None)
        result.append(g)
    return dict(zip(keys, result)) if named else result


def hvp(output, wrt, vectors):
    """Hessian-vector products H @ v for each tensor in ``wrt``."""
    wrt = list(wrt)
    grads = gradient(output, wrt, create_graph=True)
    dot = None
    for g, v in zip(grads, vectors):
        term = sum(mul(g, _as_tensor(v)))
        dot = term if dot is None else add(dot, term)
    return gradient(dot, wrt)


def gradient_of_gradient(output, wrt, wrt2, vector=None):
    """d/d(wrt2) of <d output/d wrt, vector>.

    Without ``vector`` the first gradient must have a single element, which
    gives the mixed second partial directly.
    """
    (g,) = gradient(output, [wrt], create_graph=True)
    if vector is None:
        if g.size != 1:
            raise ShapeError("gradient_of_gradient without a vector needs a single-element wrt")
        s = sum(g)
    else:
        s = sum(mul(g, _as_tensor(vector)))
    (gg,) = gradient(s, [wrt2])
    return gg
