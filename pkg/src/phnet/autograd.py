"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float64 for verification, float32 for training).
Every operation returns a new ``Tensor`` that records its parents and a
backward closure, so the computation DAG is the tape: calling ``backward``
on a scalar node walks the DAG in reverse topological order and accumulates
gradients (summing where a node feeds several consumers).

Shapes must match exactly for binary elementwise ops; the only implicit
broadcast is multiplication by a python scalar (``scale``). Anything else
goes through the explicit ``broadcast_to``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference / benchmarking / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A node of the computation graph holding a numpy array.

    ``data`` is treated as immutable once the tensor participates in an op.
    ``grad`` is populated by ``backward`` (accumulated across consumers and
    across successive backward calls until reset).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_op", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = ""
        self._parents = ()
        self._op = "leaf"
        self._backward = None

    # -- storage model -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def strides(self):
        """Per-axis element steps into the underlying buffer."""
        item = self.data.itemsize
        return tuple(s // item for s in self.data.strides)

    @property
    def offset(self):
        """Element offset of this view into its base buffer (0 if owning)."""
        base = self.data.base
        if base is None:
            return 0
        start = self.data.__array_interface__["data"][0]
        base_start = base.__array_interface__["data"][0]
        return (start - base_start) // self.data.itemsize

    @property
    def buffer(self):
        """Flat view of the owning storage."""
        base = self.data.base
        return (base if base is not None else self.data).reshape(-1)

    def is_contiguous(self):
        return self.data.flags["C_CONTIGUOUS"]

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar ------------------------------------------------------
    def permute(self, axes):
        return permute(self, axes)

    def reshape(self, new_shape):
        return reshape(self, new_shape)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def sum(self, axes=None, keepdims=False):
        return _sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return _mean(self, axes, keepdims)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)

    def materialize(self):
        return materialize(self)

    def backward(self):
        return backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor with a unique name path and an always-present grad."""

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def reset_grad(self):
        self.grad = np.zeros_like(self.data)


def make_node(data, parents, op, backward_fn):
    """Wrap an op result as a graph node.

    ``backward_fn(gout)`` must return one gradient array (or None) per parent.
    Recording is skipped when no parent requires grad or inside ``no_grad``.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def add(a, b):
    _check_same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b):
    _check_same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a, b):
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def div(a, b):
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return make_node(ad / bd, (a, b), "div", lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(t, s):
    s = float(s)
    return make_node(t.data * s, (t,), "scale", lambda g: (g * s,))


def add_scalar(t, c):
    c = float(c)
    return make_node(t.data + c, (t,), "add_scalar", lambda g: (g,))


def relu(t):
    x = t.data
    # subgradient at exactly 0 is 0
    return make_node(np.maximum(x, 0.0), (t,), "relu", lambda g: (g * (x > 0),))


def gelu(t):
    x = t.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def bk(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf),)

    return make_node(out, (t,), "gelu", bk)


def exp(t):
    out = np.exp(t.data)
    return make_node(out, (t,), "exp", lambda g: (g * out,))


def sqrt(t):
    out = np.sqrt(t.data)
    return make_node(out, (t,), "sqrt", lambda g: (g * (0.5 / out),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div,
                "relu": relu, "gelu": gelu, "scale": scale}


def elementwise(op, *operands):
    """Dispatch by name: add/sub/mul/div take two tensors, relu/gelu one,
    scale a tensor and a python scalar."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def permute(t, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(t.ndim)):
        raise ValueError(f"permute: axes {axes} is not a permutation of 0..{t.ndim - 1}")
    inv = np.argsort(axes)
    return make_node(np.transpose(t.data, axes), (t,), "permute",
                     lambda g: (np.transpose(g, inv),))


def reshape(t, new_shape):
    new_shape = tuple(int(n) for n in new_shape)
    if math.prod(new_shape) != t.size:
        raise ValueError(
            f"reshape: cannot view {t.shape} ({t.size} elements) as {new_shape}")
    old_shape = t.shape
    # np.reshape materializes non-contiguous inputs before reinterpreting
    return make_node(np.reshape(t.data, new_shape), (t,), "reshape",
                     lambda g: (np.reshape(g, old_shape),))


def broadcast_to(t, shape):
    shape = tuple(int(n) for n in shape)
    try:
        out = np.broadcast_to(t.data, shape)
    except ValueError:
        raise ValueError(f"broadcast_to: cannot expand {t.shape} to {shape}") from None
    old_shape = t.shape

    def bk(g):
        extra = g.ndim - len(old_shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(old_shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return make_node(out, (t,), "broadcast_to", bk)


def materialize(t):
    """Contiguous copy; identity for autodiff."""
    return make_node(np.ascontiguousarray(t.data), (t,), "materialize", lambda g: (g,))


def concat(tensors, axis):
    tensors = tuple(tensors)
    axis = int(axis)
    rank = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != rank:
            raise ValueError("concat: rank mismatch")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bk(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis),
                     tensors, "concat", bk)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(t, axes):
    if axes is None:
        return tuple(range(t.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) for a in axes)
    if len(set(axes)) != len(axes):
        raise ValueError(f"reduce: duplicate axes {axes}")
    for a in axes:
        if not 0 <= a < t.ndim:
            raise ValueError(f"reduce: axis {a} out of range for rank {t.ndim}")
    return axes


def _restore_shape(t_shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(t_shape))


def _sum(t, axes=None, keepdims=False):
    axes = _norm_axes(t, axes)
    in_shape = t.shape
    out = t.data.sum(axis=axes, keepdims=keepdims)

    def bk(g):
        if not keepdims:
            g = g.reshape(_restore_shape(in_shape, axes))
        return (np.broadcast_to(g, in_shape),)

    return make_node(out, (t,), "sum", bk)


def _mean(t, axes=None, keepdims=False):
    axes = _norm_axes(t, axes)
    n = math.prod(t.shape[a] for a in axes)
    return scale(_sum(t, axes, keepdims), 1.0 / n)


def reduce(t, axes, kind):
    """Reduce over ``axes`` (dropped from the result). ``var`` is the
    population variance, composed from mean/sub/mul so it stays differentiable."""
    if kind == "sum":
        return _sum(t, axes)
    if kind == "mean":
        return _mean(t, axes)
    if kind == "var":
        axes = _norm_axes(t, axes)
        m = _mean(t, axes, keepdims=True).broadcast_to(t.shape)
        d = sub(t, m)
        return _mean(mul(d, d), axes)
    raise ValueError(f"unknown reduction kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expected rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions {a.shape} x {b.shape} do not match")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), "matmul",
                     lambda g: (g @ bd.T, ad.T @ g))


def log_softmax(t, axis):
    z = t.data
    m = z.max(axis=axis, keepdims=True)
    s = np.log(np.exp(z - m).sum(axis=axis, keepdims=True)) + m
    out = z - s
    p = np.exp(out)

    def bk(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (t,), "log_softmax", bk)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def trace(root):
    """All nodes reachable from ``root``, parents before children."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(node) into ``.grad`` for every reachable node that
    requires grad. Returns the gradient store (node -> array)."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = trace(loss)
    loss.grad = np.ones_like(loss.data) if loss.grad is None \
        else loss.grad + np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    return {node: node.grad for node in order
            if node.requires_grad and node.grad is not None}


def grad_check(f, x, h=1e-5):
    """Max relative error between analytic gradient of scalar ``f`` at ``x``
    and central finite differences with step ``h``.

    Per-coordinate relative error is |a - n| / max(|a|, |n|, 1e-12).
    """
    seed = Tensor(x.data.copy(), requires_grad=True)
    y = f(seed)
    if y.size != 1:
        raise ValueError("grad_check: f must be scalar-valued")
    backward(y)
    analytic = seed.grad if seed.grad is not None else np.zeros_like(seed.data)

    numeric = np.zeros_like(x.data)
    flat = numeric.reshape(-1)
    base = x.data.copy()
    with no_grad():
        for i in range(base.size):
            probe = base.reshape(-1)
            orig = probe[i]
            probe[i] = orig + h
            hi = f(Tensor(base)).item()
            probe[i] = orig - h
            lo = f(Tensor(base)).item()
            probe[i] = orig
            flat[i] = (hi - lo) / (2.0 * h)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise FloatingPointError("grad_check: non-finite values encountered")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
