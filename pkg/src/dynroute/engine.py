"""Dense rank-4 tensors with reverse-mode automatic differentiation.

Every tensor is a float64 array of shape (B, C, H, W).  Operations executed
while a Graph is active are recorded on its tape in execution order, which is
a topological order by construction.  ``backward`` replays the tape in
reverse, accumulating gradients into every ``requires_grad`` leaf.

The op set is intentionally small: exactly what the gated multi-scale
networks in this package need.  No general broadcasting beyond pairing a
(B, C, H, W) tensor with a per-sample or per-channel factor.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import GraphError, NumericError, ShapeError, SizeError

# Element-count guard: a desk-scale engine has no business allocating more.
MAX_ELEMENTS = 2**33


# ---------------------------------------------------------------------------
# Tensor and Graph
# ---------------------------------------------------------------------------

class Tensor:
    """A (B, C, H, W) float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Arithmetic sugar; real work happens in the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


class _Record:
    """One recorded primitive: inputs, output, backward and replay callables."""

    __slots__ = ("name", "inputs", "output", "backward", "forward")

    def __init__(self, name, inputs, output, backward, forward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.forward = forward


_active = threading.local()


def _graph_stack():
    if not hasattr(_active, "stack"):
        _active.stack = []
    return _active.stack


def current_graph():
    """The innermost active Graph on this thread, or None."""
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Tape of recorded operations; single-threaded per instance.

    Use as a context manager around forward computation, then call
    ``backward(graph, loss)``.  Distinct graphs are independent and may live
    on distinct threads.
    """

    def __init__(self):
        self.records = []
        self._producer = {}  # id(tensor.data) -> record index

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        top = _graph_stack().pop()
        if top is not self:
            raise GraphError("graph context exited out of order")
        return False

    def add_record(self, rec):
        self.records.append(rec)
        self._producer[id(rec.output.data)] = len(self.records) - 1

    def producer_of(self, tensor):
        idx = self._producer.get(id(tensor.data))
        return None if idx is None else self.records[idx]

    def replay(self):
        """Re-execute every recorded forward and return the recomputed arrays.

        With unchanged inputs the result is bit-for-bit identical to the
        originally recorded outputs.
        """
        return [rec.forward(*(t.data for t in rec.inputs)) for rec in self.records]


def record(name, inputs, forward, backward):
    """Run ``forward`` on the input arrays and record it on the active graph.

    ``backward(out_grad)`` must return one gradient array (or None) per input.
    Outside any Graph context the op simply computes, which keeps pure
    inference free of tape overhead.
    """
    out_data = forward(*(t.data for t in inputs))
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    g = current_graph()
    if g is not None:
        g.add_record(_Record(name, tuple(inputs), out, backward, forward))
    return out


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------

def _check_dims(shape):
    if len(shape) != 4:
        raise ShapeError(f"need 4 dims, got {shape}")
    b, c, h, w = shape
    if b < 0 or min(c, h, w) < 1:
        # Only the batch dim may be zero (empty batch).
        if not (b == 0 and min(c, h, w) >= 1):
            raise ShapeError(f"bad dims {shape}: spatial/channel dims must be >= 1")
    n = 1
    for d in shape:
        n *= d
    if n > MAX_ELEMENTS:
        raise SizeError(f"tensor of {n} elements exceeds limit {MAX_ELEMENTS}")
    return shape


def zeros(shape, requires_grad=False, name=None):
    _check_dims(shape)
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def constant(shape, value, requires_grad=False, name=None):
    _check_dims(shape)
    return Tensor(np.full(shape, float(value)), requires_grad=requires_grad, name=name)


def normal(shape, seed, std=1.0, requires_grad=False, name=None):
    """Gaussian init, deterministic for a given seed."""
    _check_dims(shape)
    rng = np.random.Generator(np.random.PCG64(seed))
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad, name=name)


def from_array(arr, requires_grad=False, name=None):
    return Tensor(np.array(arr, dtype=np.float64, copy=True), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Elementwise / reduction primitives
# ---------------------------------------------------------------------------

def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def add(a, b):
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("add expects rank-4 tensors")
    return record(
        "add", [a, b],
        lambda x, y: x + y,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def mul(a, b):
    return record(
        "mul", [a, b],
        lambda x, y: x * y,
        lambda g: (_unbroadcast(g * b.data, a.data.shape),
                   _unbroadcast(g * a.data, b.data.shape)),
    )


def scale(a, c):
    c = float(c)
    return record("scale", [a], lambda x: c * x, lambda g: (c * g,))


def add_const(a, c):
    c = float(c)
    return record("add_const", [a], lambda x: x + c, lambda g: (g,))


def square(a):
    return mul(a, a)


def sum_all(a):
    return record(
        "sum_all", [a],
        lambda x: x.sum(dtype=np.float64).reshape(1, 1, 1, 1),
        lambda g: (np.broadcast_to(g.reshape(()), a.data.shape).copy(),),
    )


def mean_all(a):
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of empty tensor")
    return record(
        "mean_all", [a],
        lambda x: x.mean(dtype=np.float64).reshape(1, 1, 1, 1),
        lambda g: (np.broadcast_to(g.reshape(()) / n, a.data.shape).copy(),),
    )


def mean_batch(a):
    """Mean over the batch axis of a (B, 1, 1, 1) tensor -> (1, 1, 1, 1)."""
    if a.data.shape[1:] != (1, 1, 1):
        raise ShapeError(f"mean_batch expects (B,1,1,1), got {a.shape}")
    b = a.data.shape[0]
    return record(
        "mean_batch", [a],
        lambda x: x.mean(axis=0, keepdims=True, dtype=np.float64),
        lambda g: (np.broadcast_to(g / b, a.data.shape).copy(),),
    )


def max_channel(a):
    """Max over the channel axis, keepdims.  Ties resolve to the first index."""

    def fwd(x):
        return x.max(axis=1, keepdims=True)

    def bwd(g):
        idx = a.data.argmax(axis=1, keepdims=True)
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx, g, axis=1)
        return (out,)

    return record("max_channel", [a], fwd, bwd)


def slice_channel(a, j):
    j = int(j)

    def bwd(g):
        out = np.zeros_like(a.data)
        out[:, j:j + 1] = g
        return (out,)

    return record(f"slice_channel[{j}]", [a], lambda x: x[:, j:j + 1].copy(), bwd)


def relu(a):
    def bwd(g):
        return (g * (a.data > 0),)

    return record("relu", [a], lambda x: np.maximum(0.0, x), bwd)


def tanh(a):
    def bwd(g):
        y = np.tanh(a.data)
        return (g * (1.0 - y * y),)

    return record("tanh", [a], np.tanh, bwd)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(graph, loss):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf of the graph.

    Leaves that do not participate in the loss ancestry receive (accumulate)
    zero.  Returns a dict mapping leaf tensor -> gradient array.
    """
    if loss.data.shape != (1, 1, 1, 1):
        raise ShapeError(f"loss must be scalar-shaped (1,1,1,1), got {loss.shape}")
    if graph.producer_of(loss) is None:
        raise GraphError("loss was not produced by this graph")

    # Tape order must be topological: every input is either a leaf or was
    # produced by an earlier record.  Hand-tampered graphs fail here.
    produced = set()
    all_outputs = {id(rec.output.data) for rec in graph.records}
    for rec in graph.records:
        for t in rec.inputs:
            key = id(t.data)
            if key in all_outputs and key not in produced:
                raise GraphError(f"op {rec.name!r} consumes a tensor produced later "
                                 "(graph is not topologically ordered)")
        produced.add(id(rec.output.data))

    # Ancestry of the loss.
    needed = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        rec = graph.producer_of(t)
        if rec is None or id(rec.output.data) in needed:
            continue
        needed.add(id(rec.output.data))
        stack.extend(rec.inputs)

    grads = {id(loss.data): np.ones((1, 1, 1, 1))}
    for rec in reversed(graph.records):
        out_key = id(rec.output.data)
        if out_key not in needed or out_key not in grads:
            continue
        gout = grads.pop(out_key)
        gins = rec.backward(gout)
        if len(gins) != len(rec.inputs):
            raise GraphError(f"op {rec.name!r} returned {len(gins)} gradients "
                             f"for {len(rec.inputs)} inputs")
        for t, gi in zip(rec.inputs, gins):
            if gi is None:
                continue
            if gi.shape != t.data.shape:
                raise GraphError(f"op {rec.name!r}: gradient shape {gi.shape} "
                                 f"!= input shape {t.data.shape}")
            key = id(t.data)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    # Deposit into leaves (requires_grad inputs with no producer in this graph).
    result = {}
    done = set()
    for rec in graph.records:
        for t in rec.inputs:
            key = id(t.data)
            if key in done or not t.requires_grad or graph.producer_of(t) is not None:
                continue
            done.add(key)
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for leaf {t.name or key}")
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
            result[t] = g
    return result


def grad_check(f, params, eps=1e-5, max_coords=100, seed=0):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic callable returning a scalar Tensor; called
    with an active Graph it yields the analytic side, called bare it supplies
    the finite-difference evaluations (f(theta+eps) - f(theta-eps)) / (2 eps).
    Returns the max over sampled coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Graph() as g:
        loss = f()
    if not np.isfinite(loss.item()):
        raise NumericError("f() returned a non-finite value")
    backward(g, loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if len(coords) > max_coords:
        rng = np.random.Generator(np.random.PCG64(seed))
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in picks]

    worst = 0.0
    for i, j in coords:
        p = params[i]
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = f().item()
        flat[j] = orig - eps
        down = f().item()
        flat[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("finite-difference evaluation produced non-finite value")
        numeric = (up - down) / (2.0 * eps)
        ana = analytic[i].reshape(-1)[j]
        err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
