"""Reverse-mode automatic differentiation on dense float64 tensors.

Execution is eager: every primitive computes its value immediately and,
when a tape is active and some input requires gradients, appends a record
to that tape. ``backward`` replays the tape in reverse execution order
(a valid reverse topological order, since every input to an operation
must have been produced earlier) and accumulates gradients into the
``grad`` slot of leaf tensors with ``+=`` semantics.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "OPS",
    "primitive_forward",
    "backward",
    "finite_difference_check",
    "AdamState",
    "adam_step",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "concat",
    "gather_rows",
    "scatter_add",
    "tsum",
    "tmean",
    "silu",
    "sigmoid",
    "square",
    "sqrt",
    "exp",
    "log",
    "clip",
    "broadcast_to",
    "slice_cols",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NonFiniteError(RuntimeError):
    """Raised when a NaN or infinity is found where finite values are required."""


class Tensor:
    """Dense float64 array with an optional gradient accumulator.

    ``grad`` is ``None`` until a backward pass (or the caller) populates it;
    it always has the same shape as ``values``. Tensors that never entered a
    live tape are plain immutable values and safe to share across threads.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad=False):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def item(self):
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and ndarrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return mul(self, _lift(-1.0))


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeEntry:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE = threading.local()


def _active_tape():
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered record of executed primitives, usable as a context manager.

    Entering a tape makes it the active recording target for the current
    thread. Only one tape is active at a time per thread.
    """

    def __init__(self):
        self.entries = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.tape = None
        return False

    def __len__(self):
        return len(self.entries)

    def backward(self, loss):
        backward(self, loss)


def backward(tape, loss):
    """Backpropagate from a scalar ``loss`` through ``tape``.

    Leaf tensors (requires_grad inputs not produced on this tape) receive
    ``∂loss/∂leaf`` accumulated into their ``grad`` slot. Calling backward
    again without zeroing grads adds a second full gradient.
    """
    if loss.values.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.values.shape}")
    produced = {id(e.output) for e in tape.entries}
    # Local adjoint map so intermediate tensors never keep stale grads.
    adjoint = {id(loss): (loss, np.ones_like(loss.values))}
    for entry in reversed(tape.entries):
        got = adjoint.pop(id(entry.output), None)
        if got is None:
            continue
        _, out_grad = got
        grads = entry.backward_fn(out_grad)
        for tensor, g in zip(entry.inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in adjoint:
                adjoint[key][1].__iadd__(g)
            else:
                adjoint[key] = (tensor, np.array(g, dtype=np.float64, copy=True))
    for key, (tensor, g) in adjoint.items():
        if key not in produced and tensor.requires_grad:
            tensor.accumulate_grad(g)


def _record(op, inputs, out_values, backward_fn):
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    if needs:
        tape.entries.append(_TapeEntry(op, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.values.shape, b.values.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.values.shape} and {b.values.shape} do not broadcast"
        ) from None


# --- primitive operations ---------------------------------------------------


def matmul(a, b):
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(
            f"matmul: shapes {a.values.shape} and {b.values.shape} are incompatible"
        )
    out = a.values @ b.values

    def bw(g):
        return (g @ b.values.T, a.values.T @ g)

    return _record("matmul", (a, b), out, bw)


def add(a, b):
    _check_broadcast(a, b, "add")
    out = a.values + b.values

    def bw(g):
        return (_unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape))

    return _record("add", (a, b), out, bw)


def sub(a, b):
    _check_broadcast(a, b, "sub")
    out = a.values - b.values

    def bw(g):
        return (_unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape))

    return _record("sub", (a, b), out, bw)


def mul(a, b):
    _check_broadcast(a, b, "mul")
    out = a.values * b.values

    def bw(g):
        return (
            _unbroadcast(g * b.values, a.values.shape),
            _unbroadcast(g * a.values, b.values.shape),
        )

    return _record("mul", (a, b), out, bw)


def div(a, b):
    _check_broadcast(a, b, "div")
    out = a.values / b.values

    def bw(g):
        return (
            _unbroadcast(g / b.values, a.values.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape),
        )

    return _record("div", (a, b), out, bw)


def concat(tensors, axis=1):
    tensors = [_lift(t) for t in tensors]
    base = list(tensors[0].values.shape)
    for t in tensors[1:]:
        other = list(t.values.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        ):
            raise ShapeError(
                f"concat: shapes {tensors[0].values.shape} and {t.values.shape} "
                f"differ off axis {axis}"
            )
    out = np.concatenate([t.values for t in tensors], axis=axis)
    widths = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record("concat", tuple(tensors), out, bw)


def gather_rows(a, index):
    index = np.asarray(index, dtype=np.int64)
    out = a.values[index]

    def bw(g):
        acc = np.zeros_like(a.values)
        np.add.at(acc, index, g)
        return (acc,)

    return _record("gather_rows", (a,), out, bw)


def scatter_add(src, index, num_rows):
    """Accumulate rows of ``src`` into ``num_rows`` output slots by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    if src.values.shape[0] != index.shape[0]:
        raise ShapeError(
            f"scatter_add: {src.values.shape[0]} rows vs {index.shape[0]} indices"
        )
    out = np.zeros((num_rows,) + src.values.shape[1:], dtype=np.float64)
    np.add.at(out, index, src.values)

    def bw(g):
        return (g[index],)

    return _record("scatter_add", (src,), out, bw)


def tsum(a, axis=None, keepdims=False):
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.values.shape).copy(),)

    return _record("sum", (a,), out, bw)


def tmean(a, axis=None, keepdims=False):
    out = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.values.size if axis is None else a.values.shape[axis]

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.values.shape) / count,)

    return _record("mean", (a,), out, bw)


def _sigmoid_values(x):
    # Branch on sign to keep exp() away from overflow.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid_values(a.values)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, bw)


def silu(a):
    s = _sigmoid_values(a.values)
    out = a.values * s

    def bw(g):
        return (g * s * (1.0 + a.values * (1.0 - s)),)

    return _record("silu", (a,), out, bw)


def square(a):
    out = a.values * a.values

    def bw(g):
        return (g * 2.0 * a.values,)

    return _record("square", (a,), out, bw)


def sqrt(a):
    out = np.sqrt(a.values)

    def bw(g):
        return (g * 0.5 / out,)

    return _record("sqrt", (a,), out, bw)


def exp(a):
    out = np.exp(a.values)

    def bw(g):
        return (g * out,)

    return _record("exp", (a,), out, bw)


def log(a):
    out = np.log(a.values)

    def bw(g):
        return (g / a.values,)

    return _record("log", (a,), out, bw)


def clip(a, lo, hi):
    out = np.clip(a.values, lo, hi)
    mask = (a.values >= lo) & (a.values <= hi)

    def bw(g):
        return (g * mask,)

    return _record("clip", (a,), out, bw)


def broadcast_to(a, shape):
    try:
        out = np.broadcast_to(a.values, shape).copy()
    except ValueError:
        raise ShapeError(
            f"broadcast_to: cannot broadcast {a.values.shape} to {tuple(shape)}"
        ) from None

    def bw(g):
        return (_unbroadcast(g, a.values.shape),)

    return _record("broadcast", (a,), out, bw)


def slice_cols(a, start, stop):
    if a.values.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-d tensor, got {a.values.shape}")
    out = a.values[:, start:stop].copy()

    def bw(g):
        acc = np.zeros_like(a.values)
        acc[:, start:stop] = g
        return (acc,)

    return _record("slice_cols", (a,), out, bw)


OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "concat": concat,
    "gather_rows": gather_rows,
    "scatter_add": scatter_add,
    "sum": tsum,
    "mean": tmean,
    "silu": silu,
    "sigmoid": sigmoid,
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
    "log": log,
    "clip": clip,
    "broadcast": broadcast_to,
    "slice_cols": slice_cols,
}


def primitive_forward(op_kind, *inputs, **kwargs):
    """Dispatch a primitive by name; raises KeyError for unknown kinds."""
    return OPS[op_kind](*inputs, **kwargs)


# --- gradient verification ---------------------------------------------------


def finite_difference_check(f, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given parameter tensors to a scalar Tensor and must be
    a pure function of their values. The relative error for each entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.values).all():
        raise NonFiniteError("finite_difference_check: f is non-finite at the base point")
    backward(tape, loss)

    def eval_at():
        out = f(params)
        return float(out.values)

    worst = 0.0
    for pi, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        aflat = analytic.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = eval_at()
            flat[j] = orig - step
            f_minus = eval_at()
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(
                    f"finite_difference_check: non-finite f at param {pi} entry {j}"
                )
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(1.0, abs(aflat[j]), abs(numeric))
            worst = max(worst, abs(aflat[j] - numeric) / denom)
    return worst


# --- Adam optimizer ----------------------------------------------------------


class AdamState:
    """First/second moment buffers and a shared step counter."""

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Apply one Adam update in place.

    ``params`` is a dict name -> Tensor and ``grads`` a dict name -> ndarray
    covering the same keys. A non-finite gradient refuses the whole step.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for '{name}'")
    b1, b2 = betas
    state.step += 1
    t = state.step
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.values))
        v = state.v.setdefault(name, np.zeros_like(p.values))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
    return state
