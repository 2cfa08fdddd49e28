"""Dense float64 tensors and a tape-based reverse-mode gradient engine.

Every array is a row-major float64 ndarray of rank 1..3.  Operations record
a backward closure on the active :class:`Tape`; replaying the tape in
reverse propagates gradients from a scalar loss into every participating
tensor, accumulating additively.  Rank-3 tensors act as stacks of matrices:
``matmul`` and friends follow numpy broadcasting over the leading axis, so
per-frame graphs can be processed as one batched operation.

Concurrency: the active tape is thread-local, so independent evaluation
contexts may run forwards concurrently against shared (read-only)
parameters.  A single forward/backward pass owns its tape exclusively;
gradient accumulation happens inside that pass only.
"""

from __future__ import annotations

import math
import threading

import numpy as np

LOG_CLAMP = 1e-12
NORM_EPS = 1e-8
_NODE_NORM_EPS = 1e-8


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Operand values violate a domain precondition."""


class GradientCheckError(RuntimeError):
    """A gradient check could not be evaluated."""


class Tensor:
    """Dense float64 array of rank 1..3 with an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 3:
            raise DimensionError(f"tensor rank {arr.ndim} > 3 (shape {arr.shape})")
        self.data = arr
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # convenience operators; all dispatch to the taped ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """Named learnable tensor; its gradient buffer is always allocated."""

    __slots__ = ("value", "name")

    def __init__(self, value, name: str):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.grad = np.zeros_like(self.value.data)
        self.name = name

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    def zero_grad(self):
        self.value.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations for one forward pass.

    Each record is a closure that reads the output gradient and scatters
    contributions into the input tensors.  ``backward`` replays the record
    in reverse, visiting each operation exactly once.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, backward_fn):
        self._records.append(backward_fn)

    def __len__(self):
        return len(self._records)

    def backward(self, root: Tensor):
        if root.data.size != 1:
            raise DimensionError(f"backward root must be scalar, got {root.shape}")
        if not np.isfinite(root.data).all():
            raise DomainError("backward root is not finite")
        root.grad = np.ones_like(root.data)
        for fn in reversed(self._records):
            fn()


def _record(backward_fn):
    tape = _active_tape()
    if tape is not None:
        tape.record(backward_fn)


def _acc(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape`` (trailing-aligned)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data + b.data)

    def backward(a=a, b=b, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    _record(backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data - b.data)

    def backward(a=a, b=b, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    _record(backward)
    return out


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _coerce(a)
        c = float(b)
        out = Tensor(a.data * c)

        def backward_scalar(a=a, out=out, c=c):
            g = out.grad
            if g is None:
                return
            _acc(a, g * c)

        _record(backward_scalar)
        return out

    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data * b.data)

    def backward(a=a, b=b, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    _record(backward)
    return out


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data / b.data)

    def backward(a=a, b=b, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, _unbroadcast(g / b.data, a.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    _record(backward)
    return out


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank>=2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(a=a, b=b, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    _record(backward)
    return out


def transpose(a) -> Tensor:
    """Swap the last two axes (plain transpose for matrices)."""
    a = _coerce(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank>=2, got {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2).copy())

    def backward(a=a, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, np.swapaxes(g, -1, -2))

    _record(backward)
    return out


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.reshape(shape).copy())

    def backward(a=a, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, g.reshape(a.shape))

    _record(backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise DimensionError(f"concat rank mismatch: {ref.shape} vs {t.shape}")
        for ax in range(ref.ndim):
            if ax != (axis % ref.ndim) and t.shape[ax] != ref.shape[ax]:
                raise DimensionError(f"concat off-axis shape mismatch: {ref.shape} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis % t.ndim] for t in tensors]

    def backward(tensors=tensors, out=out, sizes=sizes, axis=axis):
        g = out.grad
        if g is None:
            return
        start = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis % g.ndim] = slice(start, start + n)
            _acc(t, g[tuple(sl)])
            start += n

    _record(backward)
    return out


def slice_rows(a, start: int, stop: int) -> Tensor:
    """Contiguous slice along the leading axis."""
    a = _coerce(a)
    out = Tensor(a.data[start:stop].copy())

    def backward(a=a, out=out, start=start, stop=stop):
        g = out.grad
        if g is None:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[start:stop] += g

    _record(backward)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_axis(a, axis) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=True))

    def backward(a=a, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, np.broadcast_to(g, a.shape).copy())

    _record(backward)
    return out


def sum_all(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.asarray([a.data.sum()]))

    def backward(a=a, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, np.full(a.shape, g[0]))

    _record(backward)
    return out


def mean_axis(a, axis) -> Tensor:
    a = _coerce(a)
    if isinstance(axis, tuple):
        n = 1
        for ax in axis:
            n *= a.shape[ax]
    else:
        n = a.shape[axis]
    return mul(sum_axis(a, axis), 1.0 / n)


def mean_rows(a) -> Tensor:
    """Arithmetic mean over the row axis: (n, d) -> (1, d)."""
    a = _coerce(a)
    if a.ndim != 2:
        raise DimensionError(f"mean_rows expects a matrix, got {a.shape}")
    return mean_axis(a, 0)


# ---------------------------------------------------------------------------
# elementwise functions


def exp(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.exp(a.data))

    def backward(a=a, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, g * out.data)

    _record(backward)
    return out


def log(a) -> Tensor:
    """Natural log with inputs clamped to >= LOG_CLAMP; constant below it."""
    a = _coerce(a)
    x = np.maximum(a.data, LOG_CLAMP)
    out = Tensor(np.log(x))

    def backward(a=a, out=out, x=x):
        g = out.grad
        if g is None:
            return
        _acc(a, np.where(a.data > LOG_CLAMP, g / x, 0.0))

    _record(backward)
    return out


def sqrt(a) -> Tensor:
    a = _coerce(a)
    if (a.data < 0).any():
        raise DomainError("sqrt of negative value")
    r = np.sqrt(a.data)
    out = Tensor(r)

    def backward(a=a, out=out, r=r):
        g = out.grad
        if g is None:
            return
        _acc(a, np.where(r > 0, g * 0.5 / np.where(r > 0, r, 1.0), 0.0))

    _record(backward)
    return out


def square(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data * a.data)

    def backward(a=a, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, 2.0 * g * a.data)

    _record(backward)
    return out


def powf(a, p: float) -> Tensor:
    """Elementwise power for strictly positive inputs."""
    a = _coerce(a)
    if (a.data <= 0).any():
        raise DomainError("powf requires strictly positive input")
    out = Tensor(a.data**p)

    def backward(a=a, out=out, p=p):
        g = out.grad
        if g is None:
            return
        _acc(a, g * p * a.data ** (p - 1.0))

    _record(backward)
    return out


def maximum(a, floor: float) -> Tensor:
    """Elementwise max with a constant floor (clamp from below)."""
    a = _coerce(a)
    out = Tensor(np.maximum(a.data, floor))

    def backward(a=a, out=out, floor=floor):
        g = out.grad
        if g is None:
            return
        _acc(a, np.where(a.data > floor, g, 0.0))

    _record(backward)
    return out


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)), np.exp(a.data) / (1.0 + np.exp(a.data)))
    out = Tensor(s)

    def backward(a=a, out=out, s=s):
        g = out.grad
        if g is None:
            return
        _acc(a, g * s * (1.0 - s))

    _record(backward)
    return out


def relu(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward(a=a, out=out):
        g = out.grad
        if g is None:
            return
        _acc(a, np.where(a.data > 0, g, 0.0))

    _record(backward)
    return out


def elu(a, alpha: float = 1.0) -> Tensor:
    a = _coerce(a)
    neg = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    out = Tensor(np.where(a.data > 0, a.data, neg))

    def backward(a=a, out=out, neg=neg, alpha=alpha):
        g = out.grad
        if g is None:
            return
        _acc(a, g * np.where(a.data > 0, 1.0, neg + alpha))

    _record(backward)
    return out


def identity(a) -> Tensor:
    return _coerce(a)


ACTIVATIONS = {
    "elu": elu,
    "relu": relu,
    "identity": identity,
    "sigmoid": sigmoid,
}


# ---------------------------------------------------------------------------
# structured primitives


def row_softmax(a, scale: float = 1.0) -> Tensor:
    """Softmax of ``scale * a`` along the last axis, with max subtraction.

    Each row sums to one and every entry is strictly inside (0, 1).
    """
    if scale <= 0:
        raise DomainError(f"row_softmax scale must be > 0, got {scale}")
    a = _coerce(a)
    z = scale * a.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward(a=a, out=out, p=p, scale=scale):
        g = out.grad
        if g is None:
            return
        inner = (g * p).sum(axis=-1, keepdims=True)
        _acc(a, scale * p * (g - inner))

    _record(backward)
    return out


def node_norm(x, gain, bias, axis=0) -> Tensor:
    """Standardize each feature channel over the node axis, then scale/shift.

    Per-channel statistics are taken over ``axis`` (an int or tuple), so a
    stack of per-frame graphs can normalize within frames (axis=1) or over
    every node in the video (axis=(0, 1)).  Deterministic and independent
    of batch composition, which is what replaces batch normalization here.
    """
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + _NODE_NORM_EPS)
    y = xc * inv
    out = Tensor(y * gain.data + bias.data)

    def backward(x=x, gain=gain, bias=bias, out=out, y=y, inv=inv, axis=axis):
        g = out.grad
        if g is None:
            return
        _acc(gain, _unbroadcast(g * y, gain.shape))
        _acc(bias, _unbroadcast(g, bias.shape))
        gy = g * gain.data
        m1 = gy.mean(axis=axis, keepdims=True)
        m2 = (gy * y).mean(axis=axis, keepdims=True)
        _acc(x, inv * (gy - m1 - y * m2))

    _record(backward)
    return out


def graph_conv(x, adj, weight, activation: str = "identity", normalize: bool = True) -> Tensor:
    """One graph convolution: act(D^-1/2 (A+I) D^-1/2 X W).

    ``adj`` must be square with nonnegative entries; ``D`` is the degree
    matrix of A+I.  With ``normalize`` off the symmetric scaling is skipped
    and (A+I) X W is used directly (testing/ablation only).  Both ``x`` and
    ``adj`` may be rank-3 stacks sharing a leading axis.
    """
    x, adj = _coerce(x), _coerce(adj)
    weight = weight.value if isinstance(weight, Parameter) else _coerce(weight)
    n = x.shape[-2]
    if adj.shape[-1] != adj.shape[-2] or adj.shape[-1] != n:
        raise DimensionError(f"adjacency {adj.shape} does not match {n} nodes")
    if (adj.data < 0).any():
        raise DomainError("adjacency has a negative entry")
    if activation not in ACTIVATIONS and activation != "softmax_rows":
        raise DomainError(f"unknown activation {activation!r}")

    eye = Tensor(np.broadcast_to(np.eye(n), adj.shape).copy())
    ahat = add(adj, eye)
    if normalize:
        deg = sum_axis(ahat, -1)  # (..., n, 1), entries >= 1
        r = powf(deg, -0.5)
        scaled = mul(mul(ahat, r), transpose(r))
    else:
        scaled = ahat
    h = matmul(matmul(scaled, x), weight)
    if activation == "softmax_rows":
        return row_softmax(h, 1.0)
    return ACTIVATIONS[activation](h)


def cosine_affinity(x, wa, wb) -> Tensor:
    """Pairwise cosine similarity between two linear projections of ``x``.

    Entry (i, j) is the cosine of the angle between projection-A of node i
    and projection-B of node j.  Rows whose projected norm vanishes fall
    back to a NORM_EPS denominator instead of raising.
    """
    x = _coerce(x)
    wa = wa.value if isinstance(wa, Parameter) else _coerce(wa)
    wb = wb.value if isinstance(wb, Parameter) else _coerce(wb)
    a = matmul(x, wa)
    b = matmul(x, wb)
    na = maximum(sqrt(sum_axis(square(a), -1)), NORM_EPS)
    nb = maximum(sqrt(sum_axis(square(b), -1)), NORM_EPS)
    return div(matmul(a, transpose(b)), mul(na, transpose(nb)))


def linear(x, weight, bias=None) -> Tensor:
    w = weight.value if isinstance(weight, Parameter) else weight
    out = matmul(x, w)
    if bias is not None:
        b = bias.value if isinstance(bias, Parameter) else bias
        out = add(out, b)
    return out


def clamp_row_normalize(raw, floor: float = 1e-6) -> Tensor:
    """Clamp entries to >= floor, then normalize rows to sum to one."""
    clamped = maximum(raw, floor)
    return div(clamped, sum_axis(clamped, -1))


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(f, params, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor.  Returns the worst relative error over every parameter entry,
    where the relative error uses a floor of 1e-3 in the denominator to
    absorb finite-difference noise at tiny magnitudes.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise DomainError(f"gradient_check eps {eps} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise GradientCheckError("function value is not finite at the base point")
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradientCheckError(
                    f"non-finite value while perturbing {p.name}[{i}]"
                )
            fd = (fp - fm) / (2.0 * eps)
            err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-3)
            worst = max(worst, err)
    return worst
