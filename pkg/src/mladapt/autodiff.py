"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records itself on the active tape when any input requires a
gradient. A single `Tape.backward` sweep visits the recorded operations once,
in reverse execution order (execution order is already topological).
"""

import threading

import numpy as np


class ShapeError(ValueError):
    """Input extents do not conform to a primitive's contract."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


_STACK = threading.local()


def _tape_stack():
    if not hasattr(_STACK, "tapes"):
        _STACK.tapes = []
    return _STACK.tapes


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives for one forward pass."""

    def __init__(self):
        # entries: (output, inputs, vjp) where vjp(g) yields one gradient
        # (or None) per input
        self._records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        """Accumulate d(loss)/d(t) into `t.grad` for every tensor touched.

        Repeated calls accumulate: each call adds exactly one unit of
        gradient to the leaves.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        accum = {id(loss): np.ones_like(loss.data)}
        touched = {id(loss): loss}
        for out, inputs, vjp in reversed(self._records):
            g = accum.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in accum:
                    # out-of-place: gi may be a view of another accumulator
                    accum[key] = accum[key] + gi
                else:
                    accum[key] = gi
                    touched[key] = inp
        for key, t in touched.items():
            if t.requires_grad:
                g = np.asarray(accum[key], dtype=np.float64)
                if g.shape != t.data.shape:
                    g = g.reshape(t.data.shape)
                t.grad = g.copy() if t.grad is None else t.grad + g


class no_grad:
    """Context manager that suspends recording on any active tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


class Tensor:
    """Dense n-dimensional float64 value with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _result(cls, data, requires_grad):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not a primitive")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    # -- unary primitives as methods --------------------------------------

    def relu(self):
        return relu(self)

    def softmax(self):
        return softmax(self)

    def log_softmax(self):
        return log_softmax(self)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _record(out_data, inputs, vjp):
    tape = _active_tape()
    req = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor._result(out_data, req)
    if req:
        tape._records.append((out, tuple(inputs), vjp))
    return out


def _as_const(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- binary primitives -----------------------------------------------------


def add(a, b):
    """Elementwise sum; also accepts a trailing-axis bias or a scalar."""
    a, b = _as_const(a), _as_const(b)
    if a.shape == b.shape:
        def vjp(g):
            return g, g
    elif b.size == 1:
        def vjp(g):
            return g, np.sum(g).reshape(b.shape)
    elif a.size == 1:
        def vjp(g):
            return np.sum(g).reshape(a.shape), g
    elif b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.ndim - 1))

        def vjp(g):
            return g, np.sum(g, axis=axes)
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _record(a.data + b.data, (a, b), vjp)


def mul(a, b):
    """Elementwise product; either side may be a scalar."""
    a, b = _as_const(a), _as_const(b)
    if not (a.shape == b.shape or a.size == 1 or b.size == 1):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g * bd
        gb = g * ad
        if a.size == 1 and ga.shape != a.shape:
            ga = np.sum(ga).reshape(a.shape)
        if b.size == 1 and gb.shape != b.shape:
            gb = np.sum(gb).reshape(b.shape)
        return ga, gb

    return _record(ad * bd, (a, b), vjp)


def matmul(a, b):
    """Matrix product of 2-D operands or stacked 3-D operands."""
    a, b = _as_const(a), _as_const(b)
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _record(ad @ bd, (a, b), vjp)


def logaddexp(a, b):
    """Elementwise log(exp(a) + exp(b)) with max-subtraction; -inf safe."""
    a, b = _as_const(a), _as_const(b)
    if a.shape != b.shape:
        raise ShapeError(f"logaddexp: incompatible shapes {a.shape} and {b.shape}")
    out_data = np.logaddexp(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        # where both inputs are -inf the output is -inf; gradient is 0 there
        with np.errstate(invalid="ignore"):
            ga = np.where(np.isneginf(out_data), 0.0, g * np.exp(ad - out_data))
            gb = np.where(np.isneginf(out_data), 0.0, g * np.exp(bd - out_data))
        return ga, gb

    return _record(out_data, (a, b), vjp)


# -- unary primitives -------------------------------------------------------


def relu(x):
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), vjp)


def softmax(x):
    """Softmax over the last axis."""
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        inner = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _record(s, (x,), vjp)


def log_softmax(x):
    """Log-softmax over the last axis."""
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def vjp(g):
        return (g - probs * np.sum(g, axis=-1, keepdims=True),)

    return _record(out_data, (x,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match "
            f"last extent {n}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gain.data

    def vjp(g):
        lead = tuple(range(x.ndim - 1))
        dgain = np.sum(g * xhat, axis=lead)
        dbias = np.sum(g, axis=lead)
        dxhat = g * gd
        dx = inv * (
            dxhat
            - np.mean(dxhat, axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _record(xhat * gd + bias.data, (x, gain, bias), vjp)


def conv1d(x, w, b, stride, padding=1):
    """1-D convolution over [T, C_in] with kernel [K, C_in, C_out]."""
    if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    t, c_in = x.shape
    k, _, c_out = w.shape
    t_out = (t + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ShapeError(
            f"conv1d: input of {t} frames too short for kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    xpad = np.zeros((t + 2 * padding, c_in))
    xpad[padding:padding + t] = x.data
    wd = w.data
    out_data = np.tile(b.data, (t_out, 1))
    taps = [slice(j, j + stride * (t_out - 1) + 1, stride) for j in range(k)]
    for j in range(k):
        out_data += xpad[taps[j]] @ wd[j]

    def vjp(g):
        gxpad = np.zeros_like(xpad)
        gw = np.empty_like(wd)
        for j in range(k):
            gxpad[taps[j]] += g @ wd[j].T
            gw[j] = xpad[taps[j]].T @ g
        return gxpad[padding:padding + t], gw, np.sum(g, axis=0)

    return _record(out_data, (x, w, b), vjp)


# -- shape manipulation ------------------------------------------------------


def reshape(x, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return _record(x.data.reshape(shape), (x,), vjp)


def transpose(x, axes):
    inverse = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return _record(x.data.transpose(axes), (x,), vjp)


def slice_(x, key):
    """Basic (non-fancy) indexing; scatter-adds gradient back."""
    out_data = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _record(out_data, (x,), vjp)


def concat(tensors, axis=0):
    tensors = [_as_const(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp
    )


def gather_cols(x, idx):
    """Select columns of a 2-D tensor; repeated indices are allowed."""
    if x.ndim != 2:
        raise ShapeError(f"gather_cols: expected 2-D input, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx[None, :]), g)
        return (gx,)

    return _record(x.data[:, idx], (x,), vjp)


# -- reductions ---------------------------------------------------------------


def sum_(x):
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, shape),)

    return _record(np.sum(x.data).reshape(()), (x,), vjp)


def mean(x):
    shape = x.shape
    n = x.size

    def vjp(g):
        return (np.broadcast_to(g / n, shape),)

    return _record(np.mean(x.data).reshape(()), (x,), vjp)


# -- verification -------------------------------------------------------------


def finite_diff_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor. Relative error per coordinate is
    |analytic - central| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise ValueError("finite_diff_check: f must return a scalar")
    if not np.isfinite(y.data).all():
        raise NumericError("finite_diff_check: f(x) is not finite")
    tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x).item()
        flat[i] = orig - h
        lo = f(x).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("finite_diff_check: perturbed f(x) is not finite")
        central = (hi - lo) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - central) / max(1.0, abs(a)))
    return worst


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
