"""Dense tensors with reverse-mode differentiation.

Exactly the operation set the mixer needs: affine maps over the last axis,
layer normalization, GELU / sigmoid / ReLU, elementwise arithmetic,
last-axis concatenation, axis permutation, reshape, and scalar reductions.

Differentiable operations executed inside a ``with Tape():`` block are
recorded in execution order; :func:`backward` replays the tape in reverse
and accumulates gradients into every reachable tensor with
``requires_grad`` set.  Outside a tape block the same functions run as
plain numpy computations.

A tensor's data buffer is treated as immutable after creation; only the
``grad`` slot changes (and parameter values, between steps, through
:meth:`Tensor.assign_`).  Each thread has its own tape stack, so
independent tapes may run concurrently on disjoint parameter sets.
"""

import threading

import numpy as np

from . import backend
from .errors import ShapeError, StateError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A dense float array plus a gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d to 1-d; 0-d is contiguous anyway
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

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

    def item(self):
        return float(self.data)

    def assign_(self, values):
        """Overwrite the data buffer in place (optimizer steps only)."""
        arr = np.asarray(values, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != tensor shape {self.data.shape}")
        self.data[...] = arr

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class Parameter:
    """A named tensor that always tracks gradients."""

    __slots__ = ("name", "tensor")

    def __init__(self, name, values, dtype=None):
        self.name = name
        self.tensor = Tensor(values, requires_grad=True, dtype=dtype)

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class Tape:
    """Execution-ordered record of differentiable operations.

    The record is consumed by one backward pass; a second pass over the
    same tape raises :class:`StateError`.
    """

    def __init__(self):
        self._entries = []
        self._consumed = False

    def __enter__(self):
        _local().stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _local().stack.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)

    def backward(self, loss):
        """Populate ``grad`` for every tensor the loss depends on."""
        if self._consumed:
            raise StateError("tape already consumed by a previous backward pass")
        if loss._tape is not self:
            raise StateError("loss was not recorded on this tape")
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._entries:
            raise StateError("tape is empty")
        self._consumed = True
        loss.grad = np.ones((), dtype=loss.dtype)
        for out, pull in reversed(self._entries):
            if out.grad is not None:
                pull(out.grad)


class _Local(threading.local):
    def __init__(self):
        self.stack = []


_STATE = _Local()


def _local():
    return _STATE


def current_tape():
    stack = _local().stack
    return stack[-1] if stack else None


def backward(loss):
    """Run the backward pass of the tape that recorded ``loss``."""
    if loss._tape is None:
        raise StateError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def as_tensor(x, dtype=None):
    if isinstance(x, Parameter):
        return x.tensor
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _accumulate(t, g, fresh=False):
    """Add ``g`` into t.grad.  ``fresh`` marks arrays the caller just
    allocated and does not alias anywhere, so they can be adopted without a
    defensive copy."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if (fresh and g.dtype == t.dtype) else np.array(g, dtype=t.dtype)
    else:
        t.grad += g


def _emit(inputs, data, pull):
    """Wrap op output; record the pull-back when a tape is active."""
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._entries.append((out, pull))
    return out


def _kern():
    return backend.kernels()


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _check_same_dtype(op, *tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


# ---------------------------------------------------------------------------
# affine / normalization / activations (backend kernels)
# ---------------------------------------------------------------------------


def linear(x, weight, bias=None):
    """y[..., o] = sum_i weight[o, i] * x[..., i] (+ bias[o])."""
    x = as_tensor(x)
    w = as_tensor(weight)
    b = as_tensor(bias) if bias is not None else None
    if w.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D, got {w.shape}")
    k_out, k_in = w.shape
    if x.ndim < 1 or x.shape[-1] != k_in:
        raise ShapeError(f"linear: input shape {x.shape} does not end in k_in={k_in} (weight {w.shape})")
    if b is not None and b.shape != (k_out,):
        raise ShapeError(f"linear: bias shape {b.shape} != ({k_out},)")
    _check_same_dtype("linear", *(t for t in (x, w, b) if t is not None))

    x2 = x.data.reshape(-1, k_in)
    y2 = _kern().linear_fwd(x2, w.data)
    if b is not None:
        y2 = y2 + b.data
    out_shape = x.shape[:-1] + (k_out,)

    def pull(g):
        g2 = np.ascontiguousarray(g.reshape(-1, k_out))
        if x.requires_grad:
            _accumulate(x, _kern().linear_bwd_x(g2, w.data).reshape(x.shape), fresh=True)
        if w.requires_grad:
            _accumulate(w, _kern().linear_bwd_w(g2, x2), fresh=True)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0), fresh=True)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(inputs, y2.reshape(out_shape), pull)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each last-axis vector to zero mean, unit population
    variance, then apply the affine pair (gamma, beta)."""
    x = as_tensor(x)
    g_ = as_tensor(gamma)
    b_ = as_tensor(beta)
    d = x.shape[-1]
    if g_.shape != (d,) or b_.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {g_.shape}/{b_.shape} != ({d},)")
    _check_same_dtype("layer_norm", x, g_, b_)

    x2 = x.data.reshape(-1, d)
    y2, xhat, invstd = _kern().layer_norm_fwd(x2, g_.data, b_.data, float(eps))

    def pull(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggamma, gbeta = _kern().layer_norm_bwd(g2, xhat, invstd, g_.data)
        if x.requires_grad:
            _accumulate(x, gx.reshape(x.shape), fresh=True)
        if g_.requires_grad:
            _accumulate(g_, ggamma, fresh=True)
        if b_.requires_grad:
            _accumulate(b_, gbeta, fresh=True)

    return _emit((x, g_, b_), y2.reshape(x.shape), pull)


def gelu(x):
    """Gaussian error linear unit, exact erf form."""
    x = as_tensor(x)
    flat = x.data.reshape(-1)
    y = _kern().gelu_fwd(flat)

    def pull(g):
        gx = _kern().gelu_bwd(np.ascontiguousarray(g.reshape(-1)), flat)
        _accumulate(x, gx.reshape(x.shape), fresh=True)

    return _emit((x,), y.reshape(x.shape), pull)


def sigmoid(x):
    """Elementwise logistic 1 / (1 + exp(-x))."""
    x = as_tensor(x)
    flat = x.data.reshape(-1)
    y = _kern().sigmoid_fwd(flat)

    def pull(g):
        gx = _kern().sigmoid_bwd(np.ascontiguousarray(g.reshape(-1)), y)
        _accumulate(x, gx.reshape(x.shape), fresh=True)

    return _emit((x,), y.reshape(x.shape), pull)


def relu(x):
    x = as_tensor(x)
    flat = x.data.reshape(-1)
    y = _kern().relu_fwd(flat)

    def pull(g):
        gx = _kern().relu_bwd(np.ascontiguousarray(g.reshape(-1)), flat)
        _accumulate(x, gx.reshape(x.shape), fresh=True)

    return _emit((x,), y.reshape(x.shape), pull)


ACTIVATIONS = {"gelu": gelu, "relu": relu, "sigmoid": sigmoid}


# ---------------------------------------------------------------------------
# elementwise / structural ops (numpy is already the right tool here)
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    _check_same_dtype("add", a, b)

    def pull(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _emit((a, b), a.data + b.data, pull)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    _check_same_dtype("sub", a, b)

    def pull(g):
        _accumulate(a, g)
        _accumulate(b, -g, fresh=True)

    return _emit((a, b), a.data - b.data, pull)


def hadamard(a, b):
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("hadamard", a, b)
    _check_same_dtype("hadamard", a, b)

    def pull(g):
        if a.requires_grad:
            _accumulate(a, g * b.data, fresh=True)
        if b.requires_grad:
            _accumulate(b, g * a.data, fresh=True)

    return _emit((a, b), a.data * b.data, pull)


def scale(x, c):
    x = as_tensor(x)
    c = float(c)

    def pull(g):
        _accumulate(x, g * c, fresh=True)

    return _emit((x,), x.data * c, pull)


def absolute(x):
    """|x|; the subgradient at 0 is taken as 0."""
    x = as_tensor(x)

    def pull(g):
        _accumulate(x, g * np.sign(x.data), fresh=True)

    return _emit((x,), np.abs(x.data), pull)


def sum_all(x):
    """Sum of all entries, as a scalar tensor."""
    x = as_tensor(x)

    def pull(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _emit((x,), np.asarray(x.data.sum(), dtype=x.dtype), pull)


def mean_all(x):
    x = as_tensor(x)
    return scale(sum_all(x), 1.0 / x.size)


def concat_last_axis(parts):
    """Concatenate along the final axis; all other axes must agree."""
    ts = [as_tensor(p) for p in parts]
    if not ts:
        raise ShapeError("concat_last_axis: no operands")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last_axis: leading shapes {lead} and {t.shape[:-1]} differ"
            )
    _check_same_dtype("concat_last_axis", *ts)
    widths = [t.shape[-1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def pull(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            _accumulate(t, np.ascontiguousarray(g[..., lo:hi]))

    return _emit(tuple(ts), np.concatenate([t.data for t in ts], axis=-1), pull)


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def pull(g):
        _accumulate(x, g.reshape(x.shape))

    return _emit((x,), data, pull)


def permute(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def pull(g):
        gt = np.ascontiguousarray(np.transpose(g, inverse))
        _accumulate(x, gt, fresh=gt is not g)

    return _emit((x,), np.ascontiguousarray(np.transpose(x.data, axes)), pull)
