"""Dense arrays with reverse-mode automatic differentiation.

Every differentiable op records its parent tensors and a backward closure on
the computation graph. ``backward(loss)`` replays the recorded closures in
reverse topological order, accumulating ``dloss/dx`` into ``grad`` for every
leaf tensor created with ``requires_grad=True``. Intermediate grads are freed
as soon as they have been consumed.

Conventions:

* Broadcasting follows numpy's trailing-axis alignment rules. Gradients of
  broadcast operands are summed back down to the operand's shape.
* Supported dtypes are float32 and float64. Gradient checks and most tests
  run in float64; training runs in float32.
* Ops never mutate their inputs, and outputs of ops on finite inputs are
  finite wherever the math allows it (softmax subtracts the row max,
  softplus is computed in log-space, and so on).
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import special as _special

_FLOAT_DTYPES = (np.float32, np.float64)

# Global autograd switch, toggled by no_grad().
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (fast inference path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    """A numpy-backed tensor participating in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------
    # basic introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # ------------------------------------------------------------------
    # method aliases for the functional ops
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def flip(self, axis):
        return flip(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return abs_(self)

    def backward(self):
        backward(self)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ----------------------------------------------------------------------
# graph plumbing
# ----------------------------------------------------------------------

def _from_op(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad leaf reachable from `loss`.

    `loss` must be a scalar. Grads accumulate, so call ``zero_grad`` on the
    leaves (or build a fresh graph) between backward passes.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar, got shape {loss.data.shape}")
    if loss._backward is None:
        if loss.requires_grad:
            _accum(loss, np.ones_like(loss.data))
        return
    # Iterative postorder over op nodes; deterministic because parent tuples
    # preserve creation order.
    order = []
    visited = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, parents = stack[-1]
        nxt = None
        for p in parents:
            if p._backward is not None and id(p) not in visited:
                nxt = p
                break
        if nxt is None:
            order.append(node)
            stack.pop()
        else:
            visited.add(id(nxt))
            stack.append((nxt, iter(nxt._parents)))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------

def _split_operand(x, dtype):
    """Return (Tensor or None, ndarray) for a Tensor-or-constant operand."""
    if isinstance(x, Tensor):
        return x, x.data
    return None, np.asarray(x, dtype=dtype)


def add(a, b) -> Tensor:
    at, ad = _split_operand(a, getattr(b, "dtype", np.float64))
    bt, bd = _split_operand(b, ad.dtype)
    out_data = ad + bd
    parents = [t for t in (at, bt) if t is not None]

    def backward_fn(g):
        if at is not None:
            _accum(at, _unbroadcast(g, ad.shape))
        if bt is not None:
            _accum(bt, _unbroadcast(g, bd.shape))

    return _from_op(out_data, parents, backward_fn)


def sub(a, b) -> Tensor:
    at, ad = _split_operand(a, getattr(b, "dtype", np.float64))
    bt, bd = _split_operand(b, ad.dtype)
    out_data = ad - bd
    parents = [t for t in (at, bt) if t is not None]

    def backward_fn(g):
        if at is not None:
            _accum(at, _unbroadcast(g, ad.shape))
        if bt is not None:
            _accum(bt, _unbroadcast(-g, bd.shape))

    return _from_op(out_data, parents, backward_fn)


def mul(a, b) -> Tensor:
    at, ad = _split_operand(a, getattr(b, "dtype", np.float64))
    bt, bd = _split_operand(b, ad.dtype)
    out_data = ad * bd
    parents = [t for t in (at, bt) if t is not None]

    def backward_fn(g):
        if at is not None:
            _accum(at, _unbroadcast(g * bd, ad.shape))
        if bt is not None:
            _accum(bt, _unbroadcast(g * ad, bd.shape))

    return _from_op(out_data, parents, backward_fn)


def div(a, b) -> Tensor:
    at, ad = _split_operand(a, getattr(b, "dtype", np.float64))
    bt, bd = _split_operand(b, ad.dtype)
    out_data = ad / bd
    parents = [t for t in (at, bt) if t is not None]

    def backward_fn(g):
        if at is not None:
            _accum(at, _unbroadcast(g / bd, ad.shape))
        if bt is not None:
            _accum(bt, _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _from_op(out_data, parents, backward_fn)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out_data = a.data ** exponent

    def backward_fn(g):
        _accum(a, g * exponent * a.data ** (exponent - 1.0))

    return _from_op(out_data, [a], backward_fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward_fn(g):
        _accum(a, g * out_data)

    return _from_op(out_data, [a], backward_fn)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward_fn(g):
        _accum(a, g / a.data)

    return _from_op(out_data, [a], backward_fn)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward_fn(g):
        _accum(a, g * (0.5 / out_data))

    return _from_op(out_data, [a], backward_fn)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward_fn(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _from_op(out_data, [a], backward_fn)


def abs_(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def backward_fn(g):
        _accum(a, g * np.sign(a.data))

    return _from_op(out_data, [a], backward_fn)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select `a` where `cond` else `b`. `cond` is a constant boolean mask."""
    cond = np.asarray(cond, dtype=bool)
    at, ad = _split_operand(a, getattr(b, "dtype", np.float64))
    bt, bd = _split_operand(b, ad.dtype)
    out_data = np.where(cond, ad, bd)
    parents = [t for t in (at, bt) if t is not None]

    def backward_fn(g):
        if at is not None:
            _accum(at, _unbroadcast(np.where(cond, g, 0.0), ad.shape))
        if bt is not None:
            _accum(bt, _unbroadcast(np.where(cond, 0.0, g), bd.shape))

    return _from_op(out_data, parents, backward_fn)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _from_op(out_data, [a], backward_fn)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)])
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    inv = 1.0 / float(count)

    def backward_fn(g):
        if axis is None:
            _accum(a, np.broadcast_to(g * inv, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g * inv, a.data.shape))

    return _from_op(out_data, [a], backward_fn)


def max_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction. Gradient routes to the first occurrence of the max."""
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out_data = np.asarray(flat[idx])

        def backward_fn(g):
            buf = np.zeros_like(a.data).reshape(-1)
            buf[idx] = g
            _accum(a, buf.reshape(a.data.shape))

        return _from_op(out_data, [a], backward_fn)

    out_data = a.data.max(axis=axis, keepdims=keepdims)
    idx = np.argmax(a.data, axis=axis)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, np.expand_dims(idx, axis), g, axis)
        _accum(a, buf)

    return _from_op(out_data, [a], backward_fn)


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        _accum(a, g.reshape(a.data.shape))

    return _from_op(out_data, [a], backward_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = a.data.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward_fn(g):
        _accum(a, g.transpose(inv))

    return _from_op(out_data, [a], backward_fn)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out_data = a.data.swapaxes(ax1, ax2)

    def backward_fn(g):
        _accum(a, g.swapaxes(ax1, ax2))

    return _from_op(out_data, [a], backward_fn)


def flip(a: Tensor, axis: int) -> Tensor:
    out_data = np.flip(a.data, axis=axis)

    def backward_fn(g):
        _accum(a, np.flip(g, axis=axis))

    return _from_op(out_data, [a], backward_fn)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out_data = np.broadcast_to(a.data, shape)

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _from_op(out_data, [a], backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _from_op(out_data, tensors, backward_fn)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _from_op(out_data, tensors, backward_fn)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int/ellipsis) indexing; advanced indexing unsupported."""
    out_data = a.data[index]

    def backward_fn(g):
        buf = np.zeros_like(a.data)
        buf[index] += g
        _accum(a, buf)

    return _from_op(out_data, [a], backward_fn)


def gather(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Pick elements along `axis` per np.take_along_axis semantics."""
    indices = np.asarray(indices)
    out_data = np.take_along_axis(a.data, indices, axis=axis)

    def backward_fn(g):
        buf = np.zeros_like(a.data)
        grids = list(np.indices(g.shape, sparse=True))
        grids[axis] = np.broadcast_to(indices, g.shape)
        np.add.at(buf, tuple(grids), g)
        _accum(a, buf)

    return _from_op(out_data, [a], backward_fn)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _from_op(out_data, [a, b], backward_fn)


# ----------------------------------------------------------------------
# fused neural ops
# ----------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically safe softmax: shifts by the max along `axis`."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _from_op(out_data, [a], backward_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward_fn(g):
        _accum(a, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _from_op(out_data, [a], backward_fn)


def softplus(a: Tensor) -> Tensor:
    out_data = np.logaddexp(0.0, a.data)

    def backward_fn(g):
        _accum(a, g * _special.expit(a.data))

    return _from_op(out_data, [a], backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_tanh_grad(x: np.ndarray, t: np.ndarray = None) -> np.ndarray:
    # `t` is the forward's tanh term; recomputed only when called standalone.
    if t is None:
        t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def _gelu_exact_grad(x: np.ndarray, cdf: np.ndarray = None) -> np.ndarray:
    if cdf is None:
        cdf = 0.5 * (1.0 + _special.erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def gelu(a: Tensor, exact: bool = False) -> Tensor:
    """GELU activation; tanh approximation by default, erf form if `exact`."""
    x = a.data
    if exact:
        cdf = 0.5 * (1.0 + _special.erf(x * _INV_SQRT2))
        out_data = x * cdf

        def backward_fn(g):
            _accum(a, g * _gelu_exact_grad(x, cdf))
    else:
        t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        out_data = 0.5 * x * (1.0 + t)

        def backward_fn(g):
            _accum(a, g * _gelu_tanh_grad(x, t))

    return _from_op(out_data, [a], backward_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift per channel."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (dxhat - m1 - xhat * m2))

    return _from_op(out_data, [a, gain, bias], backward_fn)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; scales kept values by 1/(1-rate)."""
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {rate}")
    keep = rng.random(a.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    factor = keep.astype(a.data.dtype) * scale
    out_data = a.data * factor

    def backward_fn(g):
        _accum(a, g * factor)

    return _from_op(out_data, [a], backward_fn)


def linear_recurrence(coeff: Tensor, update: Tensor, time_axis: int = -3) -> Tensor:
    """Run h[t] = coeff[t] * h[t-1] + update[t] along `time_axis`, h[-1] = 0.

    The loop over time happens inside this single op, so long sequences do
    not inflate the graph. Backward is the reverse-time recurrence.
    """
    if coeff.data.shape != update.data.shape:
        raise ShapeError(
            f"linear_recurrence operand shapes differ: {coeff.data.shape} "
            f"vs {update.data.shape}")
    axis = time_axis if time_axis >= 0 else coeff.data.ndim + time_axis
    a_seq = np.moveaxis(coeff.data, axis, 0)
    u_seq = np.moveaxis(update.data, axis, 0)
    steps = a_seq.shape[0]
    h_seq = np.empty_like(u_seq)
    prev = np.zeros_like(u_seq[0]) if steps else None
    for t in range(steps):
        prev = a_seq[t] * prev + u_seq[t]
        h_seq[t] = prev
    out_data = np.moveaxis(h_seq, 0, axis).copy()

    def backward_fn(g):
        g_seq = np.moveaxis(g, axis, 0)
        da = np.empty_like(a_seq)
        du = np.empty_like(u_seq)
        carry = np.zeros_like(u_seq[0])
        for t in range(steps - 1, -1, -1):
            total = g_seq[t] + carry
            du[t] = total
            da[t] = total * (h_seq[t - 1] if t > 0 else 0.0)
            carry = total * a_seq[t]
        _accum(coeff, np.moveaxis(da, 0, axis))
        _accum(update, np.moveaxis(du, 0, axis))

    return _from_op(out_data, [coeff, update], backward_fn)
