"""Neural building blocks: modules, attention, and selective state spaces.

All blocks operate on :class:`~modecast.tensor.Tensor` values and accept
arbitrary leading batch dimensions; sequence/token axes are always the
trailing ones documented per block. Blocks that use dropout take an optional
``rng``; passing ``rng=None`` disables dropout (inference behaviour).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_FILL = -1e30


class Parameter(Tensor):
    """A leaf tensor updated by the optimizer.

    `decay` marks whether weight decay applies; matrices get it, biases,
    norm gains and SSM state parameters do not.
    """

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.decay = decay


class Module:
    """Minimal parameter container with named tree traversal."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{full}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(
                f"state dict mismatch; missing={missing}, unexpected={unexpected}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise T.ShapeError(
                    f"parameter {name}: checkpoint shape {arr.shape} != "
                    f"model shape {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    """Affine map on the last axis: y = x @ w + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float64, bias: bool = True):
        self.w = Parameter(_xavier(rng, in_dim, out_dim, dtype), decay=True)
        self.b = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = out + self.b
        return out


class MLP(Module):
    """Stacked affine layers with GELU between them (not after the last)."""

    def __init__(self, dims, rng, dtype=np.float64, gelu_exact: bool = False):
        if len(dims) < 2:
            raise ValueError(f"MLP needs at least two dims, got {dims}")
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]
        self.gelu_exact = gelu_exact

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x, exact=self.gelu_exact)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


# ----------------------------------------------------------------------
# attention
# ----------------------------------------------------------------------

class MultiHeadAttention(Module):
    """Scaled dot-product attention with head split/merge projections.

    ``key_valid`` marks which key/value tokens may be attended to; invalid
    keys receive exactly zero weight, and a query whose keys are all invalid
    yields a zero output vector rather than NaN.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator,
                 dtype=np.float64, dropout_rate: float = 0.0):
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.dropout_rate = dropout_rate
        self.w_q = Parameter(_xavier(rng, dim, dim, dtype), decay=True)
        self.w_k = Parameter(_xavier(rng, dim, dim, dtype), decay=True)
        self.w_v = Parameter(_xavier(rng, dim, dim, dtype), decay=True)
        self.w_o = Parameter(_xavier(rng, dim, dim, dtype), decay=True)

    def _split_heads(self, x: Tensor) -> Tensor:
        # [..., S, C] -> [..., H, S, Dh]
        new_shape = x.shape[:-1] + (self.num_heads, self.head_dim)
        return T.reshape(x, new_shape).swapaxes(-3, -2)

    def __call__(self, query: Tensor, kv: Tensor, key_valid: np.ndarray = None,
                 rng: np.random.Generator = None) -> Tensor:
        if kv.shape[-2] == 0:
            # No keys at all: same zero fallback as an all-masked row.
            return Tensor(np.zeros(query.shape, dtype=query.dtype))
        q = self._split_heads(T.matmul(query, self.w_q))
        k = self._split_heads(T.matmul(kv, self.w_k))
        v = self._split_heads(T.matmul(kv, self.w_v))
        logits = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        if key_valid is not None:
            key_valid = np.asarray(key_valid, dtype=bool)
            mask = key_valid[..., None, None, :]
            logits = T.where(mask, logits, MASK_FILL)
        weights = T.softmax(logits, axis=-1)
        if rng is not None and self.dropout_rate > 0.0:
            weights = T.dropout(weights, self.dropout_rate, rng)
        out = T.matmul(weights, v).swapaxes(-3, -2)
        out = T.reshape(out, out.shape[:-2] + (self.num_heads * self.head_dim,))
        out = T.matmul(out, self.w_o)
        if key_valid is not None:
            has_any = key_valid.any(axis=-1)
            if not has_any.all():
                out = out * has_any[..., None, None].astype(out.dtype)
        return out


class AttentionLayer(Module):
    """Pre-norm residual attention followed by a pre-norm residual FFN.

    Self-attention when called without `kv`; cross-attention otherwise
    (keys/values are used as given, only the query stream is normed).
    """

    def __init__(self, dim: int, num_heads: int, rng, dtype=np.float64,
                 dropout_rate: float = 0.0, ffn_mult: int = 4,
                 gelu_exact: bool = False):
        self.norm_attn = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, num_heads, rng, dtype, dropout_rate)
        self.norm_ffn = LayerNorm(dim, dtype)
        self.ffn = MLP([dim, ffn_mult * dim, dim], rng, dtype, gelu_exact)
        self.dropout_rate = dropout_rate

    def __call__(self, x: Tensor, kv: Tensor = None, key_valid=None,
                 rng: np.random.Generator = None) -> Tensor:
        q = self.norm_attn(x)
        if kv is None:
            kv = q
        x = x + self.attn(q, kv, key_valid=key_valid, rng=rng)
        h = self.ffn(self.norm_ffn(x))
        if rng is not None and self.dropout_rate > 0.0:
            h = T.dropout(h, self.dropout_rate, rng)
        return x + h


# ----------------------------------------------------------------------
# selective state-space scan
# ----------------------------------------------------------------------

def softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


ZOH_SERIES_CUTOFF = 1e-6


def zoh_discretize(a, b, delta):
    """Zero-order-hold discretization of a diagonal continuous system.

    Given decay `a` (< 0 for stability), input matrix entries `b`, and a
    positive step `delta`, returns ``a_bar = exp(delta * a)`` and
    ``b_bar = (exp(delta * a) - 1) / a * b``. Below ``|delta * a| < 1e-6``
    the series limit ``b_bar = delta * b`` is used instead. All operands
    broadcast elementwise.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    delta = delta if isinstance(delta, Tensor) else Tensor(delta)
    if np.any(delta.data <= 0.0):
        raise ValueError("zoh_discretize requires delta > 0")
    delta_a = delta * a
    a_bar = T.exp(delta_a)
    small = np.abs(delta_a.data) < ZOH_SERIES_CUTOFF
    # Keep the unused branch finite so no NaN ever enters the graph.
    safe_a = T.where(small, -1.0, a)
    b_bar = T.where(small, delta * b, (a_bar - 1.0) / safe_a * b)
    return a_bar, b_bar


class SelectiveSsm(Module):
    """Input-dependent diagonal state-space parameters for one scan direction.

    State decay is ``a = -exp(a_log)`` per (channel, state) pair; the input
    and readout rows ``b_t``/``c_t`` and the step size ``delta_t`` are
    projections of the current input, so the dynamics change per step.
    """

    def __init__(self, inner_dim: int, state_dim: int, rng: np.random.Generator,
                 dtype=np.float64, delta_init: float = 0.1):
        self.inner_dim = inner_dim
        self.state_dim = state_dim
        a0 = np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (inner_dim, 1))
        self.a_log = Parameter(np.log(a0).astype(dtype))
        self.w_b = Parameter(_xavier(rng, inner_dim, state_dim, dtype), decay=True)
        self.b_b = Parameter(np.zeros(state_dim, dtype=dtype))
        self.w_c = Parameter(_xavier(rng, inner_dim, state_dim, dtype), decay=True)
        self.b_c = Parameter(np.zeros(state_dim, dtype=dtype))
        self.w_delta = Parameter(_xavier(rng, inner_dim, inner_dim, dtype), decay=True)
        self.b_delta = Parameter(
            np.full(inner_dim, softplus_inverse(delta_init), dtype=dtype))


def selective_scan(x: Tensor, ssm: SelectiveSsm, step_valid: np.ndarray = None) -> Tensor:
    """Causal selective scan over ``x`` of shape [..., T, E].

    Per step, the continuous parameters are discretized with a zero-order
    hold and the diagonal recurrence ``h_t = a_bar_t * h_{t-1} + b_bar_t *
    x_t`` is advanced from ``h = 0``; the output is ``y_t = <c_t, h_t>`` per
    channel. When ``step_valid`` (shape [..., T]) is given, invalid steps
    leave the hidden state untouched and emit zeros, so leading padding
    cannot influence later outputs.
    """
    steps = x.shape[-2]
    if steps == 0:
        return x
    delta = T.softplus(T.matmul(x, ssm.w_delta) + ssm.b_delta)   # [..., T, E]
    b_row = T.matmul(x, ssm.w_b) + ssm.b_b                       # [..., T, N]
    c_row = T.matmul(x, ssm.w_c) + ssm.b_c                       # [..., T, N]
    a = -T.exp(ssm.a_log)                                        # [E, N]
    delta_e = T.reshape(delta, delta.shape + (1,))               # [..., T, E, 1]
    delta_a = delta_e * a                                        # [..., T, E, N]
    a_bar = T.exp(delta_a)
    b_e = T.reshape(b_row, b_row.shape[:-1] + (1, b_row.shape[-1]))  # [..., T, 1, N]
    small = np.abs(delta_a.data) < ZOH_SERIES_CUTOFF
    safe_a = T.where(small, -1.0, a)
    b_bar = T.where(small, delta_e * b_e, (a_bar - 1.0) / safe_a * b_e)
    x_e = T.reshape(x, x.shape + (1,))                           # [..., T, E, 1]
    update = b_bar * x_e                                         # [..., T, E, N]
    if step_valid is not None:
        valid = np.asarray(step_valid, dtype=bool)[..., None, None]
        a_bar = T.where(valid, a_bar, 1.0)
        update = T.where(valid, update, 0.0)
    h = T.linear_recurrence(a_bar, update, time_axis=-3)         # [..., T, E, N]
    c_e = T.reshape(c_row, c_row.shape[:-1] + (1, c_row.shape[-1]))
    y = (h * c_e).sum(axis=-1)                                   # [..., T, E]
    if step_valid is not None:
        y = y * np.asarray(step_valid, dtype=x.dtype.type)[..., None]
    return y


def lti_conv_form(x_seq: np.ndarray, a_bar: np.ndarray, b_bar: np.ndarray,
                  c_row: np.ndarray) -> np.ndarray:
    """Run a *time-invariant* diagonal SSM as an explicit convolution.

    The kernel is ``K[m] = sum_n c[n] * a_bar[:, n]^m * b_bar[:, n]`` and the
    output ``y[t] = sum_{m<=t} K[m] * x[t-m]`` per channel. Used as the
    second route when checking the scan against frozen (non-selective)
    parameters; numpy in, numpy out, no autodiff.
    """
    x_seq = np.asarray(x_seq, dtype=np.float64)
    steps, channels = x_seq.shape
    powers = np.ones_like(np.asarray(a_bar, dtype=np.float64))
    kernel = np.empty((steps, channels))
    for m in range(steps):
        kernel[m] = (powers * b_bar * c_row).sum(axis=-1)
        powers = powers * a_bar
    y = np.zeros_like(x_seq)
    for t in range(steps):
        for m in range(t + 1):
            y[t] += kernel[m] * x_seq[t - m]
    return y


class MambaBlock(Module):
    """Pre-norm residual block: project in, scan causally, gate, project out.

    The input is lifted to ``expand * dim`` channels split into a scan
    stream and a gate stream; the scan output is multiplied by the
    GELU-activated gate before projecting back to the residual width.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64,
                 expand: int = 2, state_dim: int = 16, gelu_exact: bool = False):
        inner = expand * dim
        self.inner_dim = inner
        self.norm = LayerNorm(dim, dtype)
        self.in_proj = Linear(dim, 2 * inner, rng, dtype)
        self.ssm = SelectiveSsm(inner, state_dim, rng, dtype)
        self.out_proj = Linear(inner, dim, rng, dtype)
        self.gelu_exact = gelu_exact

    def __call__(self, x: Tensor, step_valid: np.ndarray = None) -> Tensor:
        h = self.in_proj(self.norm(x))
        u = h[..., :self.inner_dim]
        gate = h[..., self.inner_dim:]
        y = selective_scan(u, self.ssm, step_valid=step_valid)
        y = y * T.gelu(gate, exact=self.gelu_exact)
        return x + self.out_proj(y)


class BiMambaBlock(Module):
    """Bidirectional variant: forward scan plus a reversed backward scan.

    Both directions share the input/gate/output projections; each has its
    own scan parameters. The backward branch scans the reversed sequence and
    is reversed again before the two are summed, so swapping the two scans
    and flipping the input flips the output exactly.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64,
                 expand: int = 2, state_dim: int = 16, gelu_exact: bool = False):
        inner = expand * dim
        self.inner_dim = inner
        self.norm = LayerNorm(dim, dtype)
        self.in_proj = Linear(dim, 2 * inner, rng, dtype)
        self.ssm_fwd = SelectiveSsm(inner, state_dim, rng, dtype)
        self.ssm_bwd = SelectiveSsm(inner, state_dim, rng, dtype)
        self.out_proj = Linear(inner, dim, rng, dtype)
        self.gelu_exact = gelu_exact

    def __call__(self, x: Tensor) -> Tensor:
        h = self.in_proj(self.norm(x))
        u = h[..., :self.inner_dim]
        gate = h[..., self.inner_dim:]
        y_fwd = selective_scan(u, self.ssm_fwd)
        y_bwd = T.flip(selective_scan(T.flip(u, axis=-2), self.ssm_bwd), axis=-2)
        y = (y_fwd + y_bwd) * T.gelu(gate, exact=self.gelu_exact)
        return x + self.out_proj(y)
