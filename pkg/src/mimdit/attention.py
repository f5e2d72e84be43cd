"""The four attention mechanisms used as expert-group bodies.

All mechanisms map a TokenSequence [L, D] to a TokenSequence [L, D] as pure
functions over immutable parameters. Residual connections live in the
routing layer so mechanisms compose identically; multi-head support exists
behind a config field but defaults to one head.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, ParameterError
from .nn import Linear, Module, parameter

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class TokenSequence:
    """Tokens [L, D] carrying the spatial grid they were flattened from."""

    tokens: T.Tensor
    grid_height: int
    grid_width: int

    def __post_init__(self):
        if self.tokens.data.ndim != 2:
            raise DimensionError(f"token sequences are rank-2, got shape {self.tokens.shape}")
        if self.grid_height * self.grid_width != self.tokens.shape[0]:
            raise DimensionError(
                f"grid {self.grid_height}x{self.grid_width} does not cover {self.tokens.shape[0]} tokens"
            )

    @property
    def length(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]

    def with_tokens(self, tokens):
        return TokenSequence(tokens, self.grid_height, self.grid_width)


class AttentionParams(Module):
    """Query/key/value/output projections, all square D x D."""

    def __init__(self, dim, rng, heads=1):
        if heads < 1 or dim % heads != 0:
            raise ConfigurationError(f"head count {heads} must divide dim {dim}")
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.output = Linear(dim, dim, rng)
        self.heads = heads
        self.dim = dim


class ChannelAttentionParams(AttentionParams):
    """Adds the learned affinity temperature of transposed channel attention."""

    def __init__(self, dim, rng, heads=1):
        super().__init__(dim, rng, heads=heads)
        self.temperature = parameter([1.0])


class SEParams(Module):
    """Two-layer squeeze-excitation bottleneck D -> D/r -> D."""

    def __init__(self, dim, rng, reduction=4):
        if reduction < 1 or dim % reduction != 0:
            raise ConfigurationError(f"SE reduction {reduction} must divide dim {dim}")
        self.squeeze = Linear(dim, dim // reduction, rng)
        self.excite = Linear(dim // reduction, dim, rng)
        self.dim = dim


def _check_dim(x, params, mechanism):
    if x.dim != params.dim:
        raise DimensionError(f"{mechanism}: token dim {x.dim} does not match parameter dim {params.dim}")


def _split_heads(t, heads):
    if heads == 1:
        return [t]
    d = t.shape[1]
    return T.split(t, [d // heads] * heads, axis=1)


def _merge_heads(parts):
    if len(parts) == 1:
        return parts[0]
    return T.concat(parts, axis=1)


def multihead_attention(tokens, p):
    """Scaled dot-product attention over a raw [L, D] tensor."""
    q = p.query(tokens)
    k = p.key(tokens)
    v = p.value(tokens)
    d_head = p.dim // p.heads
    scale = 1.0 / np.sqrt(d_head)
    outs = []
    for qh, kh, vh in zip(_split_heads(q, p.heads), _split_heads(k, p.heads), _split_heads(v, p.heads)):
        scores = T.matmul(qh, T.transpose(kh)) * scale
        attn = T.softmax(scores, axis=1)
        outs.append(T.matmul(attn, vh))
    return p.output(_merge_heads(outs))


def spatial_self_attention(x, p):
    _check_dim(x, p, "spatial_self_attention")
    return x.with_tokens(multihead_attention(x.tokens, p))


def _l2_normalize_rows(t):
    norm = T.sqrt(T.tensor_sum(t * t, axis=1, keepdims=True) + _NORM_EPS)
    return t / norm


def channel_self_attention(x, p):
    """Attention across the channel axis: D x D affinity over length-L descriptors."""
    _check_dim(x, p, "channel_self_attention")
    q = p.query(x.tokens)
    k = p.key(x.tokens)
    v = p.value(x.tokens)
    outs = []
    for qh, kh, vh in zip(_split_heads(q, p.heads), _split_heads(k, p.heads), _split_heads(v, p.heads)):
        qn = _l2_normalize_rows(T.transpose(qh))
        kn = _l2_normalize_rows(T.transpose(kh))
        affinity = T.matmul(qn, T.transpose(kn)) * p.temperature
        weights = T.softmax(affinity, axis=1)
        outs.append(T.transpose(T.matmul(weights, T.transpose(vh))))
    return x.with_tokens(p.output(_merge_heads(outs)))


def window_partition(tokens, grid_height, grid_width, window):
    """[L, D] row-major grid tokens -> [nW, window*window, D] window blocks."""
    if grid_height % window != 0 or grid_width % window != 0:
        raise ConfigurationError(
            f"grid {grid_height}x{grid_width} is not divisible by window {window}"
        )
    d = tokens.shape[1]
    nh, nw = grid_height // window, grid_width // window
    t = T.reshape(tokens, (nh, window, nw, window, d))
    t = T.transpose(t, (0, 2, 1, 3, 4))
    return T.reshape(t, (nh * nw, window * window, d))


def window_reverse(windows, grid_height, grid_width, window):
    """Inverse of window_partition, bit-exact."""
    d = windows.shape[2]
    nh, nw = grid_height // window, grid_width // window
    t = T.reshape(windows, (nh, nw, window, window, d))
    t = T.transpose(t, (0, 2, 1, 3, 4))
    return T.reshape(t, (grid_height * grid_width, d))


def swin_attention(x, p, window, shift):
    """Window-partitioned attention with an optional cyclic shift.

    Consecutive uses alternate shift=0 and shift=window//2; the caller picks
    the shift (blocks alternate by parity) since mechanisms are stateless.
    """
    _check_dim(x, p, "swin_attention")
    if not 0 <= shift < window:
        raise ParameterError(f"shift {shift} must satisfy 0 <= shift < window {window}")
    h, w, d = x.grid_height, x.grid_width, x.dim
    if h % window != 0 or w % window != 0:
        raise ConfigurationError(f"grid {h}x{w} is not divisible by window {window}")
    t = x.tokens
    if shift:
        t = T.reshape(t, (h, w, d))
        t = T.roll(t, (-shift, -shift), axis=(0, 1))
        t = T.reshape(t, (h * w, d))
    windows = window_partition(t, h, w, window)
    n_windows, window_len, _ = windows.shape
    attended = []
    for block in T.split(windows, [1] * n_windows, axis=0):
        flat = T.reshape(block, (window_len, d))
        out = multihead_attention(flat, p)
        attended.append(T.reshape(out, (1, window_len, d)))
    merged = T.concat(attended, axis=0) if len(attended) > 1 else attended[0]
    t = window_reverse(merged, h, w, window)
    if shift:
        t = T.reshape(t, (h, w, d))
        t = T.roll(t, (shift, shift), axis=(0, 1))
        t = T.reshape(t, (h * w, d))
    return x.with_tokens(t)


def se_attention(x, p):
    """Squeeze-excitation: mean-pooled descriptor -> per-channel scales in (0,1)."""
    _check_dim(x, p, "se_attention")
    pooled = T.tensor_mean(x.tokens, axis=0, keepdims=True)
    scales = T.sigmoid(p.excite(T.gelu(p.squeeze(pooled))))
    return x.with_tokens(x.tokens * scales)
