"""Attention, AdaIN and the two cross-attention fusion rules.

Feature maps are arrays shaped ``(batch, tokens, channels)``. Multi-head
tensors are ``(batch, heads, tokens, head_dim)`` and attention maps are
``(batch, heads, query_tokens, key_tokens)``. Everything here is a pure
function of its inputs.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

WEIGHTED_SUM = "weighted_sum"
CROSS_MODAL_ADAIN = "cross_modal_adain"
FUSION_MODES = (WEIGHTED_SUM, CROSS_MODAL_ADAIN)

# Below this std a channel is treated as constant and its normalized value is 0.
STD_EPS = 1e-5


def _check_finite(name, x):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class ChannelStatistics:
    mean: np.ndarray  # (batch, 1, channels)
    std: np.ndarray  # (batch, 1, channels), population std


@dataclass(frozen=True)
class ProjectionSet:
    """Query/key/value weights of one attention layer.

    Each weight maps ``channels -> heads * head_dim``.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    heads: int

    def __post_init__(self):
        inner = self.w_q.shape[1]
        if self.w_k.shape[1] != inner or self.w_v.shape[1] != inner:
            raise DimensionError("W_Q, W_K, W_V must share their output width")
        if self.w_k.shape[0] != self.w_v.shape[0]:
            raise DimensionError("W_K and W_V must read the same input width")
        if inner % self.heads:
            raise DimensionError(f"width {inner} not divisible by {self.heads} heads")

    @property
    def head_dim(self):
        return self.w_q.shape[1] // self.heads

    def project(self, f, context=None):
        """Return per-head ``(Q, K, V)``; ``context`` defaults to ``f`` (self-attention)."""
        context = f if context is None else context
        q = split_heads(f @ self.w_q, self.heads)
        k = split_heads(context @ self.w_k, self.heads)
        v = split_heads(context @ self.w_v, self.heads)
        return q, k, v


def split_heads(x, heads):
    b, n, c = x.shape
    if c % heads:
        raise DimensionError(f"{c} channels not divisible by {heads} heads")
    return x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def attention_map(q, k):
    """Row-stochastic ``softmax(Q K^T / sqrt(d))``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim < 2 or k.ndim != q.ndim:
        raise DimensionError(f"Q and K rank mismatch: {q.shape} vs {k.shape}")
    if q.shape[-1] != k.shape[-1] or q.shape[:-2] != k.shape[:-2]:
        raise DimensionError(f"Q {q.shape} and K {k.shape} are incompatible")
    d = q.shape[-1]
    if d <= 0:
        raise DimensionError("head dimension must be positive")
    _check_finite("Q", q)
    _check_finite("K", k)
    logits = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(d)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def apply_map(m, v):
    """``M @ V`` with shape checks; used both for fresh and injected maps."""
    if m.shape[:-2] != v.shape[:-2] or m.shape[-1] != v.shape[-2]:
        raise DimensionError(f"map {m.shape} cannot weight values {v.shape}")
    return m @ v


def attention(q, k, v, return_map=False):
    """Scaled dot-product attention ``softmax(QK^T/sqrt(d)) V``.

    Works on any leading batch/head axes. With ``return_map=True`` the
    attention map is returned alongside the output so callers can record it.
    """
    v = np.asarray(v, dtype=np.float64)
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"K has {k.shape[-2]} tokens but V has {v.shape[-2]}")
    _check_finite("V", v)
    m = attention_map(q, k)
    out = apply_map(m, v)
    if return_map:
        return out, m
    return out


def channel_statistics(f):
    """Per-instance, per-channel mean and population std over the token axis."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3 or f.shape[1] < 1:
        raise DimensionError(f"expected (batch, tokens, channels), got {f.shape}")
    mean = f.mean(axis=1, keepdims=True)
    std = np.sqrt(((f - mean) ** 2).mean(axis=1, keepdims=True))
    return ChannelStatistics(mean=mean, std=std)


def adain(x, y):
    """Re-scale ``x`` so each channel takes ``y``'s mean and std.

    Channels of ``x`` whose std is below ``STD_EPS`` normalize to 0, so a
    constant content channel maps to the style mean.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 3 or y.ndim != 3:
        raise DimensionError("adain expects (batch, tokens, channels) inputs")
    if x.shape[0] != y.shape[0] or x.shape[2] != y.shape[2]:
        raise DimensionError(f"content {x.shape} and style {y.shape} disagree on batch/channels")
    sx = channel_statistics(x)
    sy = channel_statistics(y)
    degenerate = sx.std < STD_EPS
    safe_std = np.where(degenerate, 1.0, sx.std)
    normalized = np.where(degenerate, 0.0, (x - sx.mean) / safe_std)
    return sy.std * normalized + sy.mean


def cross_modal_adain_fusion(f_text, f_style):
    """Normalize text-queried features by the style-queried features' statistics."""
    return adain(f_text, f_style)


def weighted_sum_fusion(f_text, f_style, lam):
    """Adapter baseline: ``f_text + lam * f_style``."""
    if np.shape(f_text) != np.shape(f_style):
        raise DimensionError(f"{np.shape(f_text)} != {np.shape(f_style)}")
    return f_text + lam * f_style


def fuse(f_text, f_style, mode, lam=1.0):
    """Combine the two cross-attention branch outputs; ``f_style=None`` keeps text only."""
    if f_style is None:
        return f_text
    if mode == WEIGHTED_SUM:
        return weighted_sum_fusion(f_text, f_style, lam)
    if mode == CROSS_MODAL_ADAIN:
        return cross_modal_adain_fusion(f_text, f_style)
    raise ValueError(f"unknown fusion mode {mode!r}")
