"""Dense causal attention kernels: full, sink+window streaming, and the gated mixture.

All kernels take per-head matrices shaped ``(..., T, d_head)`` and work in
float64. Masked positions get ``-inf`` logits before a row-max-stabilized
softmax, so every row of the weight matrix sums to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class StreamingConfig:
    """Attention-sink size and recent-window length, both in tokens."""

    sink_size: int = 4
    window: int = 8

    def __post_init__(self):
        if self.sink_size < 0:
            raise InputError(f"sink_size must be >= 0, got {self.sink_size}")
        if self.window < 1:
            raise InputError(f"window must be >= 1, got {self.window}")

    @property
    def budget(self) -> int:
        return self.sink_size + self.window


def _check(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim < 2 or q.shape != k.shape or q.shape != v.shape:
        raise InputError(
            f"queries/keys/values must share shape (..., T, d_head); got {q.shape}, {k.shape}, {v.shape}"
        )
    for name, a in (("queries", q), ("keys", k), ("values", v)):
        if not np.all(np.isfinite(a)):
            raise InputError(f"{name} contain non-finite entries")
    return q, k, v


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def streaming_mask(T: int, cfg: StreamingConfig) -> np.ndarray:
    """Row t sees positions ``{0..A-1} ∪ {t-W+1..t}`` (causal)."""
    rows = np.arange(T)[:, None]
    cols = np.arange(T)[None, :]
    return (cols <= rows) & ((cols < cfg.sink_size) | (cols > rows - cfg.window))


def softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = np.where(mask, (q @ np.swapaxes(k, -1, -2)) * scale, -np.inf)
    return softmax(logits)


def masked_attention(q, k, v, mask):
    """Returns ``(output, weights)`` for an explicit boolean visibility mask."""
    p = attention_weights(q, k, mask)
    return p @ v, p


def full_attention(q, k, v) -> np.ndarray:
    q, k, v = _check(q, k, v)
    return masked_attention(q, k, v, causal_mask(q.shape[-2]))[0]


def streaming_attention(q, k, v, cfg: StreamingConfig) -> np.ndarray:
    q, k, v = _check(q, k, v)
    return masked_attention(q, k, v, streaming_mask(q.shape[-2], cfg))[0]


def mix(alpha, full_out: np.ndarray, stream_out: np.ndarray) -> np.ndarray:
    """Gate two kernel outputs; ``alpha`` broadcasts against the leading axes."""
    return alpha * full_out + (1.0 - alpha) * stream_out


def mixed_attention(q, k, v, cfg: StreamingConfig, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    q, k, v = _check(q, k, v)
    T = q.shape[-2]
    full_out = masked_attention(q, k, v, causal_mask(T))[0]
    stream_out = masked_attention(q, k, v, streaming_mask(T, cfg))[0]
    return mix(alpha, full_out, stream_out)


def attention_backward(q, k, v, p, d_out):
    """Gradients of ``softmax(mask(q k^T / sqrt(d))) v`` w.r.t. q, k, v.

    ``p`` is the weight matrix from the forward pass; masked entries are
    exactly zero there, so they drop out of the score gradient.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    d_p = d_out @ np.swapaxes(v, -1, -2)
    d_v = np.swapaxes(p, -1, -2) @ d_out
    d_s = p * (d_p - np.sum(d_p * p, axis=-1, keepdims=True)) * scale
    d_q = d_s @ k
    d_k = np.swapaxes(d_s, -1, -2) @ q
    return d_q, d_k, d_v


def attend_cached(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Single-query decode kernel: q ``(h, d)`` against cached ``(h, n, d)`` keys/values.

    No mask; the cache holds exactly the visible positions.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = (keys @ q[:, :, None])[:, :, 0] * scale
    w = softmax(logits)
    return (w[:, None, :] @ values)[:, 0, :]
