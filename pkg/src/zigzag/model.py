"""Frozen random toy transformer with trainable retrieval/streaming gates.

Each block is pre-norm attention (rotary positions) plus a pre-norm SiLU MLP,
both residual. Weights never train; only the gate matrix does. The gradient
with respect to the gates is a hand-written reverse pass over the recorded
forward activations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, NumericalError, TrainingError
from .kernels import (
    StreamingConfig,
    attention_backward,
    causal_mask,
    masked_attention,
    mix,
    streaming_mask,
)

log = logging.getLogger(__name__)

HEAD = "head"
LAYER = "layer"
RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 32
    vocab: int = 64
    seed: int = 0
    d_ff: int | None = None
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise InputError("n_layers and n_heads must be >= 1")
        if self.d_model % self.n_heads:
            raise InputError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_head % 2:
            raise InputError(f"rotary encoding needs an even head dim, got {self.d_head}")
        if self.vocab < 2:
            raise InputError("vocab must be >= 2")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 2 * self.d_model


@dataclass
class AlphaMatrix:
    """L x H gate values in [0, 1]. Layer granularity keeps every row constant."""

    values: np.ndarray
    granularity: str = HEAD

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputError(f"alpha matrix must be 2-D, got shape {self.values.shape}")
        if self.granularity not in (HEAD, LAYER):
            raise InputError(f"unknown granularity {self.granularity!r}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("alpha matrix has non-finite entries")
        if self.values.min(initial=0.0) < 0.0 or self.values.max(initial=0.0) > 1.0:
            raise InputError("alpha values must lie in [0, 1]")
        if self.granularity == LAYER and np.any(self.values != self.values[:, :1]):
            raise InputError("layer-granularity alpha rows must be constant")

    @classmethod
    def ones(cls, n_layers: int, n_heads: int, granularity: str = HEAD) -> "AlphaMatrix":
        return cls(np.ones((n_layers, n_heads)), granularity)

    @classmethod
    def from_layers(cls, layer_values, n_heads: int) -> "AlphaMatrix":
        col = np.asarray(layer_values, dtype=np.float64)[:, None]
        return cls(np.repeat(col, n_heads, axis=1), LAYER)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_text(self) -> str:
        L, H = self.shape
        rows = [" ".join(repr(float(a)) for a in row) for row in self.values]
        return "\n".join([f"{L} {H} {self.granularity}", *rows]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AlphaMatrix":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        try:
            L, H, gran = lines[0].split()
            L, H = int(L), int(H)
            rows = [[float(tok) for tok in ln.split()] for ln in lines[1:]]
        except (IndexError, ValueError) as exc:
            raise InputError(f"malformed alpha file: {exc}") from exc
        if len(rows) != L or any(len(r) != H for r in rows):
            raise InputError(f"alpha file header says {L}x{H} but body does not match")
        return cls(np.array(rows, dtype=np.float64).reshape(L, H), gran)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AlphaMatrix":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read alpha file {path}: {exc}") from exc
        return cls.from_text(text)


@dataclass(frozen=True)
class TrainSample:
    tokens: np.ndarray
    response_len: int
    depth: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64))
        if not 1 <= self.response_len <= len(self.tokens):
            raise InputError(f"response_len must be in [1, T], got {self.response_len}")


@dataclass(frozen=True)
class LossBreakdown:
    dist: float
    reg: float
    lam: float

    @property
    def total(self) -> float:
        return self.dist + self.lam * self.reg


# -- elementwise pieces --------------------------------------------------------


def rms_norm(x):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * r, r


def rms_norm_backward(x, r, dy):
    return r * dy - (r**3) * x * np.mean(dy * x, axis=-1, keepdims=True)


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def rope_tables(positions, d_head: int, base: float):
    inv = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv
    return np.cos(ang), np.sin(ang)


def apply_rope(x, cos, sin):
    h = x.shape[-1] // 2
    x1, x2 = x[..., :h], x[..., h:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


# -- model ---------------------------------------------------------------------


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class ForwardTrace:
    """Activations recorded by a forward pass; the reverse pass consumes these."""

    hidden: np.ndarray
    logits: np.ndarray
    keys: list = field(default_factory=list)  # per layer, rotated, (H, T, d_head)
    values: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    final_in: np.ndarray | None = None
    final_r: np.ndarray | None = None


class ToyTransformer:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        D, F, V = config.d_model, config.ff_width, config.vocab
        self.embed = rng.standard_normal((V, D))
        self.layers = []
        for _ in range(config.n_layers):
            self.layers.append(
                LayerWeights(
                    wq=rng.standard_normal((D, D)) / np.sqrt(D),
                    wk=rng.standard_normal((D, D)) / np.sqrt(D),
                    wv=rng.standard_normal((D, D)) / np.sqrt(D),
                    wo=rng.standard_normal((D, D)) / np.sqrt(D),
                    w1=rng.standard_normal((D, F)) / np.sqrt(D),
                    w2=rng.standard_normal((F, D)) / np.sqrt(F),
                )
            )
        self.unembed = rng.standard_normal((D, V)) / np.sqrt(D)

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def n_heads(self) -> int:
        return self.config.n_heads

    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.size == 0:
            raise InputError("tokens must be a nonempty 1-D sequence")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError("tokens must be integer ids")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab:
            raise InputError(f"token id out of vocab range [0, {self.config.vocab})")
        return tokens.astype(np.int64)

    def split_heads(self, x):
        # (T, D) -> (H, T, d_head)
        T = x.shape[0]
        return x.reshape(T, self.n_heads, self.config.d_head).transpose(1, 0, 2)

    def merge_heads(self, x):
        H, T, d = x.shape
        return x.transpose(1, 0, 2).reshape(T, H * d)

    def mlp(self, lw: LayerWeights, x):
        xn, r = rms_norm(x)
        z = xn @ lw.w1
        return x + silu(z) @ lw.w2, (xn, r, z)

    def trace(self, tokens, alpha=None, cfg: StreamingConfig | None = None, keep=False) -> ForwardTrace:
        """Run the dense forward pass.

        ``alpha=None`` runs every head in full attention only. Otherwise
        ``alpha`` is an ``(L, H)`` array and each head mixes full and
        streaming outputs. ``keep`` records what the reverse pass needs.
        """
        tokens = self.check_tokens(tokens)
        T = len(tokens)
        cos, sin = rope_tables(np.arange(T), self.config.d_head, self.config.rope_base)
        cmask = causal_mask(T)
        smask = streaming_mask(T, cfg) if alpha is not None else None
        x = self.embed[tokens]
        tr = ForwardTrace(hidden=None, logits=None)
        for l, lw in enumerate(self.layers):
            xn, r1 = rms_norm(x)
            q = apply_rope(self.split_heads(xn @ lw.wq), cos, sin)
            k = apply_rope(self.split_heads(xn @ lw.wk), cos, sin)
            v = self.split_heads(xn @ lw.wv)
            full_out, p_full = masked_attention(q, k, v, cmask)
            if alpha is None:
                o, stream_out, p_stream, a = full_out, None, None, None
            else:
                stream_out, p_stream = masked_attention(q, k, v, smask)
                a = alpha[l][:, None, None]
                o = mix(a, full_out, stream_out)
            x_mid = x + self.merge_heads(o) @ lw.wo
            x_out, (xn2, r2, z) = self.mlp(lw, x_mid)
            tr.keys.append(k)
            tr.values.append(v)
            if keep:
                tr.layers.append(
                    dict(x=x, r1=r1, q=q, k=k, v=v, full=full_out, stream=stream_out,
                         p_full=p_full, p_stream=p_stream, a=a, x_mid=x_mid, r2=r2, z=z)
                )
            x = x_out
        tr.final_in = x
        tr.hidden, tr.final_r = rms_norm(x)
        tr.logits = tr.hidden @ self.unembed
        return tr

    def forward_full(self, tokens) -> np.ndarray:
        return self.trace(tokens).hidden

    def forward_mixed(self, tokens, alpha: AlphaMatrix, cfg: StreamingConfig) -> np.ndarray:
        return self.trace(tokens, self._alpha_values(alpha), cfg).hidden

    def logits_full(self, tokens) -> np.ndarray:
        return self.trace(tokens).logits

    def _alpha_values(self, alpha) -> np.ndarray:
        values = alpha.values if isinstance(alpha, AlphaMatrix) else np.asarray(alpha, dtype=np.float64)
        if values.shape != (self.n_layers, self.n_heads):
            raise InputError(
                f"alpha shape {values.shape} does not match model ({self.n_layers}, {self.n_heads})"
            )
        return values

    def gate_gradient(self, tr: ForwardTrace, d_hidden) -> np.ndarray:
        """Reverse pass from d(loss)/d(final hidden) to d(loss)/d(alpha), shape (L, H)."""
        grad = np.zeros((self.n_layers, self.n_heads))
        cos, sin = rope_tables(np.arange(d_hidden.shape[0]), self.config.d_head, self.config.rope_base)
        dx = rms_norm_backward(tr.final_in, tr.final_r, d_hidden)
        for l in range(self.n_layers - 1, -1, -1):
            lw, c = self.layers[l], tr.layers[l]
            # MLP branch
            d_z = (dx @ lw.w2.T) * silu_grad(c["z"])
            dx = dx + rms_norm_backward(c["x_mid"], c["r2"], d_z @ lw.w1.T)
            # attention branch
            d_o = self.split_heads(dx @ lw.wo.T)
            grad[l] = np.sum(d_o * (c["full"] - c["stream"]), axis=(1, 2))
            if l == 0:
                break
            a = c["a"]
            dq, dk, dv = attention_backward(c["q"], c["k"], c["v"], c["p_full"], a * d_o)
            sq, sk, sv = attention_backward(c["q"], c["k"], c["v"], c["p_stream"], (1.0 - a) * d_o)
            dq = apply_rope(dq + sq, cos, -sin)
            dk = apply_rope(dk + sk, cos, -sin)
            dv = dv + sv
            d_xn = (
                self.merge_heads(dq) @ lw.wq.T
                + self.merge_heads(dk) @ lw.wk.T
                + self.merge_heads(dv) @ lw.wv.T
            )
            dx = dx + rms_norm_backward(c["x"], c["r1"], d_xn)
        return grad


# -- losses --------------------------------------------------------------------


def distill_loss(h_full, h_mix, response_len: int) -> float:
    """Squared error over the last ``response_len`` positions, divided by the hidden width."""
    h_full, h_mix = np.asarray(h_full), np.asarray(h_mix)
    if h_full.shape != h_mix.shape:
        raise InputError(f"hidden state shapes differ: {h_full.shape} vs {h_mix.shape}")
    T, K = h_full.shape
    if not 1 <= response_len <= T:
        raise InputError(f"response_len={response_len} must be in [1, {T}]")
    diff = h_full[T - response_len:] - h_mix[T - response_len:]
    return float(np.sum(diff * diff) / K)


def reg_loss(alpha: AlphaMatrix) -> float:
    values = alpha.values if isinstance(alpha, AlphaMatrix) else np.asarray(alpha)
    return float(np.sum(np.abs(values)))


def loss_and_gradient(model: ToyTransformer, sample: TrainSample, alpha, cfg: StreamingConfig,
                      lam: float, h_full=None):
    """Loss breakdown and d(total)/d(alpha) for one sample, weights frozen."""
    values = model._alpha_values(alpha)
    if h_full is None:
        h_full = model.forward_full(sample.tokens)
    tr = model.trace(sample.tokens, values, cfg, keep=True)
    T, K = tr.hidden.shape
    R = sample.response_len
    dist = distill_loss(h_full, tr.hidden, R)
    if not math.isfinite(dist):
        raise NumericalError("distillation loss is not finite")
    d_hidden = np.zeros_like(tr.hidden)
    d_hidden[T - R:] = -2.0 / K * (h_full[T - R:] - tr.hidden[T - R:])
    grad = model.gate_gradient(tr, d_hidden) + lam  # d|a|/da = 1 for a >= 0
    return LossBreakdown(dist=dist, reg=reg_loss(values), lam=lam), grad


def alpha_gradient(model, sample, alpha, cfg, lam) -> np.ndarray:
    return loss_and_gradient(model, sample, alpha, cfg, lam)[1]


def dataset_loss_and_gradient(model, dataset, alpha, cfg, lam, teachers=None):
    """Mean distillation loss and gradient over ``dataset``; summed in sample order."""
    dist = 0.0
    grad = np.zeros((model.n_layers, model.n_heads))
    for i, sample in enumerate(dataset):
        h_full = teachers[i] if teachers is not None else None
        lb, g = loss_and_gradient(model, sample, alpha, cfg, 0.0, h_full)
        dist += lb.dist
        grad += g
    n = len(dataset)
    values = model._alpha_values(alpha)
    return LossBreakdown(dist=dist / n, reg=reg_loss(values), lam=lam), grad / n + lam


@dataclass
class TrainResult:
    alpha: AlphaMatrix
    history: list[tuple[int, LossBreakdown]]


def train_alphas(model: ToyTransformer, dataset, cfg: StreamingConfig, lam: float = 0.05,
                 lr: float = 1e-2, steps: int = 200, granularity: str = HEAD,
                 init: AlphaMatrix | None = None) -> TrainResult:
    """Projected gradient descent on the gates: ``a <- clip(a - lr * grad, 0, 1)``.

    ``history`` holds the loss at each step before its update, plus one
    final entry (index ``steps``) for the returned gates.
    """
    if not dataset:
        raise InputError("dataset is empty")
    if granularity not in (HEAD, LAYER):
        raise InputError(f"unknown granularity {granularity!r}")
    L, H = model.n_layers, model.n_heads
    values = (init.values.copy() if init is not None else np.ones((L, H)))
    if values.shape != (L, H):
        raise InputError(f"initial alpha shape {values.shape} != ({L}, {H})")
    if granularity == LAYER:
        values = np.repeat(values[:, :1], H, axis=1)
    teachers = [model.forward_full(s.tokens) for s in dataset]
    log.info("training %s gates: lambda=%g lr=%g steps=%d samples=%d", granularity, lam, lr, steps, len(dataset))
    history = []
    for step in range(steps + 1):
        try:
            lb, grad = dataset_loss_and_gradient(model, dataset, values, cfg, lam, teachers)
        except NumericalError as exc:
            raise TrainingError(step, str(exc)) from exc
        if not math.isfinite(lb.total) or not np.all(np.isfinite(grad)):
            raise TrainingError(step, "loss diverged (non-finite)")
        history.append((step, lb))
        log.debug("step %d dist=%.6g reg=%.6g total=%.6g", step, lb.dist, lb.reg, lb.total)
        if step == steps:
            break
        if granularity == LAYER:
            grad = np.repeat(grad.sum(axis=1, keepdims=True), H, axis=1)
        values = np.clip(values - lr * grad, 0.0, 1.0)
    return TrainResult(AlphaMatrix(values, granularity), history)


def loss_csv(history) -> str:
    lines = ["step,dist,reg,total"]
    lines += [f"{step},{lb.dist!r},{lb.reg!r},{lb.total!r}" for step, lb in history]
    return "\n".join(lines) + "\n"


def classify_heads(alpha, sparsity: float) -> np.ndarray:
    """Boolean ``(L, H)`` mask, True for Streaming heads.

    The ``floor(s * L * H)`` smallest gates become streaming; equal gates go
    to the lower (layer, head) index first.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise InputError(f"sparsity must be in [0, 1], got {sparsity}")
    values = alpha.values if isinstance(alpha, AlphaMatrix) else np.asarray(alpha, dtype=np.float64)
    n = values.size
    n_stream = math.floor(sparsity * n + 1e-9)
    order = np.argsort(values.ravel(), kind="stable")
    streaming = np.zeros(n, dtype=bool)
    streaming[order[:n_stream]] = True
    return streaming.reshape(values.shape)
