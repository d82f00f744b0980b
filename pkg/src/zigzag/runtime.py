"""Prefill + incremental decode with per-layer KV-cache policies.

Three layer kinds exist: a full layer keeps every token, a streaming layer
keeps the sink block plus a ring buffer of the last ``W`` tokens, and a
mixed layer (head-level DuoAttention) keeps one store per head group and
runs two kernels with explicit gather/scatter between them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, InputError
from .kernels import StreamingConfig, attend_cached
from .model import ToyTransformer, apply_rope, rms_norm, rope_tables


# -- policies ------------------------------------------------------------------


@dataclass(frozen=True)
class FullLayer:
    pass


@dataclass(frozen=True)
class StreamingLayer:
    cfg: StreamingConfig


@dataclass(frozen=True)
class MixedLayer:
    head_streaming: tuple[bool, ...]
    cfg: StreamingConfig

    def __post_init__(self):
        if all(self.head_streaming) or not any(self.head_streaming):
            raise InputError("a mixed layer needs at least one head of each type")


def layer_spec(head_streaming, cfg: StreamingConfig):
    """Normalize a per-head label row to the cheapest equivalent layer spec."""
    flags = tuple(bool(f) for f in head_streaming)
    if all(flags):
        return StreamingLayer(cfg)
    if not any(flags):
        return FullLayer()
    return MixedLayer(flags, cfg)


@dataclass(frozen=True)
class CachePolicy:
    name: str
    layers: tuple

    @property
    def n_mixed(self) -> int:
        return sum(isinstance(s, MixedLayer) for s in self.layers)


def full_policy(n_layers: int) -> CachePolicy:
    return CachePolicy("full", (FullLayer(),) * n_layers)


def zigzag_policy(layer_streaming, cfg: StreamingConfig) -> CachePolicy:
    return CachePolicy(
        "zigzag", tuple(StreamingLayer(cfg) if s else FullLayer() for s in layer_streaming)
    )


def duo_policy(head_streaming, cfg: StreamingConfig) -> CachePolicy:
    return CachePolicy("duo", tuple(layer_spec(row, cfg) for row in np.asarray(head_streaming)))


# -- stores --------------------------------------------------------------------


class FullStore:
    """Growing per-head key/value buffer (amortized doubling)."""

    def __init__(self, n_heads: int, d_head: int, capacity: int = 64):
        self.keys = np.empty((n_heads, capacity, d_head))
        self.values = np.empty((n_heads, capacity, d_head))
        self.pos = np.empty(capacity, dtype=np.int64)
        self.n = 0

    def __len__(self):
        return self.n

    @property
    def n_heads(self) -> int:
        return self.keys.shape[0]

    def _grow(self, need: int):
        cap = self.keys.shape[1]
        if need <= cap:
            return
        new = max(need, 2 * cap)
        for name in ("keys", "values"):
            old = getattr(self, name)
            buf = np.empty((old.shape[0], new, old.shape[2]))
            buf[:, : self.n] = old[:, : self.n]
            setattr(self, name, buf)
        pos = np.empty(new, dtype=np.int64)
        pos[: self.n] = self.pos[: self.n]
        self.pos = pos

    def extend(self, keys, values, positions):
        m = len(positions)
        self._grow(self.n + m)
        self.keys[:, self.n : self.n + m] = keys
        self.values[:, self.n : self.n + m] = values
        self.pos[self.n : self.n + m] = positions
        self.n += m

    def append(self, k, v, position: int):
        self._grow(self.n + 1)
        self.keys[:, self.n] = k
        self.values[:, self.n] = v
        self.pos[self.n] = position
        self.n += 1

    def view(self):
        return self.keys[:, : self.n], self.values[:, : self.n]

    def positions(self) -> list[int]:
        return sorted(self.pos[: self.n].tolist())


class SinkWindowStore:
    """First ``A`` tokens pinned, last ``W`` tokens in a ring buffer.

    Both live in one contiguous ``(h, A + W, d)`` buffer: slots ``[0, A)``
    hold the sink, slots ``[A, A + W)`` the ring. Appending past capacity
    overwrites the oldest ring slot, so eviction happens on append.
    """

    def __init__(self, n_heads: int, d_head: int, cfg: StreamingConfig):
        self.cfg = cfg
        cap = cfg.budget
        self.keys = np.empty((n_heads, cap, d_head))
        self.values = np.empty((n_heads, cap, d_head))
        self.pos = np.full(cap, -1, dtype=np.int64)
        self.n_sink = 0
        self.n_ring = 0
        self.head = 0

    def __len__(self):
        return self.n_sink + self.n_ring

    @property
    def n_heads(self) -> int:
        return self.keys.shape[0]

    def append(self, k, v, position: int):
        A, W = self.cfg.sink_size, self.cfg.window
        if self.n_sink < A:
            slot = self.n_sink
            self.n_sink += 1
        else:
            slot = A + self.head
            self.head = (self.head + 1) % W
            self.n_ring = min(self.n_ring + 1, W)
        self.keys[:, slot] = k
        self.values[:, slot] = v
        self.pos[slot] = position

    def extend(self, keys, values, positions):
        """Bulk-load a prefix; tokens that would be evicted anyway are skipped."""
        T = len(positions)
        keep = [t for t in range(T) if t < self.cfg.sink_size or t >= T - self.cfg.window]
        for t in keep:
            self.append(keys[:, t], values[:, t], positions[t])

    def view(self):
        n = len(self)
        return self.keys[:, :n], self.values[:, :n]

    def positions(self) -> list[int]:
        return sorted(self.pos[: len(self)].tolist())


def expected_stream_positions(n_tokens: int, cfg: StreamingConfig) -> list[int]:
    """Analytic sink ∪ window contents after ``n_tokens`` tokens."""
    if n_tokens <= cfg.budget:
        return list(range(n_tokens))
    return list(range(cfg.sink_size)) + list(range(n_tokens - cfg.window, n_tokens))


@dataclass
class LayerCache:
    spec: object
    stores: list  # [(head index array or None, store)]


@dataclass
class KvCacheState:
    policy: CachePolicy
    layers: list[LayerCache]
    n_tokens: int = 0
    peak_entries: int = 0

    @property
    def cached_entries(self) -> int:
        return sum(store.n_heads * len(store) for lc in self.layers for _, store in lc.stores)

    def check(self):
        for l, lc in enumerate(self.layers):
            for _, store in lc.stores:
                if isinstance(store, SinkWindowStore):
                    if len(store) > store.cfg.budget or len(store) != min(self.n_tokens, store.cfg.budget):
                        raise ConsistencyError(
                            f"layer {l}: streaming store holds {len(store)} entries after {self.n_tokens} tokens"
                        )
                elif len(store) != self.n_tokens:
                    raise ConsistencyError(
                        f"layer {l}: full store holds {len(store)} entries after {self.n_tokens} tokens"
                    )


@dataclass(frozen=True)
class StepMetrics:
    kernels: int
    gathers: int
    cached_entries: int
    ns: int


def _new_layer_cache(spec, n_heads: int, d_head: int) -> LayerCache:
    if isinstance(spec, FullLayer):
        return LayerCache(spec, [(None, FullStore(n_heads, d_head))])
    if isinstance(spec, StreamingLayer):
        return LayerCache(spec, [(None, SinkWindowStore(n_heads, d_head, spec.cfg))])
    flags = np.asarray(spec.head_streaming)
    retr, stream = np.flatnonzero(~flags), np.flatnonzero(flags)
    return LayerCache(spec, [
        (retr, FullStore(len(retr), d_head)),
        (stream, SinkWindowStore(len(stream), d_head, spec.cfg)),
    ])


def prefill(model: ToyTransformer, tokens, policy: CachePolicy):
    """Dense full-attention forward over the prompt, then per-policy cache setup.

    Logits are the same for every policy; only what gets cached differs.
    """
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise InputError("prefill needs a nonempty prompt")
    if len(policy.layers) != model.n_layers:
        raise InputError(f"policy has {len(policy.layers)} layers, model has {model.n_layers}")
    tr = model.trace(tokens)
    T = len(tokens)
    positions = np.arange(T)
    layers = []
    for l, spec in enumerate(policy.layers):
        lc = _new_layer_cache(spec, model.n_heads, model.config.d_head)
        for idx, store in lc.stores:
            k, v = tr.keys[l], tr.values[l]
            if idx is not None:
                k, v = k[idx], v[idx]
            store.extend(k, v, positions)
        layers.append(lc)
    state = KvCacheState(policy, layers, n_tokens=T)
    state.peak_entries = state.cached_entries
    state.check()
    return tr.logits, state


def decode_step(model: ToyTransformer, state: KvCacheState, token: int, policy: CachePolicy | None = None):
    """Append one token and return its next-token logits plus step metrics.

    Only the cache append, cache read and attention kernels are inside the
    timed region.
    """
    if policy is not None and policy is not state.policy and policy != state.policy:
        raise InputError("policy does not match the one the cache was built with")
    token = int(token)
    if not 0 <= token < model.config.vocab:
        raise InputError(f"token id {token} out of vocab range")
    H, d = model.n_heads, model.config.d_head
    pos = state.n_tokens
    cos, sin = rope_tables(pos, d, model.config.rope_base)
    x = model.embed[token]
    kernels = gathers = 0
    ns = 0
    for lw, lc in zip(model.layers, state.layers):
        xn, _ = rms_norm(x)
        q = apply_rope((xn @ lw.wq).reshape(H, d), cos, sin)
        k = apply_rope((xn @ lw.wk).reshape(H, d), cos, sin)
        v = (xn @ lw.wv).reshape(H, d)
        t0 = time.perf_counter_ns()
        if isinstance(lc.spec, MixedLayer):
            o = np.empty((H, d))
            for idx, store in lc.stores:
                qg, kg, vg = q[idx], k[idx], v[idx]
                store.append(kg, vg, pos)
                keys, values = store.view()
                o[idx] = attend_cached(qg, keys, values)
                kernels += 1
                gathers += 4  # three gathers in, one scatter out
        else:
            store = lc.stores[0][1]
            store.append(k, v, pos)
            keys, values = store.view()
            o = attend_cached(q, keys, values)
            kernels += 1
        ns += time.perf_counter_ns() - t0
        x = x + o.reshape(H * d) @ lw.wo
        x, _ = model.mlp(lw, x)
    state.n_tokens += 1
    state.check()
    entries = state.cached_entries
    state.peak_entries = max(state.peak_entries, entries)
    logits = rms_norm(x)[0] @ model.unembed
    return logits, StepMetrics(kernels, gathers, entries, ns)


@dataclass
class GenerationResult:
    policy: str
    tokens: list[int]
    metrics: list[StepMetrics]
    peak_entries: int
    steady_entries: int
    prefill_logits: np.ndarray = field(repr=False, default=None)

    @property
    def mean_ns(self) -> float:
        return float(np.mean([m.ns for m in self.metrics]))


def run_generation(model: ToyTransformer, prompt, n_tokens: int, policy: CachePolicy) -> GenerationResult:
    """Greedy decode ``n_tokens`` steps after prefilling ``prompt``."""
    return run_lockstep(model, prompt, n_tokens, [policy])[0]


def run_lockstep(model: ToyTransformer, prompt, n_tokens: int, policies) -> list[GenerationResult]:
    """Independent greedy sessions, one per policy, advanced one token at a time in turn.

    Interleaving spreads machine noise evenly across policies so their
    per-token timings stay comparable.
    """
    if n_tokens < 1:
        raise InputError("n_tokens must be >= 1")
    sessions = []
    for pol in policies:
        logits, state = prefill(model, prompt, pol)
        sessions.append((pol, logits, state, [int(np.argmax(logits[-1]))], []))
    for _ in range(n_tokens):
        for pol, _, state, tokens, metrics in sessions:
            step_logits, m = decode_step(model, state, tokens[-1])
            metrics.append(m)
            tokens.append(int(np.argmax(step_logits)))
    return [
        GenerationResult(pol.name, tokens[:n_tokens], metrics, state.peak_entries, state.cached_entries, logits)
        for pol, logits, state, tokens, metrics in sessions
    ]


def metrics_csv(metrics) -> str:
    lines = ["token_index,kernels,gathers,cached_entries,ns"]
    lines += [f"{i},{m.kernels},{m.gathers},{m.cached_entries},{m.ns}" for i, m in enumerate(metrics)]
    return "\n".join(lines) + "\n"


def memory_csv(results) -> str:
    lines = ["policy,peak_entries,steady_entries"]
    lines += [f"{r.policy},{r.peak_entries},{r.steady_entries}" for r in results]
    return "\n".join(lines) + "\n"
