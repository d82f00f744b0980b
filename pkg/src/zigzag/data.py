"""Synthetic passkey-retrieval sequences.

Filler ids come from ``[0, V/2)`` and passkey ids from ``[V/2, V)``, so a
passkey token can never show up in filler. The last ``R`` tokens repeat the
passkey; that suffix is what the distillation loss scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .model import TrainSample

DEFAULT_DEPTHS = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class PasskeySpec:
    context_len: int = 64
    passkey_len: int = 4
    depth: float = 0.5
    response_len: int = 4
    seed: int = 0
    vocab: int = 64

    def __post_init__(self):
        if self.passkey_len < 1 or self.response_len < 1:
            raise InputError("passkey_len and response_len must be >= 1")
        if self.passkey_len + self.response_len > self.context_len:
            raise InputError("passkey_len + response_len must not exceed context_len")
        if not 0.0 <= self.depth <= 1.0:
            raise InputError(f"depth must be in [0, 1], got {self.depth}")
        if self.vocab < 2 or self.passkey_len > self.vocab - self.vocab // 2:
            raise InputError(f"vocab={self.vocab} too small for passkey_len={self.passkey_len}")

    @property
    def insert_at(self) -> int:
        span = self.context_len - self.response_len - self.passkey_len
        return math.floor(self.depth * span + 0.5)


def passkey_range(vocab: int) -> tuple[int, int]:
    return vocab // 2, vocab


def make_sample(spec: PasskeySpec) -> TrainSample:
    rng = np.random.default_rng(spec.seed)
    lo, hi = passkey_range(spec.vocab)
    T, R = spec.context_len, spec.response_len
    tokens = rng.integers(0, lo, size=T)
    passkey = rng.choice(np.arange(lo, hi), size=spec.passkey_len, replace=False)
    start = spec.insert_at
    tokens[start:start + spec.passkey_len] = passkey
    tokens[T - R:] = np.resize(passkey, R)
    return TrainSample(tokens, R, spec.depth)


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_dataset(n: int, context_len: int, depths=DEFAULT_DEPTHS, seed: int = 0,
                 passkey_len: int = 4, response_len: int = 4, vocab: int = 64) -> list[TrainSample]:
    if n < 1:
        raise InputError("n must be >= 1")
    if not depths:
        raise InputError("depths must be nonempty")
    return [
        make_sample(PasskeySpec(context_len, passkey_len, float(depths[i % len(depths)]),
                                response_len, sample_seed(seed, i), vocab))
        for i in range(n)
    ]


def dataset_to_text(samples) -> str:
    return "".join(
        f"{len(s.tokens)} {s.response_len} {s.depth!r} : {' '.join(map(str, s.tokens))}\n"
        for s in samples
    )


def dataset_from_text(text: str) -> list[TrainSample]:
    samples = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            head, body = line.split(":", 1)
            T, R, depth = head.split()
            tokens = np.array([int(t) for t in body.split()], dtype=np.int64)
            T, R, depth = int(T), int(R), float(depth)
        except ValueError as exc:
            raise InputError(f"dataset line {lineno}: {exc}") from exc
        if len(tokens) != T:
            raise InputError(f"dataset line {lineno}: header T={T} but {len(tokens)} tokens")
        samples.append(TrainSample(tokens, R, depth))
    return samples


def save_dataset(samples, path) -> None:
    Path(path).write_text(dataset_to_text(samples), encoding="utf-8")


def load_dataset(path) -> list[TrainSample]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from exc
    samples = dataset_from_text(text)
    if not samples:
        raise InputError(f"dataset {path} is empty")
    return samples
