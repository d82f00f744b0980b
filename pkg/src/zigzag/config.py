"""Flat ``key = value`` run configuration. Lengths are plain token counts."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DEFAULT_DEPTHS
from .errors import InputError
from .kernels import StreamingConfig
from .model import ModelConfig
from .transport import DEFAULT_OMEGA_GRID


@dataclass(frozen=True)
class RunConfig:
    # model
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 32
    vocab: int = 64
    # policy
    sparsity: float = 0.5
    sink_size: int = 4
    window: int = 8
    # gate training
    lam: float = 0.05
    lr: float = 0.01
    steps: int = 200
    finetune_steps: int = 50
    # transport
    omega: float = 0.1
    omega_grid: tuple[float, ...] = DEFAULT_OMEGA_GRID
    # data
    dataset_path: str = ""
    n_samples: int = 8
    context_len: int = 64
    passkey_len: int = 4
    response_len: int = 4
    depths: tuple[float, ...] = DEFAULT_DEPTHS
    eval_samples: int = 18
    eval_context_len: int = 64
    # benchmark grid
    prefill_lengths: tuple[int, ...] = (64, 256, 1024)
    decode_lengths: tuple[int, ...] = (64, 256, 1024)
    out_dir: str = "runs/demo"
    seed: int = 0

    def __post_init__(self):
        self.model_config()
        self.streaming_config()
        if not 0.0 <= self.sparsity <= 1.0:
            raise InputError("sparsity must be in [0, 1]")
        if not 0.0 <= self.omega <= 1.0 or any(not 0.0 <= w <= 1.0 for w in self.omega_grid):
            raise InputError("omega values must be in [0, 1]")
        if not self.omega_grid:
            raise InputError("omega_grid must be nonempty")
        if self.steps < 0 or self.finetune_steps < 0:
            raise InputError("step counts must be >= 0")
        if self.n_samples < 1 or self.eval_samples < 1:
            raise InputError("sample counts must be >= 1")
        if not self.depths or any(not 0.0 <= d <= 1.0 for d in self.depths):
            raise InputError("depths must be nonempty and within [0, 1]")
        if not self.prefill_lengths or not self.decode_lengths:
            raise InputError("benchmark grid must be nonempty")
        if min(self.prefill_lengths) < 1 or min(self.decode_lengths) < 1:
            raise InputError("benchmark lengths must be >= 1")
        if self.seed < 0 or self.seed >= 2**64:
            raise InputError("seed must be an unsigned 64-bit integer")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.n_layers, self.n_heads, self.d_model, self.vocab, seed=self.seed)

    def streaming_config(self) -> StreamingConfig:
        return StreamingConfig(self.sink_size, self.window)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                text = ",".join(repr(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"config line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in kinds:
                raise InputError(f"config line {lineno}: unknown key {key!r}")
            try:
                values[key] = _parse(kinds[key], value)
            except ValueError as exc:
                raise InputError(f"config line {lineno}: bad value for {key}: {exc}") from exc
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)


def _parse(kind: str, value: str):
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "str":
        return value
    if kind.startswith("tuple[int"):
        return tuple(int(v) for v in value.split(",") if v.strip())
    if kind.startswith("tuple[float"):
        return tuple(float(v) for v in value.split(",") if v.strip())
    raise ValueError(f"unsupported field type {kind}")
