"""Head-level gates to layer-exclusive assignments.

Each head either keeps its baseline type (cost 0), is demoted from retrieval
to streaming (cost +alpha), or promoted from streaming to retrieval (cost
-omega * alpha). A solution picks exactly ``p`` streaming layers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import CapacityError, InputError
from .model import AlphaMatrix, classify_heads

ENUM_MAX_LAYERS = 24
DEFAULT_OMEGA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
_CHUNK = 1 << 15


class OpLabel(IntEnum):
    KEEP = 0
    RETR_TO_STREAM = 1
    STREAM_TO_RETR = 2


@dataclass(frozen=True)
class TransportSolution:
    streaming_layers: tuple[int, ...]
    cost: float
    omega: float
    op_grid: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.op_grid.shape[0]

    @property
    def p(self) -> int:
        return len(self.streaming_layers)

    def layer_is_streaming(self) -> np.ndarray:
        mask = np.zeros(self.n_layers, dtype=bool)
        mask[list(self.streaming_layers)] = True
        return mask

    def to_text(self) -> str:
        return (
            f"{self.n_layers} {self.p} {self.omega!r} {self.cost!r}\n"
            + " ".join(str(i) for i in self.streaming_layers)
            + "\n"
        )


@dataclass(frozen=True)
class SolutionFile:
    """What a solution file carries: enough for the runtime to build a layer policy."""

    n_layers: int
    omega: float
    cost: float
    streaming_layers: tuple[int, ...]

    @property
    def p(self) -> int:
        return len(self.streaming_layers)

    @classmethod
    def from_text(cls, text: str) -> "SolutionFile":
        lines = text.splitlines()
        try:
            L, p, omega, cost = lines[0].split()
            L, p, omega, cost = int(L), int(p), float(omega), float(cost)
            layers = tuple(int(tok) for tok in (lines[1].split() if len(lines) > 1 else []))
        except (IndexError, ValueError) as exc:
            raise InputError(f"malformed solution file: {exc}") from exc
        if len(layers) != p or len(set(layers)) != p or any(not 0 <= i < L for i in layers):
            raise InputError(f"solution file lists {layers} but header says L={L} p={p}")
        return cls(L, omega, cost, tuple(sorted(layers)))

    @classmethod
    def load(cls, path) -> "SolutionFile":
        try:
            return cls.from_text(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read solution file {path}: {exc}") from exc


def save_solution(solution: TransportSolution, path) -> None:
    Path(path).write_text(solution.to_text(), encoding="utf-8")


def layer_budget(n_layers: int, sparsity: float) -> tuple[int, int]:
    """``(p, q)`` with ``p = round_half_up(s * L)``."""
    if not 0.0 <= sparsity <= 1.0:
        raise InputError(f"sparsity must be in [0, 1], got {sparsity}")
    p = math.floor(sparsity * n_layers + 0.5 + 1e-9)
    return p, n_layers - p


def _values(alpha) -> np.ndarray:
    return alpha.values if isinstance(alpha, AlphaMatrix) else np.asarray(alpha, dtype=np.float64)


def op_grid_for(baseline_streaming: np.ndarray, layer_streaming: np.ndarray) -> np.ndarray:
    target = np.broadcast_to(np.asarray(layer_streaming, dtype=bool)[:, None], baseline_streaming.shape)
    grid = np.full(baseline_streaming.shape, OpLabel.KEEP, dtype=np.int8)
    grid[~baseline_streaming & target] = OpLabel.RETR_TO_STREAM
    grid[baseline_streaming & ~target] = OpLabel.STREAM_TO_RETR
    return grid


def cost_from_ops(alpha, op_grid, omega: float) -> float:
    """Canonical cost: correctly rounded sum of the per-head contributions."""
    values = _values(alpha)
    terms = []
    for (i, j), op in np.ndenumerate(op_grid):
        if op == OpLabel.RETR_TO_STREAM:
            terms.append(values[i, j])
        elif op == OpLabel.STREAM_TO_RETR:
            terms.append(-(omega * values[i, j]))
    return math.fsum(terms)


def _layer_mask(n_layers: int, streaming_layers) -> np.ndarray:
    mask = np.zeros(n_layers, dtype=bool)
    for i in streaming_layers:
        if not 0 <= int(i) < n_layers:
            raise InputError(f"layer index {i} out of range [0, {n_layers})")
        mask[int(i)] = True
    return mask


def assignment_cost(alpha, baseline_streaming, streaming_layers, omega: float) -> float:
    if not 0.0 <= omega <= 1.0:
        raise InputError(f"omega must be in [0, 1], got {omega}")
    values = _values(alpha)
    baseline = np.asarray(baseline_streaming, dtype=bool)
    mask = _layer_mask(values.shape[0], streaming_layers)
    return cost_from_ops(values, op_grid_for(baseline, mask), omega)


def _solution(values, baseline, layers, omega) -> TransportSolution:
    layers = tuple(sorted(int(i) for i in layers))
    grid = op_grid_for(baseline, _layer_mask(values.shape[0], layers))
    return TransportSolution(layers, cost_from_ops(values, grid, omega), float(omega), grid)


def _setup(alpha, sparsity, omega, baseline):
    if not 0.0 <= omega <= 1.0:
        raise InputError(f"omega must be in [0, 1], got {omega}")
    values = _values(alpha)
    if baseline is None:
        baseline = classify_heads(values, sparsity)
    p, _ = layer_budget(values.shape[0], sparsity)
    return values, np.asarray(baseline, dtype=bool), p


def solve_enumerative(alpha, sparsity: float, omega: float, baseline=None) -> TransportSolution:
    """Evaluate every size-p layer subset directly and keep the cheapest.

    Subsets are visited in lexicographic order; costs within 1e-12 (relative)
    of the minimum count as ties and the first one wins.
    """
    values, baseline, p = _setup(alpha, sparsity, omega, baseline)
    L = values.shape[0]
    if L > ENUM_MAX_LAYERS:
        raise CapacityError(f"L={L} exceeds enumeration limit {ENUM_MAX_LAYERS}; use solve_greedy")
    # per-head contribution if the head's layer ends up streaming / retrieval
    if_stream = np.where(baseline, 0.0, values)
    if_retr = np.where(baseline, -(omega * values), 0.0)
    costs, subsets = [], []
    combos = itertools.combinations(range(L), p)
    while chunk := list(itertools.islice(combos, _CHUNK)):
        masks = np.zeros((len(chunk), L), dtype=bool)
        for r, c in enumerate(chunk):
            masks[r, list(c)] = True
        per_head = np.where(masks[:, :, None], if_stream[None], if_retr[None])
        costs.append(per_head.reshape(len(chunk), -1).sum(axis=1))
        subsets.extend(chunk)
    costs = np.concatenate(costs)
    best = costs.min()
    winner = int(np.flatnonzero(costs <= best + 1e-12 * (1.0 + abs(best)))[0])
    return _solution(values, baseline, subsets[winner], omega)


def layer_deltas(alpha, baseline_streaming, omega: float) -> np.ndarray:
    """Cost change from making each layer streaming instead of retrieval."""
    values = _values(alpha)
    baseline = np.asarray(baseline_streaming, dtype=bool)
    return np.array([
        math.fsum([*values[i][~baseline[i]], *(omega * values[i][baseline[i]])])
        for i in range(values.shape[0])
    ])


def solve_greedy(alpha, sparsity: float, omega: float, baseline=None) -> TransportSolution:
    """Exact for this objective: the cost separates per layer, so take the p smallest deltas."""
    values, baseline, p = _setup(alpha, sparsity, omega, baseline)
    order = np.argsort(layer_deltas(values, baseline, omega), kind="stable")
    return _solution(values, baseline, order[:p], omega)


def grid_search_omega(alpha, sparsity: float, grid=DEFAULT_OMEGA_GRID, solver=solve_greedy):
    if len(grid) == 0:
        raise InputError("omega grid is empty")
    return [(float(w), solver(alpha, sparsity, float(w))) for w in grid]


def collapsed_groups(results) -> list[list[float]]:
    """Group omegas whose solutions pick the same streaming layers, in first-seen order."""
    groups: dict[tuple[int, ...], list[float]] = {}
    for omega, sol in results:
        groups.setdefault(sol.streaming_layers, []).append(omega)
    return list(groups.values())
