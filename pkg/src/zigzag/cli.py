"""Command-line pipeline: train-alpha -> optimize -> finetune -> bench -> eval-passkey.

Every command reads ``--config`` (defaults to the built-in demo config) and
writes into ``--out``. Later stages pick up earlier artifacts from the same
directory unless a path is given explicitly.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import load_dataset, make_dataset, save_dataset
from .errors import InputError, NumericalError, ZigzagError
from .model import LAYER, AlphaMatrix, ToyTransformer, classify_heads, loss_csv, train_alphas
from .runtime import duo_policy, full_policy, memory_csv, metrics_csv, run_generation, run_lockstep, zigzag_policy
from .transport import (
    ENUM_MAX_LAYERS,
    SolutionFile,
    collapsed_groups,
    grid_search_omega,
    layer_budget,
    save_solution,
    solve_enumerative,
    solve_greedy,
)

log = logging.getLogger("zigzag")

ALPHA_FILE = "alpha.txt"
SOLUTION_FILE = "solution.txt"
LAYER_ALPHA_FILE = "layer_alpha.txt"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _fmt_omega(w: float) -> str:
    return repr(float(w))


def training_set(cfg: RunConfig):
    if cfg.dataset_path:
        return load_dataset(cfg.dataset_path)
    return make_dataset(cfg.n_samples, cfg.context_len, cfg.depths, cfg.seed,
                        cfg.passkey_len, cfg.response_len, cfg.vocab)


def cmd_train_alpha(cfg: RunConfig, out: Path) -> AlphaMatrix:
    model = ToyTransformer(cfg.model_config())
    dataset = training_set(cfg)
    if not cfg.dataset_path:
        save_dataset(dataset, out / "dataset.txt")
    result = train_alphas(model, dataset, cfg.streaming_config(), cfg.lam, cfg.lr, cfg.steps)
    result.alpha.save(out / ALPHA_FILE)
    _write(out / "train_loss.csv", loss_csv(result.history))
    first, last = result.history[0][1], result.history[-1][1]
    log.info("train-alpha: dist %.6g -> %.6g, mean alpha %.4f", first.dist, last.dist, result.alpha.values.mean())
    return result.alpha


def cmd_optimize(cfg: RunConfig, out: Path, alpha_path: Path | None = None):
    alpha = AlphaMatrix.load(alpha_path or out / ALPHA_FILE)
    L = alpha.shape[0]
    grid = tuple(cfg.omega_grid) + (() if cfg.omega in cfg.omega_grid else (cfg.omega,))
    t0 = time.perf_counter()
    results = grid_search_omega(alpha, cfg.sparsity, grid)
    greedy_s = time.perf_counter() - t0
    if L <= ENUM_MAX_LAYERS:
        t0 = time.perf_counter()
        for omega, sol in results:
            ref = solve_enumerative(alpha, cfg.sparsity, omega)
            if ref.cost != sol.cost or ref.streaming_layers != sol.streaming_layers:
                raise NumericalError(f"greedy and enumerative solvers disagree at omega={omega}")
        log.info("optimize: enumerative and greedy agree on %d omega values (enumerative %.4fs)",
                 len(results), time.perf_counter() - t0)
    log.info("optimize: greedy grid search took %.4fs", greedy_s)
    groups = collapsed_groups(results)
    group_of = {w: gi for gi, ws in enumerate(groups) for w in ws}
    p, q = layer_budget(L, cfg.sparsity)
    rows = ["omega,p,q,cost,streaming_layers,group"]
    for omega, sol in results:
        save_solution(sol, out / f"solution_omega{_fmt_omega(omega)}.txt")
        if omega == cfg.omega:
            save_solution(sol, out / SOLUTION_FILE)
        if omega not in cfg.omega_grid:
            continue
        layers = " ".join(map(str, sol.streaming_layers))
        rows.append(f"{omega!r},{p},{q},{sol.cost!r},{layers},{group_of[omega]}")
    _write(out / "ablation.csv", "\n".join(rows) + "\n")
    for ws in groups:
        if len(ws) > 1:
            log.info("optimize: omega values %s select the same layers", ws)
    return results


def _solution_for(cfg: RunConfig, out: Path, solution_path: Path | None) -> SolutionFile:
    sol = SolutionFile.load(solution_path or out / SOLUTION_FILE)
    if sol.n_layers != cfg.n_layers:
        raise InputError(f"solution file has L={sol.n_layers} but the model config has L={cfg.n_layers}")
    return sol


def cmd_finetune(cfg: RunConfig, out: Path, solution_path: Path | None = None) -> AlphaMatrix:
    sol = _solution_for(cfg, out, solution_path)
    model = ToyTransformer(cfg.model_config())
    init = AlphaMatrix.from_layers([0.0 if i in sol.streaming_layers else 1.0 for i in range(cfg.n_layers)],
                                   cfg.n_heads)
    result = train_alphas(model, training_set(cfg), cfg.streaming_config(), cfg.lam, cfg.lr,
                          cfg.finetune_steps, granularity=LAYER, init=init)
    result.alpha.save(out / LAYER_ALPHA_FILE)
    _write(out / "finetune_loss.csv", loss_csv(result.history))
    return result.alpha


def policies(cfg: RunConfig, alpha: AlphaMatrix, sol: SolutionFile):
    scfg = cfg.streaming_config()
    layer_streaming = [i in sol.streaming_layers for i in range(cfg.n_layers)]
    return [
        full_policy(cfg.n_layers),
        duo_policy(classify_heads(alpha, cfg.sparsity), scfg),
        zigzag_policy(layer_streaming, scfg),
    ]


def _load_pair(cfg, out, alpha_path, solution_path):
    sol = _solution_for(cfg, out, solution_path)
    alpha = AlphaMatrix.load(alpha_path or out / ALPHA_FILE)
    if alpha.shape != (cfg.n_layers, cfg.n_heads):
        raise InputError(f"alpha file is {alpha.shape}, config wants ({cfg.n_layers}, {cfg.n_heads})")
    return alpha, sol


def bench_prompt(cfg: RunConfig, length: int) -> list[int]:
    rng = np.random.default_rng([cfg.seed, length])
    return rng.integers(0, cfg.vocab, size=length).tolist()


def cmd_bench(cfg: RunConfig, out: Path, alpha_path=None, solution_path=None):
    alpha, sol = _load_pair(cfg, out, alpha_path, solution_path)
    model = ToyTransformer(cfg.model_config())
    pols = policies(cfg, alpha, sol)
    summary = ["policy,prefill,decode,kernels_per_token,gathers_per_token,peak_entries,steady_entries,mean_ns"]
    latency = ["prefill,decode,policy,mean_ns"]
    memory = ["prefill,decode,policy,cached_entries"]
    largest = []
    for P in cfg.prefill_lengths:
        prompt = bench_prompt(cfg, P)
        for D in cfg.decode_lengths:
            try:
                point = run_lockstep(model, prompt, D, pols)
            except ZigzagError as exc:
                raise type(exc)(f"prefill={P} decode={D}: {exc}") from exc
            for res in point:
                _write(out / "metrics" / f"metrics_{res.policy}_p{P}_d{D}.csv", metrics_csv(res.metrics))
                kernels = sorted({m.kernels for m in res.metrics})
                gathers = sorted({m.gathers for m in res.metrics})
                summary.append(
                    f"{res.policy},{P},{D},{'|'.join(map(str, kernels))},{'|'.join(map(str, gathers))},"
                    f"{res.peak_entries},{res.steady_entries},{res.mean_ns!r}"
                )
                latency.append(f"{P},{D},{res.policy},{res.mean_ns!r}")
                memory.append(f"{P},{D},{res.policy},{res.steady_entries}")
                log.info("bench %s p=%d d=%d mean %.0f ns/token", res.policy, P, D, res.mean_ns)
            largest = point
    _write(out / "summary.csv", "\n".join(summary) + "\n")
    _write(out / "plot_latency.csv", "\n".join(latency) + "\n")
    _write(out / "plot_memory.csv", "\n".join(memory) + "\n")
    _write(out / "memory.csv", memory_csv(largest))
    return largest


def cmd_eval_passkey(cfg: RunConfig, out: Path, alpha_path=None, solution_path=None):
    alpha, sol = _load_pair(cfg, out, alpha_path, solution_path)
    model = ToyTransformer(cfg.model_config())
    samples = make_dataset(cfg.eval_samples, cfg.eval_context_len, cfg.depths, cfg.seed + 1,
                           cfg.passkey_len, cfg.response_len, cfg.vocab)
    rows = ["depth,policy,samples,correct,accuracy"]
    table = {}
    for pol in policies(cfg, alpha, sol):
        for s in samples:
            R = s.response_len
            res = run_generation(model, s.tokens[:-R], R, pol)
            hit = res.tokens == s.tokens[-R:].tolist()
            n, c = table.get((s.depth, pol.name), (0, 0))
            table[(s.depth, pol.name)] = (n + 1, c + hit)
    for depth in sorted({d for d, _ in table}):
        for pol in ("full", "duo", "zigzag"):
            n, c = table[(depth, pol)]
            rows.append(f"{depth!r},{pol},{n},{c},{c / n!r}")
    _write(out / "passkey_accuracy.csv", "\n".join(rows) + "\n")
    return table


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zigzag", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text, alpha=False, solution=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="flat key = value config file (default: built-in demo)")
        p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if alpha:
            p.add_argument("--alpha", type=Path, help=f"head-level alpha file (default: <out>/{ALPHA_FILE})")
        if solution:
            p.add_argument("--solution", type=Path, help=f"solution file (default: <out>/{SOLUTION_FILE})")
        return p

    add("train-alpha", "train per-head gates by distillation")
    add("optimize", "solve the layer assignment over the omega grid", alpha=True)
    add("finetune", "train layer-level gates initialized from the solution", solution=True)
    add("bench", "decode benchmark for full / duo / zigzag policies", alpha=True, solution=True)
    add("eval-passkey", "passkey exact-match accuracy per depth and policy", alpha=True, solution=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.out is not None:
            cfg = cfg.replace(out_dir=str(args.out))
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train-alpha":
            _write(out / "config.cfg", cfg.to_text())
            cmd_train_alpha(cfg, out)
        elif args.command == "optimize":
            cmd_optimize(cfg, out, args.alpha)
        elif args.command == "finetune":
            cmd_finetune(cfg, out, args.solution)
        elif args.command == "bench":
            cmd_bench(cfg, out, args.alpha, args.solution)
        elif args.command == "eval-passkey":
            cmd_eval_passkey(cfg, out, args.alpha, args.solution)
    except InputError as exc:
        log.error("%s", exc)
        return 1
    except NumericalError as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
