"""Command-line entry point.

Subcommands write CSV/JSON into ``--out``:

    simulate      trace.csv, summary.json
    estimate      estimate.csv
    similarity    similarity.csv
    sweep         sweep.csv
    profile-kmin  kmin.csv, kmin.json

Exit codes: 0 ok, 1 other library error, 2 bad config or input,
3 memory capacity or token coverage failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import config as config_mod
from . import costmodel
from .costmodel import AoC, AoG, Hybrid
from .engine import DecodeTrace, make_prompt, measure_similarity, retention_agreement, run_decode
from .errors import (CapacityError, ConfigError, ConsistencyError, CoverageError,
                     HybridAttnError, InputError)
from .model import init_model
from .scheduler import profile_kmin

log = logging.getLogger("hybridattn")

TRACE_COLUMNS = [
    "step", "layer", "n_tokens", "n_device", "n_host", "n_selected", "k", "selection",
    "speculative", "t_gpu_stage_s", "t_cpu_stage_s", "t_cpu_s", "t_tx_s", "traffic_elements",
    "crit_bytes_dram", "crit_bytes_expansion", "dma_bytes_dram", "dma_bytes_expansion",
    "spec_logit_err", "logit_err", "iteration_latency_s", "hidden_err", "token",
    "oracle_token", "agree",
]
ESTIMATE_COLUMNS = ["strategy", "N", "batch", "traffic_elements", "compute_cpu_s",
                    "compute_gpu_s", "transfer_s", "feasible", "total_s"]
SIMILARITY_COLUMNS = ["pair", "layer_i", "layer_j", "cosine"]
SWEEP_COLUMNS = ["mode", "strategy", "N", "batch", "mapping", "status", "total_latency_s",
                 "compute_cpu_s", "compute_gpu_s", "transfer_s", "traffic_elements", "error"]
PRUNED_DEFAULT = {"important_fraction": 0.4, "cpu_share": 0.2, "gpu_share": 0.2}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    path.write_text(buf.getvalue(), newline="")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def trace_rows(trace: DecodeTrace) -> list[dict]:
    by_step = {s.step: s for s in trace.steps}
    rows = []
    for r in trace.layers:
        s = by_step[r.step]
        rows.append({
            "step": r.step, "layer": r.layer, "n_tokens": r.n_tokens, "n_device": r.n_device,
            "n_host": r.n_host, "n_selected": r.n_selected, "k": r.k, "selection": r.strategy,
            "speculative": r.speculative, "t_gpu_stage_s": r.t_gpu_stage,
            "t_cpu_stage_s": r.t_cpu_stage, "t_cpu_s": r.t_cpu, "t_tx_s": r.t_tx,
            "traffic_elements": r.traffic_elements, "crit_bytes_dram": float(r.crit_bytes_dram),
            "crit_bytes_expansion": float(r.crit_bytes_expansion),
            "dma_bytes_dram": float(r.dma_bytes_dram),
            "dma_bytes_expansion": float(r.dma_bytes_expansion),
            "spec_logit_err": r.spec_logit_err, "logit_err": r.logit_err,
            "iteration_latency_s": s.iteration_latency, "hidden_err": s.hidden_err,
            "token": s.token, "oracle_token": s.oracle_token, "agree": s.agree,
        })
    return rows


# subcommands

def cmd_simulate(cfg: config_mod.RunConfig, out: Path) -> int:
    trace = run_decode(cfg.engine)
    write_csv(out / "trace.csv", TRACE_COLUMNS, trace_rows(trace))
    write_json(out / "summary.json", trace.summary())
    log.info("simulate: %d steps, mean iteration %.3e s", len(trace.steps),
             trace.summary()["mean_iteration_latency_s"])
    return 0


def _strategy(name: str, p, w, cpu_share: float):
    key = name.lower()
    if key == "aog":
        return AoG()
    if key == "aoc":
        return AoC()
    if key == "hybrid":
        return costmodel.default_hybrid(p, w, cpu_share)
    raise ConfigError(f"unknown estimate strategy {name!r}")


def estimate_row(cfg: config_mod.RunConfig, name: str, n: int, batch: int,
                 pruned: dict | None) -> dict:
    p = cfg.platform
    w = cfg.workload(n=n, batch=batch)
    share = float(cfg.estimate.get("hybrid_cpu_share", 0.2))
    strat = _strategy(name, p, w, share)
    if pruned:
        lat = costmodel.estimate_pruned(p, w, strat, **pruned)
        if isinstance(strat, Hybrid):
            k = round(pruned["cpu_share"] * n)
            tw = dataclasses.replace(w, n=k + round(pruned["gpu_share"] * n))
            traffic = costmodel.traffic_elements(Hybrid(k=k, n_cpu=k, pre=True), tw)
        else:
            tw = dataclasses.replace(w, n=max(1, round(pruned["important_fraction"] * n)))
            traffic = costmodel.traffic_elements(strat, tw)
    else:
        lat = costmodel.estimate_latency(p, w, strat)
        traffic = costmodel.traffic_elements(strat, w)
    feas = costmodel.feasibility(p, w, strat)
    return {"strategy": strat.name, "N": n, "batch": batch, "traffic_elements": traffic,
            "compute_cpu_s": lat.compute_cpu, "compute_gpu_s": lat.compute_gpu,
            "transfer_s": lat.transfer, "feasible": feas.feasible, "total_s": lat.total}


def _pruned_settings(cfg: config_mod.RunConfig, flag: bool) -> dict | None:
    pruned = cfg.estimate.get("pruned")
    if flag and not pruned:
        pruned = dict(PRUNED_DEFAULT)
    if pruned:
        unknown = set(pruned) - set(PRUNED_DEFAULT)
        if unknown:
            raise ConfigError(f"unknown key(s) in estimate.pruned: {', '.join(sorted(unknown))}")
        pruned = {**PRUNED_DEFAULT, **pruned}
    return pruned or None


def cmd_estimate(cfg: config_mod.RunConfig, out: Path, pruned_flag: bool = False) -> int:
    est = cfg.estimate
    n_values = est.get("n_values", [1024, 2048, 4096, 8192, 16384, 32768, 65536])
    batches = est.get("batch_values", [1])
    names = est.get("strategies", ["AoG", "AoC", "Hybrid"])
    if not n_values or not batches or not names:
        raise ConfigError("estimate.n_values, estimate.batch_values and estimate.strategies must be non-empty")
    pruned = _pruned_settings(cfg, pruned_flag)
    rows = [estimate_row(cfg, name, int(n), int(b), pruned)
            for name in names for b in batches for n in n_values]
    write_csv(out / "estimate.csv", ESTIMATE_COLUMNS, rows)
    return 0


def cmd_similarity(cfg: config_mod.RunConfig, out: Path) -> int:
    model = init_model(cfg.engine.model)
    steps = int(cfg.similarity.get("steps", cfg.engine.steps or 1))
    prompt = make_prompt(model.width, cfg.engine.prompt_len, cfg.engine.prompt_seed)
    sims = measure_similarity(model, prompt, steps)
    rows = [{"pair": i, "layer_i": i, "layer_j": i + 1, "cosine": float(c)}
            for i, c in enumerate(sims)]
    write_csv(out / "similarity.csv", SIMILARITY_COLUMNS, rows)
    return 0


def cmd_profile_kmin(cfg: config_mod.RunConfig, out: Path) -> int:
    prof = cfg.profile
    model = init_model(cfg.engine.model)
    prompt = make_prompt(model.width, cfg.engine.prompt_len, cfg.engine.prompt_seed)
    steps = int(prof.get("steps", cfg.engine.steps or 1))
    fractions = prof.get("fractions", [round(0.1 * i, 10) for i in range(1, 11)])
    entry = profile_kmin(lambda k: retention_agreement(model, prompt, steps, k),
                         n_tokens=cfg.engine.prompt_len, fractions=fractions,
                         threshold=float(prof.get("threshold", 0.99)),
                         model_id=str(prof.get("model_id", f"toy-seed{model.cfg.seed}")),
                         dataset_id=str(prof.get("dataset_id", f"prompt-seed{cfg.engine.prompt_seed}")))
    rows = [{"fraction": f, "k": k, "agreement": a, "smoothed": s}
            for f, k, a, s in zip(entry.fractions, entry.ks, entry.agreement, entry.smoothed)]
    write_csv(out / "kmin.csv", ["fraction", "k", "agreement", "smoothed"], rows)
    write_json(out / "kmin.json", dataclasses.asdict(entry))
    return 0


def _sweep_point(cfg: config_mod.RunConfig, mode: str, point: dict) -> dict:
    row = {"mode": mode, **point, "status": "ok", "error": ""}
    try:
        if mode == "estimate":
            r = estimate_row(cfg, point["strategy"], point["N"], point["batch"], None)
            row.update(strategy=r["strategy"], total_latency_s=r["total_s"],
                       compute_cpu_s=r["compute_cpu_s"], compute_gpu_s=r["compute_gpu_s"],
                       transfer_s=r["transfer_s"], traffic_elements=r["traffic_elements"])
        else:
            eng = dataclasses.replace(cfg.engine, strategy=point["strategy"].lower(),
                                      prompt_len=int(point["N"]), mapping=point["mapping"])
            trace = run_decode(eng)
            summ = trace.summary()
            row.update(total_latency_s=summ["total_decode_latency_s"],
                       compute_cpu_s=float(sum(s.t_cpu for s in trace.steps)),
                       compute_gpu_s=float(sum(s.t_gpu for s in trace.steps)),
                       transfer_s=float(sum(s.t_tx for s in trace.steps)),
                       traffic_elements=summ["total_traffic_elements"])
    except HybridAttnError as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        row["_code"] = exit_code_for(exc)
    return row


def cmd_sweep(cfg: config_mod.RunConfig, out: Path, jobs: int = 1) -> int:
    sw = cfg.sweep
    mode = sw.get("mode", "estimate")
    if mode not in ("estimate", "simulate"):
        raise ConfigError(f"sweep.mode must be 'estimate' or 'simulate', got {mode!r}")
    axes = {
        "strategy": sw.get("strategy", ["AoG", "AoC", "Hybrid"]),
        "N": sw.get("n", [cfg.engine.prompt_len] if mode == "simulate" else [4096]),
        "batch": sw.get("batch", [1]),
        "mapping": sw.get("mapping", [cfg.engine.mapping]),
    }
    empty = [k for k, v in axes.items() if not v]
    if empty:
        raise ConfigError(f"sweep axes must be non-empty: {', '.join(empty)}")
    if mode == "simulate" and any(int(b) != 1 for b in axes["batch"]):
        raise ConfigError("sweep.batch must be [1] in simulate mode")
    points = [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        rows = list(pool.map(lambda p: _sweep_point(cfg, mode, p), points))
    codes = [r.pop("_code") for r in rows if "_code" in r]
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    return max(codes) if codes else 0


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (CapacityError, CoverageError, ConsistencyError)):
        return 3
    if isinstance(exc, (ConfigError, InputError)):
        return 2
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridattn",
                                     description="Hybrid CPU-GPU attention simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=int, help="model and prompt seed")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-path override, repeatable")
    common.add_argument("--preset", help=f"platform preset: {', '.join(sorted(costmodel.PRESETS))}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run the decode simulation")
    est = sub.add_parser("estimate", parents=[common], help="analytic AoG/AoC/Hybrid table")
    est.add_argument("--pruned", action="store_true",
                     help="attend over 40%% of tokens, split 20%%/20%% for Hybrid")
    sub.add_parser("similarity", parents=[common], help="consecutive-layer input similarity")
    sw = sub.add_parser("sweep", parents=[common], help="cross-product sweep")
    sw.add_argument("--jobs", type=int, default=1, help="sweep points run in parallel")
    sub.add_parser("profile-kmin", parents=[common], help="offline K_min profiling")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("HYBRIDGEN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = config_mod.load(args.config, args.overrides, args.preset, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out)
        if args.command == "estimate":
            return cmd_estimate(cfg, args.out, args.pruned)
        if args.command == "similarity":
            return cmd_similarity(cfg, args.out)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.out, args.jobs)
        return cmd_profile_kmin(cfg, args.out)
    except HybridAttnError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
