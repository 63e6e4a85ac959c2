"""Benchmark and diagnostics command line.

Three subcommands: ``solve`` runs the SQP variants on one problem and
writes convergence CSVs, ``bench`` times preparation/feedback phases over
a problem-size sweep, ``nmpc`` runs closed-loop simulations. Every run
writes a JSON metadata sidecar with the config hash, revision and seed.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from .config import ExperimentConfig, load_config, parse_sweep, \
    revision_string
from .diagnostics import build_reference
from .integrator import Rk4Dynamics, collocation_stage, \
    gauss_legendre_tableau
from .lifted import LIFTED_STRATEGIES, run_lifted_sqp
from .model import ConfigError
from .rti import RtiController, simulate_closed_loop, rti_step
from .sqp import ALL_STRATEGIES, SqpConfig, SqpError, run_sqp

SOLVE_COLUMNS = ["iter", "kkt_inf_norm", "step_norm", "proj_jac_err",
                 "n_skipped", "active_set_size", "strategy"]
LIFTED_COLUMNS = SOLVE_COLUMNS + ["n_refactorizations", "matvec_count",
                                  "outer_product_count"]
TRACE_COLUMNS_FIXED = ["t", "kkt", "prep_ns", "fb_ns", "active_set_size",
                       "violated"]


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("BLOCKTR1_THREADS", "1")))
    except ValueError:
        return 1


def _write_metadata(path: str, cfg: ExperimentConfig, extra=None):
    meta = {"config_hash": cfg.digest(), "revision": revision_string(),
            "seed": cfg.seed, "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    if extra:
        meta.update(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _write_csv(path: str, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _diag_rows(diags, lifted: bool):
    rows = []
    for d in diags:
        row = [d.iteration, f"{d.kkt:.16e}", f"{d.step_norm:.16e}",
               f"{d.proj_jac_err:.16e}", d.n_skipped, len(d.active_set),
               d.strategy]
        if lifted:
            row += [d.n_refactorizations, d.matvec_count,
                    d.outer_product_count]
        rows.append(row)
    return rows


def _solver_cfg(cfg: ExperimentConfig) -> SqpConfig:
    return SqpConfig(threads=_thread_count(), drift_check=cfg.drift_check)


def cmd_solve(cfg: ExperimentConfig, out_dir: str) -> int:
    """Run every requested strategy from the same initial guess."""
    strategies = []
    for s in cfg.strategies:
        if s in strategies:
            print(f"warning: duplicate strategy {s!r} dropped",
                  file=sys.stderr)
            continue
        strategies.append(s)
    if not strategies:
        raise ConfigError("strategy list is empty")
    lifted = cfg.integrator.type == "gl"
    valid = LIFTED_STRATEGIES if lifted else ALL_STRATEGIES
    for s in strategies:
        if s not in valid:
            raise ConfigError(f"unknown strategy: {s!r}")

    model = cfg.build_model()
    scfg = _solver_cfg(cfg)
    reference = None
    if not lifted:
        dynamics = Rk4Dynamics(model, cfg.integrator.substeps)
        ref_run = run_sqp(model, dynamics, "exact", tol=min(cfg.tol, 1e-11),
                          max_iter=max(cfg.max_iter, 200), cfg=scfg)
        if ref_run.converged:
            reference = build_reference(model, dynamics, ref_run.iterate, [])
    else:
        stage = collocation_stage(
            model, gauss_legendre_tableau(cfg.integrator.stages))

    os.makedirs(out_dir, exist_ok=True)
    merged = []
    failures = 0
    columns = LIFTED_COLUMNS if lifted else SOLVE_COLUMNS
    for strat in strategies:
        try:
            if lifted:
                result = run_lifted_sqp(model, stage, strat,
                                        hessian=cfg.hessian, tol=cfg.tol,
                                        max_iter=cfg.max_iter, cfg=scfg)
            else:
                result = run_sqp(model, dynamics, strat,
                                 hessian=cfg.hessian, tol=cfg.tol,
                                 max_iter=cfg.max_iter, cfg=scfg,
                                 reference=reference)
        except SqpError as exc:
            print(f"{strat}: solver failure: {exc}", file=sys.stderr)
            failures += 1
            continue
        rows = _diag_rows(result.diagnostics, lifted)
        _write_csv(os.path.join(out_dir, f"solve_{strat}.csv"),
                   columns, rows)
        merged.extend(rows)
        print(f"{strat}: {result.status} in "
              f"{len(result.diagnostics)} iterations")
        if result.status == "diverged":
            failures += 1
    _write_csv(os.path.join(out_dir, "solve_all.csv"), columns, merged)
    _write_metadata(os.path.join(out_dir, "solve_meta.json"), cfg)
    return 3 if failures else 0


def _median_phase_times(ctrl: RtiController, x0hat, reps: int):
    preps, fbs = [], []
    for _ in range(reps):
        rti_step(ctrl, x0hat)
        preps.append(ctrl.prep_time)
        fbs.append(ctrl.fb_time)
    return float(np.median(preps)), float(np.median(fbs))


def _loglog_slope(sizes, times) -> float:
    x = np.log(np.asarray(sizes, float))
    y = np.log(np.asarray(times, float))
    return float(np.polyfit(x, y, 1)[0])


def cmd_bench(cfg: ExperimentConfig, out_dir: str) -> int:
    """Scaling sweep: preparation/feedback medians and fitted slopes."""
    sweep = cfg.nm_sweep
    if not sweep:
        raise ConfigError("bench needs a non-empty nm_sweep")
    if cfg.reps < 2:
        print("warning: reps < 2 gives noisy medians", file=sys.stderr)
    os.makedirs(out_dir, exist_ok=True)
    scfg = _solver_cfg(cfg)
    scfg.drift_check = False    # keeps the timed path free of O(n^3) checks
    rows = []
    slopes = {}
    counter_rows = []
    strategies = ("exact", "block_tr1_dynamic")
    for n_m in sweep:
        model = cfg.build_model(n_m=n_m)
        dynamics = Rk4Dynamics(model, cfg.integrator.substeps)
        stage = collocation_stage(
            model, gauss_legendre_tableau(cfg.integrator.stages))
        for algorithm in ("rk4", "lifted"):
            for strat in strategies:
                ctrl = RtiController(
                    model,
                    dynamics=dynamics if algorithm == "rk4" else None,
                    strategy=strat, mode=algorithm,
                    stage=stage if algorithm == "lifted" else None,
                    cfg=scfg)
                rti_step(ctrl, model.x0hat)   # warm-up sample
                prep, fb = _median_phase_times(ctrl, model.x0hat, cfg.reps)
                rows.append([n_m, model.n_x, algorithm, strat, "prep",
                             int(prep), cfg.reps])
                rows.append([n_m, model.n_x, algorithm, strat, "feedback",
                             int(fb), cfg.reps])
        run = run_lifted_sqp(model, stage, "block_tr1_dynamic", tol=0.0,
                             max_iter=3, cfg=scfg)
        if run.diagnostics:
            d_last = run.diagnostics[-1]
            per_iter = (d_last.matvec_count + d_last.outer_product_count) \
                / len(run.diagnostics) / model.N
            counter_rows.append([n_m, model.n_x, d_last.matvec_count,
                                 d_last.outer_product_count,
                                 per_iter])
    _write_csv(os.path.join(out_dir, "bench.csv"),
               ["n_m", "n_x", "algorithm", "strategy", "phase",
                "median_ns", "reps"], rows)
    _write_csv(os.path.join(out_dir, "bench_counters.csv"),
               ["n_m", "n_x", "matvec_count", "outer_product_count",
                "multiplies_per_stage_iter"], counter_rows)

    sizes = {}
    for n_m, n_x, algorithm, strat, phase, t, _ in rows:
        sizes.setdefault((algorithm, strat, phase), ([], []))
        sizes[(algorithm, strat, phase)][0].append(n_x)
        sizes[(algorithm, strat, phase)][1].append(max(t, 1))
    for key, (xs, ts) in sizes.items():
        slopes["/".join(key)] = _loglog_slope(xs, ts)
    if counter_rows:
        slopes["lifted_counter_fit"] = _loglog_slope(
            [r[1] for r in counter_rows], [r[4] for r in counter_rows])
    _write_metadata(os.path.join(out_dir, "bench_meta.json"), cfg,
                    {"slopes": slopes})
    for key, val in sorted(slopes.items()):
        print(f"slope {key}: {val:.2f}")
    return 0


def cmd_nmpc(cfg: ExperimentConfig, out_dir: str) -> int:
    """Closed-loop traces for every controller variant plus a summary."""
    os.makedirs(out_dir, exist_ok=True)
    scfg = _solver_cfg(cfg)
    model = cfg.build_model()
    traces = {}
    for variant in cfg.variants:
        if variant not in ALL_STRATEGIES:
            raise ConfigError(f"unknown controller variant: {variant!r}")
        if cfg.rti_mode == "rk4":
            dynamics = Rk4Dynamics(model, cfg.integrator.substeps)
            ctrl = RtiController(model, dynamics=dynamics, strategy=variant,
                                 cfg=scfg)
        else:
            stage = collocation_stage(
                model, gauss_legendre_tableau(cfg.integrator.stages))
            ctrl = RtiController(model, strategy=variant, mode="lifted",
                                 stage=stage, cfg=scfg)
        trace = simulate_closed_loop(model, ctrl, cfg.samples,
                                     plant_substeps=cfg.plant_substeps,
                                     plant_stages=cfg.plant_stages)
        traces[variant] = trace
        columns = (["t"] + [f"x{i}" for i in range(model.n_x)]
                   + [f"u{i}" for i in range(model.n_u)]
                   + TRACE_COLUMNS_FIXED[1:])
        rows = []
        for s in trace.samples:
            rows.append([f"{s.t:.6f}"]
                        + [f"{v:.16e}" for v in s.x_plant]
                        + [f"{v:.16e}" for v in s.u]
                        + [f"{s.kkt:.6e}", s.prep_ns, s.fb_ns,
                           s.active_set_size, int(s.violated)])
        _write_csv(os.path.join(out_dir, f"trace_{variant}.csv"),
                   columns, rows)
    summary = {}
    names = list(traces)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            xa, xb = traces[a].states, traces[b].states
            scale = max(1.0, float(np.max(np.abs(xa))))
            summary[f"max_rel_dev:{a}:{b}"] = float(
                np.max(np.abs(xa - xb)) / scale)
    for name, trace in traces.items():
        summary[f"violations:{name}"] = int(
            sum(s.violated for s in trace.samples))
        summary[f"fallbacks:{name}"] = int(
            sum(s.qp_fallback for s in trace.samples))
    _write_metadata(os.path.join(out_dir, "nmpc_meta.json"), cfg,
                    {"summary": summary})
    for key, val in sorted(summary.items()):
        print(f"{key}: {val}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="blocktr1",
        description="Structured SQP solvers and NMPC benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run SQP variants on one problem")
    p_solve.add_argument("--config", required=True)
    p_solve.add_argument("--out", default=None)

    p_bench = sub.add_parser("bench", help="scaling sweep timings")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--nm-sweep", default=None,
                         help="override sweep, e.g. 2..8")
    p_bench.add_argument("--reps", type=int, default=None)
    p_bench.add_argument("--out", default=None)

    p_nmpc = sub.add_parser("nmpc", help="closed-loop simulations")
    p_nmpc.add_argument("--config", required=True)
    p_nmpc.add_argument("--variants", default=None,
                        help="comma-separated controller strategies")
    p_nmpc.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        cfg = load_config(raw)
        if getattr(args, "nm_sweep", None):
            cfg.nm_sweep = parse_sweep(args.nm_sweep)
        if getattr(args, "reps", None):
            cfg.reps = args.reps
        if getattr(args, "variants", None):
            cfg.variants = args.variants.split(",")
        out_dir = args.out or cfg.out_dir
    except (ConfigError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "solve":
            return cmd_solve(cfg, out_dir)
        if args.command == "bench":
            return cmd_bench(cfg, out_dir)
        if args.command == "nmpc":
            return cmd_nmpc(cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SqpError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 2


if __name__ == "__main__":
    sys.exit(main())
