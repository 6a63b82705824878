"""Command-line frontend: gen, estimate, rate, oracle-compare, invariance.

All outputs are UTF-8 JSON/CSV with a schema version.  Every command is
byte-deterministic given (--seed, config) in deterministic mode; timing
fields appear only with --no-deterministic.  Exit codes: 0 success, 2 usage
or config errors, 1 runtime or validation failures.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

import numpy as np

from .net import TrainPlan
from .oracles import coupling_covariance, fit_loglog_slope, grid_oracle_1d
from .outer import StopRule, estimate, export_plan
from .samples import (
    SampleSet,
    derive_seed,
    gen_gaussian_iso,
    gen_gaussian_random_cov,
    gen_uniform_cube,
    load_csv,
    random_orthogonal,
    save_csv,
)
from .semidual import (
    ConvergenceError,
    CostSpec,
    KIND_INNER,
    KIND_QUADRATIC,
    cost_matrix,
    sinkhorn,
)

__all__ = ["main"]

SCHEMA = 1

CONFIG_DEFAULTS = {
    "kind": KIND_QUADRATIC,
    "eps": 0.5,
    "d": 8,
    "dy": None,
    "k_neurons": 32,
    "n": 256,
    "n_grid": [64, 128, 256, 512, 1024, 2048],
    "runs": 10,
    "dist": "uniform-cube",
    "std": 1.0,
    "std_y": 0.5,
    "epochs": 5,
    "batch_size": 0,
    "rate": 0.01,
    "projection": False,
    "max_outer": 100,
    "grad_tol": 1e-4,
    "c0": None,
    "bound_a": None,
    "auto_eps": False,
    "restarts": True,
    "grid_points": 401,
    "sinkhorn_tol": 1e-9,
    "ref_runs": 3,
    "ref_epochs_factor": 4,
    "ref_sinkhorn_tol": 1e-7,
    "ref_sinkhorn_max_iter": 20000,
}

DISTS = ("uniform-cube", "gaussian-cov", "gaussian-iso")


class UsageError(Exception):
    """Bad flags or config; mapped to exit code 2."""


def _normalize_kind(kind: str) -> str:
    if kind == "inner":
        return KIND_INNER
    if kind in (KIND_QUADRATIC, KIND_INNER):
        return kind
    raise UsageError(f"unknown kind {kind!r}")


def _parse_n_grid(value) -> list[int]:
    if isinstance(value, str):
        try:
            value = [int(tok) for tok in value.split(",") if tok.strip()]
        except ValueError as exc:
            raise UsageError(f"bad n_grid: {exc}") from None
    grid = [int(v) for v in value]
    if any(v < 1 for v in grid):
        raise UsageError("n_grid entries must be >= 1")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise UsageError("n_grid must be strictly increasing")
    return grid


def _load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def _resolve(args) -> dict:
    """defaults <- config file <- explicit CLI flags."""
    cfg = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(_load_config(args.config))
    for key in CONFIG_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["kind"] = _normalize_kind(cfg["kind"])
    cfg["n_grid"] = _parse_n_grid(cfg["n_grid"])
    if cfg["dy"] is None:
        cfg["dy"] = cfg["d"]
    if cfg["runs"] < 1:
        raise UsageError("runs must be >= 1")
    if cfg["dist"] not in DISTS:
        raise UsageError(f"unknown dist {cfg['dist']!r}")
    return cfg


def _threads(args) -> int:
    if args.threads is not None:
        val = args.threads
    else:
        env = os.environ.get("EGW_THREADS", "1")
        try:
            val = int(env)
        except ValueError:
            raise UsageError(f"bad EGW_THREADS value {env!r}") from None
    if val < 1:
        raise UsageError("threads must be >= 1")
    return val


def _out_path(args, name) -> Path:
    p = Path(name)
    if not p.is_absolute():
        p = Path(args.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _emit(args, path: Path, report: dict, started: float) -> None:
    if not args.deterministic:
        report = dict(report)
        report["elapsed_seconds"] = time.monotonic() - started
    text = json.dumps(report, sort_keys=True, indent=2)
    path.write_text(text + "\n", encoding="utf-8")
    print(text)


def _plan_from(cfg: dict, epochs_factor: int = 1) -> TrainPlan:
    return TrainPlan(
        epochs=int(cfg["epochs"]) * epochs_factor,
        batch_size=int(cfg["batch_size"]),
        rate=float(cfg["rate"]),
        projection=bool(cfg["projection"]),
    )


def _stop_from(cfg: dict) -> StopRule:
    return StopRule(max_outer=int(cfg["max_outer"]), grad_tol=float(cfg["grad_tol"]))


def _gen_samples(dist: str, d: int, n: int, seed: int, std: float = 1.0):
    if dist == "uniform-cube":
        return gen_uniform_cube(d, n, seed), None
    if dist == "gaussian-iso":
        return gen_gaussian_iso(d, n, seed, std), None
    s, b = gen_gaussian_random_cov(d, n, seed)
    return s, b


def _c0_matrix(cfg: dict, dx: int, dy: int):
    if cfg["c0"] is None:
        return None
    raw = cfg["c0"]
    if isinstance(raw, (int, float)):
        return np.full((dx, dy), float(raw))
    mat = np.asarray(raw, dtype=np.float64)
    if mat.shape != (dx, dy):
        raise UsageError(f"c0 must be scalar or {dx}x{dy}")
    return mat


def _estimate_kwargs(cfg: dict, dx: int, dy: int) -> dict:
    return {
        "k_neurons": int(cfg["k_neurons"]),
        "c0": _c0_matrix(cfg, dx, dy),
        "bound_a": None if cfg["bound_a"] is None else float(cfg["bound_a"]),
        "auto_eps": bool(cfg["auto_eps"]),
        "restarts": bool(cfg["restarts"]),
    }


def cmd_gen(args) -> int:
    started = time.monotonic()
    if args.d < 1:
        raise UsageError("--d must be >= 1")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.dist not in DISTS:
        raise UsageError(f"unknown dist {args.dist!r}")
    out = _out_path(args, args.out)
    samples, cov_factor = _gen_samples(args.dist, args.d, args.n, args.seed, args.std)
    save_csv(samples.points, out)
    meta = {
        "schema": SCHEMA,
        "dist": args.dist,
        "d": args.d,
        "n": args.n,
        "seed": args.seed,
        "label": samples.label,
        "path": out.name,
    }
    if args.dist == "gaussian-iso":
        meta["std"] = args.std
    if cov_factor is not None:
        meta["cov_factor"] = cov_factor.tolist()
    _emit(args, out.with_suffix(out.suffix + ".meta.json"), meta, started)
    return 0


def _result_report(result, seed: int, cfg: dict) -> dict:
    return {
        "schema": SCHEMA,
        "kind": result.spec.kind,
        "eps": result.spec.eps,
        "total": result.total,
        "marginal_const": result.marginal_const,
        "semidual": result.semidual,
        "a_star": result.a_star.tolist(),
        "n": result.coupling.n,
        "dx": result.x_used.d,
        "dy": result.y_used.d,
        "k_neurons": int(cfg["k_neurons"]),
        "iterations": result.iterations,
        "converged": result.converged,
        "seed": seed,
    }


def cmd_estimate(args) -> int:
    started = time.monotonic()
    cfg = _resolve(args)
    x = load_csv(args.x, has_header=args.has_header)
    y = load_csv(args.y, has_header=args.has_header)
    spec = CostSpec(cfg["kind"], float(cfg["eps"]))
    result = estimate(
        spec,
        x,
        y,
        _plan_from(cfg),
        _stop_from(cfg),
        args.seed,
        **_estimate_kwargs(cfg, x.d, y.d),
    )
    out = _out_path(args, args.out)
    report = _result_report(result, args.seed, cfg)
    if args.export_coupling:
        paths = export_plan(result, out)
        report["exports"] = {k: Path(v).name for k, v in paths.items()}
    _emit(args, out.with_suffix(".json"), report, started)
    return 0


def _rate_cell(cfg, spec, n, cell_seed, epochs_factor=1):
    x, _ = _gen_samples(cfg["dist"], cfg["d"], n, derive_seed(cell_seed, "x"), cfg["std"])
    y, _ = _gen_samples(cfg["dist"], cfg["dy"], n, derive_seed(cell_seed, "y"), cfg["std"])
    return estimate(
        spec,
        x,
        y,
        _plan_from(cfg, epochs_factor),
        _stop_from(cfg),
        cell_seed,
        **_estimate_kwargs(cfg, x.d, y.d),
    )


def _refined_total(cfg, spec, result) -> float:
    """Fixed-A refinement: exact inner solve at the returned matrix."""
    cost = cost_matrix(spec, result.a_star, result.x_used, result.y_used)
    try:
        sk = sinkhorn(
            spec,
            cost,
            tol=float(cfg["ref_sinkhorn_tol"]),
            max_iter=int(cfg["ref_sinkhorn_max_iter"]),
        )
        inner = sk.value
    except ConvergenceError:
        inner = result.semidual
    reg = spec.reg_weight * float((result.a_star**2).sum())
    return result.marginal_const + reg + inner


def cmd_rate(args) -> int:
    started = time.monotonic()
    cfg = _resolve(args)
    threads = _threads(args)
    n_grid = cfg["n_grid"]
    if len(n_grid) < 3:
        raise UsageError("n_grid needs at least 3 points")
    runs = int(cfg["runs"])
    spec = CostSpec(cfg["kind"], float(cfg["eps"]))
    out = _out_path(args, args.out)

    if args.stub_slope:
        reference = 1.0
        errors = {(n, r): n**-0.5 for n in n_grid for r in range(runs)}
        totals = {cell: math.nan for cell in errors}
        seeds = {(n, r): derive_seed(args.seed, "rate", n, r) for n, r in errors}
    else:
        ref_totals = []
        for j in range(int(cfg["ref_runs"])):
            res = _rate_cell(
                cfg,
                spec,
                n_grid[-1],
                derive_seed(args.seed, "rate-ref", j),
                epochs_factor=int(cfg["ref_epochs_factor"]),
            )
            ref_totals.append(_refined_total(cfg, spec, res))
        reference = float(np.median(ref_totals))
        if reference == 0.0:
            raise RuntimeError("reference value is zero; relative error undefined")
        cells = [(n, r) for n in n_grid for r in range(runs)]
        seeds = {cell: derive_seed(args.seed, "rate", *cell) for cell in cells}

        def _one(cell):
            n, _ = cell
            res = _rate_cell(cfg, spec, n, seeds[cell])
            return res.total

        totals = {}
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futs = {pool.submit(_one, cell): cell for cell in cells}
                for fut in as_completed(futs):
                    totals[futs[fut]] = fut.result()
        else:
            for cell in cells:
                totals[cell] = _one(cell)
        errors = {
            cell: abs(totals[cell] - reference) / abs(reference) for cell in cells
        }

    raw_path = out.with_suffix(".raw.csv")
    with raw_path.open("w", encoding="utf-8") as fh:
        fh.write("n,run,seed,total,rel_error\n")
        for n in n_grid:
            for r in range(runs):
                fh.write(
                    f"{n},{r},{seeds[(n, r)]},{totals[(n, r)]!r},{errors[(n, r)]!r}\n"
                )

    mean_errors = []
    std_errors = []
    for n in n_grid:
        per_run = [errors[(n, r)] for r in range(runs)]
        mean_errors.append(sum(per_run) / runs)
        if runs > 1:
            m = mean_errors[-1]
            std_errors.append(math.sqrt(sum((e - m) ** 2 for e in per_run) / (runs - 1)))

    summary_path = out.with_suffix(".summary.csv")
    with summary_path.open("w", encoding="utf-8") as fh:
        if runs > 1:
            fh.write("n,mean_error,std_error\n")
            for n, m, s in zip(n_grid, mean_errors, std_errors):
                fh.write(f"{n},{m!r},{s!r}\n")
        else:
            fh.write("n,mean_error\n")
            for n, m in zip(n_grid, mean_errors):
                fh.write(f"{n},{m!r}\n")

    fit = fit_loglog_slope(n_grid, mean_errors)
    report = {
        "schema": SCHEMA,
        "kind": spec.kind,
        "eps": spec.eps,
        "d": int(cfg["d"]),
        "k_neurons": int(cfg["k_neurons"]),
        "n_grid": n_grid,
        "runs": runs,
        "stub": bool(args.stub_slope),
        "reference": reference,
        "mean_errors": mean_errors,
        "slope": fit.slope,
        "intercept": fit.intercept,
        "r2": fit.r2,
        "points": [list(p) for p in fit.points],
        "tables": {"raw": raw_path.name, "summary": summary_path.name},
    }
    _emit(args, out.with_suffix(".slope.json"), report, started)
    return 0


def cmd_oracle_compare(args) -> int:
    started = time.monotonic()
    cfg = _resolve(args)
    n = int(cfg["n"])
    spec = CostSpec(cfg["kind"], float(cfg["eps"]))
    x, _ = _gen_samples(cfg["dist"], 1, n, derive_seed(args.seed, "x"), cfg["std"])
    y, _ = _gen_samples(cfg["dist"], 1, n, derive_seed(args.seed, "y"), cfg["std"])
    result = estimate(
        spec,
        x,
        y,
        _plan_from(cfg),
        _stop_from(cfg),
        args.seed,
        **_estimate_kwargs(cfg, 1, 1),
    )
    oracle_val, oracle_a = grid_oracle_1d(
        spec, x, y, int(cfg["grid_points"]), float(cfg["sinkhorn_tol"])
    )
    cost = cost_matrix(spec, result.a_star, result.x_used, result.y_used)
    sk = sinkhorn(spec, cost, tol=float(cfg["sinkhorn_tol"]))
    sup_margin = result.semidual - sk.value
    sup_pass = bool(sup_margin <= 1e-8)
    denom = abs(oracle_val) if oracle_val != 0.0 else 1.0
    gap = abs(result.total - oracle_val) / denom
    report = {
        "schema": SCHEMA,
        "kind": spec.kind,
        "eps": spec.eps,
        "n": n,
        "ne_total": result.total,
        "oracle_total": oracle_val,
        "oracle_a": oracle_a,
        "a_star": result.a_star.tolist(),
        "relative_gap": gap,
        "restricted_sup": {
            "semidual": result.semidual,
            "sinkhorn_value": sk.value,
            "margin": sup_margin,
            "pass": sup_pass,
        },
        "pass": sup_pass,
    }
    out = _out_path(args, args.out)
    _emit(args, out.with_suffix(".json"), report, started)
    return 0 if sup_pass else 1


def cmd_invariance(args) -> int:
    started = time.monotonic()
    cfg = _resolve(args)
    d = int(cfg["d"])
    runs = int(cfg["runs"])
    n_grid = cfg["n_grid"]
    spec = CostSpec(KIND_INNER, float(cfg["eps"]))
    cells = []
    for n in n_grid:
        for r in range(runs):
            cell_seed = derive_seed(args.seed, "invariance", n, r)
            x0 = gen_gaussian_iso(d, n, derive_seed(cell_seed, "x0"), float(cfg["std"]))
            x1 = gen_gaussian_iso(d, n, derive_seed(cell_seed, "x1"), float(cfg["std_y"]))
            if args.identity_rotation:
                u = np.eye(d)
                v = np.eye(d)
            else:
                u = random_orthogonal(d, derive_seed(cell_seed, "u"))
                v = random_orthogonal(d, derive_seed(cell_seed, "v"))
            est_seed = derive_seed(cell_seed, "est")
            kwargs = _estimate_kwargs(cfg, d, d)
            base = estimate(
                spec, x0, x1, _plan_from(cfg), _stop_from(cfg), est_seed, **kwargs
            )
            rot = estimate(
                spec,
                SampleSet(x0.points @ u.T, label=x0.label + "-rot"),
                SampleSet(x1.points @ v.T, label=x1.label + "-rot"),
                _plan_from(cfg),
                _stop_from(cfg),
                est_seed,
                **kwargs,
            )
            cells.append(
                {
                    "n": n,
                    "run": r,
                    "base_total": base.total,
                    "rotated_total": rot.total,
                    "gap": abs(base.total - rot.total),
                }
            )
    mean_gaps = []
    for n in n_grid:
        vals = [c["gap"] for c in cells if c["n"] == n]
        mean_gaps.append(sum(vals) / len(vals))
    inversions = sum(1 for a, b in zip(mean_gaps, mean_gaps[1:]) if b > a)
    report = {
        "schema": SCHEMA,
        "kind": spec.kind,
        "eps": spec.eps,
        "d": d,
        "n_grid": n_grid,
        "runs": runs,
        "identity_rotation": bool(args.identity_rotation),
        "mean_gaps": mean_gaps,
        "inversions": inversions,
        "trend_ok": bool(inversions <= 1),
        "cells": cells,
    }
    out = _out_path(args, args.out)
    _emit(args, out.with_suffix(".json"), report, started)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0, help="master seed")
    shared.add_argument("--threads", type=int, default=None, help="worker pool size")
    shared.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="omit timing fields so reruns are byte-identical",
    )
    shared.add_argument("--out-dir", default=".", help="directory for outputs")
    shared.add_argument("--config", default=None, help="JSON config file")

    knobs = argparse.ArgumentParser(add_help=False)
    knobs.add_argument("--kind", default=None, help="quadratic or inner_product")
    knobs.add_argument("--eps", type=float, default=None)
    knobs.add_argument("--k", dest="k_neurons", type=int, default=None)
    knobs.add_argument("--epochs", type=int, default=None)
    knobs.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    knobs.add_argument("--rate", type=float, default=None)
    knobs.add_argument(
        "--projection", action=argparse.BooleanOptionalAction, default=None
    )
    knobs.add_argument("--max-outer", dest="max_outer", type=int, default=None)
    knobs.add_argument("--grad-tol", dest="grad_tol", type=float, default=None)
    knobs.add_argument("--c0", type=float, default=None)
    knobs.add_argument("--bound-a", dest="bound_a", type=float, default=None)
    knobs.add_argument(
        "--auto-eps", dest="auto_eps", action=argparse.BooleanOptionalAction, default=None
    )
    knobs.add_argument(
        "--restarts", action=argparse.BooleanOptionalAction, default=None,
        help="also train a fresh inner candidate each solve and keep the better",
    )

    parser = argparse.ArgumentParser(
        prog="egwalign",
        description="Neural entropic alignment-cost estimation toolkit",
        parents=[shared],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[shared], help="generate a dataset CSV")
    p.add_argument("--dist", default="uniform-cube", help="|".join(DISTS))
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--std", type=float, default=1.0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser(
        "estimate", parents=[shared, knobs], help="estimate alignment cost for two CSVs"
    )
    p.add_argument("--x", required=True, help="first samples CSV")
    p.add_argument("--y", required=True, help="second samples CSV")
    p.add_argument("--has-header", action="store_true")
    p.add_argument("--export-coupling", action="store_true")
    p.add_argument("--out", default="estimate", help="output prefix")
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser(
        "rate", parents=[shared, knobs], help="convergence-rate experiment"
    )
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--dy", type=int, default=None)
    p.add_argument("--dist", default=None, help="|".join(DISTS))
    p.add_argument("--std", type=float, default=None)
    p.add_argument("--n-grid", dest="n_grid", default=None, help="comma list, e.g. 64,128,256")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--ref-runs", dest="ref_runs", type=int, default=None)
    p.add_argument(
        "--ref-epochs-factor", dest="ref_epochs_factor", type=int, default=None
    )
    p.add_argument("--stub-slope", action="store_true", help="inject n^-1/2 errors")
    p.add_argument("--out", default="rate", help="output prefix")
    p.set_defaults(fn=cmd_rate)

    p = sub.add_parser(
        "oracle-compare",
        parents=[shared, knobs],
        help="compare the estimator against the 1-D grid oracle",
    )
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--dist", default=None, help="|".join(DISTS))
    p.add_argument("--std", type=float, default=None)
    p.add_argument("--grid-points", dest="grid_points", type=int, default=None)
    p.add_argument("--sinkhorn-tol", dest="sinkhorn_tol", type=float, default=None)
    p.add_argument("--out", default="oracle", help="output prefix")
    p.set_defaults(fn=cmd_oracle_compare)

    p = sub.add_parser(
        "invariance",
        parents=[shared, knobs],
        help="rotation-invariance gaps for the inner-product kind",
    )
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--std", type=float, default=None)
    p.add_argument("--std-y", dest="std_y", type=float, default=None)
    p.add_argument("--n-grid", dest="n_grid", default=None, help="comma list")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--identity-rotation", action="store_true")
    p.add_argument("--out", default="invariance", help="output prefix")
    p.set_defaults(fn=cmd_invariance)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(
            json.dumps(
                {"schema": SCHEMA, "error": f"{type(exc).__name__}: {exc}"},
                sort_keys=True,
            ),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
