"""Command-line front end: fit matrices, run the synthetic benchmark, select lambda.

Matrix interchange is plain headerless CSV; missing entries are either the
token ``nan`` in the data file or zeros in a companion 0/1 mask file. Every
run directory gets a YAML manifest echoing the resolved configuration, a
version stamp, timings and the numeric results, so the run can be reproduced
from the manifest alone. Exit codes: 0 success, 2 usage/input error, 3 shape
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .alm import AlmOptions
from .bench import (
    REGIMES,
    SyntheticSpec,
    evaluate,
    generate_synthetic,
    noise_distribution,
    svd_baseline,
)
from .data import ObservedMatrix, load_matrix_csv, save_matrix_csv
from .em import EmConfig, EmResult, fit_pmoep
from .mrf import GridShape, MrfConfig, fit_pmoep_mrf
from .select import select_lambda

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SHAPE = 3
EXIT_NUMERIC = 4


class ShapeError(ValueError):
    pass


def _version_stamp() -> dict:
    stamp = {"version": __version__}
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, check=False,
        )
        if rev.returncode == 0:
            stamp["git"] = rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


def _write_manifest(out_dir: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(out_dir / "manifest.yaml", "w") as fh:
        yaml.safe_dump(payload, fh, sort_keys=False, default_flow_style=None)


def _float_list(text: str) -> list[float]:
    parts = [p.strip() for p in text.split(",")]
    if any(not p for p in parts):
        raise ValueError(f"malformed list {text!r}")
    return [float(p) for p in parts]


def _parse_grid_shape(text: str) -> tuple[int, int, int]:
    try:
        h, w, f = (int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise ValueError(f"grid must look like 16x16x20, got {text!r}") from exc
    return h, w, f


def _load_observed(input_path: str, mask_path: str | None) -> ObservedMatrix:
    y = load_matrix_csv(input_path)
    if mask_path is None:
        return ObservedMatrix.from_dense(y)
    mask = load_matrix_csv(mask_path)
    if mask.shape != y.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match data shape {y.shape}")
    return ObservedMatrix(np.where(mask > 0, y, 0.0), mask > 0)


def _model_summary(result: EmResult) -> dict:
    return {
        "k_final": int(result.k_final),
        "p": [float(x) for x in result.model.p],
        "eta": [float(x) for x in result.model.eta],
        "pi": [float(x) for x in result.model.pi],
        "converged": bool(result.converged),
        "final_objective": float(result.objective_trace[-1]),
    }


def _em_config_from_args(args, ns_config: dict) -> EmConfig:
    def pick(name, default):
        v = getattr(args, name, None)
        if v is None:
            v = ns_config.get(name.replace("_", "-"), ns_config.get(name, default))
        return v

    inner = AlmOptions(
        rho0=float(pick("rho0", 1.0)),
        alpha=float(pick("alpha", 1.25)),
        max_iter=int(pick("inner_max_iter", 100)),
        tol=float(pick("inner_tol", 1e-7)),
    )
    p_cand = pick("p", "0.5,1,1.5,2")
    if isinstance(p_cand, str):
        p_cand = _float_list(p_cand)
    return EmConfig(
        rank=int(pick("rank", 4)),
        p_candidates=tuple(p_cand),
        lam=float(pick("lam", 0.01)),
        tol=float(pick("tol", 1e-6)),
        max_outer=int(pick("max_outer", 100)),
        restarts=int(pick("restarts", 5)),
        seed=int(pick("seed", 0)),
        penalty_scale=str(pick("penalty_scale", "observed")),
        inner=inner,
        eta_init=str(pick("eta_init", "moment")),
    )


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError("config file must hold a mapping of option names to values")
    return data


def _gamma_table(result: EmResult, data: ObservedMatrix) -> np.ndarray:
    return np.column_stack(
        [data.obs_rows, data.obs_cols, result.resp.gamma]
    )


def cmd_fit(args) -> int:
    ns_config = _load_config_file(args.config)
    data = _load_observed(args.input, args.mask)
    config = _em_config_from_args(args, ns_config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    if args.mrf:
        if args.grid is None:
            raise ValueError("--mrf requires --grid HxWxF")
        h, w, f = _parse_grid_shape(args.grid)
        grid = GridShape(height=h, width=w, frames=f, transpose=args.transpose_grid)
        try:
            grid.check(data.shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc
        mrf = MrfConfig(tau=args.tau, damping=args.damping)
        result = fit_pmoep_mrf(data, grid, config, mrf)
    else:
        result = fit_pmoep(data, config)
    wall = time.time() - t0

    save_matrix_csv(out_dir / "u.csv", result.factors.u)
    save_matrix_csv(out_dir / "v.csv", result.factors.v)
    save_matrix_csv(out_dir / "objective_trace.csv", result.objective_trace.reshape(-1, 1))
    save_matrix_csv(out_dir / "gamma.csv", _gamma_table(result, data))
    _write_manifest(
        out_dir,
        {
            "command": "fit",
            "stamp": _version_stamp(),
            "config": {
                "input": args.input,
                "mask": args.mask,
                "mrf": bool(args.mrf),
                "grid": args.grid,
                "tau": args.tau if args.mrf else None,
                "rank": config.rank,
                "p_candidates": list(config.p_candidates),
                "lambda": config.lam,
                "seed": config.seed,
                "restarts": config.restarts,
                "penalty_scale": config.penalty_scale,
            },
            "model": _model_summary(result),
            "objective_trace": [float(x) for x in result.objective_trace],
            "diagnostics": {
                k: v for k, v in result.diagnostics.items() if not isinstance(v, list)
            },
            "wall_seconds": wall,
        },
    )
    return EXIT_OK


def _density_curves(result: EmResult, regime: str, out_dir: Path) -> None:
    grid = np.linspace(-3.0, 3.0, 601)
    fitted = np.exp(result.model.mixture_log_pdf(grid))
    save_matrix_csv(out_dir / f"density_fitted_{regime}.csv", np.column_stack([grid, fitted]))
    try:
        true_noise = noise_distribution(regime)
    except ValueError:
        return  # no continuous density (sparse regime)
    true_density = np.exp(true_noise.log_pdf(grid))
    save_matrix_csv(out_dir / f"density_true_{regime}.csv", np.column_stack([grid, true_density]))


def _bench_one_regime(regime: str, args, ns_config: dict, out_dir: Path) -> dict:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in ("pmoep", "pmog", "svd"):
            raise ValueError(f"unknown method {m!r}")
    rows = {m: [] for m in methods}
    timing = {m: 0.0 for m in methods}
    k_final = {m: [] for m in methods}
    density_done = False
    for rep in range(args.replicates):
        seed = args.seed + rep
        truth = generate_synthetic(
            SyntheticSpec(regime=regime, seed=seed, r=args.rank)
        )
        data = truth.observed()
        for method in methods:
            t0 = time.time()
            if method == "svd":
                fitted = svd_baseline(data, args.rank)
                report = evaluate(fitted, truth)
            else:
                config = _em_config_from_args(args, ns_config)
                config = _bench_method_config(config, method, regime, seed)
                result = fit_pmoep(data, config)
                report = evaluate(result, truth)
                if method == "pmoep" and not density_done:
                    _density_curves(result, regime, out_dir)
                    density_done = True
                k_final[method].append(result.k_final)
            timing[method] += time.time() - t0
            rows[method].append([report.c1, report.c2, report.c3, report.c4, report.c5, report.c6])
    table = {m: np.mean(np.array(rows[m]), axis=0) for m in methods}
    with open(out_dir / f"bench_{regime}.csv", "w") as fh:
        fh.write("measure," + ",".join(methods) + "\n")
        for i, name in enumerate(["C1", "C2", "C3", "C4", "C5", "C6"]):
            fh.write(name + "," + ",".join(f"{table[m][i]:.17g}" for m in methods) + "\n")
    return {
        "regime": regime,
        "replicates": args.replicates,
        "methods": methods,
        "mean_measures": {m: [float(x) for x in table[m]] for m in methods},
        "total_seconds": {m: timing[m] for m in methods},
        "k_final": {m: k_final[m] for m in methods if k_final[m]},
    }


def _bench_method_config(config: EmConfig, method: str, regime: str, seed: int) -> EmConfig:
    from dataclasses import replace

    from .bench import regime_lambda

    lam = config.lam if config.lam > 0 else regime_lambda(regime)
    if method == "pmog":
        return replace(config, p_candidates=(2.0,) * len(config.p_candidates), lam=lam, seed=seed)
    return replace(config, lam=lam, seed=seed)


def cmd_bench(args) -> int:
    ns_config = _load_config_file(args.config)
    regimes = list(REGIMES) if args.regime == "all" else [args.regime]
    for regime in regimes:
        if regime not in REGIMES:
            raise ValueError(f"unknown regime {regime!r}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = [_bench_one_regime(r, args, ns_config, out_dir) for r in regimes]
    _write_manifest(
        out_dir,
        {
            "command": "bench",
            "stamp": _version_stamp(),
            "config": {
                "regime": args.regime,
                "replicates": args.replicates,
                "methods": args.methods,
                "seed": args.seed,
                "rank": args.rank,
                "lambda": args.lam,
            },
            "results": summaries,
        },
    )
    return EXIT_OK


def cmd_select(args) -> int:
    ns_config = _load_config_file(args.config)
    grid = _float_list(args.grid)
    if any(g <= 0 for g in grid):
        raise ValueError("lambda grid entries must be positive")
    if args.input:
        data = _load_observed(args.input, args.mask)
    else:
        truth = generate_synthetic(SyntheticSpec(regime=args.regime, seed=args.seed, r=args.rank))
        data = truth.observed()
    config = _em_config_from_args(args, ns_config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    report = select_lambda(data, config, grid)
    wall = time.time() - t0
    with open(out_dir / "bic_table.csv", "w") as fh:
        fh.write("lambda,bic,k_final,error\n")
        for rec in report.records:
            fh.write(
                f"{rec.lam:.17g},{rec.bic:.17g},"
                f"{'' if rec.k_final is None else rec.k_final},"
                f"{rec.error or ''}\n"
            )
    chosen = report.chosen
    save_matrix_csv(out_dir / "u.csv", chosen.result.factors.u)
    save_matrix_csv(out_dir / "v.csv", chosen.result.factors.v)
    _write_manifest(
        out_dir,
        {
            "command": "select",
            "stamp": _version_stamp(),
            "config": {
                "input": args.input,
                "regime": None if args.input else args.regime,
                "grid": grid,
                "seed": config.seed,
                "rank": config.rank,
                "p_candidates": list(config.p_candidates),
                "restarts": config.restarts,
            },
            "chosen_lambda": chosen.lam,
            "chosen_bic": chosen.bic,
            "model": _model_summary(chosen.result),
            "wall_seconds": wall,
        },
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eplrmf",
        description="Low-rank matrix factorization under mixture-of-exponential-power noise",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--rank", type=int, default=4)
        p.add_argument("--p", dest="p", default=None, help="comma list of shape exponents")
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--restarts", type=int, default=None)
        p.add_argument("--tol", type=float, default=None)
        p.add_argument("--max-outer", dest="max_outer", type=int, default=None)
        p.add_argument("--penalty-scale", dest="penalty_scale", default=None,
                       choices=["observed", "columns"])
        p.add_argument("--eta-init", dest="eta_init", default=None, choices=["moment", "ones"])
        p.add_argument("--config", default=None, help="YAML file supplying any option")
        p.add_argument("--out", required=True)

    fit = sub.add_parser("fit", help="fit one matrix")
    fit.add_argument("--input", required=True)
    fit.add_argument("--mask", default=None)
    fit.add_argument("--mrf", action="store_true", help="couple noise labels on a grid")
    fit.add_argument("--grid", default=None, help="HxWxF pixel grid for --mrf")
    fit.add_argument("--transpose-grid", dest="transpose_grid", action="store_true")
    fit.add_argument("--tau", type=float, default=10.0)
    fit.add_argument("--damping", type=float, default=0.5)
    add_common(fit)
    fit.set_defaults(func=cmd_fit)

    bench = sub.add_parser("bench", help="run the synthetic noise-regime benchmark")
    bench.add_argument("--regime", required=True, help="regime name or 'all'")
    bench.add_argument("--replicates", type=int, default=10)
    bench.add_argument("--methods", default="pmoep,pmog,svd")
    add_common(bench)
    bench.set_defaults(func=cmd_bench)

    select = sub.add_parser("select", help="choose lambda by modified BIC over a grid")
    select.add_argument("--grid", required=True, help="comma list of positive lambdas")
    select.add_argument("--input", default=None)
    select.add_argument("--mask", default=None)
    select.add_argument("--regime", default="gaussian")
    add_common(select)
    select.set_defaults(func=cmd_select)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (FileNotFoundError, ValueError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
