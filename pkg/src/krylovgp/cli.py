"""Command-line entry point.

Subcommands: ``fit``, ``experiment``, ``timing``, ``diag`` and
``demo-inconsistency``.  Exit status is 0 on success, 1 for configuration
or usage errors (the configuration schema is printed) and 2 for numerical
failures.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .diagnostics import (inconsistency_gap, kl_decomposition, partial_trace_check,
                          perturbation_sweep)
from .experiments import (CONFIG_SCHEMA, ConfigError, ExperimentConfig, MethodSpec, fit_method,
                          generate_data, resolve_threads, run_experiment, scenario_kernel,
                          timing_harness)
from .itergp import DependentPolicyError
from .kernels import kernel_matrix, series
from .posterior import predict, write_predictions_csv, z_quantile
from .rng import stream
from .spectral import (BreakdownError, NotApplicable, dense_eig, kernel_lanczos,
                       lanczos_eigenvalue_bound, lanczos_eigenvector_bound)

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
NUMERICAL_ERRORS = (np.linalg.LinAlgError, ArithmeticError, BreakdownError, DependentPolicyError,
                    FloatingPointError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="path to a JSON configuration")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (falls back to ITERGP_THREADS, then 1)")
    common.add_argument("--format", choices=("csv", "json"), default="json",
                        help="format of the report printed to stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="krylovgp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fit", parents=[common], help="fit one posterior and write predictions")
    p.add_argument("--scenario", default="MaternStudy")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--method", default="CGGP(20)", help='e.g. "Exact", "EVGP(10)", "LGP(5)", "CGGP(20)"')
    p.add_argument("--points", type=int, default=400, help="grid size")
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("experiment", parents=[common], help="run a configuration file")
    p.add_argument("--quick", action="store_true", help="shrink n to desk scale")

    p = sub.add_parser("timing", parents=[common], help="log-log timing of Exact vs CGGP")
    p.add_argument("--sizes", type=_int_list, default=[1000, 1414, 2000, 2828, 4000, 5657, 8000])
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--quick", action="store_true", help="use sizes 250..1000")

    p = sub.add_parser("diag", parents=[common], help="diagnostic reports")
    p.add_argument("--kind", choices=("kl", "lanczos", "traces", "perturbation"), default="kl")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--seeds", type=int, default=None, help="number of seeds")

    p = sub.add_parser("demo-inconsistency", parents=[common],
                       help="sweep the shifted-eigenvector gap over n")
    p.add_argument("--sizes", type=_int_list, default=[100, 200, 400, 800, 1600])
    return parser


def _emit(payload, fmt: str, rows: Optional[List[dict]] = None) -> None:
    if fmt == "json" or not rows:
        print(json.dumps(payload, indent=2, default=_default))
        return
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    sys.stdout.write(buf.getvalue())


def _default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, NotApplicable):
        return None
    raise TypeError(type(obj).__name__)


def _out_dir(args) -> Optional[Path]:
    if not args.out:
        return None
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> Optional[ExperimentConfig]:
    if not args.config:
        return None
    return ExperimentConfig.load(args.config)


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else 0
    if cfg is not None:
        scenario, n, method = cfg.scenario, cfg.n, cfg.methods[0]
        grid = cfg.grid()
        level = cfg.level
    else:
        method = MethodSpec.parse(args.method)
        scenario, n = args.scenario, args.n
        cfg = ExperimentConfig(scenario, n, [method], [seed], grid_points=args.points, level=args.level)
        grid, level = cfg.grid(), args.level
    data = generate_data(scenario, n, seed, design=cfg.design, truth=cfg.truth, sigma=cfg.sigma,
                         dimension=cfg.dimension)
    spec = scenario_kernel(scenario, n, cfg.kernel)
    post, steps = fit_method(data, spec, method, cg_tol=cfg.cg_tol, cg_variant=cfg.cg_variant,
                             v0_rng=stream(scenario, n, seed, "lanczos_v0"))
    mean, var = predict(post, grid)
    half = z_quantile(level) * np.sqrt(var)
    out = _out_dir(args)
    files = []
    if out is not None:
        path = out / f"pred_{method.slug}_seed{seed}.csv"
        write_predictions_csv(path, grid, mean, var, mean - half, mean + half)
        files.append(str(path))
    rows = [{"x": float(g[0]), "mean": float(a), "var": float(v), "lo": float(a - h), "hi": float(a + h)}
            for g, a, v, h in zip(grid, mean, var, half)]
    payload = {"scenario": scenario, "n": n, "method": method.label, "seed": seed, "steps": steps,
               "files": files, "predictions": rows}
    _emit(payload, args.format, rows)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    if cfg is None:
        raise ConfigError("experiment needs --config <path>")
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.quick:
        cfg = cfg.quick()
    report = run_experiment(cfg, output_dir=args.out, threads=args.threads)
    rows = [{"method": label, **agg} for label, agg in report.aggregates.items()]
    _emit(report.to_dict(), args.format, rows)
    return EXIT_NUMERICAL if report.errors and len(report.errors) == len(report.cells) else EXIT_OK


def cmd_timing(args) -> int:
    sizes = [250, 354, 500, 707, 1000] if args.quick else args.sizes
    report = timing_harness(sizes, repetitions=args.reps, seed=args.seed or 0)
    out = _out_dir(args)
    if out is not None:
        report.write_csv(out / "timing.csv")
    rows = [{"method": name, "n": n, "median_s": t}
            for name, times in report.medians.items() for n, t in zip(report.sizes, times)]
    _emit(report.to_dict(), args.format, rows)
    return EXIT_OK


def _diag_kl(args, seed):
    n = args.n or 200
    m = args.m or 10
    data = generate_data("MaternStudy", n, seed)
    spec = scenario_kernel("MaternStudy", n)
    K = kernel_matrix(spec, data.X)
    eig = dense_eig(K / n)
    out = {}
    for label in (f"EVGP({m})", f"LGP({m})", f"CGGP({m})"):
        method = MethodSpec.parse(label)
        post, _ = fit_method(data, spec, method, K, cg_variant="reorthogonalized", eig=eig)
        out[label] = kl_decomposition(K, data.sigma2, post.precision, data.Y, eig=eig).to_dict()
    return {"kind": "kl", "n": n, "m": m, "seed": seed, "reports": out}


def _diag_lanczos(args, seed):
    n = args.n or 100
    mt = args.m or 10
    data = generate_data("MaternStudy", n, seed)
    K = kernel_matrix(scenario_kernel("MaternStudy", n), data.X)
    eig = dense_eig(K / n)
    v0 = data.Y / np.linalg.norm(data.Y)
    res = kernel_lanczos(K, v0, mt)
    rows = []
    for i in range(1, min(mt, 5) + 1):
        p = 0
        vb = lanczos_eigenvalue_bound(i, p, mt, eig, res, v0)
        vec = lanczos_eigenvector_bound(i, p, mt, eig, res, v0)
        rows.append({
            "i": i,
            "gap": float(eig.values[i - 1] - res.values[i - 1]),
            "value_bound": None if isinstance(vb, NotApplicable) else vb,
            "sin2": None if isinstance(vec, NotApplicable) else vec[1],
            "vector_bound": None if isinstance(vec, NotApplicable) else vec[0],
        })
    return {"kind": "lanczos", "n": n, "krylov_dim": mt, "seed": seed,
            "lanczos": res.to_dict(), "bounds": rows}


def _diag_traces(args, seed):
    n = args.n or 500
    m = args.m or 20
    seeds = range(seed, seed + (args.seeds or 50))
    rep = partial_trace_check(series("polynomial", tau=1.0, alpha=1.0), n, m, list(seeds))
    return {"kind": "traces", "n": n, "m": m, **rep.to_dict()}


def _diag_perturbation(args, seed):
    m = args.m or 10
    ns = [args.n] if args.n else [500, 1000, 2000, 4000]
    seeds = list(range(seed, seed + (args.seeds or 20)))
    spec = series("polynomial", tau=1.0, alpha=1.0, truncation=1024)
    return {"kind": "perturbation", "m": m, "sweep": perturbation_sweep(spec, ns, m, seeds)}


def cmd_diag(args) -> int:
    seed = args.seed if args.seed is not None else 0
    kinds = {"kl": _diag_kl, "lanczos": _diag_lanczos, "traces": _diag_traces,
             "perturbation": _diag_perturbation}
    payload = kinds[args.kind](args, seed)
    out = _out_dir(args)
    if out is not None:
        (out / f"diag_{args.kind}.json").write_text(json.dumps(payload, indent=2, default=_default) + "\n",
                                                   encoding="utf-8")
    _emit(payload, args.format)
    return EXIT_OK


def cmd_inconsistency(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rows = []
    for n in args.sizes:
        data = generate_data("InconsistencyDemo", n, seed)
        K = kernel_matrix(scenario_kernel("InconsistencyDemo", n), data.X)
        gap = inconsistency_gap(K, data.sigma2, data.Y)
        rows.append({"n": n, "gap": gap.closed_form, "gap_direct": gap.direct})
    out = _out_dir(args)
    if out is not None:
        with open(out / "inconsistency.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "gap", "gap_direct"])
            for r in rows:
                w.writerow([r["n"], repr(r["gap"]), repr(r["gap_direct"])])
    gaps = [r["gap"] for r in rows]
    increasing = all(b > a for a, b in zip(gaps, gaps[1:]))
    _emit({"seed": seed, "rows": rows, "strictly_increasing": increasing}, args.format, rows)
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "experiment": cmd_experiment,
    "timing": cmd_timing,
    "diag": cmd_diag,
    "demo-inconsistency": cmd_inconsistency,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a subcommand is required")
    except _UsageError as exc:
        print(f"krylovgp: error: {exc}\n", file=sys.stderr)
        parser.print_usage(sys.stderr)
        print("\n" + CONFIG_SCHEMA, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = resolve_threads(args.threads)
        args.threads = threads
        with threadpool_limits(limits=threads if args.command != "experiment" else None):
            return COMMANDS[args.command](args)
    except NUMERICAL_ERRORS as exc:
        print(f"krylovgp: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError) as exc:
        print(f"krylovgp: configuration error: {exc}\n\n{CONFIG_SCHEMA}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
