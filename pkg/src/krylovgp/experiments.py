"""Config-driven simulation studies and the timing harness.

A sweep is a grid of cells ``(seed, method)``.  Each seed owns one dataset
(and its kernel matrix); each cell fits one posterior, evaluates the MSE at
the design points, optionally the KL divergence to the exact posterior, and
pointwise credible bands on an evaluation grid.  Failing cells are recorded
and do not stop the sweep.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg
from threadpoolctl import threadpool_limits

from .diagnostics import MAX_KL_N, kl_decomposition, mse
from .itergp import closed_form_C_cg, closed_form_C_ev, closed_form_C_lanczos, default_krylov_dim
from .kernels import Dataset, KernelSpec, kernel_matrix, matern, sqexp
from .posterior import (GPPosterior, approx_posterior, exact_posterior, predict,
                        write_predictions_csv, z_quantile)
from .rng import stream
from .spectral import cg_solve, dense_eig, kernel_lanczos

__all__ = [
    "ConfigError",
    "MethodSpec",
    "ExperimentConfig",
    "ExperimentReport",
    "CellResult",
    "SCENARIOS",
    "CONFIG_SCHEMA",
    "generate_data",
    "scenario_kernel",
    "fit_method",
    "run_experiment",
    "timing_harness",
    "TimingReport",
    "loglog_slope",
    "resolve_threads",
]

logger = logging.getLogger(__name__)

SCENARIOS = ("MaternStudy", "SqExpStudy", "InconsistencyDemo", "TimingStudy", "Custom")
METHODS = ("Exact", "EVGP", "LGP", "CGGP")
SIGMA = 0.2
MATERN_ALPHA = 0.6
SQEXP_BETA = 0.8
QUICK_N = {"MaternStudy": 600, "SqExpStudy": 1000}
CG_VARIANTS = ("standard", "reorthogonalized")

CONFIG_SCHEMA = """\
Experiment configuration (JSON object):
  scenario     one of MaternStudy, SqExpStudy, InconsistencyDemo, TimingStudy, Custom
  n            positive integer, number of design points
  methods      list of method entries, each either a string such as
               "Exact", "EVGP(40)", "LGP(5)", "LGP(5, 12, Z)", "CGGP(20)"
               or an object {"method": "CGGP", "m": 20}
               ({"method": "LGP", "m": 5, "krylov_dim": 12, "v0": "Y" | "Z"})
  seeds        non-empty list of integers (default [0..9])
  grid         optional {"points": 400, "lo": <float>, "hi": <float>}
  output_dir   optional directory for the report files
  kl           optional bool, compute KL to the exact posterior (default true)
  kl_max_n     optional int, skip KL above this n (default 2000)
  level        optional credible level in (0, 1) (default 0.95)
  cg_tol       optional relative residual tolerance for CG (default 1e-10)
  cg_variant   optional "standard" (textbook recurrences, default) or
               "reorthogonalized" (CG mean from fully conjugated directions)
  timings      optional bool, record wall-clock times in summary.csv (default true)
  predictions  optional bool, write per-cell prediction CSVs (default true)
  Custom scenario only:
  kernel       kernel object, e.g. {"kind": "matern", "alpha": 1.5}
  design       "uniform" (on [0,1]^d) or "normal"
  truth        "matern_study", "sqexp_study", "sine" or "zero"
  sigma        noise standard deviation (default 0.2)
"""


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _f0_matern(X):
    x = np.asarray(X, dtype=float)[..., 0] if np.ndim(X) == 2 else np.asarray(X, dtype=float)
    return np.abs(x - 0.4) ** 0.6 - np.abs(x - 0.2) ** 0.6


def _f0_sqexp(X):
    x = np.asarray(X, dtype=float)[..., 0] if np.ndim(X) == 2 else np.asarray(X, dtype=float)
    return np.abs(x + 1.0) ** 0.8 - np.abs(x - 1.5) ** 0.8


def _f0_sine(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 1 and X.shape[1] != 1 and np.ndim(X) == 1:
        X = X.T
    return np.sin(2.0 * np.pi * X.sum(axis=1))


def _f0_zero(X):
    return np.zeros(np.asarray(X).shape[0])


TRUTHS: Dict[str, Callable] = {
    "matern_study": _f0_matern,
    "sqexp_study": _f0_sqexp,
    "sine": _f0_sine,
    "zero": _f0_zero,
}


def sqexp_bandwidth(n: int, beta: float = SQEXP_BETA) -> float:
    return 4.0 * n ** (-1.0 / (1.0 + 2.0 * beta))


def scenario_kernel(scenario: str, n: int, custom: Optional[KernelSpec] = None) -> KernelSpec:
    if scenario in ("MaternStudy", "InconsistencyDemo", "TimingStudy"):
        return matern(MATERN_ALPHA)
    if scenario == "SqExpStudy":
        return sqexp(sqexp_bandwidth(n))
    if scenario == "Custom":
        if custom is None:
            raise ConfigError("Custom scenario needs a kernel")
        return custom
    raise ConfigError(f"unknown scenario {scenario!r}")


def generate_data(scenario: str, n: int, seed: int, *, design: str = "uniform",
                  truth: str = "sine", sigma: float = SIGMA, dimension: int = 1) -> Dataset:
    """Simulate ``Y_i = f0(X_i) + sigma eps_i`` for a named scenario.

    The design points and the noise are drawn from separate named streams
    keyed by ``(scenario, n, seed)``.
    """
    if n < 1:
        raise ConfigError("n must be positive")
    design_rng = stream(scenario, n, seed, "design")
    noise_rng = stream(scenario, n, seed, "noise")
    if scenario in ("MaternStudy", "InconsistencyDemo", "TimingStudy"):
        X = design_rng.uniform(0.0, 1.0, size=(n, 1))
        f0, sigma = _f0_matern, SIGMA
    elif scenario == "SqExpStudy":
        X = design_rng.standard_normal(size=(n, 1))
        f0, sigma = _f0_sqexp, SIGMA
    elif scenario == "Custom":
        if design == "uniform":
            X = design_rng.uniform(0.0, 1.0, size=(n, dimension))
        elif design == "normal":
            X = design_rng.standard_normal(size=(n, dimension))
        else:
            raise ConfigError(f"unknown design {design!r}")
        if truth not in TRUTHS:
            raise ConfigError(f"unknown truth {truth!r}")
        f0 = TRUTHS[truth]
    else:
        raise ConfigError(f"unknown scenario {scenario!r}")
    Y = f0(X) + sigma * noise_rng.standard_normal(n)
    return Dataset(X, Y, sigma, truth=f0)


_METHOD_RE = re.compile(r"^\s*(\w+)\s*(?:\(\s*([^)]*)\))?\s*$")


@dataclass(frozen=True)
class MethodSpec:
    """One posterior to fit.  ``m`` is the number of actions (``None`` for Exact)."""

    method: str
    m: Optional[int] = None
    krylov_dim: Optional[int] = None
    v0: str = "Y"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "Exact":
            if self.m is not None:
                raise ConfigError("Exact takes no m")
        elif self.m is None or int(self.m) < 0:
            raise ConfigError(f"{self.method} needs a non-negative m")
        if self.v0 not in ("Y", "Z"):
            raise ConfigError("v0 must be 'Y' or 'Z'")

    @property
    def label(self) -> str:
        return "Exact" if self.method == "Exact" else f"{self.method}({self.m})"

    @property
    def slug(self) -> str:
        return "exact" if self.method == "Exact" else f"{self.method.lower()}_{self.m}"

    def to_dict(self) -> dict:
        out = {"method": self.method}
        if self.m is not None:
            out["m"] = self.m
        if self.method == "LGP":
            out["krylov_dim"] = self.krylov_dim
            out["v0"] = self.v0
        return out

    @classmethod
    def parse(cls, obj) -> "MethodSpec":
        if isinstance(obj, MethodSpec):
            return obj
        if isinstance(obj, str):
            match = _METHOD_RE.match(obj)
            if not match:
                raise ConfigError(f"cannot parse method {obj!r}")
            name, args = match.group(1), match.group(2)
            parts = [p.strip() for p in args.split(",")] if args else []
            try:
                m = int(parts[0]) if parts else None
                kdim = int(parts[1]) if len(parts) > 1 and parts[1] else None
            except ValueError as exc:
                raise ConfigError(f"cannot parse method {obj!r}") from exc
            v0 = parts[2] if len(parts) > 2 else "Y"
            return cls(name, m, kdim, v0)
        if isinstance(obj, dict):
            try:
                return cls(obj["method"], obj.get("m"), obj.get("krylov_dim"), obj.get("v0", "Y"))
            except KeyError as exc:
                raise ConfigError("method objects need a 'method' field") from exc
        raise ConfigError(f"cannot parse method {obj!r}")


@dataclass
class ExperimentConfig:
    scenario: str
    n: int
    methods: List[MethodSpec]
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    grid_points: int = 400
    grid_lo: Optional[float] = None
    grid_hi: Optional[float] = None
    output_dir: Optional[str] = None
    kl: bool = True
    kl_max_n: int = 2000
    level: float = 0.95
    cg_tol: float = 1e-10
    cg_variant: str = "standard"
    timings: bool = True
    predictions: bool = True
    kernel: Optional[KernelSpec] = None
    design: str = "uniform"
    truth: str = "sine"
    sigma: float = SIGMA

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if not isinstance(self.n, int) or self.n < 1:
            raise ConfigError("n must be a positive integer")
        if not self.methods:
            raise ConfigError("at least one method is required")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        for spec in self.methods:
            if spec.m is not None and spec.m > self.n:
                raise ConfigError(f"{spec.label}: m exceeds n={self.n}")
            if spec.krylov_dim is not None and not (spec.m or 0) <= spec.krylov_dim <= self.n:
                raise ConfigError(f"{spec.label}: need m <= krylov_dim <= n")
        labels = [s.label for s in self.methods]
        if len(set(labels)) != len(labels):
            raise ConfigError("methods must be distinct")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("level must lie in (0, 1)")
        if self.grid_points < 1:
            raise ConfigError("grid needs at least one point")
        if self.scenario == "Custom" and self.kernel is None:
            raise ConfigError("Custom scenario needs a kernel")
        if self.cg_variant not in CG_VARIANTS:
            raise ConfigError(f"cg_variant must be one of {CG_VARIANTS}")

    @property
    def dimension(self) -> int:
        return self.kernel.dimension if self.kernel is not None else 1

    def grid(self) -> np.ndarray:
        lo, hi = self.grid_lo, self.grid_hi
        if lo is None or hi is None:
            normal = self.scenario == "SqExpStudy" or (self.scenario == "Custom" and self.design == "normal")
            dlo, dhi = (-3.0, 3.0) if normal else (0.0, 1.0)
            lo = dlo if lo is None else lo
            hi = dhi if hi is None else hi
        g = np.linspace(lo, hi, self.grid_points)
        if self.dimension == 1:
            return g.reshape(-1, 1)
        # the diagonal of the cube is used as the grid in higher dimension
        return np.repeat(g[:, None], self.dimension, axis=1)

    def to_dict(self) -> dict:
        out = {
            "scenario": self.scenario,
            "n": self.n,
            "methods": [m.to_dict() for m in self.methods],
            "seeds": list(self.seeds),
            "grid": {"points": self.grid_points, "lo": self.grid_lo, "hi": self.grid_hi},
            "output_dir": self.output_dir,
            "kl": self.kl,
            "kl_max_n": self.kl_max_n,
            "level": self.level,
            "cg_tol": self.cg_tol,
            "cg_variant": self.cg_variant,
            "timings": self.timings,
            "predictions": self.predictions,
        }
        if self.scenario == "Custom":
            out.update(kernel=self.kernel.to_dict(), design=self.design, truth=self.truth, sigma=self.sigma)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {"scenario", "n", "methods", "seeds", "grid", "output_dir", "kl", "kl_max_n",
                 "level", "cg_tol", "cg_variant", "timings", "predictions", "kernel", "design", "truth", "sigma"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        for key in ("scenario", "n", "methods"):
            if key not in obj:
                raise ConfigError(f"missing required key {key!r}")
        grid = obj.get("grid") or {}
        if not isinstance(grid, dict):
            raise ConfigError("grid must be an object")
        kernel = None
        if obj.get("kernel") is not None:
            try:
                kernel = KernelSpec.from_dict(obj["kernel"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"invalid kernel: {exc}") from exc
        if not isinstance(obj["methods"], list):
            raise ConfigError("methods must be a list")
        seeds = obj.get("seeds", list(range(10)))
        if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a list of integers")
        n = obj["n"]
        if isinstance(n, bool) or not isinstance(n, int):
            raise ConfigError("n must be a positive integer")
        return cls(
            scenario=obj["scenario"],
            n=n,
            methods=[MethodSpec.parse(m) for m in obj["methods"]],
            seeds=seeds,
            grid_points=int(grid.get("points", 400)),
            grid_lo=grid.get("lo"),
            grid_hi=grid.get("hi"),
            output_dir=obj.get("output_dir"),
            kl=bool(obj.get("kl", True)),
            kl_max_n=int(obj.get("kl_max_n", 2000)),
            level=float(obj.get("level", 0.95)),
            cg_tol=float(obj.get("cg_tol", 1e-10)),
            cg_variant=obj.get("cg_variant", "standard"),
            timings=bool(obj.get("timings", True)),
            predictions=bool(obj.get("predictions", True)),
            kernel=kernel,
            design=obj.get("design", "uniform"),
            truth=obj.get("truth", "sine"),
            sigma=float(obj.get("sigma", SIGMA)),
        )

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
        return cls.from_dict(obj)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_json(text)

    def quick(self) -> "ExperimentConfig":
        """Desk-scale variant: shrink ``n`` for the two simulation studies."""
        if self.scenario not in QUICK_N:
            return self
        n = min(self.n, QUICK_N[self.scenario])
        methods = [m if m.m is None or m.m <= n else MethodSpec(m.method, n, None, m.v0) for m in self.methods]
        cfg = ExperimentConfig(**{**self.__dict__, "n": n, "methods": methods})
        return cfg


@dataclass
class _SeedContext:
    data: Dataset
    spec: KernelSpec
    K: np.ndarray
    lock: threading.Lock = field(default_factory=threading.Lock)
    full_eig: object = None
    exact: Optional[GPPosterior] = None


@dataclass
class CellResult:
    method: str
    m: Optional[int]
    seed: int
    mse: float = math.nan
    kl: float = math.nan
    mean_bandwidth: float = math.nan
    wall_ms: float = math.nan
    steps: Optional[int] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _cggp(data: Dataset, spec: KernelSpec, K: np.ndarray, m: int, tol: float, variant: str):
    """CG posterior.

    The precision is built from conjugate (reorthogonalized) CG directions,
    which keeps ``C_m`` a ``K_sigma``-orthogonal projection in floating point.
    The mean weights are the CG iterate of the requested variant: the
    textbook recurrences (``"standard"``) or the reorthogonalized run.
    """
    Ks = K + data.sigma2 * np.eye(data.n)
    conj = cg_solve(Ks, data.Y, m, tol=tol, reorthogonalize=True)
    prec = closed_form_C_cg(conj.directions, conj.etas, conj.steps, n=data.n)
    if variant == "standard":
        run = cg_solve(Ks, data.Y, m, tol=tol)
    else:
        run = conj
    post = approx_posterior(data, spec, prec, K=K)
    post = GPPosterior(post.data, post.spec, post.sigma2, post.precision, run.w, K)
    return post, run.steps


def fit_method(data: Dataset, spec: KernelSpec, method: MethodSpec, K: Optional[np.ndarray] = None,
               *, cg_tol: float = 1e-10, cg_variant: str = "standard",
               v0_rng: Optional[np.random.Generator] = None, eig=None):
    """Fit one posterior.  Returns ``(posterior, steps)``."""
    spec = spec.resolved(data.n)
    if K is None:
        K = kernel_matrix(spec, data.X)
    n = data.n
    if method.method == "Exact":
        return exact_posterior(data, spec, K), n
    m = int(method.m)
    if method.method == "EVGP":
        eigsys = eig if eig is not None else (dense_eig(K / n, count=m) if m > 0 else None)
        if m == 0:
            return approx_posterior(data, spec, closed_form_C_cg([], [], 0, n=n), K=K), 0
        return approx_posterior(data, spec, closed_form_C_ev(eigsys, m, data.sigma2, n), K=K), m
    if method.method == "LGP":
        kdim = method.krylov_dim if method.krylov_dim is not None else default_krylov_dim(m, n)
        if m == 0:
            return approx_posterior(data, spec, closed_form_C_cg([], [], 0, n=n), K=K), 0
        if method.v0 == "Y":
            v0 = data.Y / np.linalg.norm(data.Y)
        else:
            rng = v0_rng if v0_rng is not None else np.random.default_rng(0)
            z = rng.standard_normal(n)
            v0 = z / np.linalg.norm(z)
        res = kernel_lanczos(K, v0, kdim)
        return approx_posterior(data, spec, closed_form_C_lanczos(res, m, data.sigma2, n), K=K), kdim
    return _cggp(data, spec, K, m, cg_tol, cg_variant)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    cells: List[CellResult]
    aggregates: Dict[str, dict]
    files: List[str] = field(default_factory=list)  # names relative to the output directory

    @property
    def errors(self) -> List[CellResult]:
        return [c for c in self.cells if not c.ok]

    def aggregate(self, label: str) -> dict:
        return self.aggregates[label]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "methods": self.aggregates,
            "errors": [asdict(c) for c in self.errors],
            "files": self.files,
        }


def resolve_threads(threads: Optional[int]) -> int:
    if threads is None:
        env = os.environ.get("ITERGP_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError as exc:
                raise ConfigError(f"ITERGP_THREADS must be an integer, got {env!r}") from exc
        else:
            threads = 1
    if threads < 1:
        raise ConfigError("thread count must be positive")
    return threads


def _seed_context(cfg: ExperimentConfig, seed: int) -> _SeedContext:
    data = generate_data(cfg.scenario, cfg.n, seed, design=cfg.design, truth=cfg.truth,
                         sigma=cfg.sigma, dimension=cfg.dimension)
    spec = scenario_kernel(cfg.scenario, cfg.n, cfg.kernel).resolved(cfg.n)
    return _SeedContext(data, spec, kernel_matrix(spec, data.X))


def _run_cell(cfg: ExperimentConfig, ctx: _SeedContext, method: MethodSpec, seed: int,
              grid: np.ndarray, outdir: Optional[Path]) -> CellResult:
    cell = CellResult(method.method, method.m, seed)
    try:
        v0_rng = stream(cfg.scenario, cfg.n, seed, "lanczos_v0")
        start = time.perf_counter()
        post, steps = fit_method(ctx.data, ctx.spec, method, ctx.K, cg_tol=cfg.cg_tol,
                                 cg_variant=cfg.cg_variant, v0_rng=v0_rng)
        cell.wall_ms = 1e3 * (time.perf_counter() - start)
        cell.steps = steps
        cell.mse = mse(post.design_mean(), ctx.data.truth(ctx.data.X))
        if cfg.kl and cfg.n <= min(cfg.kl_max_n, MAX_KL_N):
            if method.method == "Exact":
                cell.kl = 0.0
            else:
                with ctx.lock:
                    if ctx.full_eig is None:
                        ctx.full_eig = dense_eig(ctx.K / cfg.n)
                report = kl_decomposition(ctx.K, ctx.data.sigma2, post.precision, ctx.data.Y,
                                          eig=ctx.full_eig, direct=False, w=post.w)
                cell.kl = report.total
        mean, var = predict(post, grid)
        half = z_quantile(cfg.level) * np.sqrt(var)
        cell.mean_bandwidth = float(np.mean(half))
        if outdir is not None and cfg.predictions:
            write_predictions_csv(outdir / f"pred_{method.slug}_seed{seed}.csv",
                                  grid, mean, var, mean - half, mean + half)
    except Exception as exc:  # one failing cell must not abort the sweep
        logger.warning("cell %s seed %d failed: %s", method.label, seed, exc)
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def _aggregate(cells: Sequence[CellResult]) -> dict:
    ok = [c for c in cells if c.ok]

    def stats(values):
        vals = np.asarray([v for v in values if not math.isnan(v)], dtype=float)
        if vals.size == 0:
            return None, None
        sd = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        return float(np.mean(vals)), sd

    mse_mean, mse_sd = stats(c.mse for c in ok)
    kl_mean, kl_sd = stats(c.kl for c in ok)
    bw_mean, _ = stats(c.mean_bandwidth for c in ok)
    times = [c.wall_ms for c in ok if not math.isnan(c.wall_ms)]
    return {
        "mse_mean": mse_mean,
        "mse_sd": mse_sd,
        "kl_mean": kl_mean,
        "kl_sd": kl_sd,
        "mean_bandwidth": bw_mean,
        "wall_ms_median": float(np.median(times)) if times else None,
        "cells": len(cells),
        "failed": len(cells) - len(ok),
    }


def _num(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def run_experiment(cfg: ExperimentConfig, output_dir: Optional[str] = None,
                   threads: Optional[int] = None) -> ExperimentReport:
    """Run every ``(seed, method)`` cell of a configuration.

    Writes ``summary.csv`` (method, m, seed, mse, kl, mean_bandwidth,
    wall_ms), ``summary.json`` and one predictions CSV per cell when an
    output directory is given.
    """
    threads = resolve_threads(threads)
    out = output_dir if output_dir is not None else cfg.output_dir
    outdir = Path(out) if out else None
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
    grid = cfg.grid()
    cells: List[CellResult] = []
    blas_threads = 1 if threads > 1 else None
    with threadpool_limits(limits=blas_threads), ThreadPoolExecutor(max_workers=threads) as pool:
        for seed in cfg.seeds:
            try:
                ctx = _seed_context(cfg, seed)
            except Exception as exc:
                logger.warning("seed %d: data generation failed: %s", seed, exc)
                cells.extend(CellResult(m.method, m.m, seed, error=f"{type(exc).__name__}: {exc}")
                             for m in cfg.methods)
                continue
            futures = [pool.submit(_run_cell, cfg, ctx, m, seed, grid, outdir) for m in cfg.methods]
            cells.extend(f.result() for f in futures)
            del ctx
    aggregates = {}
    for m in cfg.methods:
        aggregates[m.label] = _aggregate([c for c in cells if c.method == m.method and c.m == m.m])
    report = ExperimentReport(cfg, cells, aggregates)
    if outdir is not None:
        summary = outdir / "summary.csv"
        with open(summary, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "m", "seed", "mse", "kl", "mean_bandwidth", "wall_ms"])
            for c in cells:
                w.writerow([c.method, "" if c.m is None else c.m, c.seed, _num(c.mse), _num(c.kl),
                            _num(c.mean_bandwidth), _num(c.wall_ms) if cfg.timings else ""])
        report.files.append(summary.name)
        if cfg.predictions:
            report.files.extend(f"pred_{m.slug}_seed{s}.csv"
                                for s in cfg.seeds for m in cfg.methods
                                if (outdir / f"pred_{m.slug}_seed{s}.csv").exists())
        js = outdir / "summary.json"
        payload = report.to_dict()
        if not cfg.timings:
            for agg in payload["methods"].values():
                agg["wall_ms_median"] = None
            for err in payload["errors"]:
                err["wall_ms"] = None
        js.write_text(json.dumps(payload, indent=2, default=_json_default) + "\n", encoding="utf-8")
        report.files.append(js.name)
    return report


def _json_default(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# --------------------------------------------------------------------------
# timing


@dataclass
class TimingReport:
    sizes: List[int]
    medians: Dict[str, List[float]]
    m_values: Dict[str, List[Optional[int]]]
    slopes: Dict[str, float]
    intercepts: Dict[str, float]
    flagged: List[tuple]

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "n", "m", "median_s", "under_resolved"])
            for name, times in self.medians.items():
                for n, m, t in zip(self.sizes, self.m_values[name], times):
                    w.writerow([name, n, "" if m is None else m, repr(t), int(t < 1e-3)])
            for name in self.medians:
                w.writerow([f"{name}:slope", "", "", repr(self.slopes[name]), ""])


def loglog_slope(sizes, times):
    """OLS fit of ``log t = a + b log n``; returns ``(b, a)``."""
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    b, a = np.polyfit(x, y, 1)
    return float(b), float(a)


def cggp_steps(n: int, alpha: float = MATERN_ALPHA) -> int:
    """``m = 2 n^{1/(2 alpha + 1)}`` rounded up."""
    return int(math.ceil(2.0 * n ** (1.0 / (2.0 * alpha + 1.0))))


def _time_exact(K: np.ndarray, Y: np.ndarray, sigma2: float):
    Ks = K + sigma2 * np.eye(K.shape[0])
    t = time.perf_counter()
    L = linalg.cholesky(Ks, lower=True, overwrite_a=True, check_finite=False)
    w = linalg.cho_solve((L, True), Y, check_finite=False)
    Z = linalg.solve_triangular(L, K, lower=True, check_finite=False)
    var = np.diag(K) - np.einsum("ij,ij->j", Z, Z)
    elapsed = time.perf_counter() - t
    return elapsed, w, var


def _time_cggp(K: np.ndarray, Y: np.ndarray, sigma2: float, m: int):
    Ks = K + sigma2 * np.eye(K.shape[0])
    t = time.perf_counter()
    res = cg_solve(Ks, Y, m, reorthogonalize=True)
    D = res.direction_matrix
    KD = np.column_stack(res.kdirections) - sigma2 * D
    var = np.diag(K) - np.einsum("ij,j,ij->i", KD, 1.0 / np.asarray(res.etas), KD)
    elapsed = time.perf_counter() - t
    return elapsed, res.w, var


def timing_harness(sizes: Sequence[int], methods: Sequence[str] = ("Exact", "CGGP"),
                   repetitions: int = 3, seed: int = 0, alpha: float = MATERN_ALPHA) -> TimingReport:
    """Median wall time of fitting plus design-point variances, per ``n``.

    The kernel matrix is assembled outside the timed region.  CGGP uses
    ``m = 2 n^{1/(2 alpha + 1)}`` steps.
    """
    sizes = [int(n) for n in sizes]
    if sizes != sorted(sizes):
        raise ConfigError("sizes must be ascending")
    for name in methods:
        if name not in ("Exact", "CGGP"):
            raise ConfigError(f"timing supports Exact and CGGP, not {name!r}")
    medians = {name: [] for name in methods}
    m_values = {name: [] for name in methods}
    flagged = []
    for n in sizes:
        data = generate_data("TimingStudy", n, seed)
        K = kernel_matrix(matern(alpha), data.X)
        for name in methods:
            runs = []
            for _ in range(repetitions):
                if name == "Exact":
                    t, _, _ = _time_exact(K, data.Y, data.sigma2)
                else:
                    t, _, _ = _time_cggp(K, data.Y, data.sigma2, cggp_steps(n, alpha))
                runs.append(t)
            med = float(np.median(runs))
            medians[name].append(med)
            m_values[name].append(None if name == "Exact" else cggp_steps(n, alpha))
            if med < 1e-3:
                flagged.append((name, n))
        del K
    slopes, intercepts = {}, {}
    for name in methods:
        slopes[name], intercepts[name] = loglog_slope(sizes, medians[name])
    return TimingReport(sizes, medians, m_values, slopes, intercepts, flagged)
