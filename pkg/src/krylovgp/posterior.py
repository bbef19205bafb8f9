"""Exact and approximate GP posteriors.

Both kinds share one interface: a vector of representer weights ``w`` for
the mean, ``k(X, x)^T w``, and a precision operator ``P`` (``K_sigma^{-1}``
through a Cholesky factor, or a low-rank ``C_m``) for the covariance,
``k(x, x') - k(X, x)^T P k(X, x')``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Optional, Union

import numpy as np
from scipy import linalg

from .itergp import IterGPState, LowRankPrecision
from .kernels import Dataset, KernelSpec, kernel_cross, kernel_diag, kernel_matrix

__all__ = [
    "NegativeVarianceError",
    "FactorizationError",
    "ExactSolve",
    "GPPosterior",
    "exact_posterior",
    "approx_posterior",
    "predict",
    "credible_band",
    "z_quantile",
    "write_predictions_csv",
    "MAX_EXACT_N",
]

logger = logging.getLogger(__name__)

MAX_EXACT_N = 20000
CLAMP_TOL = 1e-8
FAIL_TOL = 1e-6
Z95 = 1.959963984540054


class NegativeVarianceError(ArithmeticError):
    """A predictive variance is negative beyond rounding tolerance."""


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky factorization of ``K_sigma`` failed."""

    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


@dataclass(frozen=True)
class ExactSolve:
    """Lower Cholesky factor of ``K_sigma``."""

    L: np.ndarray

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def apply(self, v):
        return linalg.cho_solve((self.L, True), v, check_finite=False)

    def quad(self, V):
        Z = linalg.solve_triangular(self.L, V, lower=True, check_finite=False)
        if Z.ndim == 1:
            return float(Z @ Z)
        return np.einsum("ij,ij->j", Z, Z)

    def dense(self):
        Linv = linalg.solve_triangular(self.L, np.eye(self.n), lower=True, check_finite=False)
        return Linv.T @ Linv


Precision = Union[ExactSolve, LowRankPrecision]


@dataclass(frozen=True)
class GPPosterior:
    """Evaluatable posterior.  Holds references to the data and kernel matrix."""

    data: Dataset
    spec: KernelSpec
    sigma2: float
    precision: Precision
    w: np.ndarray
    K: Optional[np.ndarray] = None

    @property
    def is_exact(self) -> bool:
        return isinstance(self.precision, ExactSolve)

    @property
    def rank(self) -> int:
        return self.data.n if self.is_exact else self.precision.m

    def cross(self, xs) -> np.ndarray:
        """``(n, p)`` matrix of ``k(X_i, x_k)``."""
        P = _probes(xs, self.spec.dimension)
        return kernel_cross(self.spec, self.data.X, P)

    def prior_var(self, xs) -> np.ndarray:
        return kernel_diag(self.spec, _probes(xs, self.spec.dimension), n_design=self.data.n)

    def mean(self, xs) -> np.ndarray:
        return self.cross(xs).T @ self.w

    def raw_var(self, xs) -> np.ndarray:
        """Unclamped ``k(x, x) - k(X, x)^T P k(X, x)``."""
        return self.prior_var(xs) - np.atleast_1d(self.precision.quad(self.cross(xs)))

    def cov(self, xs, ys=None) -> np.ndarray:
        Kx = self.cross(xs)
        if ys is None:
            Ky = Kx
            prior = kernel_cross(self.spec, _probes(xs, self.spec.dimension),
                                 _probes(xs, self.spec.dimension))
        else:
            Ky = self.cross(ys)
            prior = kernel_cross(self.spec, _probes(xs, self.spec.dimension),
                                 _probes(ys, self.spec.dimension))
        return prior - Kx.T @ self.precision.apply(Ky)

    def design_mean(self) -> np.ndarray:
        """Posterior mean at the design points, ``K w``."""
        K = self.K if self.K is not None else kernel_matrix(self.spec, self.data.X)
        return K @ self.w

    def design_cov(self) -> np.ndarray:
        """Posterior covariance at the design points, ``K - K P K``."""
        K = self.K if self.K is not None else kernel_matrix(self.spec, self.data.X)
        C = K - K @ self.precision.apply(K)
        return 0.5 * (C + C.T)


def _probes(xs, d: int) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 0:
        return xs.reshape(1, 1)
    if xs.ndim == 1:
        return xs.reshape(-1, 1) if d == 1 else xs.reshape(1, d)
    return xs


def _resolved(data: Dataset, spec: KernelSpec) -> KernelSpec:
    if data.X.shape[1] != spec.dimension:
        raise ValueError(f"data dimension {data.X.shape[1]} does not match kernel dimension {spec.dimension}")
    return spec.resolved(data.n)


def exact_posterior(data: Dataset, spec: KernelSpec, K: Optional[np.ndarray] = None) -> GPPosterior:
    """Posterior with ``K_sigma^{-1}`` through a Cholesky factorization."""
    if data.n > MAX_EXACT_N:
        raise ValueError(f"exact posterior is limited to n <= {MAX_EXACT_N}, got n={data.n}")
    spec = _resolved(data, spec)
    if K is None:
        K = kernel_matrix(spec, data.X)
    Ks = K + data.sigma2 * np.eye(data.n)
    try:
        L = linalg.cholesky(Ks, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        lam_min = float(np.linalg.eigvalsh(Ks)[0])
        raise FactorizationError(
            f"Cholesky factorization of K_sigma failed ({exc}); smallest eigenvalue {lam_min:.3e}",
            lam_min,
        ) from exc
    solver = ExactSolve(L)
    return GPPosterior(data, spec, data.sigma2, solver, solver.apply(data.Y), K)


def approx_posterior(data: Dataset, spec: KernelSpec,
                     state: Union[IterGPState, LowRankPrecision],
                     K: Optional[np.ndarray] = None) -> GPPosterior:
    """Posterior with the precision ``C_m`` from an iterative run or a closed form.

    The mean weights are ``C_m Y``; for an :class:`IterGPState` these are the
    accumulated representer weights ``w_m``.
    """
    spec = _resolved(data, spec)
    if isinstance(state, IterGPState):
        precision, w = state.precision(), state.w
    elif isinstance(state, LowRankPrecision):
        precision, w = state, state.apply(data.Y)
    else:
        raise TypeError("state must be an IterGPState or a LowRankPrecision")
    if precision.n != data.n:
        raise ValueError(f"precision has size {precision.n}, data has n={data.n}")
    return GPPosterior(data, spec, data.sigma2, precision, w, K)


def predict(post: GPPosterior, xs):
    """Pointwise posterior means and variances at the probes ``xs``.

    Variances in ``[-1e-6 k(x,x), 0)`` are clamped to 0 (logged when below
    ``-1e-8 k(x,x)``); anything more negative raises :class:`NegativeVarianceError`.
    """
    Kx = post.cross(xs)
    mean = Kx.T @ post.w
    prior = post.prior_var(xs)
    var = prior - np.atleast_1d(post.precision.quad(Kx))
    bad = var < -FAIL_TOL * prior
    if np.any(bad):
        k = int(np.argmax(bad))
        raise NegativeVarianceError(
            f"variance {var[k]:.3e} at probe {k} is below -1e-6 k(x,x) = {-FAIL_TOL * prior[k]:.3e}")
    loud = var < -CLAMP_TOL * prior
    if np.any(loud):
        logger.warning("clamped %d negative variances (min %.3e) to zero", int(loud.sum()), float(var.min()))
    return mean, np.maximum(var, 0.0)


def z_quantile(level: float) -> float:
    """Two-sided standard-normal quantile for a central credible level."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"credible level must lie in (0, 1), got {level}")
    if level == 0.95:
        return Z95
    return NormalDist().inv_cdf(0.5 * (1.0 + level))


def credible_band(post: GPPosterior, grid, level: float = 0.95):
    """Pointwise band ``mean -/+ z(level) sqrt(var)``; returns ``(lower, upper)``."""
    z = z_quantile(level)
    mean, var = predict(post, grid)
    half = z * np.sqrt(var)
    return mean - half, mean + half


def write_predictions_csv(path, x, mean, var, lo, hi) -> None:
    """Write the fixed prediction schema ``x, mean, var, lo, hi``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2 and x.shape[1] == 1:
        x = x[:, 0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "mean", "var", "lo", "hi"])
        for row in zip(x, mean, var, lo, hi):
            out.writerow([_fmt(v) if np.ndim(v) == 0 else " ".join(_fmt(t) for t in v) for v in row])


def _fmt(v) -> str:
    return repr(float(v)) if math.isfinite(v) else str(float(v))
