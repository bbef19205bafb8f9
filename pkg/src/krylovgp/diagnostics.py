"""Verification tools: Gaussian KL divergences and their decomposition,
projector distances, eigenvalue perturbation, relative rank, partial traces
and the shifted-eigenvector inconsistency example.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .itergp import LowRankPrecision, policy_custom, run_itergp
from .kernels import KernelSpec, cosine_features, population_eigenvalues
from .rng import stream
from .spectral import EigenSystem, dense_eig

__all__ = [
    "KLReport",
    "kl_gaussians",
    "kl_decomposition",
    "mse",
    "projector_hs_distance",
    "relative_eig_error",
    "relative_rank",
    "InconsistencyGap",
    "inconsistency_gap",
    "PartialTraceReport",
    "partial_trace_check",
    "series_empirical_eigenvalues",
    "perturbation_sweep",
]

logger = logging.getLogger(__name__)

PINV_CUTOFF = 1e-12
MAX_KL_N = 3000


def _sym(M):
    return 0.5 * (M + M.T)


def _inverse_and_logdet(S: np.ndarray):
    """Return ``(apply_inverse, logdet, rank, regularized)`` for a covariance matrix."""
    try:
        L = linalg.cholesky(S, lower=True, check_finite=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        return (lambda B: linalg.cho_solve((L, True), B, check_finite=False)), logdet, S.shape[0], False
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(_sym(S))
        keep = vals > PINV_CUTOFF * max(float(np.trace(S)), 0.0)
        inv = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
        logdet = float(np.sum(np.log(vals[keep])))
        return (lambda B: inv @ B), logdet, int(keep.sum()), True


def kl_gaussians(mu1, cov1, mu2, cov2, return_info: bool = False):
    """``KL(N(mu1, cov1) || N(mu2, cov2))``.

    Uses Cholesky factors; if ``cov2`` (or ``cov1``) is not numerically
    positive definite, a pseudo-inverse and pseudo-determinant with relative
    cutoff ``1e-12 * trace`` are used instead, the dimension term becomes the
    numerical rank of ``cov2``, and ``info['regularized']`` is set.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=float))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=float))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=float))
    k = mu1.shape[0]
    if mu2.shape != (k,) or cov1.shape != (k, k) or cov2.shape != (k, k):
        raise ValueError("dimension mismatch between means and covariances")
    solve2, logdet2, rank2, reg2 = _inverse_and_logdet(cov2)
    _, logdet1, _, reg1 = _inverse_and_logdet(cov1)
    diff = mu2 - mu1
    trace = float(np.trace(solve2(cov1)))
    quad = float(diff @ solve2(diff))
    # on a degenerate pair the divergence lives on the support of cov2
    kl = 0.5 * (trace + quad - rank2 + logdet2 - logdet1)
    if reg1 or reg2:
        logger.info("kl_gaussians used the pseudo-inverse fallback")
    if return_info:
        return kl, {"regularized": reg1 or reg2}
    return kl


@dataclass(frozen=True)
class KLReport:
    """Terms of ``2 KL(approximate || exact)`` at the design points.

    ``total`` is half the sum of the three terms, ``direct`` an independent
    dense evaluation of the same divergence.
    """

    term_trace: float
    term_quadratic: float
    term_logdet: float
    total: float
    direct: float
    regularized: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _precision_dense(C, n: int) -> np.ndarray:
    if isinstance(C, LowRankPrecision):
        return C.dense()
    if hasattr(C, "dense_C"):
        return C.dense_C()
    C = np.asarray(C, dtype=float)
    if C.shape != (n, n):
        raise ValueError("precision must be n x n")
    return C


def _kl_terms(eig: EigenSystem, sigma2: float, C, Y, n: int, w=None):
    """Terms I, II, III evaluated in the eigenbasis of ``K``.

    With ``G = U^T (K_sigma^{-1} - C) U`` and ``d_j = mu_j (mu_j + s2) / s2``
    the terms are ``tr B``, ``sum d_j (U^T Gamma Y)_j^2`` and
    ``-log det(I + B)`` with ``B = D^{1/2} G D^{1/2}``.
    """
    mu = np.maximum(n * eig.values, 0.0)
    U = eig.vectors
    if isinstance(C, LowRankPrecision):
        P = U.T @ C.D
        UCU = (P * C.weights) @ P.T
    else:
        UCU = U.T @ _precision_dense(C, n) @ U
    G = _sym(np.diag(1.0 / (mu + sigma2)) - UCU)
    dvec = mu * (mu + sigma2) / sigma2
    sq = np.sqrt(dvec)
    B = _sym(sq[:, None] * G * sq[None, :])
    term1 = float(np.trace(B))
    if w is None:
        gy = G @ (U.T @ Y)
    else:
        # mean weights supplied separately: Gamma Y becomes K_sigma^{-1} Y - w
        gy = (U.T @ Y) / (mu + sigma2) - U.T @ w
    term2 = float(np.sum(dvec * gy * gy))
    beta = np.linalg.eigvalsh(B)
    term3 = -float(np.sum(np.log1p(np.maximum(beta, -1.0 + 1e-300))))
    return term1, term2, term3


def kl_decomposition(K, sigma2: float, C, Y, eig: Optional[EigenSystem] = None,
                     direct: bool = True, w=None) -> KLReport:
    """Decompose ``KL(approximate || exact)`` for a precision approximation ``C``.

    ``C`` may be a :class:`LowRankPrecision`, an ``IterGPState`` or a dense
    matrix.  The exact posterior at the design points is
    ``N(K K_sigma^{-1} Y, K - K K_sigma^{-1} K)``; the approximate one is
    ``N(K C Y, K - K C K)``.  Passing a precomputed eigensystem of ``K / n``
    avoids a second decomposition; ``direct=False`` skips the dense check.
    ``w`` replaces the mean weights ``C Y`` when the approximate mean comes
    from another source (for instance a CG iterate).
    """
    K = np.asarray(K, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    n = K.shape[0]
    if n > MAX_KL_N:
        raise ValueError(f"dense KL evaluation is limited to n <= {MAX_KL_N}")
    if eig is None:
        eig = dense_eig(K / n)
    t1, t2, t3 = _kl_terms(eig, sigma2, C, Y, n, w)
    total = 0.5 * (t1 + t2 + t3)
    direct_value, regularized = math.nan, False
    if direct:
        Cd = _precision_dense(C, n)
        Ks = K + sigma2 * np.eye(n)
        KinvK = linalg.solve(Ks, K, assume_a="pos")
        exact_cov = _sym(K - K @ KinvK)
        exact_mean = KinvK.T @ Y
        approx_cov = _sym(K - K @ Cd @ K)
        approx_mean = K @ (Cd @ Y if w is None else np.asarray(w, dtype=float))
        direct_value, info = kl_gaussians(approx_mean, approx_cov, exact_mean, exact_cov,
                                          return_info=True)
        regularized = info["regularized"]
    return KLReport(t1, t2, t3, total, direct_value, regularized)


def mse(mean_values, f0_values) -> float:
    """Mean squared error ``(1/n) sum (mu(X_i) - f0(X_i))^2``."""
    a = np.asarray(mean_values, dtype=float).reshape(-1)
    b = np.asarray(f0_values, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.mean((a - b) ** 2))


def projector_hs_distance(u, v) -> float:
    """Hilbert-Schmidt distance ``||u u^T - v v^T||`` between unit vectors."""
    u = np.asarray(u, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    for name, x in (("u", u), ("v", v)):
        if abs(np.linalg.norm(x) - 1.0) > 1e-8:
            raise ValueError(f"{name} must be a unit vector")
    c = min(1.0, abs(float(u @ v)))
    return math.sqrt(max(0.0, 2.0 * (1.0 - c * c)))


def relative_eig_error(empirical, population, m: int) -> float:
    """``max_{i<=m} |lambda_hat_i - lambda_i| / lambda_i``."""
    emp = np.asarray(empirical, dtype=float)[:m]
    pop = np.asarray(population, dtype=float)[:m]
    if emp.shape[0] < m or pop.shape[0] < m:
        raise ValueError(f"need at least m={m} values of each kind")
    if np.any(pop == 0):
        raise ZeroDivisionError("population eigenvalue equal to zero")
    return float(np.max(np.abs(emp - pop) / pop))


def relative_rank(population, i: int) -> float:
    """Relative rank ``r_i`` of a (truncated) eigenvalue sequence, 1-based ``i``.

    Returns ``inf`` when ``lambda_i`` is repeated in the sequence.
    """
    lam = np.asarray(population, dtype=float)
    J = lam.shape[0]
    if not 1 <= i <= J:
        raise ValueError(f"index {i} outside 1..{J}")
    li = lam[i - 1]
    others = np.delete(lam, i - 1)
    gaps = np.abs(li - others)
    if np.any(gaps == 0):
        return math.inf
    total = float(np.sum(others / gaps))
    neighbour = []
    if i > 1:
        neighbour.append(lam[i - 2] - li)
    if i < J:
        neighbour.append(li - lam[i])
    if not neighbour:
        return total
    g = min(neighbour)
    if g <= 0:
        return math.inf
    return total + li / g


@dataclass(frozen=True)
class InconsistencyGap:
    """Squared RKHS distance between the exact mean and the mean obtained
    when the leading eigenvector is left out of the policy."""

    closed_form: float
    direct: float

    def __float__(self):
        return self.closed_form


def inconsistency_gap(K, sigma2: float, Y, eigsys: Optional[EigenSystem] = None) -> InconsistencyGap:
    """Run the updating scheme with actions ``u_hat_2, ..., u_hat_n``.

    ``direct`` is ``a^T K a`` for the weight difference ``a`` between the
    exact and the approximate representer weights; ``closed_form`` is
    ``mu_1 <u_1, Y>^2 / (mu_1 + s2)^2``.
    """
    K = np.asarray(K, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    n = K.shape[0]
    if n < 2:
        raise ValueError("the inconsistency example needs n >= 2")
    if eigsys is None:
        eigsys = dense_eig(K / n)
    Ks = K + sigma2 * np.eye(n)
    state = run_itergp(Ks, Y, policy_custom(eigsys.vectors[:, 1:]), n - 1)
    a = linalg.solve(Ks, Y, assume_a="pos") - state.w
    direct = float(a @ K @ a)
    mu1 = n * float(eigsys.values[0])
    proj = float(eigsys.vectors[:, 0] @ Y)
    closed = mu1 * proj ** 2 / (mu1 + sigma2) ** 2
    return InconsistencyGap(closed, direct)


def series_empirical_eigenvalues(spec: KernelSpec, X, count: int) -> np.ndarray:
    """Leading ``count`` eigenvalues of ``A = K / n`` for a truncated series kernel.

    With ``K = Phi diag(lambda) Phi^T`` the non-zero spectrum of ``K / n``
    equals that of the ``J x J`` matrix ``diag(lambda)^{1/2} Phi^T Phi
    diag(lambda)^{1/2} / n``, whichever of the two is smaller is decomposed.
    """
    if not spec.is_series or spec.truncation is None:
        raise ValueError("an explicitly truncated series kernel is required")
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    J = spec.truncation
    Phi = cosine_features(X, spec.dimension, J)
    lam = population_eigenvalues(spec)
    if J <= n:
        Psi = Phi * np.sqrt(lam)
        M = Psi.T @ Psi / n
    else:
        M = (Phi * lam) @ Phi.T / n
    M = _sym(M)
    size = M.shape[0]
    count = min(count, size)
    vals = linalg.eigh(M, eigvals_only=True, subset_by_index=[size - count, size - 1])
    out = np.zeros(count)
    out[:] = vals[::-1]
    return out


def _uniform_design(spec: KernelSpec, n: int, seed: int, scenario: str) -> np.ndarray:
    return stream(scenario, n, seed, "design").uniform(size=(n, spec.dimension))


@dataclass(frozen=True)
class PartialTraceReport:
    mean_empirical_tail: float
    standard_error: float
    population_tail: float
    per_seed: tuple

    @property
    def holds(self) -> bool:
        """Mean empirical tail within ``population_tail * (1 + 3 se)``."""
        return self.mean_empirical_tail <= self.population_tail * (1.0 + 3.0 * self.standard_error)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_seed"] = list(self.per_seed)
        d["holds"] = self.holds
        return d


def partial_trace_check(spec: KernelSpec, n: int, m: int, seeds: Sequence[int]) -> PartialTraceReport:
    """Monte-Carlo estimate of ``E sum_{j>m} lambda_hat_j`` under a uniform design.

    The tail is ``tr(A) - sum_{j<=m} lambda_hat_j`` with ``tr(A)`` the mean
    prior variance at the design points.  ``standard_error`` is relative to
    the population tail, so that the check reads
    ``mean <= tail * (1 + 3 se)``.
    """
    if not spec.is_series:
        raise ValueError("partial traces need a series kernel")
    spec = spec.resolved(n)
    lam = population_eigenvalues(spec)
    pop_tail = float(np.sum(lam[m:]))
    tails = []
    for seed in seeds:
        X = _uniform_design(spec, n, seed, "PartialTrace")
        Phi = cosine_features(X, spec.dimension, spec.truncation)
        trace = float(np.sum((Phi * Phi) @ lam)) / n
        head = float(np.sum(series_empirical_eigenvalues(spec, X, m))) if m > 0 else 0.0
        tails.append(max(trace - head, 0.0) if m < n else 0.0)
    tails = np.asarray(tails)
    se_abs = float(np.std(tails, ddof=1) / math.sqrt(len(tails))) if len(tails) > 1 else 0.0
    se_rel = se_abs / pop_tail if pop_tail > 0 else math.inf
    return PartialTraceReport(float(np.mean(tails)), se_rel, pop_tail, tuple(float(t) for t in tails))


def perturbation_sweep(spec: KernelSpec, ns: Sequence[int], m: int, seeds: Sequence[int]) -> dict:
    """Median (over seeds) of the relative eigenvalue error for each ``n``."""
    if not spec.is_series or spec.truncation is None:
        raise ValueError("an explicitly truncated series kernel is required")
    pop = population_eigenvalues(spec, m)
    out = {}
    for n in ns:
        errs = []
        for seed in seeds:
            X = _uniform_design(spec, n, seed, "Perturbation")
            errs.append(relative_eig_error(series_empirical_eigenvalues(spec, X, m), pop, m))
        out[int(n)] = {"median": float(np.median(errs)), "errors": [float(e) for e in errs]}
    return out
