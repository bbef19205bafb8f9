"""Krylov machinery for kernel matrices.

Dense symmetric eigendecomposition, Krylov bases with full
reorthogonalization, Rayleigh-Ritz (Lanczos) eigenpairs, conjugate gradients
with direction capture, and evaluation of the classical Chebyshev bounds on
Lanczos eigenpairs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np
from scipy import linalg
from scipy.linalg.blas import dsymv

__all__ = [
    "BreakdownError",
    "NotApplicable",
    "NOT_APPLICABLE",
    "EigenSystem",
    "LanczosResult",
    "CGResult",
    "as_matvec",
    "dense_eig",
    "krylov_basis",
    "lanczos",
    "kernel_lanczos",
    "cg_solve",
    "chebyshev_T",
    "tan_angle",
    "lanczos_eigenvalue_bound",
    "lanczos_eigenvector_bound",
]

BREAKDOWN_TOL = 1e-12
EXHAUSTION_TOL = 1e-8


class BreakdownError(ArithmeticError):
    """Raised when a Krylov or CG iteration degenerates.

    ``achieved`` holds the dimension (or number of steps) reached before the
    breakdown.
    """

    def __init__(self, message: str, achieved: int):
        super().__init__(message)
        self.achieved = achieved


class NotApplicable:
    """Marker returned by bound evaluators whose preconditions fail."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NOT_APPLICABLE"

    def __bool__(self):
        return False


NOT_APPLICABLE = NotApplicable()

Operator = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


def as_matvec(op: Operator) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a dense symmetric matrix (or pass through a callable) as a matvec.

    Dense matrices use the BLAS symmetric kernel, which reads one triangle.
    """
    if callable(op):
        return op
    M = np.asarray(op, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("operator must be a square matrix or a callable")
    MT = M.T  # Fortran-ordered view of the same (symmetric) data, no copy
    if MT.flags.f_contiguous:
        return lambda v: dsymv(1.0, MT, np.asarray(v, dtype=float))
    return lambda v: M @ v


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so that the largest-magnitude entry of each is positive."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


@dataclass(frozen=True)
class EigenSystem:
    """Eigenpairs sorted by descending eigenvalue; ``vectors[:, j]`` pairs with ``values[j]``."""

    values: np.ndarray
    vectors: np.ndarray

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    def scaled(self, factor: float) -> "EigenSystem":
        return EigenSystem(self.values * factor, self.vectors)


@dataclass(frozen=True)
class LanczosResult:
    """Ritz pairs of an operator on a Krylov space."""

    values: np.ndarray
    vectors: np.ndarray
    krylov_dim: int
    v0: np.ndarray
    basis: np.ndarray = field(repr=False)

    def to_dict(self, include_vectors: bool = False) -> dict:
        out = {
            "krylov_dim": int(self.krylov_dim),
            "values": self.values.tolist(),
        }
        if include_vectors:
            out["vectors"] = self.vectors.T.tolist()
            out["v0"] = self.v0.tolist()
        return out

    def to_json(self, include_vectors: bool = False) -> str:
        return json.dumps(self.to_dict(include_vectors))


def dense_eig(M, count: Optional[int] = None) -> EigenSystem:
    """Eigendecomposition of a symmetric matrix, descending order.

    ``count`` restricts the output to the leading ``count`` eigenpairs.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("dense_eig expects a square matrix")
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12 * scale):
        raise ValueError("dense_eig expects a symmetric matrix")
    n = M.shape[0]
    if count is None or count >= n:
        vals, vecs = np.linalg.eigh(M)
    else:
        if count < 1:
            raise ValueError("count must be positive")
        vals, vecs = linalg.eigh(M, subset_by_index=[n - count, n - 1], check_finite=False)
    order = np.argsort(vals, kind="stable")[::-1]
    return EigenSystem(vals[order], _fix_signs(vecs[:, order]))


def _unit(v0) -> np.ndarray:
    v0 = np.asarray(v0, dtype=float).reshape(-1)
    nrm = np.linalg.norm(v0)
    if not np.isfinite(nrm) or abs(nrm - 1.0) > 1e-8:
        raise ValueError(f"starting vector must have unit norm, got {nrm}")
    return v0 / nrm


def krylov_basis(matvec: Operator, v0, m: int) -> np.ndarray:
    """Orthonormal basis of span{v0, A v0, ..., A^(m-1) v0}.

    Gram-Schmidt with one full reorthogonalization pass per column.  Raises
    :class:`BreakdownError` when the space has dimension below ``m``.
    """
    mv = as_matvec(matvec)
    v0 = _unit(v0)
    n = v0.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"Krylov dimension must lie in [1, {n}], got {m}")
    V = np.empty((n, m))
    V[:, 0] = v0
    for k in range(1, m):
        w = mv(V[:, k - 1])
        ref = np.linalg.norm(w)
        for _ in range(2):
            w = w - V[:, :k] @ (V[:, :k].T @ w)
        nrm = np.linalg.norm(w)
        if ref == 0.0 or nrm <= BREAKDOWN_TOL * ref:
            raise BreakdownError(f"Krylov space degenerate at dimension {k}", achieved=k)
        V[:, k] = w / nrm
    return V


def lanczos(matvec: Operator, v0, m: int) -> LanczosResult:
    """Rayleigh-Ritz eigenpairs of ``A`` on the Krylov space of dimension ``m``."""
    mv = as_matvec(matvec)
    V = krylov_basis(mv, v0, m)
    AV = np.column_stack([mv(V[:, k]) for k in range(m)])
    T = V.T @ AV
    T = 0.5 * (T + T.T)
    vals, Y = np.linalg.eigh(T)
    order = np.argsort(vals, kind="stable")[::-1]
    U = _fix_signs(V @ Y[:, order])
    return LanczosResult(vals[order], U, m, V[:, 0].copy(), V)


def kernel_lanczos(K, v0, m: int) -> LanczosResult:
    """Lanczos on the normalized kernel matrix ``A = K / n``."""
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    mv = as_matvec(K)
    return lanczos(lambda v: mv(v) / n, v0, m)


@dataclass
class CGResult:
    """Output of :func:`cg_solve`.

    ``directions[j]`` and ``etas[j] = d_j^T K_sigma d_j`` describe step
    ``j + 1``; ``residual_norms[j]`` is the gradient norm after ``j`` steps
    (so it has one more entry than there are directions).
    """

    w: np.ndarray
    directions: List[np.ndarray]
    etas: List[float]
    residual_norms: List[float]
    objective: List[float]
    steps: int
    iterates: List[np.ndarray] = field(default_factory=list, repr=False)
    kdirections: List[np.ndarray] = field(default_factory=list, repr=False)
    exhausted: bool = False

    @property
    def direction_matrix(self) -> np.ndarray:
        if not self.directions:
            return np.zeros((self.w.shape[0], 0))
        return np.column_stack(self.directions)


def cg_solve(K_sigma: Operator, Y, m: int, tol: float = 0.0,
             reorthogonalize: bool = False, keep_iterates: bool = False) -> CGResult:
    """Conjugate gradients for ``K_sigma w = Y`` started at ``w_0 = 0``.

    Runs at most ``m`` steps and stops early once the gradient norm
    ``||K_sigma w_j - Y||`` falls to ``tol * ||Y||``.  With
    ``reorthogonalize=True`` every new direction is explicitly made
    ``K_sigma``-conjugate to all previous ones (O(n m) extra work per step),
    which keeps the directions conjugate in floating point; that run also
    stops, with ``exhausted=True``, once conjugation leaves less than
    ``1e-8`` of the residual norm.  The default runs the textbook recurrences.
    """
    mv = as_matvec(K_sigma)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    n = Y.shape[0]
    if not 0 <= m <= n:
        raise ValueError(f"number of CG steps must lie in [0, {n}], got {m}")
    w = np.zeros(n)
    r = Y.copy()
    rr = float(r @ r)
    ynorm = math.sqrt(rr)
    directions, etas, kds = [], [], []
    res_norms = [ynorm]
    objective = [0.0]
    iterates = [w.copy()] if keep_iterates else []
    d = r.copy()
    steps = 0
    exhausted = False
    for j in range(m):
        if math.sqrt(rr) <= tol * ynorm or rr == 0.0:
            break
        if reorthogonalize and directions:
            D, KD, E = np.column_stack(directions), np.column_stack(kds), np.asarray(etas)
            before = float(np.linalg.norm(d))
            for _ in range(2):
                d = d - D @ ((KD.T @ d) / E)
            if float(np.linalg.norm(d)) <= EXHAUSTION_TOL * before:
                # the residual lies in the span of the previous directions up to
                # rounding: further directions would be cancellation noise
                exhausted = True
                break
        kd = mv(d)
        eta = float(d @ kd)
        if eta <= 1e-14 * float(d @ d):
            raise BreakdownError(f"CG lost positive definiteness at step {j + 1}", achieved=j)
        t = float(r @ d) / eta if reorthogonalize else rr / eta
        w = w + t * d
        r = r - t * kd
        directions.append(d)
        etas.append(eta)
        kds.append(kd)
        steps += 1
        rr_new = float(r @ r)
        res_norms.append(math.sqrt(rr_new))
        objective.append(0.5 * float(w @ (Y - r)) - float(Y @ w))
        if keep_iterates:
            iterates.append(w.copy())
        # with explicit conjugation the next direction is the residual made
        # conjugate to all previous ones; the beta recurrence would let the
        # direction norm grow without bound once the residual hits rounding level
        d = r.copy() if reorthogonalize else r + (rr_new / rr) * d
        rr = rr_new
    return CGResult(w, directions, etas, res_norms, objective, steps, iterates, kds, exhausted)


def chebyshev_T(l: int, x: float) -> float:
    """Chebyshev polynomial of the first kind ``T_l(x)``.

    Uses the three-term recurrence for ``|x| < 1`` and the hyperbolic closed
    form otherwise; returns ``inf`` beyond the floating-point range.
    """
    l = int(l)
    if l < 0:
        raise ValueError("degree must be non-negative")
    if l == 0:
        return 1.0
    x = float(x)
    if abs(x) < 1.0:
        t0, t1 = 1.0, x
        for _ in range(l - 1):
            t0, t1 = t1, 2.0 * x * t1 - t0
        return t1
    if abs(x) <= 1e6 and l <= 64:
        # exact integer-coefficient recurrence; no cancellation for |x| >= 1
        t0, t1 = 1.0, x
        for _ in range(l - 1):
            t0, t1 = t1, 2.0 * x * t1 - t0
        return t1
    sign = 1.0 if x > 0 or l % 2 == 0 else -1.0
    ax = abs(x)
    try:
        val = math.cosh(l * math.acosh(ax))
    except OverflowError:
        return sign * math.inf
    return sign * val


def tan_angle(u, v) -> float:
    """Tangent of the acute angle between two non-zero vectors."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    c = abs(float(u @ v)) / (np.linalg.norm(u) * np.linalg.norm(v))
    c = min(c, 1.0)
    if c == 0.0:
        return math.inf
    return math.sqrt(max(0.0, 1.0 - c * c)) / c


def _chebyshev_factor(i, p, m, lam_hat):
    """Return (gamma_i, T_{m-i-p}(gamma_i), kappa_{i,p}) or None on a vanishing gap."""
    n = lam_hat.shape[0]
    lo = lam_hat[n - 1]
    nxt = lam_hat[i + p]  # lambda_{i+p+1} in 1-based indexing
    if nxt - lo <= 0.0:
        return None
    gamma = 1.0 + 2.0 * (lam_hat[i - 1] - nxt) / (nxt - lo)
    kappa = 1.0
    for j in range(i + 1, i + p + 1):
        gap = lam_hat[i - 1] - lam_hat[j - 1]
        if gap <= 0.0:
            return None
        kappa *= (lam_hat[j - 1] - lo) / gap
    return gamma, chebyshev_T(m - i - p, gamma), kappa


def _check_indices(i, p, m, n):
    if not (1 <= i <= m < n):
        raise ValueError(f"need 1 <= i <= m < n, got i={i}, m={m}, n={n}")
    if not (0 <= p <= m - i):
        raise ValueError(f"need 0 <= p <= m - i, got p={p}")


def lanczos_eigenvalue_bound(i: int, p: int, m: int, eigsys: EigenSystem,
                             result: LanczosResult, v0):
    """Chebyshev upper bound on ``lambda_hat_i - lambda_tilde_i`` (1-based ``i``).

    Returns ``NOT_APPLICABLE`` when ``<u_i, v0> = 0`` or, for ``i > 1``, when
    ``lambda_tilde_{i-1} <= lambda_hat_i``; returns ``inf`` when an eigengap
    entering the constants vanishes.
    """
    lam_hat = np.asarray(eigsys.values, dtype=float)
    lam_til = np.asarray(result.values, dtype=float)
    n = lam_hat.shape[0]
    _check_indices(i, p, m, n)
    u = eigsys.vectors[:, i - 1]
    if abs(float(u @ v0)) == 0.0:
        return NOT_APPLICABLE
    if i > 1 and not lam_til[i - 2] > lam_hat[i - 1]:
        return NOT_APPLICABLE
    lo = lam_hat[n - 1]
    kappa_t = 1.0
    for j in range(1, i):
        kappa_t *= (lam_til[j - 1] - lo) / (lam_til[j - 1] - lam_hat[i - 1])
    cheb = _chebyshev_factor(i, p, m, lam_hat)
    if cheb is None:
        return math.inf
    _, T, kappa = cheb
    if math.isinf(T):
        return 0.0
    return float((lam_hat[i - 1] - lo) * (kappa_t * kappa * tan_angle(u, v0) / T) ** 2)


def lanczos_eigenvector_bound(i: int, p: int, m: int, eigsys: EigenSystem,
                              result: LanczosResult, v0):
    """Bound on ``sin^2`` between ``u_hat_i`` and its closest Ritz vector.

    Returns ``(bound, sin2)`` where ``sin2`` is the realized squared sine for
    the Ritz pair whose value is closest to ``lambda_hat_i``.  The prefactor
    is ``1 + ||A||_op / delta_i`` with ``delta_i`` the distance from
    ``lambda_hat_i`` to the remaining Ritz values.
    """
    lam_hat = np.asarray(eigsys.values, dtype=float)
    lam_til = np.asarray(result.values, dtype=float)
    n = lam_hat.shape[0]
    _check_indices(i, p, m, n)
    u = eigsys.vectors[:, i - 1]
    if abs(float(u @ v0)) == 0.0:
        return NOT_APPLICABLE
    dist = np.abs(lam_hat[i - 1] - lam_til)
    star = int(np.argmin(dist))
    c = float(u @ result.vectors[:, star])
    sin2 = max(0.0, 1.0 - c * c)
    others = np.delete(dist, star)
    delta = float(np.min(others)) if others.size else math.inf
    lo = lam_hat[n - 1]
    kappa_i = 1.0
    for j in range(1, i):
        gap = lam_hat[j - 1] - lam_hat[i - 1]
        if gap <= 0.0:
            return math.inf, sin2
        kappa_i *= (lam_hat[j - 1] - lo) / gap
    cheb = _chebyshev_factor(i, p, m, lam_hat)
    if cheb is None or delta == 0.0:
        return math.inf, sin2
    _, T, kappa = cheb
    if math.isinf(T):
        return 0.0, sin2
    pref = 1.0 + lam_hat[0] / delta
    return float(pref * (kappa_i * kappa * tan_angle(u, v0) / T) ** 2), sin2
