"""Iterative Bayesian updating of the GP precision with pluggable policies.

Each step takes an action ``s``, conjugates it against the previous search
directions in the ``K_sigma`` inner product,

    d   = (I - C_{m-1} K_sigma) s
    eta = s^T K_sigma d
    C_m = C_{m-1} + d d^T / eta
    w_m = w_{m-1} + d d^T Y / eta

and stores only the factors ``(d_j, eta_j)``.  ``C_m`` is never formed
inside the iteration; ``K_sigma^{-1} - C_m`` is the computational
uncertainty added to the posterior covariance.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from .spectral import CGResult, EigenSystem, LanczosResult, Operator, as_matvec

__all__ = [
    "DependentPolicyError",
    "PolicyExhaustedError",
    "IterGPState",
    "LowRankPrecision",
    "Policy",
    "initial_state",
    "itergp_step",
    "run_itergp",
    "policy_ev",
    "policy_lanczos",
    "policy_cg",
    "policy_custom",
    "closed_form_C_ev",
    "closed_form_C_lanczos",
    "closed_form_C_cg",
    "vb_titsias",
    "default_krylov_dim",
]

DEPENDENCE_TOL = 1e-12
POLICY_TAGS = ("EV", "Lanczos", "CG", "Custom")


class DependentPolicyError(ValueError):
    """The action lies (numerically) in the span of the previous actions.

    ``index`` is the 1-based step at which the failure occurred, when known.
    """

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class PolicyExhaustedError(ValueError):
    """A policy ran out of actions before the requested number of steps."""


@dataclass(frozen=True)
class LowRankPrecision:
    """``C = sum_j weights[j] * D[:, j] D[:, j]^T`` kept in factored form."""

    D: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.D, dtype=float)
        if D.ndim != 2:
            raise ValueError("factor matrix must be 2-d")
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != D.shape[1]:
            raise ValueError("one weight per factor column is required")
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.D.shape[0]

    @property
    def m(self) -> int:
        return self.D.shape[1]

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``C v`` for a vector or the columns of a matrix, in O(n m) per column."""
        v = np.asarray(v, dtype=float)
        coeff = self.D.T @ v
        coeff = coeff * (self.weights if v.ndim == 1 else self.weights[:, None])
        return self.D @ coeff

    def quad(self, V: np.ndarray) -> np.ndarray:
        """Diagonal of ``V^T C V`` for the columns of ``V``."""
        P = self.D.T @ np.asarray(V, dtype=float)
        if P.ndim == 1:
            return float(np.sum(self.weights * P * P))
        return np.einsum("j,jk,jk->k", self.weights, P, P)

    def dense(self) -> np.ndarray:
        C = (self.D * self.weights) @ self.D.T
        return 0.5 * (C + C.T)


class _ColumnStore:
    """Growable column buffers shared by a chain of states.

    A state owning the first ``m`` columns may append in place only while the
    store holds exactly ``m`` filled columns; otherwise (a branch off an older
    state) the prefix is copied.  Columns below ``filled`` are never rewritten,
    so earlier states stay valid.
    """

    __slots__ = ("D", "KD", "etas", "filled")

    def __init__(self, n: int, capacity: int):
        self.D = np.empty((n, capacity))
        self.KD = np.empty((n, capacity))
        self.etas = np.empty(capacity)
        self.filled = 0

    @property
    def capacity(self) -> int:
        return self.etas.shape[0]

    def appendable(self, m: int) -> "_ColumnStore":
        if self.filled == m and m < self.capacity:
            return self
        new = _ColumnStore(self.D.shape[0], max(8, 2 * self.capacity, m + 1))
        new.D[:, :m] = self.D[:, :m]
        new.KD[:, :m] = self.KD[:, :m]
        new.etas[:m] = self.etas[:m]
        new.filled = m
        return new


@dataclass(frozen=True)
class IterGPState:
    """Immutable view of the first ``m`` steps of an Algorithm-1 run.

    Column ``j`` of ``D`` is the search direction ``d_{j+1}``, column ``j`` of
    ``KD`` stores ``K_sigma d_{j+1}`` and ``etas[j]`` the normalizer.
    """

    n: int
    m: int = 0
    store: Optional[_ColumnStore] = field(default=None, repr=False, compare=False)
    w: Optional[np.ndarray] = None
    policy_tag: str = "Custom"

    def __post_init__(self):
        if self.policy_tag not in POLICY_TAGS:
            raise ValueError(f"policy tag must be one of {POLICY_TAGS}")
        if self.store is None:
            object.__setattr__(self, "store", _ColumnStore(self.n, 0))
        if self.w is None:
            object.__setattr__(self, "w", np.zeros(self.n))

    @property
    def D(self) -> np.ndarray:
        return self.store.D[:, :self.m]

    @property
    def KD(self) -> np.ndarray:
        return self.store.KD[:, :self.m]

    @property
    def etas(self) -> np.ndarray:
        return self.store.etas[:self.m]

    @property
    def directions(self):
        return [self.store.D[:, j] for j in range(self.m)]

    def precision(self) -> LowRankPrecision:
        return LowRankPrecision(self.D.copy(), 1.0 / self.etas)

    def apply_C(self, v: np.ndarray) -> np.ndarray:
        return self.precision().apply(v)

    def dense_C(self) -> np.ndarray:
        return self.precision().dense()

    def to_dict(self, include_directions: bool = False) -> dict:
        out = {
            "m": self.m,
            "n": self.n,
            "policy": self.policy_tag,
            "etas": self.etas.tolist(),
            "w": self.w.tolist(),
        }
        if include_directions:
            out["directions"] = self.D.T.tolist()
        return out

    def to_json(self, include_directions: bool = False) -> str:
        return json.dumps(self.to_dict(include_directions))


def initial_state(n: int, policy_tag: str = "Custom") -> IterGPState:
    return IterGPState(n=int(n), policy_tag=policy_tag)


def itergp_step(state: IterGPState, s, K_sigma: Operator, Y) -> IterGPState:
    """Fold one action into the state; costs one ``K_sigma`` matvec."""
    mv = as_matvec(K_sigma)
    s = np.asarray(s, dtype=float).reshape(-1)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    if s.shape[0] != state.n or Y.shape[0] != state.n:
        raise ValueError("action and data must have length n")
    ks = mv(s)
    ref = float(s @ ks)
    d, kd = s.copy(), ks.copy()
    m = state.m
    if m:
        D, KD = state.D, state.KD
        inv_eta = 1.0 / state.etas
        # d = (I - C K_sigma) s; a second pass removes the rounding left by the
        # first one.  K_sigma d follows from the stored K_sigma d_j by linearity.
        for _ in range(2):
            coeff = (KD.T @ d) * inv_eta
            d = d - D @ coeff
            kd = kd - KD @ coeff
    eta = float(s @ kd)
    if not eta > DEPENDENCE_TOL * ref:
        raise DependentPolicyError(
            f"action {m + 1} is linearly dependent on the previous actions "
            f"(eta={eta:.3e}, s^T K_sigma s={ref:.3e})",
            index=m + 1,
        )
    store = state.store.appendable(m)
    store.D[:, m] = d
    store.KD[:, m] = kd
    store.etas[m] = eta
    store.filled = m + 1
    w = state.w + d * (float(d @ Y) / eta)
    return IterGPState(n=state.n, m=m + 1, store=store, w=w, policy_tag=state.policy_tag)


@dataclass(frozen=True)
class Policy:
    """A finite stream of actions, stored as the columns of ``vectors``."""

    vectors: np.ndarray
    tag: str = "Custom"

    @property
    def available(self) -> int:
        return self.vectors.shape[1]

    def take(self, m: int) -> Iterator[np.ndarray]:
        if m > self.available:
            raise PolicyExhaustedError(
                f"{self.tag} policy provides {self.available} actions, {m} requested")
        for j in range(m):
            yield self.vectors[:, j]

    def __iter__(self):
        return self.take(self.available)


def _columns(vectors, m: Optional[int], tag: str) -> Policy:
    V = np.asarray(vectors, dtype=float)
    if V.ndim == 1:
        V = V.reshape(-1, 1)
    if m is not None:
        if m > V.shape[1]:
            raise PolicyExhaustedError(f"{tag} policy provides {V.shape[1]} actions, {m} requested")
        V = V[:, :m]
    return Policy(V, tag)


def policy_ev(eigsys: EigenSystem, m: Optional[int] = None) -> Policy:
    """Actions ``s_j = u_hat_j`` (leading empirical eigenvectors)."""
    return _columns(eigsys.vectors, m, "EV")


def policy_lanczos(result: LanczosResult, m: Optional[int] = None) -> Policy:
    """Actions ``s_j = u_tilde_j`` (leading Ritz vectors)."""
    return _columns(result.vectors, m, "Lanczos")


def policy_cg(directions, m: Optional[int] = None) -> Policy:
    """Actions ``s_j = d_j`` from a CG run (a :class:`CGResult` or a list of vectors)."""
    if isinstance(directions, CGResult):
        directions = directions.direction_matrix
    elif isinstance(directions, (list, tuple)):
        directions = np.column_stack(directions) if directions else np.zeros((0, 0))
    return _columns(directions, m, "CG")


def policy_custom(vectors: Iterable, m: Optional[int] = None) -> Policy:
    vectors = list(vectors) if not isinstance(vectors, np.ndarray) else vectors
    if isinstance(vectors, list):
        vectors = np.column_stack(vectors)
    return _columns(vectors, m, "Custom")


def run_itergp(K_sigma: Operator, Y, policy: Policy, m: int) -> IterGPState:
    """Run ``m`` steps of the updating scheme with actions drawn from ``policy``."""
    Y = np.asarray(Y, dtype=float).reshape(-1)
    n = Y.shape[0]
    if not 0 <= m <= n:
        raise ValueError(f"number of steps must lie in [0, {n}], got {m}")
    mv = as_matvec(K_sigma)
    state = initial_state(n, policy.tag if policy.tag in POLICY_TAGS else "Custom")
    for s in policy.take(m):
        state = itergp_step(state, s, mv, Y)
    return state


def closed_form_C_ev(eigsys: EigenSystem, m: int, sigma2: float, n: int) -> LowRankPrecision:
    """``sum_{j<=m} (mu_hat_j + sigma^2)^{-1} u_hat_j u_hat_j^T`` with ``mu_hat = n * lambda_hat``."""
    if m > eigsys.vectors.shape[1]:
        raise ValueError(f"m={m} exceeds the {eigsys.vectors.shape[1]} available eigenpairs")
    mu = n * np.asarray(eigsys.values[:m], dtype=float)
    return LowRankPrecision(eigsys.vectors[:, :m], 1.0 / (mu + sigma2))


def closed_form_C_lanczos(result: LanczosResult, m: int, sigma2: float, n: int) -> LowRankPrecision:
    """Ritz-pair analogue of :func:`closed_form_C_ev`."""
    if m > result.krylov_dim:
        raise ValueError(f"m={m} exceeds the Krylov dimension {result.krylov_dim}")
    mu = n * np.asarray(result.values[:m], dtype=float)
    return LowRankPrecision(result.vectors[:, :m], 1.0 / (mu + sigma2))


def closed_form_C_cg(directions, etas, m: int, n: Optional[int] = None) -> LowRankPrecision:
    """``sum_{j<=m} d_j d_j^T / eta_j`` from recorded CG directions.

    ``n`` is only needed when ``directions`` is an empty list.
    """
    if isinstance(directions, np.ndarray):
        D = directions if directions.ndim == 2 else directions.reshape(-1, 1)
        cols = D.shape[1]
    else:
        cols = len(directions)
        D = np.column_stack(directions) if cols else None
    if m > cols or m > len(etas):
        raise ValueError(f"m={m} exceeds the {min(cols, len(etas))} recorded CG steps")
    if m == 0:
        if D is not None:
            n = D.shape[0]
        elif n is None:
            raise ValueError("n is required to build C_0 from an empty direction list")
        return LowRankPrecision(np.zeros((int(n), 0)), np.zeros(0))
    return LowRankPrecision(D[:, :m], 1.0 / np.asarray(etas[:m], dtype=float))


@dataclass(frozen=True)
class VBSolution:
    """Optimal variational parameters and the moments they induce at the design points."""

    mu_star: np.ndarray
    Sigma_star: np.ndarray
    mean: np.ndarray
    cov: np.ndarray


def vb_titsias(K, Y, sigma2: float, eigsys: EigenSystem, m: int) -> VBSolution:
    """Collapsed variational optimum for the eigenvector inducing variables.

    Inducing variables ``U_j = <u_hat_j, F(X)>`` give ``K_uu = diag(mu_hat)``
    and ``K_uf`` with rows ``mu_hat_j u_hat_j^T``.
    """
    K = np.asarray(K, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    n = K.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}")
    mu = n * np.asarray(eigsys.values[:m], dtype=float)
    if np.any(mu <= 0):
        raise np.linalg.LinAlgError("K_uu is singular: non-positive eigenvalue among the first m")
    U = eigsys.vectors[:, :m]
    Kuu = np.diag(mu)
    Kuf = mu[:, None] * U.T
    inv_s2 = 1.0 / sigma2
    S = inv_s2 * (Kuf @ Kuf.T) + Kuu
    mu_star = inv_s2 * Kuu @ np.linalg.solve(S, Kuf @ Y)
    Sigma_star = Kuu @ np.linalg.solve(S, Kuu)
    Sigma_star = 0.5 * (Sigma_star + Sigma_star.T)
    A = np.linalg.solve(Kuu, Kuf).T  # K_fu K_uu^{-1}
    mean = A @ mu_star
    cov = K - A @ Kuf + A @ Sigma_star @ A.T
    return VBSolution(mu_star, Sigma_star, mean, 0.5 * (cov + cov.T))


def default_krylov_dim(m: int, n: int) -> int:
    """``min(n, ceil(m log n))``, never below ``m``."""
    if m <= 0:
        return 0
    return int(min(n, max(m, math.ceil(m * math.log(n)))))
