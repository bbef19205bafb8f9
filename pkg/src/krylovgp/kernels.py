"""Covariance kernels, kernel-matrix assembly and random-series priors.

Three kernel families are supported:

* ``matern``  -- k(d) = (Gamma(a) 2^(a-1))^-1 (sqrt(2a) d)^a K_a(sqrt(2a) d)
* ``sqexp``   -- k(x, y) = exp(-|x - y|^2 / b^2)
* ``series``  -- k(x, y) = sum_{j <= J} lambda_j phi_j(x) phi_j(y) with the
  tensor cosine basis on [0, 1]^d and polynomially or exponentially decaying
  eigenvalues lambda_j.

Kernel matrices are assembled without jitter; the noise term is always added
explicitly by the caller.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import special

__all__ = [
    "KernelSpec",
    "Dataset",
    "matern",
    "sqexp",
    "series",
    "kernel_eval",
    "kernel_matrix",
    "kernel_cross",
    "kernel_diag",
    "population_eigenvalues",
    "cosine_features",
    "default_truncation",
]

# Below this value of sqrt(2a)|d| the Matern kernel is evaluated by its
# small-argument expansion instead of through K_a.
_MATERN_SERIES_CUTOFF = 1e-8
_KINDS = ("matern", "sqexp", "series")
_DECAYS = ("polynomial", "exponential")


@dataclass(frozen=True)
class KernelSpec:
    """Immutable description of a covariance kernel.

    Use the :func:`matern`, :func:`sqexp` and :func:`series` constructors
    rather than filling the fields directly.
    """

    kind: str
    alpha: Optional[float] = None
    bandwidth: Optional[float] = None
    decay: Optional[str] = None
    tau: Optional[float] = None
    dimension: int = 1
    truncation: Optional[int] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "matern":
            _check_positive("alpha", self.alpha)
        elif self.kind == "sqexp":
            _check_positive("bandwidth", self.bandwidth)
        else:
            if self.decay not in _DECAYS:
                raise ValueError(f"series decay must be one of {_DECAYS}")
            _check_positive("tau", self.tau)
            if self.decay == "polynomial":
                _check_positive("alpha", self.alpha)
            if self.truncation is not None and int(self.truncation) < 1:
                raise ValueError("truncation J must be >= 1")
        if int(self.dimension) < 1:
            raise ValueError("dimension must be a positive integer")

    @property
    def is_series(self) -> bool:
        return self.kind == "series"

    def resolved(self, n: int) -> "KernelSpec":
        """Return a copy with the series truncation fixed for ``n`` points."""
        if not self.is_series or self.truncation is not None:
            return self
        return replace(self, truncation=default_truncation(n))

    def to_dict(self) -> dict:
        if self.kind == "matern":
            return {"kind": "matern", "alpha": self.alpha}
        if self.kind == "sqexp":
            return {"kind": "sqexp", "bandwidth": self.bandwidth}
        out = {
            "kind": "series",
            "decay": self.decay,
            "tau": self.tau,
            "dimension": self.dimension,
            "truncation": self.truncation,
        }
        if self.decay == "polynomial":
            out["alpha"] = self.alpha
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "KernelSpec":
        kind = obj.get("kind")
        if kind == "matern":
            return matern(obj["alpha"])
        if kind == "sqexp":
            return sqexp(obj["bandwidth"])
        if kind == "series":
            return series(
                obj["decay"],
                tau=obj["tau"],
                alpha=obj.get("alpha"),
                dimension=obj.get("dimension", 1),
                truncation=obj.get("truncation"),
            )
        raise ValueError(f"unknown kernel kind {kind!r}")

    @classmethod
    def from_json(cls, text: str) -> "KernelSpec":
        return cls.from_dict(json.loads(text))


def _check_positive(name, value):
    if value is None or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")


def matern(alpha: float) -> KernelSpec:
    return KernelSpec("matern", alpha=float(alpha))


def sqexp(bandwidth: float) -> KernelSpec:
    return KernelSpec("sqexp", bandwidth=float(bandwidth))


def series(decay: str, tau: float, alpha: Optional[float] = None,
           dimension: int = 1, truncation: Optional[int] = None) -> KernelSpec:
    return KernelSpec(
        "series",
        alpha=None if alpha is None else float(alpha),
        decay=decay,
        tau=float(tau),
        dimension=int(dimension),
        truncation=None if truncation is None else int(truncation),
    )


def default_truncation(n: int) -> int:
    return max(4 * int(n), 1024)


@dataclass
class Dataset:
    """Regression data ``Y_i = f(X_i) + sigma * eps_i``.

    ``X`` is stored as an ``(n, d)`` array.  ``truth`` optionally holds the
    regression function used to simulate the data.
    """

    X: np.ndarray
    Y: np.ndarray
    sigma: float
    truth: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        self.X = _as_points(self.X)
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if self.X.shape[0] < 1:
            raise ValueError("dataset needs at least one point")
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]} entries")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError("sigma must be positive")

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def sigma2(self) -> float:
        return float(self.sigma) ** 2


def _as_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(-1, 1)
    elif X.ndim != 2:
        raise ValueError("points must be a scalar, a 1-d or a 2-d array")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input point")
    return X


def _as_point(x, d: int) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1 or x.shape[0] != d:
        raise ValueError(f"point of dimension {x.shape} does not match kernel dimension {d}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input point")
    return x


def _matern_profile(z: np.ndarray, alpha: float) -> np.ndarray:
    """Normalized Matern profile as a function of z = sqrt(2 alpha) |d|."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < _MATERN_SERIES_CUTOFF
    big = ~small
    if np.any(big):
        zb = z[big]
        log_norm = special.gammaln(alpha) + (alpha - 1.0) * math.log(2.0)
        kv = special.kv(alpha, zb)
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = np.exp(alpha * np.log(zb) - log_norm) * kv
        out[big] = np.where(kv == 0.0, 0.0, vals)
    if np.any(small):
        zs = z[small]
        if abs(alpha - round(alpha)) > 1e-12:
            # leading terms of z^a K_a(z) / (Gamma(a) 2^(a-1)), non-integer a
            c = special.gamma(1.0 - alpha) / special.gamma(1.0 + alpha)
            out[small] = 1.0 - c * (zs / 2.0) ** (2.0 * alpha) + (zs / 2.0) ** 2 / (1.0 - alpha)
        elif alpha > 1:
            out[small] = 1.0 - (zs / 2.0) ** 2 / (alpha - 1.0)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                corr = np.where(zs > 0, (zs / 2.0) ** 2 * np.log(zs / 2.0), 0.0)
            out[small] = 1.0 + corr
        out[small & (z == 0.0)] = 1.0
    return out


def _multi_indices(d: int, J: int) -> np.ndarray:
    """First ``J`` cosine multi-indices (0-based frequencies) on [0, 1]^d.

    Ordered by total frequency, ties broken lexicographically.
    """
    if d == 1:
        return np.arange(J).reshape(-1, 1)
    out = []
    total = 0
    while len(out) < J:
        level = [c for c in itertools.product(range(total + 1), repeat=d) if sum(c) == total]
        out.extend(sorted(level))
        total += 1
    return np.asarray(out[:J])


def cosine_features(X, d: int, J: int) -> np.ndarray:
    """Matrix ``Phi[i, j] = phi_j(X_i)`` of the tensor cosine basis, shape (n, J)."""
    X = _as_points(X)
    if X.shape[1] != d:
        raise ValueError(f"points have dimension {X.shape[1]}, kernel expects {d}")
    freqs = _multi_indices(d, J)
    Phi = np.ones((X.shape[0], J))
    for axis in range(d):
        f = freqs[:, axis]
        block = np.sqrt(2.0) * np.cos(np.pi * np.outer(X[:, axis], f))
        block[:, f == 0] = 1.0
        Phi *= block
    return Phi


def population_eigenvalues(spec: KernelSpec, count: Optional[int] = None) -> np.ndarray:
    """Eigenvalues ``lambda_1 > lambda_2 > ...`` of a series kernel operator."""
    if not spec.is_series:
        raise ValueError("population eigenvalues are only known for series kernels")
    J = spec.truncation if spec.truncation is not None else default_truncation(1)
    if count is None:
        count = J
    if count > J:
        raise ValueError(f"requested {count} eigenvalues but truncation is {J}")
    j = np.arange(1, count + 1, dtype=float)
    d = spec.dimension
    if spec.decay == "polynomial":
        return spec.tau ** 2 * j ** (-1.0 - 2.0 * spec.alpha / d)
    return np.exp(-spec.tau * j ** (1.0 / d))


def _pairwise_block(spec: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if spec.kind == "series":
        spec = spec.resolved(max(A.shape[0], B.shape[0]))
        lam = population_eigenvalues(spec)
        PA = cosine_features(A, spec.dimension, spec.truncation)
        PB = PA if B is A else cosine_features(B, spec.dimension, spec.truncation)
        return (PA * lam) @ PB.T
    diff = A[:, None, :] - B[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    if spec.kind == "sqexp":
        return np.exp(-sq / spec.bandwidth ** 2)
    return _matern_profile(np.sqrt(2.0 * spec.alpha) * np.sqrt(sq), spec.alpha)


def kernel_eval(spec: KernelSpec, x, y) -> float:
    """Evaluate ``k(x, y)`` for two single points."""
    d = spec.dimension
    x = _as_point(x, d)
    y = _as_point(y, d)
    if spec.kind == "series":
        # symmetric in (x, y) exactly: both feature rows are built the same way
        s = spec.resolved(1)
        Phi = cosine_features(np.vstack([x, y]), d, s.truncation)
        lam = population_eigenvalues(s)
        return float(np.sum(lam * Phi[0] * Phi[1]))
    r2 = float(np.sum((x - y) ** 2))
    if spec.kind == "sqexp":
        return math.exp(-r2 / spec.bandwidth ** 2)
    z = np.array([math.sqrt(2.0 * spec.alpha) * math.sqrt(r2)])
    return float(_matern_profile(z, spec.alpha)[0])


def kernel_matrix(spec: KernelSpec, X, block: int = 1024) -> np.ndarray:
    """Empirical kernel matrix ``K[i, j] = k(X_i, X_j)`` (no jitter).

    Stationary kernels are evaluated on the upper triangle in row blocks and
    mirrored, so the result is exactly symmetric.
    """
    X = _as_points(X)
    if X.shape[1] != spec.dimension:
        raise ValueError(f"points have dimension {X.shape[1]}, kernel expects {spec.dimension}")
    n = X.shape[0]
    if spec.kind == "series":
        s = spec.resolved(n)
        Phi = cosine_features(X, s.dimension, s.truncation)
        lam = population_eigenvalues(s)
        K = (Phi * lam) @ Phi.T
        return np.triu(K) + np.triu(K, 1).T
    K = np.empty((n, n))
    for start in range(0, n, block):
        stop = min(start + block, n)
        K[start:stop, start:] = _pairwise_block(spec, X[start:stop], X[start:])
    iu = np.triu_indices(n, 1)
    K[(iu[1], iu[0])] = K[iu]
    return K


def kernel_cross(spec: KernelSpec, X, x) -> np.ndarray:
    """Cross-covariance between design points and probes.

    Returns the ``n``-vector ``(k(X_i, x))_i`` for a single probe, or an
    ``(n, p)`` matrix when ``x`` holds ``p`` probes as rows.
    """
    X = _as_points(X)
    d = spec.dimension
    if X.shape[1] != d:
        raise ValueError(f"points have dimension {X.shape[1]}, kernel expects {d}")
    xa = np.asarray(x, dtype=float)
    single = xa.ndim == 0 or (xa.ndim == 1 and xa.shape[0] == d and d > 1) or (
        xa.ndim == 1 and d == 1 and xa.shape[0] == 1)
    P = _as_points(xa.reshape(1, d) if single else xa)
    if P.shape[1] != d:
        raise ValueError(f"probe dimension {P.shape[1]} does not match kernel dimension {d}")
    if spec.kind == "series":
        s = spec.resolved(X.shape[0])
        lam = population_eigenvalues(s)
        out = (cosine_features(X, d, s.truncation) * lam) @ cosine_features(P, d, s.truncation).T
    else:
        out = _pairwise_block(spec, X, P)
    return out[:, 0] if single else out


def kernel_diag(spec: KernelSpec, P, n_design: Optional[int] = None) -> np.ndarray:
    """Prior variances ``k(x, x)`` at the rows of ``P``.

    For series kernels the truncation is resolved with ``n_design`` points (or
    with ``len(P)`` when omitted), matching :func:`kernel_cross`.
    """
    P = _as_points(P)
    if P.shape[1] != spec.dimension:
        raise ValueError(f"points have dimension {P.shape[1]}, kernel expects {spec.dimension}")
    if spec.kind != "series":
        return np.ones(P.shape[0])
    s = spec.resolved(n_design if n_design is not None else P.shape[0])
    Phi = cosine_features(P, s.dimension, s.truncation)
    return (Phi * Phi) @ population_eigenvalues(s)
