"""Isotropic Matérn base kernel, deformation-driven covariance assembly,
seeded GP sampling and Gaussian log-likelihood."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

from .errors import ConditioningError, InputError
from .grid import DeformationMap, GridDomain

SUPPORTED_NU = (0.5, 1.5, 2.5)
LOG_2PI = np.log(2.0 * np.pi)


def _check_nu(nu: float) -> float:
    nu = float(nu)
    if nu not in SUPPORTED_NU:
        raise InputError(f"unsupported Matern smoothness nu={nu}; choose from {SUPPORTED_NU}")
    return nu


def matern_correlation(r, nu: float) -> np.ndarray:
    """Matérn correlation at scaled distance ``r = d / rho`` (half-integer closed forms)."""
    r = np.asarray(r, dtype=float)
    if nu == 0.5:
        return np.exp(-r)
    if nu == 1.5:
        a = np.sqrt(3.0) * r
        return (1.0 + a) * np.exp(-a)
    if nu == 2.5:
        a = np.sqrt(5.0) * r
        return (1.0 + a + a * a / 3.0) * np.exp(-a)
    raise InputError(f"unsupported Matern smoothness nu={nu}; choose from {SUPPORTED_NU}")


@dataclass(frozen=True)
class IsotropicKernel:
    """Matérn covariance ``sigma2 * k_nu(d / rho)``."""

    nu: float = 1.5
    rho: float = 1.0
    sigma2: float = 1.0
    family: str = "matern"

    def __post_init__(self):
        if self.family != "matern":
            raise InputError(f"unsupported kernel family {self.family!r}")
        _check_nu(self.nu)
        if not (self.rho > 0 and self.sigma2 > 0):
            raise InputError(f"kernel needs rho > 0 and sigma2 > 0, got rho={self.rho}, sigma2={self.sigma2}")

    def __call__(self, d):
        return self.sigma2 * matern_correlation(np.asarray(d, dtype=float) / self.rho, self.nu)

    def to_dict(self) -> dict:
        return {"family": self.family, "nu": self.nu, "rho": self.rho, "sigma2": self.sigma2}

    @classmethod
    def from_dict(cls, d: dict) -> "IsotropicKernel":
        return cls(float(d["nu"]), float(d["rho"]), float(d["sigma2"]), d.get("family", "matern"))


def matern_value(kernel: IsotropicKernel, d: float) -> float:
    if d < 0:
        raise InputError(f"distance must be non-negative, got {d}")
    return float(kernel(d))


def calibrate_unit_range(family: str = "matern", nu: float = 1.5, sigma2: float = 1.0) -> IsotropicKernel:
    """Kernel whose correlation at distance 1 is exactly ``exp(-1)``.

    The correlation at unit distance is increasing in ``rho``, so the root is
    bracketed and found by bisection.
    """
    if family != "matern":
        raise InputError(f"unsupported kernel family {family!r}")
    nu = _check_nu(nu)

    def resid(rho):
        return matern_correlation(1.0 / rho, nu) - np.exp(-1.0)

    rho = optimize.bisect(resid, 0.05, 20.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return IsotropicKernel(nu, float(rho), float(sigma2), family)


@dataclass(frozen=True)
class JitterPolicy:
    start: float = 1e-10  # relative to sigma2
    factor: float = 10.0
    cap: float = 1e-4


def cholesky_with_jitter(K: np.ndarray, scale: float, policy: JitterPolicy = JitterPolicy()):
    """Lower Cholesky factor of ``K + j I`` for the smallest allowed jitter ``j``.

    Returns ``(L, j)``. Raises :class:`ConditioningError` past the cap.
    """
    rel = policy.start
    n = K.shape[0]
    while rel <= policy.cap * (1 + 1e-9):
        jit = rel * scale
        A = K.copy()
        A[np.diag_indices(n)] += jit
        try:
            return linalg.cholesky(A, lower=True, check_finite=False), jit
        except linalg.LinAlgError:
            rel *= policy.factor
    raise ConditioningError(f"Cholesky failed with jitter up to {policy.cap:g} x sigma2 (n={n})")


@dataclass
class CovarianceMatrix:
    """Dense covariance with its recorded jitter and lower Cholesky factor."""

    entries: np.ndarray = field(repr=False)
    jitter_used: float
    chol: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def from_matrix(cls, K: np.ndarray, scale: float | None = None,
                    policy: JitterPolicy = JitterPolicy()) -> "CovarianceMatrix":
        K = 0.5 * (np.asarray(K, dtype=float) + np.asarray(K, dtype=float).T)
        if scale is None:
            scale = float(np.mean(np.diag(K)))
        L, jit = cholesky_with_jitter(K, scale, policy)
        K[np.diag_indices(K.shape[0])] += jit
        return cls(K, jit, L)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    return cdist(coords, coords)


def build_nonstationary_cov(fmap: DeformationMap, kernel: IsotropicKernel,
                            jitter_policy: JitterPolicy = JitterPolicy()) -> CovarianceMatrix:
    """``Sigma_ij = C(|f(s_i) - f(s_j)|)`` plus the smallest jitter that factorizes."""
    K = kernel(pairwise_distances(fmap.coords))
    return CovarianceMatrix.from_matrix(K, kernel.sigma2, jitter_policy)


@dataclass
class Realization:
    domain: GridDomain
    values: np.ndarray = field(repr=False)
    seed: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.size != self.domain.n_nodes:
            raise InputError(f"realization needs {self.domain.n_nodes} values, got {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("realization values must be finite")


def standard_normal(seed, n: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n)


def sample_gp(cov: CovarianceMatrix, seed, domain: GridDomain | None = None) -> Realization:
    """Mean-zero draw ``L z`` with ``z`` from ``numpy.random.default_rng(seed)``."""
    if domain is None:
        side = int(round(np.sqrt(cov.n)))
        if side * side != cov.n:
            raise InputError("pass a domain for non-square covariance sizes")
        domain = GridDomain.square(side)
    z = standard_normal(seed, cov.n)
    return Realization(domain, cov.chol @ z, seed)


def log_likelihood(y, cov: CovarianceMatrix) -> float:
    """Mean-zero Gaussian log-density of ``y`` under ``cov``."""
    vals = y.values if isinstance(y, Realization) else np.asarray(y, dtype=float).reshape(-1)
    if vals.size != cov.n:
        raise InputError(f"dimension mismatch: data has {vals.size} values, covariance is {cov.n}x{cov.n}")
    alpha = linalg.solve_triangular(cov.chol, vals, lower=True, check_finite=False)
    return float(-0.5 * (alpha @ alpha + cov.logdet() + cov.n * LOG_2PI))
