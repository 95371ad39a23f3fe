"""Out-of-sample covariance prediction, stationary/ARD baselines and likelihood comparison."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats
from scipy.spatial.distance import cdist

from .errors import FitError, InputError
from .estimation import ModelParams, predict_deformation
from .grid import DeformationMap, GridDomain
from .kernel import (LOG_2PI, CovarianceMatrix, IsotropicKernel, JitterPolicy, Realization,
                     build_nonstationary_cov, cholesky_with_jitter, log_likelihood, matern_correlation)


@dataclass
class PredictionResult:
    tau_new: list
    map_pred: DeformationMap
    cov_pred: CovarianceMatrix = field(repr=False)


def predict_covariance(params: ModelParams, tau_new, kernel: IsotropicKernel, cfg=None,
                       jitter_policy: JitterPolicy = JitterPolicy()) -> PredictionResult:
    """Deform the grid for ``tau_new`` and assemble the covariance of the deformed base process."""
    fmap = predict_deformation(params, tau_new, cfg)
    cov = build_nonstationary_cov(fmap, kernel, jitter_policy)
    return PredictionResult(list(np.atleast_1d(np.asarray(tau_new, dtype=float))), fmap, cov)


# -- baselines -----------------------------------------------------------------

@dataclass(frozen=True)
class BaselineModel:
    """Stationary Matérn model (``kind="stationary"``) or its per-axis ARD variant."""

    kind: str
    sigma2: float
    lengthscales: tuple  # (rho,) or (rho_x, rho_y)
    nu: float = 1.5
    loglik: float | None = None  # pooled training log-likelihood at the optimum

    def __post_init__(self):
        if self.kind not in ("stationary", "ard"):
            raise InputError(f"unknown baseline kind {self.kind!r}")
        if self.sigma2 <= 0 or any(r <= 0 for r in self.lengthscales):
            raise InputError("baseline variance and lengthscales must be positive")

    @property
    def rho(self) -> float:
        return float(self.lengthscales[0])

    def correlation(self, nodes: np.ndarray) -> np.ndarray:
        return _correlation(nodes, self.lengthscales, self.nu)

    def covariance(self, domain: GridDomain, jitter_policy: JitterPolicy = JitterPolicy()) -> CovarianceMatrix:
        K = self.sigma2 * self.correlation(domain.nodes())
        return CovarianceMatrix.from_matrix(K, self.sigma2, jitter_policy)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma2": self.sigma2, "lengthscales": list(self.lengthscales),
                "nu": self.nu, "loglik": self.loglik}


def _correlation(nodes, lengthscales, nu):
    ls = np.asarray(lengthscales, dtype=float)
    if ls.size == 1:
        ls = np.repeat(ls, 2)
    return matern_correlation(cdist(nodes / ls, nodes / ls), nu)


def _pooled_stats(realizations):
    if not realizations:
        raise InputError("need at least one realization")
    dom = realizations[0].domain
    for r in realizations:
        if r.domain != dom:
            raise InputError("all realizations must share one grid")
    Y = np.stack([r.values for r in realizations], axis=1)  # (n, R)
    if not np.any(Y):
        raise FitError("degenerate data: every realization is identically zero")
    return dom, Y


def _profile_table(R, Y, log_s2):
    """Pooled log-likelihood of ``sigma2 * R`` at every ``exp(log_s2)``, via one Cholesky of ``R``."""
    n, nr = Y.shape
    L, jit = cholesky_with_jitter(R, 1.0)
    A = linalg.solve_triangular(L, Y, lower=True, check_finite=False)
    q = float(np.sum(A * A))
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    s2 = np.exp(log_s2)
    return -0.5 * (q / s2 + nr * (n * log_s2 + logdet + n * LOG_2PI))


def _refine_axes(centres, halfwidths, n_points):
    return [np.linspace(c - h, c + h, n_points) for c, h in zip(centres, halfwidths)]


def _grid_search(dom, Y, nu, n_ls, levels=3, n_points=17, ls_bounds=None, s2_bounds=None):
    """Log-grid refinement over ``(log sigma2, log lengthscale...)``.

    Each level re-centres a grid of ``n_points`` per axis on the incumbent and
    shrinks the half-width to two grid spacings of the previous level.
    """
    nodes = dom.nodes()
    diam = float(np.hypot(dom.x_max - dom.x_min, dom.y_max - dom.y_min))
    lo_l, hi_l = np.log(ls_bounds) if ls_bounds else (np.log(0.01 * diam), np.log(10.0 * diam))
    v = float(np.mean(Y * Y))
    lo_s, hi_s = np.log(s2_bounds) if s2_bounds else (np.log(v) - np.log(1e3), np.log(v) + np.log(1e3))
    centres = [0.5 * (lo_s + hi_s)] + [0.5 * (lo_l + hi_l)] * n_ls
    half = [0.5 * (hi_s - lo_s)] + [0.5 * (hi_l - lo_l)] * n_ls
    best = (-np.inf, None)
    for _ in range(levels):
        axes = _refine_axes(centres, half, n_points)
        axes = [axes[0].clip(lo_s, hi_s)] + [a.clip(lo_l, hi_l) for a in axes[1:]]
        for ls_idx in np.ndindex(*([n_points] * n_ls)):
            log_ls = [axes[1 + d][k] for d, k in enumerate(ls_idx)]
            R = _correlation(nodes, np.exp(log_ls), nu)
            ll = _profile_table(R, Y, axes[0])
            k = int(np.argmax(ll))
            if ll[k] > best[0]:
                best = (float(ll[k]), [axes[0][k]] + log_ls)
        centres = best[1]
        half = [2.0 * (a[1] - a[0]) for a in axes]
    ll, x = best
    if x is None or not np.isfinite(ll):
        raise FitError("baseline likelihood search found no finite optimum")
    return ll, np.exp(x[0]), tuple(float(np.exp(t)) for t in x[1:])


def fit_stationary_baseline(realizations, nu: float = 1.5, levels: int = 3, n_points: int = 17) -> BaselineModel:
    """Pooled maximum-likelihood stationary Matérn ``(sigma2, rho)`` by log-grid refinement."""
    dom, Y = _pooled_stats(realizations)
    ll, s2, ls = _grid_search(dom, Y, nu, 1, levels, n_points)
    return BaselineModel("stationary", float(s2), ls, float(nu), ll)


def fit_ard_baseline(realizations, nu: float = 1.5, levels: int = 3, n_points: int = 17) -> BaselineModel:
    """As :func:`fit_stationary_baseline` with separate ``(rho_x, rho_y)``."""
    dom, Y = _pooled_stats(realizations)
    ll, s2, ls = _grid_search(dom, Y, nu, 2, levels, n_points)
    return BaselineModel("ard", float(s2), ls, float(nu), ll)


def pooled_log_likelihood(realizations, cov: CovarianceMatrix) -> float:
    return float(sum(log_likelihood(r, cov) for r in realizations))


# -- likelihood comparison -------------------------------------------------------

@dataclass
class PairStats:
    model_a: str
    model_b: str
    mean_diff: float  # mean of ll_a - ll_b
    std_diff: float
    t_stat: float
    p_value: float
    frac_a_better: float

    def to_dict(self) -> dict:
        return {"model_a": self.model_a, "model_b": self.model_b, "mean_diff": self.mean_diff,
                "std_diff": self.std_diff, "t_stat": self.t_stat, "p_value": self.p_value,
                "frac_a_better": self.frac_a_better}


@dataclass
class ScoreTable:
    names: list
    logliks: np.ndarray = field(repr=False)  # (n_realizations, n_models)
    pairs: list

    def pair(self, a: str, b: str) -> PairStats:
        for ps in self.pairs:
            if (ps.model_a, ps.model_b) == (a, b):
                return ps
        raise KeyError((a, b))

    def rows(self):
        for r in range(self.logliks.shape[0]):
            for m, name in enumerate(self.names):
                yield r, name, float(self.logliks[r, m])

    def summary(self) -> dict:
        return {"models": list(self.names),
                "mean_loglik": {n: float(v) for n, v in zip(self.names, self.logliks.mean(axis=0))},
                "std_loglik": {n: float(v) for n, v in zip(self.names, _std(self.logliks))},
                "pairs": [p.to_dict() for p in self.pairs]}


def _std(a):
    return a.std(axis=0, ddof=1) if a.shape[0] > 1 else np.zeros(a.shape[1])


def paired_t(diff) -> tuple[float, float]:
    """Two-sided paired t statistic and p-value; ``(0, 1)`` when every difference is zero."""
    d = np.asarray(diff, dtype=float)
    if d.size < 2 or np.all(d == d[0]):
        if d.size and d[0] != 0:
            return float(np.sign(d[0]) * np.inf), 0.0
        return 0.0, 1.0
    res = stats.ttest_1samp(d, 0.0)
    return float(res.statistic), float(res.pvalue)


def _as_cov(provider, domain):
    if isinstance(provider, CovarianceMatrix):
        return provider
    if hasattr(provider, "covariance"):
        return provider.covariance(domain)
    if hasattr(provider, "cov_pred"):
        return provider.cov_pred
    raise InputError(f"cannot obtain a covariance from {type(provider).__name__}")


def compare_likelihoods(test_realizations, models) -> ScoreTable:
    """Per-realization log-likelihoods and paired statistics for every model pair ``a < b``.

    ``models`` is a mapping (or list of pairs) from name to a
    :class:`CovarianceMatrix`, a :class:`PredictionResult` or anything with a
    ``covariance(domain)`` method.
    """
    if not test_realizations:
        raise InputError("need at least one test realization")
    items = list(models.items()) if isinstance(models, dict) else list(models)
    dom = test_realizations[0].domain
    covs = [(str(n), _as_cov(p, dom)) for n, p in items]
    for n, c in covs:
        if c.n != dom.n_nodes:
            raise InputError(f"model {n!r} covariance is {c.n}x{c.n}, test grid has {dom.n_nodes} nodes")
    ll = np.array([[log_likelihood(r, c) for _, c in covs] for r in test_realizations])
    names = [n for n, _ in covs]
    pairs = []
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            d = ll[:, a] - ll[:, b]
            t, p = paired_t(d)
            sd = float(d.std(ddof=1)) if d.size > 1 else 0.0
            pairs.append(PairStats(names[a], names[b], float(d.mean()), sd, t, p, float(np.mean(d > 0))))
    return ScoreTable(names, ll, pairs)
