"""Ground-truth simulation scenario with two commuting analytic velocity fields.

Fields: ``V1(s) = (sin(pi s_x), 0)`` and ``V2(s) = (0, exp(-5 s_y^2))`` on
``[-1, 1]^2``. Training design (rows k = 1..4) and the held-out condition::

    k      1    2    3    4    new
    tau1  0.0  0.5  0.8  0.4   0.3
    tau2  0.0  0.1  0.1  0.7  -0.5
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import InputError
from .estimation import ModelParams, TrainingSample
from .flow import FlowConfig, compose_covariate_flows
from .grid import DeformationMap, GridDomain
from .kernel import (CovarianceMatrix, IsotropicKernel, Realization, build_nonstationary_cov,
                     calibrate_unit_range, sample_gp)
from .links import LinkFunction

TRAIN_DESIGN = ((0.0, 0.0), (0.5, 0.1), (0.8, 0.1), (0.4, 0.7))
TAU_NEW = (0.3, -0.5)
TRUTH_RK4_STEPS = 256


class AnalyticField:
    """Closed-form velocity field with exact derivatives."""

    bounds = (-1.0, 1.0, -1.0, 1.0)

    def __init__(self, which: int):
        if which not in (1, 2):
            raise InputError(f"analytic field must be 1 or 2, got {which}")
        self.which = which

    def evaluate(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros_like(p)
        if self.which == 1:
            out[:, 0] = np.sin(np.pi * p[:, 0])
        else:
            out[:, 1] = np.exp(-5.0 * p[:, 1] ** 2)
        return out

    def jacobian(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        J = np.zeros((p.shape[0], 2, 2))
        if self.which == 1:
            J[:, 0, 0] = np.pi * np.cos(np.pi * p[:, 0])
        else:
            J[:, 1, 1] = -10.0 * p[:, 1] * np.exp(-5.0 * p[:, 1] ** 2)
        return J

    def __repr__(self):
        return f"AnalyticField({self.which})"


def analytic_field(which: int, point) -> tuple[float, float]:
    v = AnalyticField(which).evaluate(point)[0]
    return (float(v[0]), float(v[1]))


@dataclass
class Scenario:
    domain: GridDomain = field(default_factory=lambda: GridDomain.square(33))
    design: tuple = TRAIN_DESIGN
    tau_new: tuple = TAU_NEW
    kernel: IsotropicKernel = field(default_factory=lambda: calibrate_unit_range("matern", 1.5, 1.0))
    noise_sd: float = 0.002
    seed: int = 0
    truth_rk4_steps: int = TRUTH_RK4_STEPS
    n_test_realizations: int = 0
    emit_realizations: bool = False

    def __post_init__(self):
        self.design = tuple(tuple(float(v) for v in row) for row in self.design)
        self.tau_new = tuple(float(v) for v in self.tau_new)
        if any(len(r) != 2 for r in self.design) or len(self.tau_new) != 2:
            raise InputError("scenario design rows need exactly 2 channels")
        d = self.domain
        if (d.x_max - d.x_min) != (d.y_max - d.y_min) or d.nx != d.ny:
            raise InputError("scenario domain must be square")
        if self.noise_sd < 0:
            raise InputError("noise_sd must be non-negative")

    @property
    def true_fields(self):
        return [AnalyticField(1), AnalyticField(2)]

    def true_params(self) -> ModelParams:
        """Ground-truth model: analytic fields, identity links, identity baseline at row 1."""
        return ModelParams(self.true_fields, [LinkFunction.identity(), LinkFunction.identity()],
                           DeformationMap.identity(self.domain), list(self.design[0]), 0)


def true_deformation(scenario: Scenario, tau, steps: int | None = None) -> DeformationMap:
    """Order-(1, 2) composition of analytic flows with shifts ``tau - tau_0`` applied to the identity."""
    steps = steps or scenario.truth_rk4_steps
    base = scenario.design[0]
    dt = [float(tau[0]) - base[0], float(tau[1]) - base[1]]
    return compose_covariate_flows(scenario.true_fields, [LinkFunction.identity()] * 2, dt,
                                   DeformationMap.identity(scenario.domain), FlowConfig(steps))


def _row_seed(seed, k):
    return np.random.SeedSequence([int(seed), 1000 + k])


@dataclass
class SimulatedDataset:
    scenario: Scenario
    samples: list
    true_maps: list
    truth_map: DeformationMap
    truth_cov: CovarianceMatrix
    realizations: list = field(default_factory=list)  # one per training row, or empty
    test_realizations: list = field(default_factory=list)


def generate_dataset(scenario: Scenario) -> SimulatedDataset:
    """Training samples (optionally noisy), the held-out truth, and optional GP draws.

    Random streams are derived per row from ``scenario.seed``, so regeneration
    is bitwise identical.
    """
    samples, maps, reals = [], [], []
    for k, tau in enumerate(scenario.design):
        fk = true_deformation(scenario, tau)
        maps.append(fk)
        coords = fk.coords
        if scenario.noise_sd > 0:
            rng = np.random.default_rng(_row_seed(scenario.seed, k))
            coords = coords + scenario.noise_sd * rng.standard_normal(coords.shape)
        samples.append(TrainingSample(list(tau), DeformationMap(scenario.domain, coords)))
        if scenario.emit_realizations:
            cov = build_nonstationary_cov(fk, scenario.kernel)
            reals.append(sample_gp(cov, _row_seed(scenario.seed, 100 + k), scenario.domain))
    truth_map = true_deformation(scenario, scenario.tau_new)
    truth_cov = build_nonstationary_cov(truth_map, scenario.kernel)
    tests = [sample_gp(truth_cov, _row_seed(scenario.seed, 10_000 + r), scenario.domain)
             for r in range(scenario.n_test_realizations)]
    return SimulatedDataset(scenario, samples, maps, truth_map, truth_cov, reals, tests)


def latent_interpolated_draws(fmap: DeformationMap, kernel: IsotropicKernel, n_draws: int,
                              seed, fine: int = 41, margin: float = 0.05):
    """``Y(s) = Z(f(s))`` by sampling ``Z`` on a fine latent lattice and interpolating bilinearly.

    Returns ``(draws, W, fine_cov)``: an ``(n_draws, n_nodes)`` array, the
    interpolation matrix and the latent covariance, so the exact covariance of
    the construction is ``W @ fine_cov @ W.T``.
    """
    c = fmap.coords
    lo = c.min(axis=0) - margin
    hi = c.max(axis=0) + margin
    latent = GridDomain(lo[0], hi[0], lo[1], hi[1], fine, fine)
    fine_cov = build_nonstationary_cov(DeformationMap.identity(latent), kernel)
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n_draws, latent.n_nodes)) @ fine_cov.chol.T
    xs, ys = latent.axes()
    # interpolation is linear in the latent values: interpolate the identity basis
    basis = np.eye(latent.n_nodes).reshape(fine, fine, latent.n_nodes)
    W = RegularGridInterpolator((xs, ys), basis)(c)
    return Z @ W.T, W, fine_cov.entries
