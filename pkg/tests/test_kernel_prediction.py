import numpy as np
import pytest
from scipy import stats
from scipy.special import gamma, kv
from scipy.stats import multivariate_normal

from covdeform.errors import ConditioningError, FitError, InputError
from covdeform.estimation import FitConfig, ModelParams
from covdeform.grid import DeformationMap, GridDomain
from covdeform.kernel import (CovarianceMatrix, IsotropicKernel, JitterPolicy, Realization, build_nonstationary_cov,
                              calibrate_unit_range, log_likelihood, matern_correlation, sample_gp)
from covdeform.prediction import (BaselineModel, compare_likelihoods, fit_ard_baseline, fit_stationary_baseline,
                                  paired_t, predict_covariance)
from covdeform.simulation import latent_interpolated_draws


def bessel_matern(r, nu):
    # textbook form, independent of the closed forms used by the package
    r = np.asarray(r, dtype=float)
    z = np.sqrt(2 * nu) * r
    out = np.ones_like(r)
    nz = z > 0
    out[nz] = 2 ** (1 - nu) / gamma(nu) * z[nz] ** nu * kv(nu, z[nz])
    return out


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_matern_matches_bessel_form(nu):
    r = np.linspace(0, 4, 41)
    assert np.allclose(matern_correlation(r, nu), bessel_matern(r, nu), atol=1e-12)


def test_unsupported_nu():
    with pytest.raises(InputError):
        matern_correlation([0.5], 1.0)


def test_calibrated_rho_shrinks_with_smoothness():
    rhos = [calibrate_unit_range("matern", nu).rho for nu in (0.5, 1.5, 2.5)]
    assert rhos[0] == pytest.approx(1.0, abs=1e-12)
    assert rhos[0] > rhos[1] > rhos[2]


def test_jitter_escalation_and_cap():
    K = np.ones((4, 4))  # rank one
    cov = CovarianceMatrix.from_matrix(K, 1.0)
    assert 0 < cov.jitter_used <= 1e-4
    with pytest.raises(ConditioningError):
        CovarianceMatrix.from_matrix(np.diag([1.0, -1.0]), 1.0)
    with pytest.raises(ConditioningError):
        CovarianceMatrix.from_matrix(K, 1.0, JitterPolicy(cap=1e-12))


def test_log_likelihood_against_scipy(rng):
    dom = GridDomain.square(6)
    cov = build_nonstationary_cov(DeformationMap.identity(dom), IsotropicKernel(2.5, 0.4, 2.0))
    y = rng.standard_normal(dom.n_nodes)
    assert log_likelihood(y, cov) == pytest.approx(multivariate_normal(cov=cov.entries).logpdf(y), rel=1e-10)
    with pytest.raises(InputError):
        log_likelihood(y[:-1], cov)


def test_likelihood_scaling_identity(rng):
    dom = GridDomain.square(5)
    k = calibrate_unit_range()
    K = build_nonstationary_cov(DeformationMap.identity(dom), k, JitterPolicy(start=1e-8, cap=1e-8))
    c = 3.7
    cK = CovarianceMatrix.from_matrix(c * K.entries, c, JitterPolicy(start=0.0, cap=0.0))
    y = rng.standard_normal(dom.n_nodes)
    assert log_likelihood(y, cK) == pytest.approx(log_likelihood(y / np.sqrt(c), K) - 0.5 * dom.n_nodes * np.log(c),
                                                  rel=1e-10)


def test_sample_gp_is_seeded():
    dom = GridDomain.square(5)
    cov = build_nonstationary_cov(DeformationMap.identity(dom), calibrate_unit_range())
    a, b = sample_gp(cov, 3, dom), sample_gp(cov, 3, dom)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, sample_gp(cov, 4, dom).values)


def test_realization_validation():
    with pytest.raises(InputError):
        Realization(GridDomain.square(3), np.zeros(8))


def test_predicted_covariance_is_valid_for_extrapolated_tau(noiseless_sim):
    sc, _ = noiseless_sim
    cfg = FitConfig()
    for tau in ([1.5, -1.2], [-0.8, 2.0]):
        pred = predict_covariance(sc.true_params(), tau, sc.kernel, cfg)
        assert pred.cov_pred.jitter_used <= 1e-6 * sc.kernel.sigma2
        assert np.allclose(pred.cov_pred.entries, pred.cov_pred.entries.T)


def test_covariance_continuous_in_tau(noiseless_sim):
    sc, _ = noiseless_sim
    dom = GridDomain.square(9)
    params = ModelParams(sc.true_fields, sc.true_params().links, DeformationMap.identity(dom), [0.0, 0.0])
    base = predict_covariance(params, [0.3, -0.5], sc.kernel).cov_pred.entries
    diffs = [np.abs(predict_covariance(params, [0.3 + h, -0.5], sc.kernel).cov_pred.entries - base).max()
             for h in (1e-2, 1e-3, 1e-4)]
    assert diffs[0] > diffs[1] > diffs[2] and diffs[2] < 1e-3


def test_zero_channel_model_reduces_to_baseline():
    dom = GridDomain.square(5)
    f0 = DeformationMap(dom, dom.nodes() * 1.3)
    params = ModelParams([], [], f0, [])
    k = calibrate_unit_range()
    pred = predict_covariance(params, [], k)
    assert np.array_equal(pred.cov_pred.entries, build_nonstationary_cov(f0, k).entries)


def stationary_draws(n, rho, sigma2, count, seed, stretch=(1.0, 1.0)):
    dom = GridDomain.square(n)
    k = IsotropicKernel(1.5, rho, sigma2)
    fmap = DeformationMap(dom, dom.nodes() / np.asarray(stretch))
    cov = build_nonstationary_cov(fmap, k)
    return dom, [sample_gp(cov, [seed, r], dom) for r in range(count)]


def test_stationary_baseline_recovers_truth():
    dom, reals = stationary_draws(15, 0.4, 1.0, 20, 1)
    b = fit_stationary_baseline(reals)
    assert b.kind == "stationary"
    assert b.rho == pytest.approx(0.4, rel=0.1)
    assert b.sigma2 == pytest.approx(1.0, rel=0.3)
    # scaling the data scales only the variance
    scaled = [Realization(dom, 2 * r.values) for r in reals]
    b2 = fit_stationary_baseline(scaled)
    assert b2.sigma2 == pytest.approx(4 * b.sigma2, rel=1e-12)
    assert b2.rho == pytest.approx(b.rho, rel=1e-12)


@pytest.mark.slow
def test_ard_baseline_sees_anisotropy():
    dom, reals = stationary_draws(12, 0.4, 1.0, 10, 2, stretch=(0.5, 1.0))
    ard = fit_ard_baseline(reals)
    rx, ry = ard.lengthscales
    assert rx / ry == pytest.approx(0.5, rel=0.2)
    iso = fit_stationary_baseline(reals)
    assert ard.loglik >= iso.loglik


def test_ard_matches_stationary_on_isotropic_data():
    dom, reals = stationary_draws(9, 0.5, 1.0, 10, 3)
    ard, iso = fit_ard_baseline(reals), fit_stationary_baseline(reals)
    assert ard.loglik >= iso.loglik - 1e-9
    rx, ry = ard.lengthscales
    assert rx / ry == pytest.approx(1.0, rel=0.25)


def test_degenerate_data_raises():
    dom = GridDomain.square(5)
    with pytest.raises(FitError):
        fit_stationary_baseline([Realization(dom, np.zeros(25))])
    with pytest.raises(InputError):
        fit_stationary_baseline([])


def test_paired_t_against_textbook(rng):
    d = rng.standard_normal(10) + 0.7
    t, p = paired_t(d)
    t_ref = d.mean() / (d.std(ddof=1) / np.sqrt(d.size))
    assert t == pytest.approx(t_ref, rel=1e-12)
    assert p == pytest.approx(2 * stats.t.sf(abs(t_ref), d.size - 1), rel=1e-10)
    assert paired_t(np.zeros(5)) == (0.0, 1.0)


def test_true_model_wins_in_expectation():
    # Gibbs: the generating covariance scores at least as well on average
    dom, reals = stationary_draws(8, 0.5, 1.0, 50, 4)
    true = build_nonstationary_cov(DeformationMap.identity(dom), IsotropicKernel(1.5, 0.5, 1.0))
    other = BaselineModel("stationary", 1.0, (0.25,)).covariance(dom)
    table = compare_likelihoods(reals, {"true": true, "other": other})
    ps = table.pair("true", "other")
    assert ps.mean_diff > 0 and ps.frac_a_better > 0.5
    assert table.logliks.shape == (50, 2)
    self_cmp = compare_likelihoods(reals, [("a", true), ("b", true)]).pair("a", "b")
    assert self_cmp.p_value == 1.0 and self_cmp.mean_diff == 0.0


def test_latent_interpolated_draws_match_exact_covariance():
    dom = GridDomain.square(6)
    fmap = DeformationMap(dom, dom.nodes() * 0.8)
    k = calibrate_unit_range()
    draws, W, fine = latent_interpolated_draws(fmap, k, 200, 0, fine=21)
    exact = W @ fine @ W.T
    emp = draws.T @ draws / draws.shape[0]
    # 200 draws leave Monte Carlo error ~0.1 per entry, so the bound is on the mean entry
    assert np.abs(emp - exact).mean() <= 0.15 * k.sigma2
    direct = build_nonstationary_cov(fmap, k).entries
    assert np.linalg.norm(exact - direct) / np.linalg.norm(direct) < 0.05
