from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from covdeform.errors import InputError
from covdeform.estimation import (FitConfig, ModelParams, TrainingSample, fit, init_params, loss_and_gradient,
                                  mapping_loss, pack, predict_deformation, unpack)
from covdeform.flow import lie_bracket
from covdeform.grid import DeformationMap, GridDomain
from covdeform.links import LinkFunction
from covdeform.simulation import AnalyticField, Scenario, generate_dataset
from covdeform.spline import VelocityField

from test_acceptance import fd_gradient, gradient_instance, gradient_rel_err


def small_problem(n=9, noise=0.0):
    sc = Scenario(domain=GridDomain.square(n), noise_sd=noise, truth_rk4_steps=64)
    return sc, generate_dataset(sc)


@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_fd(seed):
    params, data = gradient_instance(seed)
    _, g = loss_and_gradient(params, data)
    assert gradient_rel_err(g, fd_gradient(params, data)) <= 1e-4


def test_bracket_penalty_gradient(rng):
    dom = GridDomain.square(5)
    fields = [VelocityField(0.3 * rng.standard_normal((4, 4)), 0.3 * rng.standard_normal((4, 4)), 3,
                            dom.padded(0.2)) for _ in range(2)]
    params = ModelParams(fields, [LinkFunction.linear(1.2), LinkFunction.identity()],
                         DeformationMap.identity(dom), [0.0, 0.0])
    f_emp = DeformationMap(dom, dom.nodes() + 0.05 * rng.standard_normal((25, 2)))
    data = [TrainingSample([0.4, -0.3], f_emp), TrainingSample([0.7, 0.2], f_emp)]
    cfg = FitConfig(bracket_penalty_weight=0.5)
    loss, g = loss_and_gradient(params, data, cfg)
    assert loss > mapping_loss(params, data)
    x = pack(params)
    h = 1e-6
    fd = np.array([(mapping_loss(unpack(params, x + h * e), data, cfg)
                    - mapping_loss(unpack(params, x - h * e), data, cfg)) / (2 * h) for e in np.eye(x.size)])
    assert np.allclose(g, fd, rtol=1e-4, atol=1e-9)


def test_true_params_have_near_zero_loss():
    sc, sim = small_problem()
    assert mapping_loss(sc.true_params(), sim.samples) < 1e-12


def test_fit_recovers_fields_on_small_grid():
    sc, sim = small_problem()
    res = fit(sim.samples, 2, FitConfig(max_iters=400, convergence_tol=1e-5))
    assert res.trace[-1] < 0.01 * res.trace[0]
    nodes = sc.domain.nodes()
    for V, true in zip(res.params.fields, sc.true_fields):
        t = true.evaluate(nodes)
        assert np.sqrt(np.sum((V.evaluate(nodes) - t) ** 2) / np.sum(t ** 2)) < 0.25


def test_linear_slope_recovered_with_frozen_field():
    dom = GridDomain.square(9)
    V = VelocityField.from_function(AnalyticField(1).evaluate, dom)
    truth = ModelParams([V], [LinkFunction.linear(2.0)], DeformationMap.identity(dom), [0.0])
    data = [TrainingSample([t], predict_deformation(truth, [t])) for t in (0.0, 0.1, 0.25)]
    init = ModelParams([V], [LinkFunction.linear(1.0)], DeformationMap.identity(dom), [0.0])
    res = fit(data, 1, FitConfig(max_iters=600, convergence_tol=1e-8, freeze_fields=True), init=init)
    assert res.params.links[0].alpha == pytest.approx(2.0, rel=1e-3)
    assert np.array_equal(res.params.fields[0].coeffs, V.coeffs)


def test_single_shift_level_freezes_slope():
    dom = GridDomain.square(5)
    f = DeformationMap(dom, dom.nodes() * 1.01)
    data = [TrainingSample([0.0], DeformationMap.identity(dom)), TrainingSample([0.3], f)]
    res = fit(data, 1, FitConfig(max_iters=30, link="linear"))
    assert res.params.links[0].alpha == 1.0


def test_auto_link_rule():
    sc, sim = small_problem(5)
    assert all(g.kind == "identity" for g in init_params(sim.samples, 2, FitConfig()).links)
    many = sim.samples + sim.samples[1:3]
    assert all(g.kind == "monotone_pl" for g in init_params(many, 2, FitConfig()).links)


def test_loss_invariant_to_sample_order(rng):
    sc, sim = small_problem(noise=0.01)
    params = init_params(sim.samples, 2, FitConfig())
    params.fields = [V.with_vector(0.1 * rng.standard_normal(V.n_params)) for V in params.fields]
    l1, g1 = loss_and_gradient(params, sim.samples)
    l2, g2 = loss_and_gradient(params, sim.samples[::-1])
    assert l1 == pytest.approx(l2, rel=1e-13)
    assert np.allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_fit_is_deterministic_and_threads_agree():
    _, sim = small_problem(noise=0.002)
    cfg = FitConfig(max_iters=40)
    a = fit(sim.samples, 2, cfg)
    b = fit(sim.samples, 2, cfg)
    assert a.trace == b.trace
    with ThreadPoolExecutor(2) as ex:
        c = fit(sim.samples, 2, cfg, executor=ex)
    assert a.trace == c.trace
    assert np.array_equal(pack(a.params), pack(c.params))


def test_zero_iterations_keep_baseline():
    _, sim = small_problem(noise=0.002)
    res = fit(sim.samples, 2, FitConfig(max_iters=0))
    assert res.trace == [] and res.n_iter == 0
    assert np.array_equal(res.params.f0.coords, sim.samples[0].f_emp.coords)
    assert not np.any(pack(res.params))


def test_fit_callback_and_best_iterate():
    _, sim = small_problem(noise=0.002)
    seen = []
    res = fit(sim.samples, 2, FitConfig(max_iters=25), callback=lambda it, p, loss: seen.append(loss))
    assert seen == res.trace
    assert mapping_loss(res.params, sim.samples) == pytest.approx(min(res.trace), rel=1e-12)


def test_input_validation():
    _, sim = small_problem(5)
    with pytest.raises(InputError):
        fit(sim.samples[:1], 2)
    with pytest.raises(InputError):
        fit(sim.samples, 3)
    with pytest.raises(InputError):
        mapping_loss(ModelParams([], [], sim.samples[0].f_emp, []), [])
    with pytest.raises(InputError):
        init_params(sim.samples, 2, FitConfig(baseline_index=7))


def test_bracket_penalty_does_not_increase_bracket():
    sc, sim = small_problem(noise=0.002)
    nodes = sc.domain.nodes()
    worst = []
    for lam in (0.0, 1.0):
        res = fit(sim.samples, 2, FitConfig(max_iters=150, bracket_penalty_weight=lam))
        V1, V2 = res.params.fields
        worst.append(np.linalg.norm(lie_bracket(V1, V2, nodes), axis=1).max())
    assert worst[1] <= worst[0]
