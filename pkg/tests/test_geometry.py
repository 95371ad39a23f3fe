import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covdeform.errors import DivergenceError, InputError
from covdeform.flow import (FlowConfig, apply_flow, compose_covariate_flows, exp_map, fold_condition_check,
                            jacobian_determinant, lie_bracket)
from covdeform.grid import DeformationMap, GridDomain
from covdeform.links import LinkFunction
from covdeform.simulation import AnalyticField
from covdeform.spline import VelocityField


def test_grid_nodes_ordering():
    dom = GridDomain(-1, 1, 0, 2, 3, 5)
    nodes = dom.nodes()
    assert nodes.shape == (15, 2)
    # row-major in (i, j)
    assert np.allclose(nodes[1], dom.node(0, 1))
    assert np.allclose(dom.spacing, (1.0, 0.5))
    assert np.allclose(DeformationMap.identity(dom).grid_coords()[2, 4], (1, 2))


def test_grid_rejects_degenerate():
    with pytest.raises(InputError):
        GridDomain(1, 1, 0, 1, 3, 3)
    with pytest.raises(InputError):
        GridDomain.square(1)


def test_deformation_map_shape_checked():
    dom = GridDomain.square(4)
    with pytest.raises(InputError):
        DeformationMap(dom, np.zeros((15, 2)))
    with pytest.raises(InputError):
        DeformationMap(dom, np.full((16, 2), np.nan))


def test_spline_reproduces_polynomials():
    dom = GridDomain.square(9)
    V = VelocityField.from_function(lambda p: np.column_stack([p[:, 0] ** 3 - p[:, 1], p[:, 0] * p[:, 1] ** 2]), dom)
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    want = np.column_stack([pts[:, 0] ** 3 - pts[:, 1], pts[:, 0] * pts[:, 1] ** 2])
    assert np.allclose(V.evaluate(pts), want, atol=1e-10)
    J = V.jacobian(pts)
    assert np.allclose(J[:, 0, 0], 3 * pts[:, 0] ** 2, atol=1e-9)
    assert np.allclose(J[:, 1, 1], 2 * pts[:, 0] * pts[:, 1], atol=1e-9)


def test_spline_jacobian_matches_fd(rng):
    dom = GridDomain.square(5)
    V = VelocityField(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)), 3, dom.padded(0.2))
    pts = rng.uniform(-1, 1, (20, 2))
    h = 1e-6
    J = V.jacobian(pts)
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (V.evaluate(pts + e) - V.evaluate(pts - e)) / (2 * h)
        assert np.allclose(J[:, :, k], fd, atol=1e-6)


def test_spline_zero_outside_support():
    dom = GridDomain.square(5)
    V = VelocityField.constant(1.0, 2.0, dom)
    assert np.allclose(V.evaluate([[0.0, 0.0]]), [[1.0, 2.0]])
    assert np.allclose(V.evaluate([[5.0, 0.0], [0.0, -1.5]]), 0.0)


def test_spline_vector_round_trip(rng):
    dom = GridDomain.square(5)
    V = VelocityField.zeros(dom)
    vec = rng.standard_normal(V.n_params)
    W = V.with_vector(vec)
    assert np.array_equal(W.to_vector(), vec)
    assert W.same_layout(V)


def test_spline_needs_enough_controls():
    with pytest.raises(InputError):
        VelocityField(np.zeros((3, 3)), np.zeros((3, 3)), 3)


def test_links():
    x = np.linspace(-1, 1, 11)
    assert np.array_equal(LinkFunction.identity()(x), x)
    assert np.allclose(LinkFunction.linear(2.0)(x), 2 * x)
    g = LinkFunction.monotone_pl([0.0], [1.0, 3.0])
    assert g(0.0) == 0.0
    assert np.isclose(g(0.5), 1.5) and np.isclose(g(-0.5), -0.5)
    assert np.all(np.diff(g(x)) > 0)
    assert g.max_slope(-1.0, -0.5) == 1.0 and np.isclose(g.max_slope(-1.0, 1.0), 3.0)
    assert np.allclose(LinkFunction.from_dict(g.to_dict())(x), g(x))


def test_link_param_grad_fd(rng):
    g = LinkFunction.monotone_pl([-0.3, 0.2], np.exp(rng.standard_normal(3)))
    x = rng.uniform(-1, 1, 9)
    G = g.param_grad(x)
    h = 1e-6
    for k in range(g.n_params):
        e = np.zeros(g.n_params)
        e[k] = h
        fd = (g.with_params(g.raw + e)(x) - g.with_params(g.raw - e)(x)) / (2 * h)
        assert np.allclose(G[:, k], fd, atol=1e-8)


@pytest.mark.parametrize("bad", [lambda: LinkFunction.linear(0.0), lambda: LinkFunction.monotone_pl([0.2, 0.1]),
                                 lambda: LinkFunction.monotone_pl([0.0], [1.0, -1.0]), lambda: LinkFunction("cubic")])
def test_link_validation(bad):
    with pytest.raises(InputError):
        bad()


def test_jacobian_determinant_affine():
    dom = GridDomain.square(6)
    A = np.array([[1.5, 0.3], [-0.2, 0.8]])
    fmap = DeformationMap(dom, dom.nodes() @ A.T + 0.1)
    det = jacobian_determinant(fmap)
    assert det.shape == (5, 5)
    assert np.allclose(det, np.linalg.det(A))


def test_flows_preserve_orientation():
    dom = GridDomain.square(17)
    fields = [VelocityField.from_function(AnalyticField(m).evaluate, dom) for m in (1, 2)]
    links = [LinkFunction.identity()] * 2
    out = compose_covariate_flows(fields, links, [0.8, 0.7], DeformationMap.identity(dom))
    assert jacobian_determinant(out).min() > 0


def test_bracket_of_noncommuting_fields():
    # [d/dx, x d/dy] = d/dy
    V = lambda p: np.tile([1.0, 0.0], (len(np.atleast_2d(p)), 1))
    W = lambda p: np.column_stack([np.zeros(len(np.atleast_2d(p))), np.atleast_2d(p)[:, 0]])
    dom = GridDomain.square(9)
    Sv, Sw = VelocityField.from_function(V, dom), VelocityField.from_function(W, dom)
    br = lie_bracket(Sv, Sw, dom.nodes())
    assert np.allclose(br, [0.0, 1.0], atol=1e-10)
    assert not np.allclose(lie_bracket(AnalyticField(1), Sw, dom.nodes()), 0.0)


def test_divergence_reported_with_node():
    dom = GridDomain.square(5)
    V = VelocityField.constant(1.0, 0.0, dom)
    with pytest.raises(DivergenceError) as err:
        apply_flow(V, 1e3, DeformationMap.identity(dom), FlowConfig(8, safety_box=(-2, 2, -2, 2)))
    assert err.value.node is not None


def test_channel_count_mismatch():
    dom = GridDomain.square(5)
    with pytest.raises(InputError):
        compose_covariate_flows([VelocityField.zeros(dom)], [], [0.1], DeformationMap.identity(dom))


def test_fold_condition():
    dom = GridDomain.square(9)
    V = VelocityField.constant(1.0, 0.0, dom)
    tau = dom.nodes()[:, 0] * 0.5
    ok = fold_condition_check(LinkFunction.identity(), tau, V, dom)
    assert ok.passed and np.isclose(ok.min_condition, 1.5) and np.isclose(ok.lipschitz, 0.5)
    bad = fold_condition_check(LinkFunction.linear(4.0), -tau, V, dom)
    assert not bad.passed and np.isclose(bad.min_condition, -1.0)


@settings(max_examples=30, deadline=None)
@given(s=st.floats(-1, 1), t=st.floats(-1, 1), x=st.floats(-0.9, 0.9), y=st.floats(-0.9, 0.9))
def test_exp_map_group_law(s, t, x, y):
    V = AnalyticField(2)
    cfg = FlowConfig(64)
    a = exp_map(V, s + t, (x, y), cfg)
    b = exp_map(V, t, exp_map(V, s, (x, y), cfg), cfg)
    assert np.allclose(a, b, atol=1e-6)


def test_bracket_of_linear_shears():
    dom = GridDomain.square(9)
    Va = VelocityField.from_function(lambda p: np.column_stack([p[:, 1], 0 * p[:, 0]]), dom)
    Vb = VelocityField.from_function(lambda p: np.column_stack([0 * p[:, 0], p[:, 0]]), dom)
    assert np.allclose(lie_bracket(Va, Vb, np.array([1.0, 1.0])), [-1.0, 1.0], atol=1e-10)


def test_flow_matches_fine_euler_oracle():
    dom = GridDomain.square(9)
    V = AnalyticField(1)
    out = apply_flow(V, 0.5, DeformationMap.identity(dom), FlowConfig(64)).coords
    x = dom.nodes().copy()
    n = 200_000
    for _ in range(n):
        x = x + (0.5 / n) * V.evaluate(x)
    assert np.abs(out - x).max() < 1e-5  # Euler global error is first order: ~1e-5 at this step count
    assert np.allclose(apply_flow(VelocityField.constant(0.0, 1.0, dom), 0.25, DeformationMap.identity(dom)).coords,
                       dom.nodes() + [0.0, 0.25])


@pytest.mark.parametrize("degree,nc", [(3, 8), (2, 3), (3, 4)])
def test_spline_matches_scipy_bspline(degree, nc, rng):
    from scipy.interpolate import BSpline
    dom = GridDomain.square(5)
    V = VelocityField(rng.standard_normal((nc, nc)), rng.standard_normal((nc, nc)), degree, dom.padded(0.2))
    pts = rng.uniform(-1.3, 1.3, (30, 2))
    Bx = BSpline.design_matrix(pts[:, 0], V.knots_x, degree).toarray()
    By = BSpline.design_matrix(pts[:, 1], V.knots_y, degree).toarray()
    want_x = np.einsum("na,ab,nb->n", Bx, V.coeffs_x, By)
    want_y = np.einsum("na,ab,nb->n", Bx, V.coeffs_y, By)
    assert np.allclose(V.evaluate(pts), np.column_stack([want_x, want_y]), atol=1e-12)
