"""Exponential-map flows of velocity fields, their composition, and validity diagnostics.

A "field" here is anything exposing ``evaluate(points) -> (N, 2)`` and
``jacobian(points) -> (N, 2, 2)`` (Jacobian indexed ``[n, component, axis]``)
plus a ``bounds`` rectangle. :class:`~covdeform.spline.VelocityField`
instances are integrated by the compiled (or numpy) kernel backend; any other
field goes through a generic numpy RK4 loop.

All flows integrate the amount-scaled field ``dx/dt = a * V(x)`` over unit
time with fixed-step RK4. Per-node amounts are frozen at the start point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import DivergenceError, InputError
from .grid import DeformationMap, GridDomain
from .links import LinkFunction
from .spline import VelocityField


@dataclass(frozen=True)
class FlowConfig:
    rk4_steps: int = 32
    # (x_min, x_max, y_min, y_max); None derives a box 10x the reference extent
    safety_box: tuple | None = None

    def __post_init__(self):
        if int(self.rk4_steps) < 1:
            raise InputError(f"rk4_steps must be >= 1, got {self.rk4_steps}")


def _box_around(bounds, factor=10.0):
    x0, x1, y0, y1 = bounds
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    half = 0.5 * factor * max(x1 - x0, y1 - y0)
    return (cx - half, cx + half, cy - half, cy + half)


def _resolve_box(cfg: FlowConfig, field, domain: GridDomain | None = None):
    if cfg.safety_box is not None:
        return tuple(float(v) for v in cfg.safety_box)
    if domain is not None:
        return domain.safety_box(10.0)
    return _box_around(getattr(field, "bounds", (-1.0, 1.0, -1.0, 1.0)))


def _as_points(point):
    p = np.atleast_2d(np.asarray(point, dtype=float))
    if p.shape[-1] != 2:
        raise InputError(f"points must be coordinate pairs, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InputError("points must be finite")
    return p


def _rk4_generic(field, points, amounts, steps, box):
    x = points.copy()
    a = amounts[:, None]
    h = 1.0 / steps
    for _ in range(steps):
        k1 = a * field.evaluate(x)
        k2 = a * field.evaluate(x + 0.5 * h * k1)
        k3 = a * field.evaluate(x + 0.5 * h * k2)
        k4 = a * field.evaluate(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        bad = (~np.all(np.isfinite(x), axis=1) | (x[:, 0] < box[0]) | (x[:, 0] > box[1])
               | (x[:, 1] < box[2]) | (x[:, 1] > box[3]))
        if bad.any():
            return x, int(np.flatnonzero(bad)[0])
    return x, -1


def integrate(field, points, amounts, cfg: FlowConfig = FlowConfig(), box=None):
    """Endpoints of the flows of ``amounts[n] * field`` started at ``points[n]``.

    Raises :class:`DivergenceError` (with ``.node`` set to the flat point
    index) if any trajectory leaves the safety box.
    """
    pts = _as_points(points)
    amt = np.broadcast_to(np.asarray(amounts, dtype=float), (pts.shape[0],)).copy()
    if not np.all(np.isfinite(amt)):
        raise InputError("flow amounts must be finite")
    box = box if box is not None else _resolve_box(cfg, field)
    steps = int(cfg.rk4_steps)
    if isinstance(field, VelocityField):
        end, _, bad = _backend.for_degree(field.degree).flow_forward(
            pts, amt, field.coeffs, field.knots_x, field.knots_y, field.degree, steps, box, False)
    else:
        end, bad = _rk4_generic(field, pts, amt, steps, box)
    if bad >= 0:
        raise DivergenceError(f"trajectory of point {bad} left the safety box {box}", node=bad)
    return end


def eval_velocity(field, point) -> tuple[float, float]:
    v = field.evaluate(_as_points(point))[0]
    return (float(v[0]), float(v[1]))


def exp_map(field, amount: float, point, cfg: FlowConfig = FlowConfig()) -> tuple[float, float]:
    """Time-1 flow of ``amount * field`` applied to one point."""
    if not np.isfinite(amount):
        raise InputError("amount must be finite")
    end = integrate(field, point, amount, cfg)[0]
    return (float(end[0]), float(end[1]))


def apply_flow(field, amounts, fmap: DeformationMap, cfg: FlowConfig = FlowConfig()) -> DeformationMap:
    """Compose ``exp(a(s) V)`` after ``fmap``: every mapped coordinate is flowed by its node's amount."""
    amounts = np.asarray(amounts, dtype=float)
    n = fmap.domain.n_nodes
    if amounts.ndim == 0:
        amounts = np.full(n, float(amounts))
    amounts = amounts.reshape(-1)
    if amounts.size != n:
        raise InputError(f"need one amount per node ({n}), got {amounts.size}")
    box = _resolve_box(cfg, field, fmap.domain)
    try:
        end = integrate(field, fmap.coords, amounts, cfg, box=box)
    except DivergenceError as exc:
        i, j = divmod(exc.node, fmap.domain.ny)
        raise DivergenceError(f"flow diverged at node (i={i}, j={j})", node=(i, j)) from None
    return DeformationMap(fmap.domain, end)


def channel_amounts(link: LinkFunction, delta_tau, n_nodes: int) -> np.ndarray:
    """Per-node effective amounts ``g(delta_tau)`` for one channel (scalar or per-node shift)."""
    dt = np.asarray(delta_tau, dtype=float)
    if dt.ndim == 0:
        return np.full(n_nodes, float(link(dt)))
    dt = dt.reshape(-1)
    if dt.size != n_nodes:
        raise InputError(f"per-node covariate shift needs {n_nodes} values, got {dt.size}")
    return link(dt)


def compose_covariate_flows(fields, links, delta_tau, f0: DeformationMap,
                            cfg: FlowConfig = FlowConfig(), order=None) -> DeformationMap:
    """Apply ``exp(g_m(dtau_m) V_m)`` for each channel, in index order, after ``f0``.

    ``order`` overrides the channel order (used to check order invariance).
    """
    p = len(fields)
    if not (len(links) == p and len(delta_tau) == p):
        raise InputError(
            f"channel count mismatch: {p} fields, {len(links)} links, {len(delta_tau)} shifts")
    out = f0.copy()
    for m in (range(p) if order is None else order):
        amounts = channel_amounts(links[m], delta_tau[m], f0.domain.n_nodes)
        if not np.any(amounts):
            continue
        out = apply_flow(fields[m], amounts, out, cfg)
    return out


def lie_bracket(Vm, Vn, points) -> np.ndarray:
    """``[Vm, Vn] = (grad Vn) Vm - (grad Vm) Vn`` at each point, shape ``(N, 2)``.

    A single point returns a length-2 array.
    """
    pts = _as_points(points)
    vm, jm = _value_and_jacobian(Vm, pts)
    vn, jn = _value_and_jacobian(Vn, pts)
    br = np.einsum("nij,nj->ni", jn, vm) - np.einsum("nij,nj->ni", jm, vn)
    return br[0] if np.asarray(points).ndim == 1 else br


def _value_and_jacobian(field, pts):
    if hasattr(field, "evaluate_with_jacobian"):
        return field.evaluate_with_jacobian(pts)
    return field.evaluate(pts), field.jacobian(pts)


def commutator_loop_defect(Vm, Vn, s: float, t: float, point, cfg: FlowConfig = FlowConfig()) -> np.ndarray:
    """Displacement after the loop ``phi^n_{-t} o phi^m_{-s} o phi^n_t o phi^m_s``.

    To leading order this equals ``s * t * [Vm, Vn](point)``.
    """
    if not (np.isfinite(s) and np.isfinite(t)):
        raise InputError("loop parameters must be finite")
    p0 = _as_points(point)
    x = integrate(Vm, p0, s, cfg)
    x = integrate(Vn, x, t, cfg)
    x = integrate(Vm, x, -s, cfg)
    x = integrate(Vn, x, -t, cfg)
    d = x - p0
    return d[0] if np.asarray(point).ndim == 1 else d


def jacobian_determinant(fmap: DeformationMap) -> np.ndarray:
    """Discrete Jacobian determinant of ``fmap`` at each cell centre, shape ``(nx - 1, ny - 1)``.

    Derivatives are central differences about the cell centre (the average of
    the two parallel cell edges), exact for affine maps.
    """
    hx, hy = fmap.domain.spacing
    if not (hx > 0 and hy > 0):
        raise InputError("degenerate grid spacing")
    P = fmap.grid_coords()
    d_i = 0.5 * ((P[1:, :-1] - P[:-1, :-1]) + (P[1:, 1:] - P[:-1, 1:])) / hx
    d_j = 0.5 * ((P[:-1, 1:] - P[:-1, :-1]) + (P[1:, 1:] - P[1:, :-1])) / hy
    return d_i[..., 0] * d_j[..., 1] - d_i[..., 1] * d_j[..., 0]


@dataclass
class FoldReport:
    lipschitz: float
    max_link_slope: float
    bound_product: float
    min_condition: float
    passed: bool

    def to_dict(self) -> dict:
        return {"lipschitz": self.lipschitz, "max_link_slope": self.max_link_slope,
                "bound_product": self.bound_product, "min_condition": self.min_condition,
                "passed": self.passed}


def fold_condition_check(link: LinkFunction, tau_field, V, domain: GridDomain) -> FoldReport:
    """Grid check of ``1 + g'(dtau(w)) <grad dtau(w), V(w)> > 0``.

    ``tau_field`` holds the per-node covariate shift. The Lipschitz constant
    is the grid maximum of ``|grad dtau|``; ``bound_product`` is
    ``sup|g'| * L`` (below 1 is the sufficient no-fold bound).
    """
    tau = np.asarray(tau_field, dtype=float).reshape(-1)
    if tau.size != domain.n_nodes:
        raise InputError(f"covariate field needs {domain.n_nodes} values, got {tau.size}")
    T = tau.reshape(domain.shape)
    hx, hy = domain.spacing
    gx, gy = np.gradient(T, hx, hy)
    grad = np.column_stack([gx.ravel(), gy.ravel()])
    L = float(np.max(np.hypot(grad[:, 0], grad[:, 1])))
    slope = link.max_slope(float(tau.min()), float(tau.max()))
    v = V.evaluate(domain.nodes())
    cond = 1.0 + link.derivative(tau) * np.einsum("ni,ni->n", grad, v)
    mn = float(cond.min())
    return FoldReport(L, float(slope), float(slope * L), mn, bool(mn > 0))
