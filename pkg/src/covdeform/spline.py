"""Tensor-product B-spline velocity fields with compact support."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend
from ._pykernels import _basis_1d
from .errors import InputError
from .grid import GridDomain


def clamped_uniform_knots(lo: float, hi: float, n_ctrl: int, degree: int) -> np.ndarray:
    """Clamped knot vector with uniformly spaced interior knots (length ``n_ctrl + degree + 1``)."""
    if n_ctrl < degree + 1:
        raise InputError(f"need at least degree + 1 = {degree + 1} control points, got {n_ctrl}")
    inner = np.linspace(lo, hi, n_ctrl - degree + 1)
    return np.concatenate([np.full(degree, lo), inner, np.full(degree, hi)])


def collocation_matrix(u: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """Dense ``(len(u), n_ctrl)`` matrix of basis values at ``u`` (all inside the knot span)."""
    n_ctrl = len(knots) - degree - 1
    first, N, _ = _basis_1d(np.asarray(u, dtype=float), knots, degree)
    B = np.zeros((len(u), n_ctrl))
    rows = np.arange(len(u))[:, None]
    B[rows, first[:, None] + np.arange(degree + 1)[None, :]] = N
    return B


@dataclass
class VelocityField:
    """Vector field ``V(w) = sum_ab B_a(w_x) B_b(w_y) c_ab`` on ``knot_domain``, zero outside.

    Parameters
    ----------
    coeffs_x, coeffs_y : ndarray, shape (ncx, ncy)
        Control coefficients of the x- and y-components.
    degree : int
        Spline degree in both directions (3 = cubic).
    knot_domain : tuple
        ``(x_min, x_max, y_min, y_max)`` of the support rectangle.
    """

    coeffs_x: np.ndarray = field(repr=False)
    coeffs_y: np.ndarray = field(repr=False)
    degree: int = 3
    knot_domain: tuple = (-1.4, 1.4, -1.4, 1.4)

    def __post_init__(self):
        self.coeffs_x = np.ascontiguousarray(self.coeffs_x, dtype=float)
        self.coeffs_y = np.ascontiguousarray(self.coeffs_y, dtype=float)
        if self.coeffs_x.ndim != 2 or self.coeffs_x.shape != self.coeffs_y.shape:
            raise InputError(
                f"component coefficient grids must share a 2-D shape, got {self.coeffs_x.shape} "
                f"and {self.coeffs_y.shape}")
        self.degree = int(self.degree)
        self.knot_domain = tuple(float(v) for v in self.knot_domain)
        x0, x1, y0, y1 = self.knot_domain
        if not (x0 < x1 and y0 < y1):
            raise InputError(f"degenerate knot domain {self.knot_domain}")
        ncx, ncy = self.coeffs_x.shape
        self.knots_x = clamped_uniform_knots(x0, x1, ncx, self.degree)
        self.knots_y = clamped_uniform_knots(y0, y1, ncy, self.degree)

    # -- construction -------------------------------------------------

    @classmethod
    def zeros(cls, domain: GridDomain, n_ctrl=(8, 8), degree: int = 3, padding: float = 0.2):
        if np.isscalar(n_ctrl):
            n_ctrl = (int(n_ctrl), int(n_ctrl))
        return cls(np.zeros(n_ctrl), np.zeros(n_ctrl), degree, domain.padded(padding))

    @classmethod
    def from_function(cls, fn, domain: GridDomain, n_ctrl=(8, 8), degree: int = 3,
                      padding: float = 0.2, n_samples: int | None = None):
        """Least-squares projection of ``fn`` onto the spline space.

        ``fn`` maps an ``(N, 2)`` array of points to ``(N, 2)`` vectors. The fit
        uses a tensor grid of samples over the knot domain, so it is exact for
        fields already in the space and keeps separable fields separable.
        """
        if np.isscalar(n_ctrl):
            n_ctrl = (int(n_ctrl), int(n_ctrl))
        proto = cls.zeros(domain, n_ctrl, degree, padding)
        x0, x1, y0, y1 = proto.knot_domain
        mx = n_samples or max(6 * n_ctrl[0], 64)
        my = n_samples or max(6 * n_ctrl[1], 64)
        ux = np.linspace(x0, x1, mx)
        uy = np.linspace(y0, y1, my)
        Bx = collocation_matrix(ux, proto.knots_x, degree)
        By = collocation_matrix(uy, proto.knots_y, degree)
        X, Y = np.meshgrid(ux, uy, indexing="ij")
        vals = np.asarray(fn(np.column_stack([X.ravel(), Y.ravel()])), dtype=float)
        Px = np.linalg.pinv(Bx)
        Py = np.linalg.pinv(By)
        cx = Px @ vals[:, 0].reshape(mx, my) @ Py.T
        cy = Px @ vals[:, 1].reshape(mx, my) @ Py.T
        return cls(cx, cy, degree, proto.knot_domain)

    @classmethod
    def constant(cls, vx: float, vy: float, domain: GridDomain, n_ctrl=(8, 8), degree=3, padding=0.2):
        """Field equal to ``(vx, vy)`` on the whole knot domain (partition of unity)."""
        f = cls.zeros(domain, n_ctrl, degree, padding)
        return cls(np.full_like(f.coeffs_x, vx), np.full_like(f.coeffs_y, vy), degree, f.knot_domain)

    # -- parameter vector view ----------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.coeffs_x.shape

    @property
    def coeffs(self) -> np.ndarray:
        """Stacked ``(2, ncx, ncy)`` coefficient array."""
        return np.stack([self.coeffs_x, self.coeffs_y])

    @property
    def n_params(self) -> int:
        return 2 * self.coeffs_x.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.coeffs_x.ravel(), self.coeffs_y.ravel()])

    def with_vector(self, vec) -> "VelocityField":
        vec = np.asarray(vec, dtype=float)
        m = self.coeffs_x.size
        return VelocityField(vec[:m].reshape(self.shape), vec[m:2 * m].reshape(self.shape),
                             self.degree, self.knot_domain)

    def scaled(self, a: float) -> "VelocityField":
        return VelocityField(a * self.coeffs_x, a * self.coeffs_y, self.degree, self.knot_domain)

    @property
    def bounds(self):
        return self.knot_domain

    # -- evaluation -----------------------------------------------------

    def evaluate_with_jacobian(self, points):
        """Values ``(N, 2)`` and Jacobians ``(N, 2, 2)``, ``J[n, component, axis]``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return _backend.for_degree(self.degree).spline_eval(pts, self.coeffs, self.knots_x, self.knots_y, self.degree)

    def evaluate(self, points) -> np.ndarray:
        return self.evaluate_with_jacobian(points)[0]

    def jacobian(self, points) -> np.ndarray:
        return self.evaluate_with_jacobian(points)[1]

    def same_layout(self, other) -> bool:
        return (isinstance(other, VelocityField) and other.shape == self.shape
                and other.degree == self.degree and other.knot_domain == self.knot_domain)
