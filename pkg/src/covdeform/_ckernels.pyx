# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: tensor-product spline evaluation, RK4 flow, RK4 adjoint.

Same signatures and semantics as :mod:`covdeform._pykernels`, specialised to
cubic splines. Each knot interval's basis functions are tabulated as cubic
polynomials in the local coordinate, so evaluation is a direct span lookup
plus Horner steps (knot vectors must be clamped with uniform interior
spacing). Points are processed one at a time in index order.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite

from ._pykernels import _basis_1d

cnp.import_array()

NAME = "cython"

cdef enum:
    MAXK = 4
    DEG = 3

_TABLES = {}


def _axis_table(t, int p):
    """Polynomial coefficients ``P[s, r, q]`` of basis ``s + r`` on interval ``s`` in ``xi in [0, 1)``."""
    key = (t.tobytes(), p)
    hit = _TABLES.get(key)
    if hit is not None:
        return hit
    ncoef = len(t) - p - 1
    nint = ncoef - p
    h = np.diff(t[p:ncoef + 1])
    if np.any(h <= 0) or np.ptp(h) > 1e-9 * h.mean():
        raise ValueError("compiled kernels need clamped knots with uniform interior spacing")
    xi = (np.arange(p + 1) + 0.5) / (p + 1)
    V = np.vander(xi, p + 1, increasing=True)
    P = np.empty((nint, p + 1, p + 1))
    for s in range(nint):
        u = t[p + s] + xi * (t[p + s + 1] - t[p + s])
        first, N, _ = _basis_1d(u, t, p)
        assert np.all(first == s)
        P[s] = np.linalg.solve(V, N).T
    out = (np.ascontiguousarray(P), float(t[0]), float(nint / (t[-1] - t[0])), float(t[-1]))
    if len(_TABLES) > 64:
        _TABLES.clear()
    _TABLES[key] = out
    return out


cdef struct Axis:
    const double* P     # (nint, p + 1, p + 1)
    double lo
    double hi
    double inv_h
    Py_ssize_t nint


cdef inline Py_ssize_t _axis_basis(double u, Axis* ax, int p, double* N, double* dN) noexcept nogil:
    cdef double z = (u - ax.lo) * ax.inv_h
    cdef Py_ssize_t s = <Py_ssize_t> z
    cdef int r
    cdef double xi
    cdef const double* row
    if s >= ax.nint:
        s = ax.nint - 1
    if s < 0:
        s = 0
    xi = z - s
    for r in range(MAXK):
        row = ax.P + (s * MAXK + r) * MAXK
        N[r] = ((row[3] * xi + row[2]) * xi + row[1]) * xi + row[0]
        dN[r] = ((3.0 * row[3] * xi + 2.0 * row[2]) * xi + row[1]) * ax.inv_h
    return s


cdef inline bint _inside(double x, double y, Axis* ax, Axis* ay) noexcept nogil:
    return x >= ax.lo and x <= ax.hi and y >= ay.lo and y <= ay.hi


cdef inline Py_ssize_t _axis_value(double u, Axis* ax, double* N) noexcept nogil:
    cdef double z = (u - ax.lo) * ax.inv_h
    cdef Py_ssize_t s = <Py_ssize_t> z
    cdef int r
    cdef double xi
    cdef const double* row
    if s >= ax.nint:
        s = ax.nint - 1
    if s < 0:
        s = 0
    xi = z - s
    for r in range(MAXK):
        row = ax.P + (s * MAXK + r) * MAXK
        N[r] = ((row[3] * xi + row[2]) * xi + row[1]) * xi + row[0]
    return s


cdef inline void _eval_value(double x, double y, const double* c, Py_ssize_t ncx, Py_ssize_t ncy,
                             Axis* ax, Axis* ay, double* v) noexcept nogil:
    cdef double Nx[MAXK]
    cdef double Ny[MAXK]
    cdef Py_ssize_t fx, fy, off, plane = ncx * ncy
    cdef int a, b
    cdef double s0, s1
    v[0] = 0.0
    v[1] = 0.0
    if not _inside(x, y, ax, ay):
        return
    fx = _axis_value(x, ax, Nx)
    fy = _axis_value(y, ay, Ny)
    for a in range(MAXK):
        s0 = 0.0
        s1 = 0.0
        off = (fx + a) * ncy + fy
        for b in range(MAXK):
            s0 += Ny[b] * c[off + b]
            s1 += Ny[b] * c[plane + off + b]
        v[0] += Nx[a] * s0
        v[1] += Nx[a] * s1


cdef inline void _eval_point(double x, double y, const double* c, Py_ssize_t ncx, Py_ssize_t ncy,
                             Axis* ax, Axis* ay, int p, double* v, double* J, bint want_jac) noexcept nogil:
    """v[2] and J[4] (row-major, J[comp*2 + axis]) at one point."""
    cdef double Nx[MAXK]
    cdef double dNx[MAXK]
    cdef double Ny[MAXK]
    cdef double dNy[MAXK]
    cdef Py_ssize_t fx, fy, off, plane = ncx * ncy
    cdef int a, b
    cdef double w, c0, c1, s0, s1, t0, t1
    v[0] = 0.0
    v[1] = 0.0
    J[0] = 0.0
    J[1] = 0.0
    J[2] = 0.0
    J[3] = 0.0
    if not _inside(x, y, ax, ay):
        return
    fx = _axis_basis(x, ax, p, Nx, dNx)
    fy = _axis_basis(y, ay, p, Ny, dNy)
    for a in range(MAXK):
        # inner sums over b for this x-basis row
        s0 = 0.0
        s1 = 0.0
        t0 = 0.0
        t1 = 0.0
        off = (fx + a) * ncy + fy
        for b in range(MAXK):
            c0 = c[off + b]
            c1 = c[plane + off + b]
            s0 += Ny[b] * c0
            s1 += Ny[b] * c1
            if want_jac:
                t0 += dNy[b] * c0
                t1 += dNy[b] * c1
        v[0] += Nx[a] * s0
        v[1] += Nx[a] * s1
        if want_jac:
            J[0] += dNx[a] * s0
            J[1] += Nx[a] * t0
            J[2] += dNx[a] * s1
            J[3] += Nx[a] * t1


def _setup(coeffs, tx, ty, int degree):
    if degree != DEG:
        raise ValueError(f"compiled kernels are specialised to cubic splines, got degree {degree}")
    c = np.ascontiguousarray(coeffs, dtype=np.float64)
    tx = np.ascontiguousarray(tx, dtype=np.float64)
    ty = np.ascontiguousarray(ty, dtype=np.float64)
    return c, _axis_table(tx, degree), _axis_table(ty, degree)


cdef void _fill_axis(Axis* ax, tab, const double[:, :, ::1] P):
    ax.P = &P[0, 0, 0]
    ax.lo = tab[1]
    ax.inv_h = tab[2]
    ax.hi = tab[3]
    ax.nint = P.shape[0]


def spline_eval(points, coeffs, tx, ty, int degree):
    c_arr, tabx, taby = _setup(coeffs, tx, ty, degree)
    cdef const double[:, :, ::1] c = c_arr
    cdef const double[:, :, ::1] Px = tabx[0]
    cdef const double[:, :, ::1] Py = taby[0]
    cdef Axis ax, ay
    _fill_axis(&ax, tabx, Px)
    _fill_axis(&ay, taby, Py)
    cdef Py_ssize_t ncx = c.shape[1], ncy = c.shape[2]
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0], k
    vals_arr = np.empty((n, 2))
    jac_arr = np.empty((n, 2, 2))
    cdef double[:, ::1] vals = vals_arr
    cdef double[:, :, ::1] jac = jac_arr
    cdef double v[2]
    cdef double J[4]
    with nogil:
        for k in range(n):
            _eval_point(pts[k, 0], pts[k, 1], &c[0, 0, 0], ncx, ncy, &ax, &ay, degree, v, J, True)
            vals[k, 0] = v[0]
            vals[k, 1] = v[1]
            jac[k, 0, 0] = J[0]
            jac[k, 0, 1] = J[1]
            jac[k, 1, 0] = J[2]
            jac[k, 1, 1] = J[3]
    return vals_arr, jac_arr


def flow_forward(points, amounts, coeffs, tx, ty, int degree, int steps, box, bint store):
    c_arr, tabx, taby = _setup(coeffs, tx, ty, degree)
    cdef const double[:, :, ::1] c = c_arr
    cdef const double[:, :, ::1] Px = tabx[0]
    cdef const double[:, :, ::1] Py = taby[0]
    cdef Axis ax, ay
    _fill_axis(&ax, tabx, Px)
    _fill_axis(&ay, taby, Py)
    cdef const double* cp = &c[0, 0, 0]
    cdef Py_ssize_t ncx = c.shape[1], ncy = c.shape[2]
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[::1] amt = np.ascontiguousarray(amounts, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0], k
    cdef int s
    cdef double bx0 = box[0], bx1 = box[1], by0 = box[2], by1 = box[3]
    end_arr = np.empty((n, 2))
    cdef double[:, ::1] end = end_arr
    if store:
        stages_arr = np.empty((steps, 4, n, 2))
    else:
        stages_arr = np.empty((1, 4, 1, 2))
    cdef double[:, :, :, ::1] st = stages_arr
    cdef double h = 1.0 / steps
    cdef double x0, x1, a, y0, y1
    cdef double k1[2]
    cdef double k2[2]
    cdef double k3[2]
    cdef double k4[2]
    cdef double J[4]
    cdef Py_ssize_t bad = -1
    with nogil:
        for k in range(n):
            x0 = pts[k, 0]
            x1 = pts[k, 1]
            a = amt[k]
            for s in range(steps):
                if store:
                    st[s, 0, k, 0] = x0
                    st[s, 0, k, 1] = x1
                _eval_value(x0, x1, cp, ncx, ncy, &ax, &ay, k1)
                k1[0] *= a
                k1[1] *= a
                y0 = x0 + 0.5 * h * k1[0]
                y1 = x1 + 0.5 * h * k1[1]
                if store:
                    st[s, 1, k, 0] = y0
                    st[s, 1, k, 1] = y1
                _eval_value(y0, y1, cp, ncx, ncy, &ax, &ay, k2)
                k2[0] *= a
                k2[1] *= a
                y0 = x0 + 0.5 * h * k2[0]
                y1 = x1 + 0.5 * h * k2[1]
                if store:
                    st[s, 2, k, 0] = y0
                    st[s, 2, k, 1] = y1
                _eval_value(y0, y1, cp, ncx, ncy, &ax, &ay, k3)
                k3[0] *= a
                k3[1] *= a
                y0 = x0 + h * k3[0]
                y1 = x1 + h * k3[1]
                if store:
                    st[s, 3, k, 0] = y0
                    st[s, 3, k, 1] = y1
                _eval_value(y0, y1, cp, ncx, ncy, &ax, &ay, k4)
                k4[0] *= a
                k4[1] *= a
                x0 = x0 + (h / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
                x1 = x1 + (h / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
                if not (isfinite(x0) and isfinite(x1)) or x0 < bx0 or x0 > bx1 or x1 < by0 or x1 > by1:
                    if bad < 0:
                        bad = k
                    break
            end[k, 0] = x0
            end[k, 1] = x1
    return end_arr, (stages_arr if store else None), int(bad)


def flow_adjoint(stages, amounts, lam, coeffs, tx, ty, int degree):
    c_arr, tabx, taby = _setup(coeffs, tx, ty, degree)
    cdef const double[:, :, ::1] c = c_arr
    cdef const double[:, :, ::1] Px = tabx[0]
    cdef const double[:, :, ::1] Py = taby[0]
    cdef Axis ax, ay
    _fill_axis(&ax, tabx, Px)
    _fill_axis(&ay, taby, Py)
    cdef const double* cp = &c[0, 0, 0]
    cdef Py_ssize_t ncx = c.shape[1], ncy = c.shape[2], plane = ncx * ncy, off
    cdef const double[:, :, :, ::1] st = np.ascontiguousarray(stages, dtype=np.float64)
    cdef const double[::1] amt = np.ascontiguousarray(amounts, dtype=np.float64)
    cdef const double[:, ::1] lam_in = np.ascontiguousarray(lam, dtype=np.float64)
    cdef int steps = st.shape[0]
    cdef Py_ssize_t n = st.shape[2], k, fx, fy
    cdef int s, i, aa, bb, p = degree
    lam0_arr = np.empty((n, 2))
    g_arr = np.zeros_like(c_arr)
    gam_arr = np.zeros(n)
    cdef double[:, ::1] lam0 = lam0_arr
    cdef double[:, :, ::1] gv = g_arr
    cdef double* g = &gv[0, 0, 0]
    cdef double[::1] gam = gam_arr
    cdef double h = 1.0 / steps
    cdef double wts[4]
    cdef double cnext[3]
    wts[0] = h / 6.0
    wts[1] = h / 3.0
    wts[2] = h / 3.0
    wts[3] = h / 6.0
    cnext[0] = 0.5
    cnext[1] = 0.5
    cnext[2] = 1.0
    cdef double l0, l1, acc0, acc1, mu0, mu1, nb0, nb1, yb0, yb1, a, ga, x, y
    cdef double v0, v1, J0, J1, J2, J3, s0, s1, t0, t1, c0, c1, w, amu0, amu1
    cdef double Nx[MAXK]
    cdef double dNx[MAXK]
    cdef double Ny[MAXK]
    cdef double dNy[MAXK]
    with nogil:
        for k in range(n):
            l0 = lam_in[k, 0]
            l1 = lam_in[k, 1]
            a = amt[k]
            ga = 0.0
            for s in range(steps - 1, -1, -1):
                acc0 = l0
                acc1 = l1
                nb0 = 0.0
                nb1 = 0.0
                for i in range(3, -1, -1):
                    mu0 = wts[i] * l0
                    mu1 = wts[i] * l1
                    if i < 3:
                        mu0 += cnext[i] * h * nb0
                        mu1 += cnext[i] * h * nb1
                    x = st[s, i, k, 0]
                    y = st[s, i, k, 1]
                    nb0 = 0.0
                    nb1 = 0.0
                    if _inside(x, y, &ax, &ay):
                        fx = _axis_basis(x, &ax, p, Nx, dNx)
                        fy = _axis_basis(y, &ay, p, Ny, dNy)
                        v0 = 0.0
                        v1 = 0.0
                        J0 = 0.0
                        J1 = 0.0
                        J2 = 0.0
                        J3 = 0.0
                        amu0 = a * mu0
                        amu1 = a * mu1
                        for aa in range(MAXK):
                            s0 = 0.0
                            s1 = 0.0
                            t0 = 0.0
                            t1 = 0.0
                            off = (fx + aa) * ncy + fy
                            for bb in range(MAXK):
                                c0 = cp[off + bb]
                                c1 = cp[plane + off + bb]
                                s0 += Ny[bb] * c0
                                s1 += Ny[bb] * c1
                                t0 += dNy[bb] * c0
                                t1 += dNy[bb] * c1
                                w = Nx[aa] * Ny[bb]
                                g[off + bb] += w * amu0
                                g[plane + off + bb] += w * amu1
                            v0 += Nx[aa] * s0
                            v1 += Nx[aa] * s1
                            J0 += dNx[aa] * s0
                            J1 += Nx[aa] * t0
                            J2 += dNx[aa] * s1
                            J3 += Nx[aa] * t1
                        # ybar = a * J^T mu
                        nb0 = amu0 * J0 + amu1 * J2
                        nb1 = amu0 * J1 + amu1 * J3
                        ga += v0 * mu0 + v1 * mu1
                    acc0 += nb0
                    acc1 += nb1
                l0 = acc0
                l1 = acc1
            lam0[k, 0] = l0
            lam0[k, 1] = l1
            gam[k] = ga
    return lam0_arr, g_arr, gam_arr
