"""Pure numpy implementation of the hot kernels.

This is the fallback selected when the compiled ``_ckernels`` extension is not
available. Both modules expose the same four functions with identical
signatures; :mod:`covdeform._backend` picks one at import.

Coefficient arrays have shape ``(2, ncx, ncy)`` (component, x-index, y-index).
Knot vectors are clamped, so the knot domain is ``[tx[0], tx[-1]] x [ty[0], ty[-1]]``.
Outside the knot domain the field and its Jacobian are exactly zero.
"""

import numpy as np

NAME = "python"


def _basis_1d(u, t, p):
    """Nonzero B-spline basis values and first derivatives at each ``u``.

    Returns ``(first, N, dN)`` where ``first[n]`` is the index of the first
    nonzero function and ``N[n, r]``/``dN[n, r]`` belong to function ``first + r``.
    """
    ncoef = len(t) - p - 1
    span = np.searchsorted(t, u, side="right") - 1
    span = np.clip(span, p, ncoef - 1)
    m = u.shape[0]
    N = np.zeros((m, p + 1))
    N[:, 0] = 1.0
    left = np.zeros((m, p + 1))
    right = np.zeros((m, p + 1))
    low = N[:, :1].copy()
    for j in range(1, p + 1):
        left[:, j] = u - t[span + 1 - j]
        right[:, j] = t[span + j] - u
        saved = np.zeros(m)
        for r in range(j):
            temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
        if j == p - 1:
            low = N[:, :p].copy()
    dN = np.zeros((m, p + 1))
    if p >= 1:
        first = span - p
        for r in range(p + 1):
            i = first + r
            if r >= 1:
                dN[:, r] += p * low[:, r - 1] / (t[i + p] - t[i])
            if r <= p - 1:
                dN[:, r] -= p * low[:, r] / (t[i + p + 1] - t[i + 1])
    return span - p, N, dN


def tensor_weights(points, tx, ty, degree):
    """Flat coefficient indices and tensor-product weights at ``points``.

    Returns ``(idx, W, Wx, Wy)``, each ``(N, (degree + 1) ** 2)``: value weights
    and the x- and y-derivative weights. Rows for points outside the knot
    domain are zero.
    """
    p = degree
    ncy = len(ty) - p - 1
    x = points[:, 0]
    y = points[:, 1]
    inside = (x >= tx[0]) & (x <= tx[-1]) & (y >= ty[0]) & (y <= ty[-1])
    xc = np.where(inside, x, tx[0])
    yc = np.where(inside, y, ty[0])
    fx, Nx, dNx = _basis_1d(xc, tx, p)
    fy, Ny, dNy = _basis_1d(yc, ty, p)
    k = p + 1
    ix = fx[:, None] + np.arange(k)[None, :]
    iy = fy[:, None] + np.arange(k)[None, :]
    idx = (ix[:, :, None] * ncy + iy[:, None, :]).reshape(-1, k * k)
    mask = inside.astype(float)[:, None]
    W = (Nx[:, :, None] * Ny[:, None, :]).reshape(-1, k * k) * mask
    Wx = (dNx[:, :, None] * Ny[:, None, :]).reshape(-1, k * k) * mask
    Wy = (Nx[:, :, None] * dNy[:, None, :]).reshape(-1, k * k) * mask
    return idx, W, Wx, Wy


def spline_eval(points, coeffs, tx, ty, degree):
    """Field values ``(N, 2)`` and Jacobians ``(N, 2, 2)`` with ``J[n, comp, axis]``."""
    points = np.ascontiguousarray(points, dtype=float)
    idx, W, Wx, Wy = tensor_weights(points, tx, ty, degree)
    cx = coeffs[0].ravel()[idx]
    cy = coeffs[1].ravel()[idx]
    vals = np.column_stack([(W * cx).sum(1), (W * cy).sum(1)])
    jac = np.empty((points.shape[0], 2, 2))
    jac[:, 0, 0] = (Wx * cx).sum(1)
    jac[:, 0, 1] = (Wy * cx).sum(1)
    jac[:, 1, 0] = (Wx * cy).sum(1)
    jac[:, 1, 1] = (Wy * cy).sum(1)
    return vals, jac


def _velocity(y, coeffs, tx, ty, degree):
    idx, W, _, _ = tensor_weights(y, tx, ty, degree)
    return np.column_stack([(W * coeffs[0].ravel()[idx]).sum(1),
                            (W * coeffs[1].ravel()[idx]).sum(1)])


def _outside(y, box):
    bad = ~np.all(np.isfinite(y), axis=1)
    bad |= (y[:, 0] < box[0]) | (y[:, 0] > box[1]) | (y[:, 1] < box[2]) | (y[:, 1] > box[3])
    return bad


def flow_forward(points, amounts, coeffs, tx, ty, degree, steps, box, store):
    """RK4 integration of ``dx/dt = amount * V(x)`` over ``t in [0, 1]``.

    Returns ``(end, stages, bad)``. ``stages`` has shape ``(steps, 4, N, 2)``
    and holds the four stage inputs of every step when ``store`` is true
    (``None`` otherwise). ``bad`` is the smallest node index whose trajectory
    left ``box`` or became non-finite, or -1.
    """
    x = np.array(points, dtype=float)
    a = np.asarray(amounts, dtype=float)[:, None]
    h = 1.0 / steps
    n = x.shape[0]
    stages = np.empty((steps, 4, n, 2)) if store else None
    for s in range(steps):
        y1 = x
        k1 = a * _velocity(y1, coeffs, tx, ty, degree)
        y2 = x + 0.5 * h * k1
        k2 = a * _velocity(y2, coeffs, tx, ty, degree)
        y3 = x + 0.5 * h * k2
        k3 = a * _velocity(y3, coeffs, tx, ty, degree)
        y4 = x + h * k3
        k4 = a * _velocity(y4, coeffs, tx, ty, degree)
        if store:
            stages[s, 0] = y1
            stages[s, 1] = y2
            stages[s, 2] = y3
            stages[s, 3] = y4
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        bad = _outside(x, box)
        if bad.any():
            return x, stages, int(np.flatnonzero(bad)[0])
    return x, stages, -1


def flow_adjoint(stages, amounts, lam, coeffs, tx, ty, degree):
    """Reverse pass through a stored RK4 trajectory.

    Given ``lam = dL/dx_end`` returns ``(lam0, gcoeffs, gamounts)``: the
    sensitivity with respect to the start points, the coefficient gradient
    (same shape as ``coeffs``) and the per-node amount gradient.
    """
    steps = stages.shape[0]
    n = lam.shape[0]
    h = 1.0 / steps
    a = np.asarray(amounts, dtype=float)
    lam = np.array(lam, dtype=float)
    ncoef = coeffs[0].size
    gcx = np.zeros(ncoef)
    gcy = np.zeros(ncoef)
    gam = np.zeros(n)
    cxf = coeffs[0].ravel()
    cyf = coeffs[1].ravel()
    wts = (h / 6.0, h / 3.0, h / 3.0, h / 6.0)
    # stage i+1 input is x + c_i * h * k_i
    cnext = (0.5, 0.5, 1.0)
    for s in range(steps - 1, -1, -1):
        acc = lam.copy()
        ybar_next = None
        for i in range(3, -1, -1):
            mu = wts[i] * lam
            if ybar_next is not None:
                mu = mu + cnext[i] * h * ybar_next
            idx, W, Wx, Wy = tensor_weights(stages[s, i], tx, ty, degree)
            cx = cxf[idx]
            cy = cyf[idx]
            vx = (W * cx).sum(1)
            vy = (W * cy).sum(1)
            # ybar = a * J^T mu
            ybar = np.column_stack([
                a * (mu[:, 0] * (Wx * cx).sum(1) + mu[:, 1] * (Wx * cy).sum(1)),
                a * (mu[:, 0] * (Wy * cx).sum(1) + mu[:, 1] * (Wy * cy).sum(1)),
            ])
            gam += vx * mu[:, 0] + vy * mu[:, 1]
            gcx += np.bincount(idx.ravel(), weights=(W * (a * mu[:, 0])[:, None]).ravel(), minlength=ncoef)
            gcy += np.bincount(idx.ravel(), weights=(W * (a * mu[:, 1])[:, None]).ravel(), minlength=ncoef)
            acc += ybar
            ybar_next = ybar
        lam = acc
    g = np.stack([gcx.reshape(coeffs[0].shape), gcy.reshape(coeffs[1].shape)])
    return lam, g, gam
