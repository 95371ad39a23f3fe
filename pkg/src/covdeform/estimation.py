"""Fitting velocity fields and link functions to observed deformations.

The model for sample ``k`` is

    f_k = exp(g_p(dtau_p) V_p) o ... o exp(g_1(dtau_1) V_1) o f_0,

with ``dtau = tau_k - tau_0`` measured from the baseline sample. Parameters
are fitted by minimizing the mean squared coordinate error. Gradients are
exact for the discretized flow: the RK4 trajectory is differentiated in
reverse (discrete adjoint) by the kernel backend.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _backend
from ._pykernels import tensor_weights
from .errors import DivergenceError, InputError
from .flow import FlowConfig, _resolve_box, channel_amounts, compose_covariate_flows, lie_bracket
from .grid import DeformationMap
from .links import LinkFunction
from .spline import VelocityField

logger = logging.getLogger(__name__)


@dataclass
class TrainingSample:
    """Covariates ``tau`` (one entry per channel: scalar or per-node array) and the observed deformation."""

    tau: list
    f_emp: DeformationMap

    def __post_init__(self):
        n = self.f_emp.domain.n_nodes
        out = []
        for m, t in enumerate(self.tau):
            a = np.asarray(t, dtype=float)
            if a.ndim == 0:
                out.append(float(a))
                continue
            a = a.reshape(-1)
            if a.size != n:
                raise InputError(f"channel {m} covariate raster has {a.size} values, grid has {n} nodes")
            out.append(a)
        self.tau = out

    @property
    def n_channels(self) -> int:
        return len(self.tau)


@dataclass
class ModelParams:
    fields: list
    links: list
    f0: DeformationMap
    tau0: list
    baseline_index: int = 0

    @property
    def p(self) -> int:
        return len(self.fields)

    @property
    def domain(self):
        return self.f0.domain

    def copy(self) -> "ModelParams":
        return ModelParams(list(self.fields), list(self.links), self.f0.copy(),
                           [np.copy(t) if np.ndim(t) else t for t in self.tau0], self.baseline_index)


@dataclass
class FitConfig:
    max_iters: int = 2000
    learning_rate: float = 0.05
    convergence_tol: float = 1e-3
    rk4_steps: int = 32
    seed: int = 0
    bracket_penalty_weight: float = 0.0
    n_ctrl: int = 8
    degree: int = 3
    padding: float = 0.2
    link: str = "auto"
    baseline_index: int = 0
    freeze_fields: bool = False
    freeze_links: bool = False
    patience: int = 20

    def __post_init__(self):
        if self.max_iters < 0 or self.learning_rate <= 0 or self.convergence_tol < 0:
            raise InputError("max_iters >= 0, learning_rate > 0 and convergence_tol >= 0 are required")
        if self.rk4_steps < 1 or self.bracket_penalty_weight < 0:
            raise InputError("rk4_steps >= 1 and bracket_penalty_weight >= 0 are required")
        if self.link not in ("auto", "identity", "linear", "monotone_pl"):
            raise InputError(f"unknown link setting {self.link!r}")

    def flow(self) -> FlowConfig:
        return FlowConfig(self.rk4_steps)

    def to_dict(self) -> dict:
        return asdict(self)


def _flow_cfg(cfg) -> FlowConfig:
    if isinstance(cfg, FlowConfig):
        return cfg
    if cfg is None:
        return FlowConfig()
    return FlowConfig(int(cfg.rk4_steps))


def _shifts(tau, tau0, p):
    if len(tau) != p:
        raise InputError(f"covariate vector has {len(tau)} channels, model has {p}")
    return [np.asarray(t, dtype=float) - np.asarray(t0, dtype=float) for t, t0 in zip(tau, tau0)]


def predict_deformation(params: ModelParams, tau, cfg=None) -> DeformationMap:
    if params.p == 0:
        return params.f0.copy()
    dt = _shifts(tau, params.tau0, params.p)
    return compose_covariate_flows(params.fields, params.links, dt, params.f0, _flow_cfg(cfg))


def _bracket_penalty(fields, nodes) -> float:
    total = 0.0
    for m in range(len(fields)):
        for n in range(m + 1, len(fields)):
            b = lie_bracket(fields[m], fields[n], nodes)
            total += float(np.mean(np.sum(b * b, axis=1)))
    return total


def mapping_loss(params: ModelParams, dataset, cfg=None) -> float:
    """Mean squared coordinate error over samples and nodes, plus the bracket penalty."""
    if not dataset:
        raise InputError("dataset is empty")
    fc = _flow_cfg(cfg)
    sq = 0.0
    n_tot = 0
    for s in dataset:
        pred = predict_deformation(params, s.tau, fc)
        sq += float(np.sum((pred.coords - s.f_emp.coords) ** 2))
        n_tot += s.f_emp.domain.n_nodes
    loss = sq / n_tot
    lam = getattr(cfg, "bracket_penalty_weight", 0.0) or 0.0
    if lam > 0 and params.p > 1:
        loss += lam * _bracket_penalty(params.fields, params.domain.nodes())
    return loss


# -- parameter vector layout ----------------------------------------------

def param_layout(params: ModelParams):
    """``[(field_slice, link_slice), ...]`` into the flat parameter vector, one pair per channel."""
    out = []
    pos = 0
    for V, g in zip(params.fields, params.links):
        fs = slice(pos, pos + V.n_params)
        pos += V.n_params
        ls = slice(pos, pos + g.n_params)
        pos += g.n_params
        out.append((fs, ls))
    return out


def pack(params: ModelParams) -> np.ndarray:
    parts = []
    for V, g in zip(params.fields, params.links):
        parts.append(V.to_vector())
        parts.append(g.raw)
    return np.concatenate(parts) if parts else np.zeros(0)


def unpack(params: ModelParams, vec) -> ModelParams:
    vec = np.asarray(vec, dtype=float)
    fields, links = [], []
    for (fs, ls), V, g in zip(param_layout(params), params.fields, params.links):
        fields.append(V.with_vector(vec[fs]))
        links.append(g.with_params(vec[ls]))
    return ModelParams(fields, links, params.f0, params.tau0, params.baseline_index)


# -- gradient ---------------------------------------------------------------

def _require_splines(params):
    for V in params.fields:
        if not isinstance(V, VelocityField):
            raise InputError("gradients need spline velocity fields")


def _sample_value_and_grad(params, sample, fc, box, weight):
    """Squared-error sum for one sample and its gradient (times ``weight``)."""
    n = params.domain.n_nodes
    dts = _shifts(sample.tau, params.tau0, params.p)
    x = params.f0.coords
    tapes = []
    for m, (V, g) in enumerate(zip(params.fields, params.links)):
        amounts = channel_amounts(g, dts[m], n)
        if not np.any(amounts):
            tapes.append(None)
            continue
        end, stages, bad = _backend.for_degree(V.degree).flow_forward(
            x, amounts, V.coeffs, V.knots_x, V.knots_y, V.degree, fc.rk4_steps, box, True)
        if bad >= 0:
            i, j = divmod(bad, params.domain.ny)
            raise DivergenceError(f"flow diverged at node (i={i}, j={j})", node=(i, j))
        tapes.append((amounts, stages))
        x = end
    r = x - sample.f_emp.coords
    sse = float(np.sum(r * r))
    grads = [None] * params.p
    lam = 2.0 * weight * r
    for m in range(params.p - 1, -1, -1):
        V, g = params.fields[m], params.links[m]
        if tapes[m] is None:
            grads[m] = (np.zeros(V.n_params), np.zeros(g.n_params))
            continue
        amounts, stages = tapes[m]
        kern = _backend.for_degree(V.degree)
        lam, gc, gam = kern.flow_adjoint(stages, amounts, lam, V.coeffs, V.knots_x, V.knots_y, V.degree)
        dt = dts[m]
        if dt.ndim == 0:
            gl = g.param_grad(dt.reshape(1))[0] * float(np.sum(gam))
        else:
            gl = g.param_grad(dt).T @ gam
        grads[m] = (np.concatenate([gc[0].ravel(), gc[1].ravel()]), np.asarray(gl, dtype=float))
    return sse, grads


def _basis_matrices(V: VelocityField, nodes):
    idx, W, Wx, Wy = tensor_weights(nodes, V.knots_x, V.knots_y, V.degree)
    n, ncoef = nodes.shape[0], V.coeffs_x.size
    mats = []
    for w in (W, Wx, Wy):
        M = np.zeros((n, ncoef))
        np.add.at(M, (np.repeat(np.arange(n), idx.shape[1]), idx.ravel()), w.ravel())
        mats.append(M)
    return mats


def _penalty_value_and_grad(params, nodes, lam_w):
    p = params.p
    layouts = [_basis_matrices(V, nodes) for V in params.fields]
    vals, jacs = [], []
    for V, (B, Bx, By) in zip(params.fields, layouts):
        cx, cy = V.coeffs_x.ravel(), V.coeffs_y.ravel()
        vals.append(np.column_stack([B @ cx, B @ cy]))
        jacs.append(np.stack([np.column_stack([Bx @ cx, By @ cx]),
                              np.column_stack([Bx @ cy, By @ cy])], axis=1))
    grads = [np.zeros(V.n_params) for V in params.fields]
    total = 0.0
    nn = nodes.shape[0]
    for m in range(p):
        for n in range(m + 1, p):
            br = np.einsum("kij,kj->ki", jacs[n], vals[m]) - np.einsum("kij,kj->ki", jacs[m], vals[n])
            total += float(np.mean(np.sum(br * br, axis=1)))
            beta = (2.0 * lam_w / nn) * br
            for a, b, sign in ((m, n, 1.0), (n, m, -1.0)):
                B, Bx, By = layouts[a]
                jt = np.einsum("kij,ki->kj", jacs[b], beta)
                ncoef = params.fields[a].coeffs_x.size
                for r in range(2):
                    g = B.T @ jt[:, r] - (Bx.T @ (beta[:, r] * vals[b][:, 0]) + By.T @ (beta[:, r] * vals[b][:, 1]))
                    grads[a][r * ncoef:(r + 1) * ncoef] += sign * g
    return lam_w * total, grads


def loss_and_gradient(params: ModelParams, dataset, cfg=None, executor=None):
    """``(loss, grad)`` with ``grad`` laid out as :func:`pack`.

    With an ``executor`` (e.g. a thread pool) the per-sample passes run
    concurrently; the compiled kernels release the GIL. Contributions are
    summed in sample order either way, so results do not depend on it.
    """
    if not dataset:
        raise InputError("dataset is empty")
    _require_splines(params)
    fc = _flow_cfg(cfg)
    box = _resolve_box(fc, None, params.domain)
    n_tot = sum(s.f_emp.domain.n_nodes for s in dataset)
    weight = 1.0 / n_tot
    grad = np.zeros(sum(V.n_params + g.n_params for V, g in zip(params.fields, params.links)))
    layout = param_layout(params)
    sse = 0.0
    def one(s):
        return _sample_value_and_grad(params, s, fc, box, weight)

    parts = executor.map(one, dataset) if executor is not None else map(one, dataset)
    for e, gs in parts:
        sse += e
        for (fs, ls), (gf, gl) in zip(layout, gs):
            grad[fs] += gf
            grad[ls] += gl
    loss = sse / n_tot
    lam_w = getattr(cfg, "bracket_penalty_weight", 0.0) or 0.0
    if lam_w > 0 and params.p > 1:
        pen, pgrads = _penalty_value_and_grad(params, params.domain.nodes(), lam_w)
        loss += pen
        for (fs, _), pg in zip(layout, pgrads):
            grad[fs] += pg
    return loss, grad


def loss_gradient(params: ModelParams, dataset, cfg=None) -> np.ndarray:
    return loss_and_gradient(params, dataset, cfg)[1]


# -- fitting ----------------------------------------------------------------

@dataclass
class FitResult:
    params: ModelParams
    trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    best_iter: int = 0


def _make_link(kind, shifts):
    if kind == "identity":
        return LinkFunction.identity()
    if kind == "linear":
        return LinkFunction.linear(1.0)
    nz = np.unique(np.concatenate([np.ravel(s) for s in shifts]))
    bps = np.unique(np.quantile(nz, [0.25, 0.5, 0.75])) if nz.size > 3 else np.array([0.0])
    return LinkFunction.monotone_pl(bps)


def init_params(dataset, p: int, cfg: FitConfig) -> ModelParams:
    if len(dataset) < 2:
        raise InputError("fitting needs at least two samples")
    if not 0 <= cfg.baseline_index < len(dataset):
        raise InputError(f"baseline_index {cfg.baseline_index} out of range")
    for k, s in enumerate(dataset):
        if s.n_channels != p:
            raise InputError(f"sample {k} has {s.n_channels} channels, expected {p}")
        if s.f_emp.domain != dataset[0].f_emp.domain:
            raise InputError(f"sample {k} lives on a different grid")
    base = dataset[cfg.baseline_index]
    domain = base.f_emp.domain
    kind = cfg.link
    if kind == "auto":
        kind = "identity" if len(dataset) <= 5 else "monotone_pl"
    fields, links = [], []
    for m in range(p):
        shifts = [np.asarray(s.tau[m], dtype=float) - np.asarray(base.tau[m], dtype=float) for s in dataset]
        fields.append(VelocityField.zeros(domain, cfg.n_ctrl, cfg.degree, cfg.padding))
        links.append(_make_link(kind, shifts))
    return ModelParams(fields, links, base.f_emp.copy(), list(base.tau), cfg.baseline_index)


def _trainable_mask(params: ModelParams, dataset, cfg: FitConfig) -> np.ndarray:
    mask = np.ones(pack(params).size, dtype=bool)
    base = dataset[params.baseline_index]
    for m, (fs, ls) in enumerate(param_layout(params)):
        if cfg.freeze_fields:
            mask[fs] = False
        if cfg.freeze_links:
            mask[ls] = False
        if params.links[m].kind == "linear":
            levels = {round(float(v), 12) for s in dataset
                      for v in np.ravel(np.asarray(s.tau[m]) - np.asarray(base.tau[m])) if v != 0}
            # g and V trade a constant factor when only one shift level is observed
            if len(levels) < 2:
                mask[ls] = False
    return mask


class Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, x, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return x - self.lr * mh / (np.sqrt(vh) + self.eps)


def fit(dataset, p: int, cfg: FitConfig = FitConfig(), init: ModelParams | None = None,
        callback=None, executor=None) -> FitResult:
    """Adam descent on :func:`mapping_loss`; returns the lowest-loss iterate and the loss trace.

    Stops when the relative loss decrease over ``cfg.patience`` iterations
    falls below ``cfg.convergence_tol``, or after ``cfg.max_iters`` iterations.
    ``callback(it, params, loss)`` is called once per iteration if given;
    ``executor`` is forwarded to :func:`loss_and_gradient`.
    """
    params = init if init is not None else init_params(dataset, p, cfg)
    mask = _trainable_mask(params, dataset, cfg)
    x = pack(params)
    opt = Adam(x.size, cfg.learning_rate)
    trace = []
    best_x, best_loss, best_iter = x.copy(), np.inf, 0
    converged = False
    it = 0
    for it in range(cfg.max_iters):
        cur = unpack(params, x)
        loss, g = loss_and_gradient(cur, dataset, cfg, executor)
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            raise DivergenceError(f"non-finite loss at iteration {it}", iteration=it)
        trace.append(loss)
        if callback is not None:
            callback(it, cur, loss)
        if loss < best_loss:
            best_x, best_loss, best_iter = x.copy(), loss, it
        if it >= cfg.patience:
            prev = trace[it - cfg.patience]
            if prev <= 0 or (prev - loss) / prev < cfg.convergence_tol:
                converged = True
                break
        g = np.where(mask, g, 0.0)
        x = opt.step(x, g)
        if it % 100 == 0:
            logger.debug("iter %d loss %.6e", it, loss)
    if cfg.max_iters == 0:
        return FitResult(params, [], 0, False, 0)
    return FitResult(unpack(params, best_x), trace, it + 1, converged, best_iter)
