"""Experiment configuration, validity checks and the end-to-end pipeline.

A run goes simulate (or ingest) -> fit -> predict -> evaluate -> export. Every
stage error is re-raised with ``.stage`` set so the CLI can report it.
"""

from __future__ import annotations

import copy
import json
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import io
from .errors import ConfigError, CovDeformError
from .estimation import FitConfig, ModelParams, fit, predict_deformation
from .flow import fold_condition_check, jacobian_determinant, lie_bracket
from .grid import GridDomain
from .kernel import IsotropicKernel, calibrate_unit_range
from .prediction import compare_likelihoods, fit_ard_baseline, fit_stationary_baseline, predict_covariance
from .simulation import TAU_NEW, TRAIN_DESIGN, TRUTH_RK4_STEPS, Scenario, generate_dataset

SCHEMA_ID = "covdeform.experiment/1"
BUNDLED = ("simulation_study",)

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int0 = {"type": "integer", "minimum": 0}
_int1 = {"type": "integer", "minimum": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


CONFIG_SCHEMA = _obj({
    "schema": {"const": SCHEMA_ID},
    "name": {"type": "string"},
    "seed": _int0,
    "data": _obj({
        "source": {"enum": ["simulate", "ingest"]},
        "path": {"type": ["string", "null"]},
    }),
    "scenario": _obj({
        "grid": {"type": "integer", "minimum": 2},
        "design": {"type": "array", "minItems": 2,
                   "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
        "tau_new": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        "noise_sd": _nonneg,
        "truth_rk4_steps": _int1,
        "n_test_realizations": _int0,
        "emit_realizations": {"type": "boolean"},
    }),
    "kernel": _obj({
        "nu": {"enum": [0.5, 1.5, 2.5]},
        "sigma2": _pos,
        "rho": {"oneOf": [_pos, {"type": "null"}]},
    }),
    "fit": _obj({
        "max_iters": _int0,
        "learning_rate": _pos,
        "convergence_tol": _nonneg,
        "rk4_steps": _int1,
        "bracket_penalty_weight": _nonneg,
        "n_ctrl": {"type": "integer", "minimum": 4},
        "degree": _int1,
        "padding": _nonneg,
        "link": {"enum": ["auto", "identity", "linear", "monotone_pl"]},
        "baseline_index": _int0,
        "patience": _int1,
    }),
    "predict": _obj({"tau_new": {"type": ["array", "null"], "items": _num}}),
    "evaluate": _obj({
        "baselines": {"type": "array", "items": {"enum": ["stationary", "ard"]}, "uniqueItems": True},
        "grid_levels": _int1,
        "grid_points": {"type": "integer", "minimum": 3},
    }),
    "checks": _obj({"bracket_tol": _nonneg}),
    "output": _obj({
        "write_covariances": {"type": "boolean"},
        "record_runtime": {"type": "boolean"},
    }),
}, required=("schema",))

DEFAULTS = {
    "schema": SCHEMA_ID,
    "name": "experiment",
    "seed": 0,
    "data": {"source": "simulate", "path": None},
    "scenario": {"grid": 33, "design": [list(r) for r in TRAIN_DESIGN], "tau_new": list(TAU_NEW),
                 "noise_sd": 0.002, "truth_rk4_steps": TRUTH_RK4_STEPS, "n_test_realizations": 50,
                 "emit_realizations": True},
    "kernel": {"nu": 1.5, "sigma2": 1.0, "rho": None},
    "fit": {k: v for k, v in FitConfig().to_dict().items()
            if k not in ("seed", "freeze_fields", "freeze_links")},
    "predict": {"tau_new": None},
    "evaluate": {"baselines": ["stationary"], "grid_levels": 3, "grid_points": 17},
    "checks": {"bracket_tol": 1e-4},
    "output": {"write_covariances": True, "record_runtime": False},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(doc: dict) -> dict:
    """Schema-check a config document and fill in defaults."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    cfg = _merge(DEFAULTS, doc)
    if cfg["data"]["source"] == "ingest" and not cfg["data"]["path"]:
        raise ConfigError("config invalid at data/path: ingest needs a dataset path")
    return cfg


def bundled_config_path(name: str = "simulation_study"):
    return resources.files("covdeform") / "configs" / f"{name}.json"


def load_config(path) -> dict:
    """Read and validate a config file; a bare bundled name (e.g. ``simulation_study``) also works."""
    p = Path(path)
    try:
        if not p.is_file() and str(path) in BUNDLED:
            text = bundled_config_path(str(path)).read_text()
        else:
            text = p.read_text()
    except OSError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}, row {exc.lineno}: invalid JSON ({exc.msg})") from None
    return validate_config(doc)


def make_kernel(cfg: dict) -> IsotropicKernel:
    k = cfg["kernel"]
    if k["rho"] is None:
        return calibrate_unit_range("matern", k["nu"], k["sigma2"])
    return IsotropicKernel(k["nu"], k["rho"], k["sigma2"])


def make_fit_config(cfg: dict) -> FitConfig:
    return FitConfig(seed=int(cfg["seed"]), **cfg["fit"])


def make_scenario(cfg: dict) -> Scenario:
    s = cfg["scenario"]
    return Scenario(domain=GridDomain.square(s["grid"]), design=tuple(map(tuple, s["design"])),
                    tau_new=tuple(s["tau_new"]), kernel=make_kernel(cfg), noise_sd=s["noise_sd"],
                    seed=int(cfg["seed"]), truth_rk4_steps=s["truth_rk4_steps"],
                    n_test_realizations=s["n_test_realizations"], emit_realizations=s["emit_realizations"])


# -- checks --------------------------------------------------------------------------

def run_checks(params: ModelParams, samples, bracket_tol: float = 1e-4, cfg=None) -> dict:
    """Bracket norms per channel pair, Jacobian minima per sample and fold-condition minima."""
    dom = params.domain
    nodes = dom.nodes()
    if params.p < 2:
        bracket = "not applicable"
    else:
        bracket = []
        for m in range(params.p):
            for n in range(m + 1, params.p):
                b = lie_bracket(params.fields[m], params.fields[n], nodes)
                mx = float(np.max(np.hypot(b[:, 0], b[:, 1])))
                bracket.append({"pair": [m + 1, n + 1], "max_norm": mx, "passed": mx <= bracket_tol})
    jac, fold = [], []
    for k, s in enumerate(samples, start=1):
        fmap = predict_deformation(params, s.tau, cfg)
        mn = float(np.min(jacobian_determinant(fmap)))
        jac.append({"sample": k, "min_det": mn, "passed": mn > 0})
        for m in range(params.p):
            dt = np.asarray(s.tau[m], dtype=float) - np.asarray(params.tau0[m], dtype=float)
            field_m = np.broadcast_to(dt, (dom.n_nodes,)) if dt.ndim == 0 else dt
            rep = fold_condition_check(params.links[m], field_m, params.fields[m], dom)
            fold.append(dict(sample=k, channel=m + 1, **rep.to_dict()))
    ok = (bracket == "not applicable" or all(b["passed"] for b in bracket))
    ok = ok and all(j["passed"] for j in jac) and all(f["passed"] for f in fold)
    return {"bracket": bracket, "jacobian": jac, "fold": fold, "passed": bool(ok)}


def _staged(stage, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except CovDeformError as exc:
        exc.stage = stage
        raise


def _field_rms_rel_err(params, true_fields, nodes):
    out = []
    for V, T in zip(params.fields, true_fields):
        v, t = V.evaluate(nodes), T.evaluate(nodes)
        out.append(float(np.sqrt(np.sum((v - t) ** 2) / np.sum(t ** 2))))
    return out


def frob_rel_err(est, ref) -> float:
    return float(np.linalg.norm(est - ref) / np.linalg.norm(ref))


def run_experiment(cfg: dict, out_dir, executor=None) -> dict:
    """Run every stage and write the artifact directory; returns the metrics dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    kernel = make_kernel(cfg)
    fcfg = make_fit_config(cfg)

    t0 = time.perf_counter()
    if cfg["data"]["source"] == "simulate":
        sc = make_scenario(cfg)
        sim = _staged("simulate", generate_dataset, sc)
        samples = sim.samples
        train_reals = sim.realizations
        tests = sim.test_realizations
        truth_cov = sim.truth_cov.entries
        true_fields = sc.true_fields
        tau_new = list(sc.tau_new)
        io.write_dataset(out / "dataset", sc.domain, samples, train_reals or None, tau_new, sim.truth_map,
                         truth_cov if cfg["output"]["write_covariances"] else None, tests)
    else:
        ds = _staged("ingest", io.ingest_dataset, cfg["data"]["path"])
        samples = ds.samples
        train_reals = [r for r in ds.realizations if r is not None]
        tests = ds.test_realizations
        truth_cov = ds.truth_cov
        true_fields = None
        tau_new = ds.truth_tau
    if cfg["predict"]["tau_new"] is not None:
        tau_new = list(cfg["predict"]["tau_new"])
    timings["simulate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    p = samples[0].n_channels
    res = _staged("fit", fit, samples, p, fcfg, executor=executor)
    params = res.params
    timings["fit"] = time.perf_counter() - t0
    io.save_params(out / "model.json", params, fcfg.to_dict())
    io.write_trace_csv(out / "trace.csv", res.trace)
    for m, V in enumerate(params.fields, start=1):
        io.write_field_csv(out / "fields" / f"field_{m}.csv", V)

    t0 = time.perf_counter()
    metrics = {"field_rms_rel_err": None, "cov_frob_rel_err": None, "loglik_table": None,
               "bracket_max": None, "jacobian_min": None, "runtime_seconds": None}
    pred = None
    if tau_new is not None:
        pred = _staged("predict", predict_covariance, params, tau_new, kernel, fcfg)
        io.write_map_csv(out / "prediction" / "deformation.csv", pred.map_pred)
        if cfg["output"]["write_covariances"]:
            io.write_covariance_csv(out / "prediction" / "covariance.csv", pred.cov_pred)
        if truth_cov is not None:
            metrics["cov_frob_rel_err"] = frob_rel_err(pred.cov_pred.entries, truth_cov)
    timings["predict"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if true_fields is not None:
        metrics["field_rms_rel_err"] = _field_rms_rel_err(params, true_fields, params.domain.nodes())
    if pred is not None and tests:
        models = [("predicted", pred.cov_pred)]
        ev = cfg["evaluate"]
        fitters = {"stationary": fit_stationary_baseline, "ard": fit_ard_baseline}
        baselines = {}
        if train_reals:
            for name in ev["baselines"]:
                b = _staged("evaluate", fitters[name], train_reals, kernel.nu, ev["grid_levels"], ev["grid_points"])
                baselines[name] = b.to_dict()
                models.append((name, _staged("evaluate", b.covariance, params.domain)))
        table = _staged("evaluate", compare_likelihoods, tests, models)
        io.write_score_csv(out / "scores.csv", table)
        summary = table.summary()
        summary["baselines"] = baselines
        io.write_json(out / "scores_summary.json", summary)
        metrics["loglik_table"] = summary
    checks = _staged("check", run_checks, params, samples, cfg["checks"]["bracket_tol"], fcfg)
    io.write_json(out / "checks.json", checks)
    metrics["bracket_max"] = (checks["bracket"] if isinstance(checks["bracket"], str)
                              else {f"{b['pair'][0]}-{b['pair'][1]}": b["max_norm"] for b in checks["bracket"]})
    jmin = {f"sample_{j['sample']}": j["min_det"] for j in checks["jacobian"]}
    if pred is not None:
        jmin["prediction"] = float(np.min(jacobian_determinant(pred.map_pred)))
    metrics["jacobian_min"] = jmin
    timings["evaluate"] = time.perf_counter() - t0

    total = float(sum(timings.values()))
    if cfg["output"]["record_runtime"]:
        metrics["runtime_seconds"] = total
    io.write_json(out / "metrics.json", metrics)
    io.write_json(out / "run_info.json", {"runtime_seconds": total, "stage_seconds": timings,
                                          "fit_iterations": res.n_iter, "converged": res.converged,
                                          "config": cfg})
    return metrics


def check_files(params_path, dataset_path, bracket_tol: float = 1e-4) -> dict:
    """:func:`run_checks` on a saved model and a dataset directory."""
    params = io.load_params(params_path)
    ds = io.ingest_dataset(dataset_path, load_covariance=False)
    return run_checks(params, ds.samples, bracket_tol)
