"""Command-line entry point.

Exit codes: 0 success, 2 invalid config or arguments, 3 dataset ingestion,
4 flow or optimizer divergence, 5 covariance conditioning, 6 degenerate
data for baseline fitting, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import contextlib
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, CovDeformError
from .estimation import fit
from .experiment import (DEFAULTS, _staged, check_files, frob_rel_err, load_config, make_fit_config, make_kernel,
                         make_scenario, run_experiment, validate_config)
from .prediction import compare_likelihoods, fit_ard_baseline, fit_stationary_baseline, predict_covariance
from .simulation import generate_dataset

EPILOG = """\
examples:
  covdeform run --config simulation_study --out runs/sim
  covdeform simulate --config my.json --out data/sim
  covdeform fit --data data/sim --out runs/fit
  covdeform predict --model runs/fit/model.json --tau 0.3,-0.5 --out runs/pred
  covdeform evaluate --model runs/fit/model.json --data data/sim --out runs/eval
  covdeform check --model runs/fit/model.json --data data/sim
"""


def _config(args):
    cfg = load_config(args.config) if args.config else validate_config({"schema": DEFAULTS["schema"]})
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def _parse_tau(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--tau expects comma-separated numbers, got {text!r}") from None


def _executor(args):
    if args.threads and args.threads > 1:
        return ThreadPoolExecutor(max_workers=args.threads)
    return contextlib.nullcontext()


def cmd_simulate(args, cfg, ex):
    sc = make_scenario(cfg)
    sim = generate_dataset(sc)
    out = io.write_dataset(args.out, sc.domain, sim.samples, sim.realizations or None, list(sc.tau_new),
                           sim.truth_map, sim.truth_cov if cfg["output"]["write_covariances"] else None,
                           sim.test_realizations)
    print(f"wrote dataset with {len(sim.samples)} samples to {out}")


def cmd_fit(args, cfg, ex):
    path = args.data or cfg["data"]["path"]
    if not path:
        raise ConfigError("fit needs --data or data.path in the config")
    ds = _staged("ingest", io.ingest_dataset, path, load_covariance=False)
    fcfg = make_fit_config(cfg)
    res = fit(ds.samples, ds.manifest.p, fcfg, executor=ex)
    out = Path(args.out)
    io.save_params(out / "model.json", res.params, fcfg.to_dict())
    io.write_trace_csv(out / "trace.csv", res.trace)
    for m, V in enumerate(res.params.fields, start=1):
        io.write_field_csv(out / "fields" / f"field_{m}.csv", V)
    print(f"fit: {res.n_iter} iterations, final loss {res.trace[-1]:.6e}, best at {res.best_iter}")


def _need_model(args):
    if not args.model:
        raise ConfigError("this command needs --model")
    return io.load_params(args.model)


def cmd_predict(args, cfg, ex):
    params = _need_model(args)
    tau = _parse_tau(args.tau) if args.tau else cfg["predict"]["tau_new"] or cfg["scenario"]["tau_new"]
    pred = predict_covariance(params, tau, make_kernel(cfg), make_fit_config(cfg))
    out = Path(args.out)
    io.write_map_csv(out / "deformation.csv", pred.map_pred)
    io.write_covariance_csv(out / "covariance.csv", pred.cov_pred)
    io.write_json(out / "prediction.json", {"tau_new": tau, "jitter_used": pred.cov_pred.jitter_used})
    print(f"predicted covariance ({pred.cov_pred.n}x{pred.cov_pred.n}) written to {out}")


def cmd_evaluate(args, cfg, ex):
    params = _need_model(args)
    path = args.data or cfg["data"]["path"]
    if not path:
        raise ConfigError("evaluate needs --data or data.path in the config")
    ds = _staged("ingest", io.ingest_dataset, path)
    if ds.truth_tau is None or not ds.test_realizations:
        raise ConfigError(f"{path}: dataset has no held-out realizations to score")
    kernel = make_kernel(cfg)
    pred = predict_covariance(params, ds.truth_tau, kernel, make_fit_config(cfg))
    models = [("predicted", pred.cov_pred)]
    ev = cfg["evaluate"]
    train = [r for r in ds.realizations if r is not None]
    fitters = {"stationary": fit_stationary_baseline, "ard": fit_ard_baseline}
    for name in ev["baselines"] if train else ():
        b = fitters[name](train, kernel.nu, ev["grid_levels"], ev["grid_points"])
        models.append((name, b.covariance(params.domain)))
    table = compare_likelihoods(ds.test_realizations, models)
    out = Path(args.out)
    io.write_score_csv(out / "scores.csv", table)
    summary = table.summary()
    if ds.truth_cov is not None:
        summary["cov_frob_rel_err"] = frob_rel_err(pred.cov_pred.entries, ds.truth_cov)
    io.write_json(out / "scores_summary.json", summary)
    for ps in table.pairs:
        print(f"{ps.model_a} - {ps.model_b}: mean {ps.mean_diff:.4f}, sd {ps.std_diff:.4f}, p = {ps.p_value:.3g}")


def cmd_check(args, cfg, ex):
    if not (args.model and args.data):
        raise ConfigError("check needs --model and --data")
    report = check_files(args.model, args.data, cfg["checks"]["bracket_tol"])
    if args.out:
        io.write_json(Path(args.out) / "checks.json", report)
    br = report["bracket"]
    if isinstance(br, str):
        print(f"bracket: {br}")
    else:
        for b in br:
            print(f"bracket {b['pair'][0]}-{b['pair'][1]}: max {b['max_norm']:.3e} {'pass' if b['passed'] else 'FAIL'}")
    for j in report["jacobian"]:
        print(f"sample {j['sample']}: min det J {j['min_det']:.4f} {'pass' if j['passed'] else 'FAIL'}")
    worst = min((f["min_condition"] for f in report["fold"]), default=np.nan)
    print(f"fold condition minimum {worst:.4f}; overall {'pass' if report['passed'] else 'FAIL'}")


def cmd_run(args, cfg, ex):
    metrics = run_experiment(cfg, args.out, executor=ex)
    rms = metrics["field_rms_rel_err"]
    if rms is not None:
        print("field relative RMS error: " + ", ".join(f"{v:.4f}" for v in rms))
    if metrics["cov_frob_rel_err"] is not None:
        print(f"covariance Frobenius relative error: {metrics['cov_frob_rel_err']:.4f}")
    print(f"artifacts written to {args.out}")


COMMANDS = {
    "simulate": (cmd_simulate, "generate the simulated dataset directory"),
    "fit": (cmd_fit, "fit velocity fields and links to a dataset"),
    "predict": (cmd_predict, "predict deformation and covariance for new covariates"),
    "evaluate": (cmd_evaluate, "score held-out realizations against baselines"),
    "check": (cmd_check, "bracket, Jacobian and fold-condition diagnostics"),
    "run": (cmd_run, "simulate or ingest, fit, predict, evaluate and export"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covdeform", description="Covariate-driven deformations of nonstationary GPs.",
                                     epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="experiment config JSON (or the bundled name 'simulation_study'); "
                                        "defaults are used when omitted")
        p.add_argument("--seed", type=int, help="override the config seed (non-negative integer)")
        p.add_argument("--out", required=name != "check",
                       help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads for per-sample fitting (default 1)")
        if name in ("fit", "evaluate", "check"):
            p.add_argument("--data", help="dataset directory (overrides data.path)")
        if name in ("predict", "evaluate", "check"):
            p.add_argument("--model", help="fitted model JSON")
        if name == "predict":
            p.add_argument("--tau", help="comma-separated covariates, e.g. 0.3,-0.5")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = _config(args)
        with _executor(args) as ex:
            COMMANDS[args.command][0](args, cfg, ex)
    except CovDeformError as exc:
        stage = getattr(exc, "stage", args.command)
        print(f"covdeform {args.command}: error [{stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
