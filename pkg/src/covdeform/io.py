"""CSV/JSON serialization and dataset ingestion.

Numeric grids and matrices are CSV with ``.`` decimals and ``%.17g``
formatting, so every value round-trips exactly; structured metadata is JSON.

Dataset directory layout::

    manifest.json
    sample_1/tau.json
    sample_1/deformation.csv      i,j,x,y
    sample_1/realization.csv      i,j,value   (optional)
    ...
    truth/tau.json
    truth/deformation.csv
    truth/covariance.csv          (optional)
    truth/realization_<r>.csv     (optional held-out draws)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, InputError
from .estimation import ModelParams, TrainingSample
from .grid import DeformationMap, GridDomain
from .kernel import CovarianceMatrix, Realization
from .links import LinkFunction
from .spline import VelocityField

MANIFEST_SCHEMA = "covdeform.dataset/1"
MODEL_SCHEMA = "covdeform.model/1"
FMT = "%.17g"


def _fmt(v) -> str:
    return FMT % v


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")


def _read_rows(path, header):
    """Yield ``(line_no, values)`` for a headed CSV, raising :class:`IngestionError` on any defect."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if [h.strip() for h in head] != list(header):
            raise IngestionError(f"{path}, row 1: expected header {','.join(header)}, got {','.join(head)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}, row {line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise IngestionError(f"{path}, row {line_no}: unparseable value in {row}") from None
            if not all(np.isfinite(vals)):
                raise IngestionError(f"{path}, row {line_no}: non-finite value")
            yield line_no, vals


# -- grids ---------------------------------------------------------------------

def write_map_csv(path, fmap: DeformationMap):
    idx = fmap.domain.indices()
    c = fmap.coords
    _write_rows(path, ("i", "j", "x", "y"),
                ((str(i), str(j), _fmt(x), _fmt(y)) for (i, j), (x, y) in zip(idx, c)))


def _read_indexed(path, header, shape, width):
    nx, ny = shape
    out = np.full((nx * ny, width), np.nan)
    seen = np.zeros(nx * ny, dtype=bool)
    for line_no, vals in _read_rows(path, header):
        i, j = vals[0], vals[1]
        if i != int(i) or j != int(j) or not (0 <= i < nx and 0 <= j < ny):
            raise IngestionError(f"{path}, row {line_no}: index ({vals[0]:g}, {vals[1]:g}) outside a {nx}x{ny} grid")
        k = int(i) * ny + int(j)
        if seen[k]:
            raise IngestionError(f"{path}, row {line_no}: duplicate node ({int(i)}, {int(j)})")
        seen[k] = True
        out[k] = vals[2:]
    if not seen.all():
        k = int(np.flatnonzero(~seen)[0])
        raise IngestionError(f"{path}: {int((~seen).sum())} of {nx * ny} nodes missing, first ({k // ny}, {k % ny})")
    return out


def read_map_csv(path, domain: GridDomain) -> DeformationMap:
    return DeformationMap(domain, _read_indexed(path, ("i", "j", "x", "y"), domain.shape, 2))


def write_field_csv(path, V: VelocityField):
    """Control coefficients, one row per ``(i, j)``: ``x``/``y`` are the component coefficients."""
    ncx, ncy = V.shape
    _write_rows(path, ("i", "j", "x", "y"),
                ((str(i), str(j), _fmt(V.coeffs_x[i, j]), _fmt(V.coeffs_y[i, j]))
                 for i in range(ncx) for j in range(ncy)))


def read_field_csv(path, shape, degree=3, knot_domain=(-1.4, 1.4, -1.4, 1.4)) -> VelocityField:
    c = _read_indexed(path, ("i", "j", "x", "y"), tuple(shape), 2)
    return VelocityField(c[:, 0].reshape(shape), c[:, 1].reshape(shape), degree, knot_domain)


def write_realization_csv(path, real: Realization):
    idx = real.domain.indices()
    _write_rows(path, ("i", "j", "value"),
                ((str(i), str(j), _fmt(v)) for (i, j), v in zip(idx, real.values)))


def read_realization_csv(path, domain: GridDomain, seed=None) -> Realization:
    v = _read_indexed(path, ("i", "j", "value"), domain.shape, 1)
    return Realization(domain, v[:, 0], seed)


def write_covariance_csv(path, cov):
    """Dense matrix with a header row holding the dimension ``n``."""
    K = cov.entries if isinstance(cov, CovarianceMatrix) else np.asarray(cov, dtype=float)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"{K.shape[0]}\n")
        np.savetxt(fh, K, fmt=FMT, delimiter=",")


def read_covariance_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: file not found")
    with open(path) as fh:
        head = fh.readline().strip()
        try:
            n = int(head)
        except ValueError:
            raise IngestionError(f"{path}, row 1: expected the matrix dimension, got {head!r}") from None
        rows = []
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                r = np.array(line.split(","), dtype=float)
            except ValueError:
                raise IngestionError(f"{path}, row {line_no}: unparseable value") from None
            if r.size != n or not np.all(np.isfinite(r)):
                raise IngestionError(f"{path}, row {line_no}: expected {n} finite values, got {r.size}")
            rows.append(r)
    if len(rows) != n:
        raise IngestionError(f"{path}: expected {n} matrix rows, got {len(rows)}")
    return np.vstack(rows)


def write_trace_csv(path, trace):
    _write_rows(path, ("iter", "loss"), ((str(k), _fmt(v)) for k, v in enumerate(trace)))


def read_trace_csv(path) -> list:
    return [v[1] for _, v in _read_rows(path, ("iter", "loss"))]


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: file not found")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}, row {exc.lineno}: invalid JSON ({exc.msg})") from None


# -- model parameters -------------------------------------------------------------

def _tau_to_json(t):
    return np.asarray(t, dtype=float).tolist() if np.ndim(t) else float(t)


def params_to_dict(params: ModelParams, config: dict | None = None) -> dict:
    fields = []
    for V in params.fields:
        if not isinstance(V, VelocityField):
            raise InputError("only spline velocity fields serialize")
        fields.append({"degree": V.degree, "knot_domain": list(V.knot_domain), "n_ctrl": list(V.shape),
                       "coeffs_x": V.coeffs_x.tolist(), "coeffs_y": V.coeffs_y.tolist()})
    f0 = params.f0
    ident = np.array_equal(f0.coords, DeformationMap.identity(f0.domain).coords)
    return {"schema": MODEL_SCHEMA, "p": params.p, "domain": f0.domain.to_dict(),
            "baseline_index": params.baseline_index, "tau0": [_tau_to_json(t) for t in params.tau0],
            "f0": "identity" if ident else f0.coords.tolist(),
            "fields": fields, "links": [g.to_dict() for g in params.links], "config": config or {}}


def params_from_dict(d: dict, source="model") -> ModelParams:
    try:
        if d.get("schema") != MODEL_SCHEMA:
            raise IngestionError(f"{source}: unsupported model schema {d.get('schema')!r}")
        dom = GridDomain.from_dict(d["domain"])
        f0 = (DeformationMap.identity(dom) if d["f0"] == "identity"
              else DeformationMap(dom, np.asarray(d["f0"], dtype=float)))
        fields = [VelocityField(np.asarray(f["coeffs_x"], dtype=float), np.asarray(f["coeffs_y"], dtype=float),
                                int(f["degree"]), tuple(f["knot_domain"])) for f in d["fields"]]
        links = [LinkFunction.from_dict(g) for g in d["links"]]
        tau0 = [np.asarray(t, dtype=float) if isinstance(t, list) else float(t) for t in d["tau0"]]
        if not (len(fields) == len(links) == len(tau0) == int(d["p"])):
            raise IngestionError(f"{source}: channel counts disagree (p={d['p']})")
        return ModelParams(fields, links, f0, tau0, int(d["baseline_index"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"{source}: malformed model document ({exc})") from None


def save_params(path, params: ModelParams, config: dict | None = None):
    write_json(path, params_to_dict(params, config))


def load_params(path) -> ModelParams:
    return params_from_dict(read_json(path), str(path))


# -- datasets -------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    domain: GridDomain
    channels: list
    samples: list  # sample directory names, in order
    truth: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.channels)


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: list
    realizations: list  # per sample, None where absent
    truth_tau: list | None = None
    truth_map: DeformationMap | None = None
    truth_cov: np.ndarray | None = None
    test_realizations: list = field(default_factory=list)


def write_dataset(path, domain: GridDomain, samples, realizations=None, truth_tau=None, truth_map=None,
                  truth_cov=None, test_realizations=(), channels=None, extra=None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    p = samples[0].n_channels if samples else len(truth_tau or ())
    channels = list(channels or [f"tau{m + 1}" for m in range(p)])
    names = []
    for k, s in enumerate(samples, start=1):
        name = f"sample_{k}"
        names.append(name)
        write_json(root / name / "tau.json", {"tau": [_tau_to_json(t) for t in s.tau]})
        write_map_csv(root / name / "deformation.csv", s.f_emp)
        if realizations and realizations[k - 1] is not None:
            write_realization_csv(root / name / "realization.csv", realizations[k - 1])
    truth = None
    if truth_tau is not None:
        truth = "truth"
        info = {"tau": [_tau_to_json(t) for t in truth_tau], "n_test_realizations": len(test_realizations)}
        write_json(root / truth / "tau.json", info)
        if truth_map is not None:
            write_map_csv(root / truth / "deformation.csv", truth_map)
        if truth_cov is not None:
            write_covariance_csv(root / truth / "covariance.csv", truth_cov)
        for r, real in enumerate(test_realizations):
            write_realization_csv(root / truth / f"realization_{r}.csv", real)
    write_json(root / "manifest.json", {"schema": MANIFEST_SCHEMA, "domain": domain.to_dict(),
                                        "channels": channels, "samples": names, "truth": truth,
                                        "extra": extra or {}})
    return root


def _read_tau(path, p, n_nodes):
    doc = read_json(path)
    tau = doc.get("tau") if isinstance(doc, dict) else None
    if not isinstance(tau, list):
        raise IngestionError(f"{path}: expected an object with a 'tau' list")
    if len(tau) != p:
        raise IngestionError(f"{path}: {len(tau)} covariate channels, manifest declares {p}")
    out = []
    for m, t in enumerate(tau):
        if isinstance(t, list):
            a = np.asarray(t, dtype=float)
            if a.size != n_nodes:
                raise IngestionError(f"{path}: channel {m} raster has {a.size} values, grid has {n_nodes} nodes")
            if not np.all(np.isfinite(a)):
                raise IngestionError(f"{path}: channel {m} raster has non-finite values")
            out.append(a)
        elif isinstance(t, (int, float)) and np.isfinite(t):
            out.append(float(t))
        else:
            raise IngestionError(f"{path}: channel {m} covariate must be a finite number or a raster list")
    return out


def ingest_dataset(path, load_covariance: bool = True) -> Dataset:
    """Parse and validate a dataset directory (see module docstring for the layout)."""
    root = Path(path)
    mpath = root / "manifest.json"
    doc = read_json(mpath)
    try:
        if doc.get("schema") != MANIFEST_SCHEMA:
            raise IngestionError(f"{mpath}: unsupported manifest schema {doc.get('schema')!r}")
        domain = GridDomain.from_dict(doc["domain"])
        channels = list(doc["channels"])
        names = list(doc["samples"])
        truth = doc.get("truth")
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise IngestionError(f"{mpath}: malformed manifest ({exc})") from None
    manifest = DatasetManifest(root, domain, channels, names, truth, doc.get("extra") or {})
    p, n = len(channels), domain.n_nodes
    samples, reals = [], []
    for name in names:
        d = root / name
        tau = _read_tau(d / "tau.json", p, n)
        fmap = read_map_csv(d / "deformation.csv", domain)
        samples.append(TrainingSample(tau, fmap))
        rp = d / "realization.csv"
        reals.append(read_realization_csv(rp, domain) if rp.is_file() else None)
    ds = Dataset(manifest, samples, reals)
    if truth:
        d = root / truth
        info = read_json(d / "tau.json")
        ds.truth_tau = _read_tau(d / "tau.json", p, n)
        if (d / "deformation.csv").is_file():
            ds.truth_map = read_map_csv(d / "deformation.csv", domain)
        if load_covariance and (d / "covariance.csv").is_file():
            ds.truth_cov = read_covariance_csv(d / "covariance.csv")
            if ds.truth_cov.shape != (n, n):
                raise IngestionError(f"{d / 'covariance.csv'}: matrix is {ds.truth_cov.shape[0]}x"
                                     f"{ds.truth_cov.shape[0]}, grid has {n} nodes")
        n_test = int(info.get("n_test_realizations", 0))
        ds.test_realizations = [read_realization_csv(d / f"realization_{r}.csv", domain, r)
                                for r in range(n_test)]
    return ds


def write_score_csv(path, table):
    """Per-realization log-likelihoods as ``realization,model,loglik``."""
    _write_rows(path, ("realization", "model", "loglik"),
                ((str(r), name, _fmt(v)) for r, name, v in table.rows()))


def read_score_csv(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: file not found")
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head != ["realization", "model", "loglik"]:
            raise IngestionError(f"{path}, row 1: expected header realization,model,loglik")
        for line_no, row in enumerate(reader, start=2):
            try:
                out.append((int(row[0]), row[1], float(row[2])))
            except (IndexError, ValueError):
                raise IngestionError(f"{path}, row {line_no}: malformed score row") from None
    return out
