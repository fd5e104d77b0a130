"""File formats: binary ensemble samples, JSON and long-format CSV reports.

The binary sample layout is ``b"ENSM"``, a little-endian ``uint32``
version, a ``uint64`` header length, a UTF-8 JSON header and then the raw
row-major ``float64`` points, followed by the weights when they are not
uniform.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .closure import ReducedTrajectory
from .ensemble import EmpiricalSeries, ValidationReport
from .errors import InvalidArgumentError
from .moments import EquilibriumConstants, ModelMatrices
from .riccati import ValueHessian
from .statmodel import EnsembleSample, ThermoState

MAGIC = b"ENSM"
VERSION = 1


def to_jsonable(obj):
    """Recursively convert numpy containers and scalars to plain Python."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else repr(x)
    if obj is None or isinstance(obj, (int, str)):
        return obj
    return repr(obj)


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(to_jsonable(payload), fh, indent=2, sort_keys=True)
    return path


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if not isinstance(x, str) else x for x in r])
    return path


def read_csv(path):
    """Return ``(header, float array)`` for a numeric CSV written by this module."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        data = np.array([[float(x) for x in row] for row in rd], dtype=float)
    return header, data.reshape(-1, len(header))


# ---------------------------------------------------------------------------
# ensemble samples

def save_sample(path, sample: EnsembleSample):
    pts = np.ascontiguousarray(sample.points, dtype="<f8")
    explicit = not sample.uniform
    header = {"N": int(pts.shape[0]), "dim": int(pts.shape[1]), "n": int(pts.shape[1] // 2),
              "seed": sample.provenance.get("seed"), "weights": explicit,
              "provenance": to_jsonable(sample.provenance)}
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        fh.write(pts.tobytes())
        if explicit:
            fh.write(np.ascontiguousarray(sample.weights, dtype="<f8").tobytes())
    return path


def load_sample(path) -> EnsembleSample:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise InvalidArgumentError(f"{path} is not an ensemble sample file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise InvalidArgumentError(f"unsupported sample file version {version}")
        header = json.loads(fh.read(hlen).decode())
        N, dim = header["N"], header["dim"]
        pts = np.frombuffer(fh.read(8 * N * dim), dtype="<f8").reshape(N, dim).copy()
        if header["weights"]:
            w = np.frombuffer(fh.read(8 * N), dtype="<f8").copy()
        else:
            w = np.full(N, 1.0 / N)
    return EnsembleSample(pts, w, header["provenance"])


def save_macrostate_csv(path, state: ThermoState, names=None):
    m = state.a.size
    names = list(names or [f"A{i}" for i in range(m)])
    rows = [[nm, state.lam[i], state.a[i], state.a_stderr[i] if state.a_stderr is not None else np.nan]
            for i, nm in enumerate(names)]
    _write_csv(path, ["observable", "lambda", "a", "a_stderr"], rows)
    return path


# ---------------------------------------------------------------------------
# matrices

def _matrix_rows(mats: dict):
    rows = []
    for key, M in mats.items():
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.shape[0] == 1 and np.asarray(mats[key]).ndim == 1:
            M = M.T
        for i in range(M.shape[0]):
            for j in range(M.shape[1]):
                rows.append([key, str(i), str(j), M[i, j]])
    return rows


def save_model_matrices(stem, mats: ModelMatrices, meta=None):
    """Write ``stem.json`` and ``stem.csv`` (long format: name, i, j, value)."""
    stem = Path(stem)
    payload = {"kind": "model-matrices", "lambda": mats.lam, "beta": mats.beta, "C": mats.C, "f": mats.f,
               "Omega": mats.Omega, "D": mats.D, "stderr": mats.mc_stderr,
               "diagnostics": mats.diagnostics, "meta": meta or {}}
    write_json(stem.with_suffix(".json"), payload)
    _write_csv(stem.with_suffix(".csv"), ["matrix", "i", "j", "value"],
               _matrix_rows({"C": mats.C, "f": mats.f, "Omega": mats.Omega, "D": mats.D}))
    return stem


def load_model_matrices(path) -> ModelMatrices:
    d = read_json(Path(path).with_suffix(".json"))
    arr = lambda x: np.asarray(x, dtype=float)
    return ModelMatrices(C=arr(d["C"]), f=arr(d["f"]), Omega=arr(d["Omega"]), D=arr(d["D"]), lam=arr(d["lambda"]),
                         mc_stderr={k: arr(v) for k, v in d["stderr"].items()}, beta=d["beta"],
                         diagnostics=d["diagnostics"])


def save_equilibrium_constants(stem, eqc: EquilibriumConstants, meta=None):
    stem = Path(stem)
    payload = {"kind": "equilibrium-constants", "C": eqc.C0, "Jrev": eqc.Jrev, "D": eqc.D0,
               "stderr": eqc.mc_stderr, "diagnostics": eqc.diagnostics, "meta": meta or {}}
    write_json(stem.with_suffix(".json"), payload)
    _write_csv(stem.with_suffix(".csv"), ["matrix", "i", "j", "value"],
               _matrix_rows({"C": eqc.C0, "Jrev": eqc.Jrev, "D": eqc.D0}))
    return stem


def load_equilibrium_constants(path) -> EquilibriumConstants:
    d = read_json(Path(path).with_suffix(".json"))
    arr = lambda x: np.asarray(x, dtype=float)
    return EquilibriumConstants(C0=arr(d["C"]), Jrev=arr(d["Jrev"]), D0=arr(d["D"]),
                                mc_stderr={k: arr(v) for k, v in d["stderr"].items()},
                                diagnostics=d["diagnostics"])


def save_value_hessian(stem, vh: ValueHessian):
    """JSON with the full object, CSV keyed by time (one row per ``t``)."""
    stem = Path(stem)
    payload = {"kind": "value-hessian", "stationary": vh.stationary, "M": vh.M, "residual_norm": vh.residual_norm,
               "times": vh.times, "path": vh.path, "flags": vh.flags}
    write_json(stem.with_suffix(".json"), payload)
    if vh.stationary:
        times, path = np.array([np.inf]), vh.M[None]
    else:
        times, path = vh.times, vh.path
    m = path.shape[1]
    header = ["t"] + [f"M{i}{j}" if m <= 10 else f"M{i}_{j}" for i in range(m) for j in range(m)]
    rows = [[("inf" if not np.isfinite(t) else t)] + list(P.ravel()) for t, P in zip(times, path)]
    _write_csv(stem.with_suffix(".csv"), header, rows)
    return stem


def load_value_hessian(path) -> ValueHessian:
    d = read_json(Path(path).with_suffix(".json"))
    arr = lambda x: None if x is None else np.asarray(x, dtype=float)
    return ValueHessian(M=arr(d["M"]), residual_norm=d["residual_norm"], inputs=(), times=arr(d["times"]),
                        path=arr(d["path"]), flags=d["flags"])


# ---------------------------------------------------------------------------
# trajectories

def trajectory_columns(m, names=None):
    names = list(names or [str(i) for i in range(m)])
    return (["t"] + [f"lambda_{s}" for s in names] + [f"a_{s}" for s in names]
            + [f"mu_{s}" for s in names] + ["s", "ds_dt"])


def save_trajectory(stem, traj, names=None, meta=None):
    """Write a :class:`ReducedTrajectory` or :class:`EmpiricalSeries`.

    Both share the column layout ``t, lambda..., a..., mu..., s, ds_dt``.
    For an empirical series ``lambda`` and ``mu`` are blank (NaN), ``s`` is
    NaN and ``ds_dt`` carries nothing; the standard errors of ``a`` go in
    extra ``se_...`` columns so the shared columns can be diffed directly.
    """
    stem = Path(stem)
    if isinstance(traj, EmpiricalSeries):
        m = traj.a.shape[1]
        names = list(names or traj.names or [str(i) for i in range(m)])
        K = traj.times.size
        nan = np.full((K, m), np.nan)
        cols = [traj.times[:, None], nan, traj.a, nan, np.full((K, 1), np.nan), np.full((K, 1), np.nan),
                traj.a_stderr]
        header = trajectory_columns(m, names) + [f"se_{s}" for s in names]
        payload = {"kind": "trajectory", "regime": traj.regime, "N": traj.N, "dropped": traj.dropped,
                   "energy_drift": traj.energy_drift, "names": names, "u": traj.u, "u_stderr": traj.u_stderr,
                   "metadata": traj.metadata, "meta": meta or {}}
    else:
        m = traj.m
        names = list(names or [str(i) for i in range(m)])
        cols = [traj.times[:, None], traj.lambda_path, traj.a_path, traj.flux_path,
                traj.entropy_path[:, None], traj.production[:, None]]
        header = trajectory_columns(m, names)
        payload = {"kind": "trajectory", "regime": traj.regime, "names": names, "metadata": traj.metadata,
                   "warnings": traj.warnings, "meta": meta or {}}
    data = np.hstack(cols)
    _write_csv(stem.with_suffix(".csv"), header, data)
    payload["columns"] = header
    write_json(stem.with_suffix(".json"), payload)
    return stem


def load_trajectory(stem) -> ReducedTrajectory:
    """Read a closure trajectory written by :func:`save_trajectory`."""
    stem = Path(stem)
    header, data = read_csv(stem.with_suffix(".csv"))
    meta = read_json(stem.with_suffix(".json"))
    m = (len([h for h in header if not h.startswith("se_")]) - 3) // 3
    return ReducedTrajectory(times=data[:, 0], lambda_path=data[:, 1:1 + m], a_path=data[:, 1 + m:1 + 2 * m],
                             flux_path=data[:, 1 + 2 * m:1 + 3 * m], entropy_path=data[:, 1 + 3 * m],
                             production=data[:, 2 + 3 * m], regime=meta["regime"],
                             metadata=meta.get("metadata", {}), warnings=meta.get("warnings", []))


def load_series(stem) -> EmpiricalSeries:
    stem = Path(stem)
    header, data = read_csv(stem.with_suffix(".csv"))
    meta = read_json(stem.with_suffix(".json"))
    m = len([h for h in header if h.startswith("se_")])
    return EmpiricalSeries(times=data[:, 0], a=data[:, 1 + m:1 + 2 * m], a_stderr=data[:, 3 + 3 * m:3 + 4 * m],
                           u=np.asarray(meta["u"], dtype=float), u_stderr=np.asarray(meta["u_stderr"], dtype=float),
                           energy_drift=meta["energy_drift"], dropped=meta["dropped"], N=meta["N"],
                           names=tuple(meta["names"]), metadata=meta.get("metadata", {}))


def save_report(path, report: ValidationReport):
    payload = {"kind": "validation-report", "max_z_score": report.max_z_score, "threshold": report.threshold,
               "passed": report.passed, "plateau_slope": report.plateau_slope,
               "plateau_intercept": report.plateau_intercept, "times": report.times,
               "empirical_a": report.empirical_a, "empirical_stderr": report.empirical_stderr,
               "closure_a": report.closure_a, "z_scores": report.z_scores, "metadata": report.metadata}
    return write_json(path, payload)
