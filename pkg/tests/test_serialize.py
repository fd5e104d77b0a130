import json

import numpy as np
import pytest

from bestfit import serialize
from bestfit.closure import integrate_linear, thermodynamics
from bestfit.ensemble import propagate_ensemble, validate
from bestfit.errors import InvalidArgumentError
from bestfit.moments import equilibrium_constants, model_matrices
from bestfit.riccati import solve_are, solve_riccati_ode
from bestfit.statmodel import EnsembleSample, StatModel, macrostate, sample
from bestfit.systems import build_system


@pytest.fixture(scope="module")
def fpu():
    sys = build_system("fpu-beta", {"n": 4}, ["Q1", "P1"])
    model = StatModel.fixed_beta(sys, 1.0, [0.2, -0.1])
    return sys, model, sample(model, 2000, seed=3)


def test_sample_round_trip_uniform(tmp_path, fpu):
    _, _, smp = fpu
    path = serialize.save_sample(tmp_path / "s.ensm", smp)
    raw = path.read_bytes()
    assert raw[:4] == serialize.MAGIC
    # uniform weights are implied, not stored
    assert len(raw) < 16 + 8 * smp.points.size + 8 * smp.points.shape[0]
    back = serialize.load_sample(path)
    assert np.array_equal(back.points, smp.points)
    assert np.allclose(back.weights, smp.weights, rtol=1e-13, atol=0)
    assert back.provenance["seed"] == smp.provenance["seed"]


def test_sample_round_trip_weighted(tmp_path, rng):
    pts = rng.normal(size=(50, 4))
    w = rng.random(50)
    smp = EnsembleSample(pts, w / w.sum(), {"seed": 11, "note": "x"})
    back = serialize.load_sample(serialize.save_sample(tmp_path / "w.ensm", smp))
    assert np.array_equal(back.points, smp.points) and np.array_equal(back.weights, smp.weights)
    assert back.provenance["note"] == "x"


def test_sample_rejects_foreign_file(tmp_path):
    bad = tmp_path / "bad.ensm"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(InvalidArgumentError):
        serialize.load_sample(bad)


def test_model_matrices_round_trip(tmp_path, fpu):
    _, model, smp = fpu
    mats = model_matrices(model, smp, 1.0)
    serialize.save_model_matrices(tmp_path / "mm", mats, {"N": 2000})
    back = serialize.load_model_matrices(tmp_path / "mm")
    for key in ("C", "f", "Omega", "D", "lam"):
        assert np.array_equal(getattr(back, key), getattr(mats, key)), key
    with open(tmp_path / "mm.csv") as fh:
        rows = [line.strip().split(",") for line in fh][1:]
    C_rows = {(int(r[1]), int(r[2])): float(r[3]) for r in rows if r[0] == "C"}
    assert all(C_rows[i, j] == mats.C[i, j] for i in range(2) for j in range(2))
    assert len([r for r in rows if r[0] == "f"]) == 2


def test_equilibrium_constants_round_trip(tmp_path, fpu):
    sys, _, _ = fpu
    smp = sample(StatModel.fixed_beta(sys, 1.0), 2000, seed=4)
    eqc = equilibrium_constants(sys, smp, 1.0)
    serialize.save_equilibrium_constants(tmp_path / "eq", eqc)
    back = serialize.load_equilibrium_constants(tmp_path / "eq")
    assert np.array_equal(back.C0, eqc.C0) and np.array_equal(back.D0, eqc.D0)
    assert np.array_equal(back.Jrev, eqc.Jrev)
    for key, se in eqc.mc_stderr.items():
        assert np.array_equal(back.mc_stderr[key], se)


def test_value_hessian_stationary(tmp_path, rng):
    vh = solve_are(np.diag([1.0, 2.0]), None, np.diag([3.0, 0.5]))
    serialize.save_value_hessian(tmp_path / "vh", vh)
    back = serialize.load_value_hessian(tmp_path / "vh")
    assert back.stationary and np.array_equal(back.M, vh.M)
    text = (tmp_path / "vh.csv").read_text().splitlines()
    assert text[0] == "t,M00,M01,M10,M11" and text[1].startswith("inf,")
    # stationary solutions answer every time with the same matrix
    assert np.array_equal(back.at(3.7), vh.M)


def test_value_hessian_path(tmp_path):
    vh = solve_riccati_ode([[1.0]], None, [[1.0]], T=2.0, dt=0.01, stride=10)
    serialize.save_value_hessian(tmp_path / "p", vh)
    back = serialize.load_value_hessian(tmp_path / "p")
    assert not back.stationary
    assert np.array_equal(back.times, vh.times) and np.array_equal(back.path, vh.path)
    assert back.at(1.05)[0, 0] == vh.at(1.05)[0, 0]
    _, data = serialize.read_csv(tmp_path / "p.csv")
    assert np.array_equal(data[:, 1], vh.path[:, 0, 0])


def test_trajectory_round_trip(tmp_path):
    eqc = equilibrium_constants(build_system("harmonic-1", {"k": 1.0}, ["q"]),
                                sample(StatModel.fixed_beta(build_system("harmonic-1", {"k": 1.0}, ["q"]), 1.0),
                                       5000, seed=5), 1.0)
    traj = thermodynamics(integrate_linear(eqc, solve_are(eqc.C0, eqc.Jrev, eqc.D0), [0.7], T=2.0, dt=0.01,
                                           stride=5), eqc)
    serialize.save_trajectory(tmp_path / "lin", traj, ["q"], {"weights": 1.0})
    header, _ = serialize.read_csv(tmp_path / "lin.csv")
    assert header == serialize.trajectory_columns(1, ["q"]) == ["t", "lambda_q", "a_q", "mu_q", "s", "ds_dt"]
    back = serialize.load_trajectory(tmp_path / "lin")
    for key in ("times", "lambda_path", "a_path", "flux_path", "entropy_path", "production"):
        assert np.array_equal(getattr(back, key), getattr(traj, key)), key
    assert back.regime == traj.regime
    assert json.loads((tmp_path / "lin.json").read_text())["meta"]["weights"] == 1.0


def test_series_round_trip_and_report(tmp_path):
    sys = build_system("harmonic-1", {"k": 1.0}, ["q"])
    smp = sample(StatModel.fixed_beta(sys, 1.0, [0.5]), 4000, seed=6)
    emp = propagate_ensemble(sys, smp, dt=0.01, T=1.0, stride=10)
    serialize.save_trajectory(tmp_path / "ens", emp, ["q"])
    header, data = serialize.read_csv(tmp_path / "ens.csv")
    assert header[:6] == serialize.trajectory_columns(1, ["q"]) and header[6] == "se_q"
    assert np.all(np.isnan(data[:, [1, 3, 4, 5]]))
    back = serialize.load_series(tmp_path / "ens")
    assert np.array_equal(back.times, emp.times) and np.array_equal(back.a, emp.a)
    assert np.array_equal(back.a_stderr, emp.a_stderr) and np.array_equal(back.u, emp.u)
    assert back.N == emp.N and back.dropped == emp.dropped
    traj = integrate_linear(([[1.0]], [[0.0]]), np.zeros((1, 1)), [0.5], T=1.0, dt=0.01)
    rep = validate(traj, back, t_c=1.0)
    assert rep.max_z_score == validate(traj, emp, t_c=1.0).max_z_score
    d = json.loads(serialize.save_report(tmp_path / "v.json", rep).read_text())
    assert d["passed"] == rep.passed and d["max_z_score"] == rep.max_z_score
    assert np.array_equal(d["z_scores"], rep.z_scores)


def test_macrostate_csv(tmp_path, fpu):
    _, model, smp = fpu
    st = macrostate(model, smp)
    serialize.save_macrostate_csv(tmp_path / "st.csv", st, ["Q1", "P1"])
    lines = (tmp_path / "st.csv").read_text().splitlines()
    assert lines[0] == "observable,lambda,a,a_stderr"
    assert lines[1].split(",")[0] == "Q1" and float(lines[1].split(",")[2]) == st.a[0]


def test_json_handles_non_finite(tmp_path):
    path = serialize.write_json(tmp_path / "x.json", {"a": np.array([1.0, np.inf]), "b": np.int64(3), "c": np.nan})
    d = serialize.read_json(path)
    assert d == {"a": [1.0, "inf"], "b": 3, "c": "nan"}
