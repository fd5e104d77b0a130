import numpy as np
import pytest

from bestfit._stats import batch_means
from bestfit.errors import InvalidArgumentError, RankDeficiencyError
from bestfit.hamiltonian import auto_gradient, symplectic_matrix
from bestfit.moments import (WeightSpec, closure_matrix, drift, equilibrium_constants, fisher,
                             model_matrices, poisson_matrix)
from bestfit.statmodel import StatModel, sample
from bestfit.systems import build_system

N5 = 100_000


def _within(est, exact, se, k=3.0):
    return np.all(np.abs(np.asarray(est) - exact) <= k * np.asarray(se) + 1e-14)


@pytest.mark.parametrize("lam", [0.0, 0.7, -1.3])
def test_fisher_harmonic_independent_of_tilt(lam):
    model = StatModel.fixed_beta(build_system("harmonic-1", {"k": 1.0}, ["q"]), 1.0, [lam])
    C, se = fisher(model, sample(model, N5, seed=1), return_stderr=True)
    assert _within(C, 1.0, se)


def test_fisher_fixed_energy_matches_fixed_beta_at_equilibrium():
    sys = build_system("harmonic-1", {"k": 1.0}, ["q"])
    fb = StatModel.fixed_beta(sys, 1.0)
    fe = StatModel.fixed_energy(sys, beta_eq=1.0)
    smp = sample(fb, N5, seed=2)
    Cb, se = fisher(fb, smp, return_stderr=True)
    Ce = fisher(fe, smp)
    assert _within(Ce, 1.0, se)
    # the projection only removes a parity-forbidden correlation
    assert abs(Ce[0, 0] - Cb[0, 0]) < 3 * se[0, 0]
    assert Ce[0, 0] <= Cb[0, 0]


def test_fisher_duplicated_observable():
    sys = build_system("harmonic-chain", {"n": 3}, ["q0", "q0"])
    model = StatModel.fixed_beta(sys, 1.0)
    with pytest.raises(RankDeficiencyError) as info:
        fisher(model, sample(model, 1000, seed=0))
    d = info.value.direction
    assert abs(abs(d[0]) - abs(d[1])) < 1e-6 and d[0] * d[1] < 0


def test_fisher_symmetric_spd():
    sys = build_system("fpu-beta", {"n": 4}, ["Q1", "P1", "E2"])
    model = StatModel.fixed_beta(sys, 1.0, [0.1, 0.2, -0.1])
    C = fisher(model, sample(model, 2000, seed=3))
    assert np.array_equal(C, C.T)
    assert np.linalg.eigvalsh(C)[0] > 0


def test_fisher_error_decays_as_inverse_sqrt_n():
    model = StatModel.fixed_beta(build_system("harmonic-1", {"k": 1.0}, ["q"]), 1.0)
    sizes = np.array([1e3, 1e4, 1e5, 1e6]).astype(int)
    rms = []
    for N in sizes:
        errs = [fisher(model, sample(model, N, seed=100 + s))[0, 0] - 1.0 for s in range(24)]
        rms.append(np.sqrt(np.mean(np.square(errs))))
    slope = np.polyfit(np.log(sizes), np.log(rms), 1)[0]
    assert -0.6 <= slope <= -0.4, slope


def test_drift_vanishes_at_equilibrium():
    sys = build_system("fpu-beta", {"n": 4}, ["Q1", "P1"])
    model = StatModel.fixed_beta(sys, 1.0)
    est = drift(model, sample(model, 20_000, seed=4))
    assert _within(est.f, 0.0, est.stderr)
    assert np.all(est.f_alt == 0.0)


@pytest.mark.parametrize("beta", [1.0, 2.5])
def test_drift_canonical_pair(beta):
    sys = build_system("harmonic-1", {"k": 1.0}, ["q", "p"])
    lam = np.array([0.4, -0.9])
    model = StatModel.fixed_beta(sys, beta, lam)
    est = drift(model, sample(model, N5, seed=5))
    exact = np.array([lam[1], -lam[0]]) / beta
    assert np.allclose(est.f_alt, exact, rtol=0, atol=1e-12)
    assert _within(est.f, exact, est.stderr)


@pytest.mark.parametrize("name,obs", [("harmonic-chain", ["Q1", "P1"]), ("fpu-beta", ["Q1", "P2", "E1"]),
                                      ("resolved-bath", ["q", "p"])])
def test_drift_orthogonal_to_lambda(name, obs):
    sys = build_system(name, {"n": 4}, obs)
    lam = np.linspace(0.3, -0.2, len(obs))
    model = StatModel.fixed_beta(sys, 1.0, lam)
    smp = sample(model, 20_000, seed=6)
    proj, se = batch_means(sys.liouville_values(smp.points) @ lam)
    assert abs(proj) <= 3 * se + 1e-14


def test_poisson_canonical_pair_exact():
    sys = build_system("harmonic-1", observables=["q", "p"])
    model = StatModel.fixed_beta(sys, 1.0, [0.2, 0.1])
    Om = poisson_matrix(model, sample(model, 100, seed=0))
    assert np.allclose(Om, [[0.0, 1.0], [-1.0, 0.0]], rtol=0, atol=1e-14)


def test_poisson_single_observable_zero():
    sys = build_system("fpu-beta", {"n": 4}, ["E1"])
    model = StatModel.fixed_beta(sys, 1.0)
    assert np.array_equal(poisson_matrix(model, sample(model, 200, seed=0)), [[0.0]])


def test_poisson_matches_finite_difference_brackets():
    sys = build_system("fpu-beta", {"n": 8}, ["Q1", "Q2", "P1", "E1"])
    model = StatModel.fixed_beta(sys, 1.0, [0.1, 0.1, 0.0, 0.0])
    smp = sample(model, 300, seed=7)
    Om, _, raw_asym = poisson_matrix(model, smp, return_stderr=True)
    J = symplectic_matrix(sys.n)
    grads = [auto_gradient(lambda z, i=i: sys.observable_values(z)[:, i], sys.dim)(smp.points) for i in range(4)]
    fd = np.array([[np.mean(np.einsum("ni,ij,nj->n", gi, J, gj)) for gj in grads] for gi in grads])
    scale = np.max(np.abs(fd))
    assert np.max(np.abs(Om - 0.5 * (fd - fd.T))) <= 1e-3 * scale
    assert raw_asym < 1e-10


def test_closure_matrix_harmonic_oracle():
    model = StatModel.fixed_beta(build_system("harmonic-1", {"k": 1.0}, ["q"]), 1.0)
    D, se = closure_matrix(model, sample(model, N5, seed=8), 1.0, return_stderr=True)
    assert _within(D, 1.0, se)


def test_closure_matrix_zero_weight():
    sys = build_system("fpu-beta", {"n": 4}, ["Q1", "E2"])
    model = StatModel.fixed_beta(sys, 1.0)
    assert np.array_equal(closure_matrix(model, sample(model, 500, seed=9), 0.0), np.zeros((2, 2)))


def test_closure_matrix_quadratic_in_weight():
    sys = build_system("fpu-beta", {"n": 4}, ["Q1", "E2"])
    model = StatModel.fixed_beta(sys, 1.0, [0.2, 0.1])
    smp = sample(model, 2000, seed=10)
    D1 = closure_matrix(model, smp, 1.0)
    assert np.allclose(closure_matrix(model, smp, 2.0), 4 * D1, rtol=1e-13, atol=0)
    w = np.array([0.5, 3.0])
    assert np.allclose(closure_matrix(model, smp, tuple(w)), D1 * np.outer(w, w), rtol=1e-13, atol=1e-15)


def test_closure_matrix_invariant_row_vanishes():
    sys = build_system("fpu-beta", {"n": 4}, ["energy", "Q1"])
    model = StatModel.fixed_beta(sys, 1.0, [0.0, 0.3])
    D, se = closure_matrix(model, sample(model, 5000, seed=11), 1.0, return_stderr=True)
    assert np.all(np.abs(D[0]) <= 3 * se[0] + 1e-12)
    assert D[1, 1] > 0.1


def test_closure_matrix_psd():
    sys = build_system("resolved-bath", {"n": 4}, ["q", "p", "e0"])
    model = StatModel.fixed_beta(sys, 1.0, [0.1, -0.1, 0.05])
    D = closure_matrix(model, sample(model, 3000, seed=12), 1.0)
    assert np.array_equal(D, D.T)
    assert np.linalg.eigvalsh(D)[0] >= -1e-10


def test_weight_spec_validation():
    with pytest.raises(InvalidArgumentError):
        WeightSpec(-1.0)
    with pytest.raises(InvalidArgumentError):
        WeightSpec([[1.0]])
    with pytest.raises(InvalidArgumentError):
        WeightSpec((1.0, 2.0)).vector(3)
    assert WeightSpec(2).is_scalar and not WeightSpec([1, 2]).is_scalar


def test_equilibrium_constants_harmonic_oracle():
    sys = build_system("harmonic-1", {"k": 1.0}, ["q"])
    smp = sample(StatModel.fixed_beta(sys, 1.0), N5, seed=13)
    eqc = equilibrium_constants(sys, smp, 1.0)
    assert _within(eqc.C0, 1.0, eqc.mc_stderr["C0"])
    assert eqc.Jrev.shape == (1, 1) and eqc.Jrev[0, 0] == 0.0
    assert _within(eqc.D0, 1.0, eqc.mc_stderr["D0"])


def test_equilibrium_constants_even_observables_have_no_jrev():
    sys = build_system("fpu-beta", {"n": 6}, ["Q1", "Q2", "E1"])
    smp = sample(StatModel.fixed_beta(sys, 1.0), 20_000, seed=14)
    eqc = equilibrium_constants(sys, smp, 1.0)
    assert _within(eqc.Jrev, 0.0, eqc.mc_stderr["Jrev"])


@pytest.mark.parametrize("beta,k", [(1.0, 1.0), (2.0, 0.5)])
def test_equilibrium_constants_canonical_pair(beta, k):
    sys = build_system("harmonic-1", {"k": k}, ["q", "p"])
    smp = sample(StatModel.fixed_beta(sys, beta), N5, seed=15)
    eqc = equilibrium_constants(sys, smp, 1.0)
    exact = np.array([[0.0, 1 / beta], [-1 / beta, 0.0]])
    assert np.array_equal(eqc.Jrev, -eqc.Jrev.T)
    assert _within(eqc.Jrev, exact, eqc.mc_stderr["Jrev"])
    assert eqc.diagnostics["jrev_asymmetry_z"] < 3.5
    # LA lies in the span of (q, p): only its sample mean is left unresolved
    fbar = sys.liouville_values(smp.points).mean(axis=0)
    assert np.allclose(eqc.D0, np.outer(fbar, fbar), rtol=1e-8, atol=1e-18)


def test_model_matrices_shared_sample():
    sys = build_system("fpu-beta", {"n": 4}, ["Q1", "P1"])
    model = StatModel.fixed_beta(sys, 1.0, [0.2, -0.1])
    smp = sample(model, 4000, seed=16)
    mats = model_matrices(model, smp, 1.0, check_sample=sample(model, 4000, seed=17))
    assert np.array_equal(mats.C, fisher(model, smp))
    assert np.array_equal(mats.D, closure_matrix(model, smp, 1.0))
    assert np.array_equal(mats.Omega, poisson_matrix(model, smp))
    assert set(mats.diagnostics["independent"]) == {"C", "f", "Omega", "D"}
    # both drift estimators estimate the same vector
    z = np.abs(mats.f - mats.diagnostics["f_alt"]) / np.sqrt(mats.mc_stderr["f"] ** 2
                                                             + (mats.mc_stderr["Omega"] @ np.abs(mats.lam)) ** 2)
    assert z.max() < 4
