import numpy as np
import pytest
from scipy.optimize import brentq

from bestfit._stats import batch_means
from bestfit.errors import (DegenerateModelError, DivergenceError, InvalidArgumentError, NoSolutionError,
                            RankDeficiencyError)
from bestfit.statmodel import (FIXED_ENERGY, SamplerConfig, StatModel, conjugate_parameters,
                               entropy_differences, gaussian_macrostate, gaussian_moments,
                               gaussian_relative_entropy, macrostate,
                               normalize_observables, sample, score, score_values, solve_beta)
from bestfit.systems import build_system

N5 = 100_000


def _h1(obs=("q",), k=1.0):
    return build_system("harmonic-1", {"k": k}, list(obs))


def test_equilibrium_moments_of_position():
    smp = sample(StatModel.fixed_beta(_h1(), 1.0), N5, seed=1)
    q = smp.points[:, 0]
    mean, se = batch_means(q)
    assert abs(mean) < 3 * se
    var, var_se = batch_means(q ** 2 - q.mean() ** 2)
    assert abs(var - 1.0) < 3 * var_se


def test_tilt_shifts_mean_by_c_lambda():
    smp = sample(StatModel.fixed_beta(_h1(), 1.0, [0.5]), N5, seed=2)
    mean, se = batch_means(smp.points[:, 0])
    assert abs(mean - 0.5) < 3 * se


def test_metropolis_weights_uniform_and_provenance():
    sys = build_system("fpu-beta", {"n": 4}, ["Q1"])
    smp = sample(StatModel.fixed_beta(sys, 1.0), 2000, seed=3)
    assert smp.uniform
    assert np.allclose(smp.weights, 1.0 / 2000, rtol=1e-12)
    prov = smp.provenance
    assert prov["sampler"].startswith("metropolis")
    assert prov["seed"] == 3 and prov["burn_in"] == 10_000 and prov["thinning"] == 10
    assert 0.1 <= prov["acceptance"] <= 0.9 and not prov["flagged"]


def test_sampling_is_deterministic():
    sys = build_system("resolved-bath", {"n": 3}, ["q"])
    model = StatModel.fixed_beta(sys, 1.0, [0.3], sampler=SamplerConfig(burn_in=500))
    a, b = sample(model, 500, seed=9), sample(model, 500, seed=9)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, sample(model, 500, seed=10).points)


def test_metropolis_agrees_with_exact_gaussian():
    sys = build_system("harmonic-chain", {"n": 4}, ["Q1", "P2", "q1"])
    model = StatModel.fixed_beta(sys, 1.0, [0.4, -0.3, 0.2])
    exact = sample(model, N5, seed=4)
    mcmc = sample(model, N5, seed=5, config=SamplerConfig(force_mcmc=True))
    assert mcmc.provenance["sampler"] != "gaussian-exact"
    feats = []
    for smp in (exact, mcmc):
        A = sys.observable_values(smp.points)
        feats.append(batch_means(np.hstack([A, A ** 2, sys.hamiltonian(smp.points)[:, None]])))
    (ma, sa), (mb, sb) = feats
    z = np.abs(ma - mb) / np.sqrt(sa ** 2 + sb ** 2)
    assert z.max() < 3.5, z


def test_non_normalizable_tilt_diverges():
    # exp(-q^2/2 + lam q^2) with lam > 1/2 cannot be normalized
    sys = _h1(("q2",))
    model = StatModel.fixed_beta(sys, 1.0, [1.0], sampler=SamplerConfig(burn_in=20_000))
    with pytest.raises(DivergenceError):
        sample(model, 200, seed=0)


@pytest.mark.parametrize("lam", [0.6, 1.5])
def test_outward_drift_detected_at_default_burn_in(lam):
    with pytest.raises(DivergenceError):
        sample(StatModel.fixed_beta(_h1(("q2",)), 1.0, [lam]), 200, seed=0)


def test_near_critical_tilt_still_samples():
    # variance 1/(1 - 2 lam) = 10
    smp = sample(StatModel.fixed_beta(_h1(("q2",)), 1.0, [0.45]), 20_000, seed=1)
    m2, se = batch_means(smp.points[:, 0] ** 2)
    assert abs(m2 - 10.0) <= 3 * se


def test_sample_size_floor():
    with pytest.raises(InvalidArgumentError):
        sample(StatModel.fixed_beta(_h1(), 1.0), 5, seed=0)


def test_model_validation():
    with pytest.raises(InvalidArgumentError):
        StatModel.fixed_beta(_h1(), -1.0)
    with pytest.raises(InvalidArgumentError):
        StatModel.fixed_beta(_h1(), 1.0, [0.1, 0.2])
    with pytest.raises(InvalidArgumentError):
        StatModel(sys=_h1(), lam=[0.0], variant=FIXED_ENERGY)


def test_equilibrium_is_gibbs():
    model = StatModel.fixed_energy(_h1(), beta_eq=2.0)
    assert model.energy == pytest.approx(0.5)
    assert model.beta_of_lambda == 2.0
    assert StatModel.fixed_beta(_h1(), 1.5).beta_of_lambda == 1.5


def _exact_beta(E, lam, k=1.0):
    # <H> = 1/beta + lam^2 / (2 beta^2 k) for the tilted oscillator
    return brentq(lambda b: 1 / b + lam ** 2 / (2 * b ** 2 * k) - E, 1e-6, 1e6, xtol=1e-14)


@pytest.mark.parametrize("lam", [0.1, 0.4])
def test_solve_beta_matches_gaussian_root(lam):
    model = StatModel.fixed_energy(_h1(), energy=1.0, lam=[lam])
    assert solve_beta(model) == pytest.approx(_exact_beta(1.0, lam), rel=1e-3)


def test_solve_beta_mc_path_matches_root():
    cfg = SamplerConfig(force_mcmc=True, burn_in=2000)
    model = StatModel(sys=_h1(), lam=np.array([0.4]), variant=FIXED_ENERGY, energy=1.0, sampler=cfg,
                      solve_samples=20_000)
    beta = solve_beta(model)
    assert beta == pytest.approx(_exact_beta(1.0, 0.4), rel=2e-2)


def test_solve_beta_symmetric_in_lambda():
    m_plus = StatModel.fixed_energy(_h1(), energy=1.0, lam=[0.3])
    m_minus = m_plus.with_lambda([-0.3])
    assert m_plus.beta_of_lambda == pytest.approx(m_minus.beta_of_lambda, rel=1e-12)


def test_solve_beta_energy_constraint_holds():
    model = StatModel.fixed_energy(_h1(), energy=1.3, lam=[0.7])
    beta = model.beta_of_lambda
    u = 1 / beta + 0.7 ** 2 / (2 * beta ** 2)
    assert abs(u - 1.3) < 1e-10


def test_unreachable_energy():
    with pytest.raises(NoSolutionError):
        solve_beta(StatModel.fixed_energy(_h1(), energy=-1.0, lam=[0.1]))


@pytest.mark.parametrize("variant", ["fixed-beta", "fixed-energy"])
def test_scores_exactly_centered(variant):
    sys = build_system("fpu-beta", {"n": 3}, ["Q1", "E2"])
    smp = sample(StatModel.fixed_beta(sys, 1.0, [0.2, -0.1]), 3000, seed=7)
    model = StatModel(sys=sys, lam=np.array([0.2, -0.1]), variant=variant, beta=1.0, energy=3.0)
    U = score(model, smp)
    assert np.max(np.abs(U.mean(axis=0))) < 1e-12


def test_fixed_energy_scores_orthogonal_to_energy():
    sys = build_system("fpu-beta", {"n": 3}, ["Q1", "E2"])
    smp = sample(StatModel.fixed_beta(sys, 1.0, [0.2, -0.1]), 3000, seed=8)
    h = sys.hamiltonian(smp.points)
    U = score_values(sys.observable_values(smp.points), h, smp.weights, FIXED_ENERGY)
    cov = (U * (h - h.mean())[:, None]).mean(axis=0)
    assert np.max(np.abs(cov)) < 1e-10


def test_fixed_beta_score_variance():
    smp = sample(StatModel.fixed_beta(_h1(k=2.0), 1.0), N5, seed=11)
    U = score(StatModel.fixed_beta(_h1(k=2.0), 1.0), smp)
    var, se = batch_means(U[:, 0] ** 2)
    assert abs(var - 0.5) < 3 * se


def test_degenerate_energy_fluctuation():
    with pytest.raises(DegenerateModelError):
        score_values(np.ones((10, 1)), np.full(10, 2.0), np.full(10, 0.1), FIXED_ENERGY)


def test_macrostate_at_equilibrium():
    model = StatModel.fixed_beta(_h1(("q", "p")), 1.0)
    st = macrostate(model, sample(model, N5, seed=12))
    assert np.all(np.abs(st.a) < 3 * st.a_stderr)
    assert st.s_rel == 0.0


def test_macrostate_tilted_oscillator():
    model = StatModel.fixed_beta(_h1(), 1.0, [0.5])
    st = macrostate(model, sample(model, N5, seed=13))
    assert abs(st.a[0] - 0.5) < 3 * st.a_stderr[0]
    assert st.s_rel == pytest.approx(-0.125, rel=1e-12)
    assert st.u == pytest.approx(1.0 + 0.125, abs=3 * st.u_stderr + 1e-12)


def test_entropy_difference_by_thermodynamic_integration():
    # MC means along a lambda path from 0 to 0.5, then -int lam da
    base = StatModel.fixed_beta(_h1(), 1.0)
    lams = np.linspace(0, 0.5, 11)
    a = [sample(base.with_lambda([l]), N5, seed=20 + i).points[:, 0].mean() for i, l in enumerate(lams)]
    ds = entropy_differences(lams[:, None], np.array(a)[:, None])[-1]
    assert ds == pytest.approx(-0.125, rel=5e-2)


def test_entropy_identity_gaussian():
    # s = beta u - lam . a + psi for the tilted density
    model = StatModel.fixed_beta(_h1(("q", "p")), 1.0, [0.3, -0.2])
    st = macrostate(model, sample(model, 2000, seed=1))
    g = gaussian_moments(model.sys, 1.0, model.lam)
    assert g.entropy() == pytest.approx(g.beta * g.mean_energy - model.lam @ g.a + g.log_partition(model.lam),
                                        abs=1e-12)
    assert st.s == pytest.approx(g.entropy())
    assert st.psi == pytest.approx(g.log_partition(model.lam))


@pytest.mark.parametrize("variant", ["fixed-beta", "fixed-energy"])
def test_entropy_gradient_is_minus_lambda(variant):
    sys = _h1(("q", "p"))
    model = (StatModel.fixed_beta(sys, 1.0) if variant == "fixed-beta"
             else StatModel.fixed_energy(sys, beta_eq=1.0))
    lam = np.array([0.3, -0.2])
    a = gaussian_macrostate(model, lam)
    h = 1e-5
    grad = np.empty(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        sp = gaussian_relative_entropy(model, conjugate_parameters(model, a + e, lam))
        sm = gaussian_relative_entropy(model, conjugate_parameters(model, a - e, lam))
        grad[i] = (sp - sm) / (2 * h)
    assert np.allclose(-grad, lam, rtol=1e-5)


def test_duality_round_trip():
    model = StatModel.fixed_beta(build_system("harmonic-chain", {"n": 3}, ["Q1", "P1", "Q2"]), 0.7)
    lam = np.array([0.2, 0.1, -0.3])
    a = gaussian_macrostate(model, lam)
    assert np.allclose(conjugate_parameters(model, a), lam, rtol=1e-10)


def test_normalize_fixed_point():
    sys = _h1(("q",))
    eqs = sample(StatModel.fixed_beta(sys, 1.0), N5, seed=30)
    out = normalize_observables(sys, eqs)
    shift, alpha = out.normalization["shift"], out.normalization["alpha"]
    q = eqs.points[:, 0]
    h = sys.hamiltonian(eqs.points)
    _, se_shift = batch_means(q)
    _, se_cov = batch_means(q * (h - h.mean()))
    assert abs(shift[0]) < 3 * se_shift
    assert abs(alpha[0]) < 3 * se_cov / np.var(h)


def test_normalize_exact_gaussian_keeps_linearity():
    sys = _h1(("q", "p"))
    eqs = sample(StatModel.fixed_beta(sys, 1.0), 1000, seed=31)
    out = normalize_observables(sys, eqs, exact_beta=1.0)
    assert np.all(out.normalization["alpha"] == 0) and out.is_gaussian


def test_normalize_energy_observable_is_rank_deficient():
    sys = build_system("fpu-beta", {"n": 3}, ["energy"])
    eqs = sample(StatModel.fixed_beta(sys, 1.0), 2000, seed=32)
    with pytest.raises(RankDeficiencyError):
        normalize_observables(sys, eqs)


@pytest.mark.parametrize("k,beta", [(1.0, 1.0), (2.0, 0.5)])
def test_normalize_quadratic_observable_alpha(k, beta):
    # alpha = <q^2 H>_c / <dH^2> = (1/(beta^2 k)) / (1/beta^2) = 1/k
    gauss = _h1(("q",), k=k)
    eqs = sample(StatModel.fixed_beta(gauss, beta), 1_000_000, seed=33)
    out = normalize_observables(_h1(("q2",), k=k), eqs)
    assert out.normalization["alpha"][0] == pytest.approx(1 / k, rel=1e-2)
    vals = out.observable_values(eqs.points)[:, 0]
    h = gauss.hamiltonian(eqs.points)
    assert abs(vals.mean()) < 1e-10
    assert abs(np.mean(vals * (h - h.mean()))) < 1e-9
