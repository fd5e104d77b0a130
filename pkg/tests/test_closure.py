import numpy as np
import pytest
from conftest import random_antisym, random_psd, random_spd
from scipy.integrate import solve_bvp

from bestfit.closure import (BVPConfig, ExtremalSolver, generic_decomposition, hamiltonian_dual,
                             integrate_adiabatic, integrate_linear, integrate_nonlinear_stationary, lagrangian,
                             thermodynamics, conjugate_momentum)
from bestfit.errors import GridMismatchError, InvalidArgumentError
from bestfit.moments import ModelMatrices
from bestfit.providers import CallableProvider, ConstantProvider, GaussianProvider
from bestfit.riccati import diagonalize, solve_are, solve_riccati_ode
from bestfit.statmodel import StatModel
from bestfit.systems import build_system


def _mats(C, f, D, lam=None):
    C = np.atleast_2d(C)
    return ModelMatrices(C=C, f=np.asarray(f, dtype=float), Omega=np.zeros_like(C), D=np.atleast_2d(D),
                         lam=np.zeros(C.shape[0]) if lam is None else lam)


def _nonstationary(C, J, D, a0, T, dt, stride=1):
    path = solve_riccati_ode(C, J, D, T, dt / 2)
    lam0 = np.linalg.solve(np.atleast_2d(C), np.asarray(a0, dtype=float))
    return integrate_linear((C, J), path, lam0, T, dt, stride)


# ---------------------------------------------------------------------------
# cost function and its dual


def test_lagrangian_fitted_motion_has_no_kinetic_cost(rng):
    C, D = random_spd(rng, 3), random_psd(rng, 3)
    f = rng.normal(size=3)
    lam = rng.normal(size=3)
    L = lagrangian(_mats(C, f, D), lam, np.linalg.solve(C, f))
    assert abs(L.kinetic) < 1e-14
    assert L.total == pytest.approx(0.5 * lam @ D @ lam)


def test_lagrangian_equilibrium_and_scalar_value():
    assert lagrangian(_mats([[1.0]], [0.0], [[1.0]]), [0.0], [0.0]).total == 0.0
    L = lagrangian(_mats([[1.0]], [0.0], [[1.0]]), [1.0], [-1.0])
    assert (L.kinetic, L.potential, L.total) == (0.5, 0.5, 1.0)


def test_dual_at_origin():
    assert hamiltonian_dual(_mats(np.eye(2), [0.0, 0.0], np.eye(2)), [0.0, 0.0], [0.0, 0.0]) == 0.0


def test_legendre_round_trip(rng):
    for _ in range(100):
        C, D = random_spd(rng, 3), random_psd(rng, 3)
        mats = _mats(C, rng.normal(size=3), D)
        lam, ldot = rng.normal(size=3), rng.normal(size=3)
        mu = conjugate_momentum(mats, ldot)
        lhs = hamiltonian_dual(mats, lam, mu)
        rhs = ldot @ mu - lagrangian(mats, lam, ldot).total
        assert abs(lhs - rhs) <= 1e-12 * (1 + abs(rhs))


def test_dual_near_equilibrium_form(rng):
    C, D, J = random_spd(rng, 3), random_psd(rng, 3), random_antisym(rng, 3)
    lam, mu = rng.normal(size=3), rng.normal(size=3)
    Ci = np.linalg.inv(C)
    quad = 0.5 * mu @ Ci @ mu - lam @ J @ Ci @ mu - 0.5 * lam @ D @ lam
    assert hamiltonian_dual(_mats(C, J @ lam, D), lam, mu) == pytest.approx(quad, abs=1e-12)


# ---------------------------------------------------------------------------
# adiabatic closure


def _gaussian_provider(obs, k=1.0, beta=1.0, weight=1.0):
    model = StatModel.fixed_beta(build_system("harmonic-1", {"k": k}, obs), beta)
    return GaussianProvider(model, weight)


def test_adiabatic_canonical_pair_rotates():
    prov = _gaussian_provider(["q", "p"])
    traj = integrate_adiabatic(prov, [0.6, 0.2], T=20.0, dt=0.01, stride=10)
    t = traj.times
    exact = np.column_stack([0.6 * np.cos(t) + 0.2 * np.sin(t), 0.2 * np.cos(t) - 0.6 * np.sin(t)])
    assert np.max(np.abs(traj.a_path - exact)) < 1e-8
    r = np.linalg.norm(traj.a_path, axis=1)
    assert np.max(np.abs(r - r[0])) < 1e-8
    assert traj.metadata["entropy_drift"] <= 1e-8
    assert np.all(traj.irreversible_production == 0.0)


def test_adiabatic_equilibrium_fixed_point():
    traj = integrate_adiabatic(_gaussian_provider(["q", "p"]), [0.0, 0.0], T=1.0, dt=0.1)
    assert np.all(traj.lambda_path == 0.0)


def test_adiabatic_single_even_variable_is_frozen():
    traj = integrate_adiabatic(_gaussian_provider(["q"]), [0.4], T=5.0, dt=0.1)
    assert np.all(traj.lambda_path == 0.4)
    assert np.allclose(traj.a_path, 0.4, rtol=1e-14)


def test_adiabatic_decomposition_has_no_irreversible_part():
    traj = integrate_adiabatic(_gaussian_provider(["q", "p"]), [0.3, 0.0], T=2.0, dt=0.01)
    rev, irr = generic_decomposition(traj)
    assert np.all(irr == 0.0)
    assert traj.metadata["decomposition_error"] == 0.0


# ---------------------------------------------------------------------------
# linear closures


def test_linear_stationary_scalar_exponential():
    traj = integrate_linear(([[1.0]], [[0.0]]), solve_are([[1.0]], None, [[1.0]]), [0.7], T=5.0, dt=1e-3, stride=100)
    assert np.max(np.abs(traj.a_path[:, 0] - 0.7 * np.exp(-traj.times))) < 1e-10
    assert traj.regime == "linear-stationary"


def test_linear_nonstationary_scalar_sech():
    traj = _nonstationary([[1.0]], np.zeros((1, 1)), [[1.0]], [1.0], T=10.0, dt=1e-4, stride=100)
    assert np.max(np.abs(traj.a_path[:, 0] - 1 / np.cosh(traj.times))) <= 1e-6
    assert traj.regime == "linear-nonstationary"


def test_linear_duality_exact(rng):
    C, D, J = random_spd(rng, 3), random_psd(rng, 3) + 0.1 * np.eye(3), random_antisym(rng, 3)
    traj = integrate_linear((C, J), solve_are(C, J, D), rng.normal(size=3), T=2.0, dt=0.01)
    assert np.array_equal(traj.a_path, traj.lambda_path @ C.T)


def test_even_parity_modes_decay_as_sech(rng):
    C, D = random_spd(rng, 3), random_psd(rng, 3) + 0.05 * np.eye(3)
    a0 = rng.normal(size=3)
    traj = _nonstationary(C, np.zeros((3, 3)), D, a0, T=6.0, dt=1e-3, stride=50)
    V, gamma = diagonalize(C, D)
    b = traj.a_path @ V
    expect = (a0 @ V)[None] / np.cosh(np.outer(traj.times, np.sqrt(gamma)))
    assert np.max(np.abs(b - expect)) < 1e-8


def test_nonstationary_plateau():
    traj = _nonstationary([[1.0]], np.zeros((1, 1)), [[1.0]], [1.0], T=1.0, dt=1e-3)
    p = traj.production
    assert p[0] == 0.0
    # near zero the production grows linearly with positive slope
    slope = p[1:50] / traj.times[1:50]
    assert np.all(slope > 0)
    assert np.all(np.diff(p[:200]) > 0)
    assert thermodynamics(traj).irreversible_production[0] == 0.0


def test_nonstationary_approaches_stationary_decay_rate(rng):
    for C, D in [(np.eye(1), np.eye(1)), (random_spd(rng, 2), random_psd(rng, 2) + 0.2 * np.eye(2))]:
        m = C.shape[0]
        a0 = np.ones(m)
        T = 30.0
        ns = _nonstationary(C, np.zeros((m, m)), D, a0, T=T, dt=1e-3, stride=100)
        st = integrate_linear((C, np.zeros((m, m))), solve_are(C, None, D), np.linalg.solve(C, a0), T, 1e-3, 100)
        k = ns.times >= 20.0
        r_ns = -np.polyfit(ns.times[k], np.log(np.linalg.norm(ns.a_path[k], axis=1)), 1)[0]
        r_st = -np.polyfit(st.times[k], np.log(np.linalg.norm(st.a_path[k], axis=1)), 1)[0]
        assert r_ns == pytest.approx(r_st, rel=1e-3)


def test_grid_mismatch_is_rejected():
    path = solve_riccati_ode([[1.0]], None, [[1.0]], 1.0, 0.01)
    with pytest.raises(GridMismatchError):
        integrate_linear(([[1.0]], [[0.0]]), path, [1.0], T=2.0, dt=0.02)
    with pytest.raises(GridMismatchError):
        integrate_linear(([[1.0]], [[0.0]]), path, [1.0], T=0.9, dt=0.015)
    with pytest.raises(InvalidArgumentError):
        integrate_linear(([[1.0]], [[0.0]]), np.eye(1), [1.0], T=1.0, dt=0.3)


def test_fundamental_identity_in_stationary_runs(rng):
    C, D, J = random_spd(rng, 2), random_psd(rng, 2) + 0.1 * np.eye(2), random_antisym(rng, 2)
    traj = thermodynamics(integrate_linear((C, J), solve_are(C, J, D), rng.normal(size=2), T=5.0, dt=0.01))
    M = traj.metadata["M"]
    lam = traj.lambda_path
    two_v = np.einsum("ki,ij,kj->k", lam, M, lam)
    assert np.max(np.abs(traj.production - two_v)) <= 1e-10
    assert np.all(traj.production >= 0)
    # production bounded below by v
    assert np.all(traj.production >= 0.5 * two_v)


def test_scalar_entropy_budget():
    a0 = 0.8
    traj = thermodynamics(integrate_linear(([[1.0]], [[0.0]]), np.eye(1), [a0], T=30.0, dt=1e-3))
    assert np.allclose(traj.production, traj.a_path[:, 0] ** 2, rtol=1e-12)
    gain = traj.entropy_path[-1] - traj.entropy_path[0]
    assert gain == pytest.approx(0.5 * a0 ** 2, rel=1e-10)
    assert traj.metadata["entropy_quadrature"][-1] - traj.entropy_path[0] == pytest.approx(0.5 * a0 ** 2, rel=1e-6)


def test_linear_decomposition(rng):
    C, D, J = random_spd(rng, 2), random_psd(rng, 2) + 0.1 * np.eye(2), random_antisym(rng, 2)
    M = solve_are(C, J, D).M
    traj = integrate_linear((C, J), M, rng.normal(size=2), T=3.0, dt=0.01)
    rev, irr = generic_decomposition(traj, ConstantProvider(C, J, D))
    assert np.allclose(rev, traj.lambda_path @ J.T, atol=1e-14)
    assert np.allclose(irr, -traj.lambda_path @ M.T, atol=1e-14)
    assert traj.metadata["decomposition_error"] <= 1e-12


def test_linearizations_agree_between_variants():
    sys = build_system("harmonic-1", {"k": 1.0}, ["q"])
    fb = GaussianProvider(StatModel.fixed_beta(sys, 1.0), 1.0)
    fe = GaussianProvider(StatModel.fixed_energy(sys, beta_eq=1.0), 1.0)
    for x, y in zip(fb.linearization(), fe.linearization()):
        assert np.allclose(x, y, atol=1e-9)


# ---------------------------------------------------------------------------
# nonlinear stationary closure


@pytest.mark.parametrize("m", [1, 2, 3])
def test_nonlinear_reduces_to_linear(m):
    rng = np.random.default_rng(40 + m)
    C, D, J = random_spd(rng, m), random_psd(rng, m) + 0.2 * np.eye(m), random_antisym(rng, m, norm=0.5)
    lam0 = rng.normal(size=m)
    prov = ConstantProvider(C, J, D)
    nl = integrate_nonlinear_stationary(prov, lam0, T=3.0, dt=0.01)
    lin = integrate_linear((C, J), solve_are(C, J, D), lam0, T=3.0, dt=0.01)
    assert np.max(np.abs(nl.lambda_path - lin.lambda_path)) <= 1e-6


def test_nonlinear_equilibrium_stays_put():
    prov = ConstantProvider(np.eye(2), None, np.eye(2))
    traj = integrate_nonlinear_stationary(prov, [0.0, 0.0], T=1.0, dt=0.1)
    assert np.all(traj.lambda_path == 0.0) and np.all(traj.flux_path == 0.0)


def _quartic_provider():
    return CallableProvider(
        1,
        C=lambda L: np.ones((L.shape[0], 1, 1)),
        f=lambda L: np.zeros_like(L),
        D=lambda L: (1.0 + L[:, 0] ** 2)[:, None, None],
        vectorized=True,
    )


def _collocation_flux(lam0, horizon=12.0):
    # extremal: dlam/dt = mu, dmu/dt = lam + 2 lam^3, lam(0) = lam0, lam(T) = 0
    def rhs(t, y):
        return np.vstack([y[1], y[0] + 2 * y[0] ** 3])

    def bc(ya, yb):
        return np.array([ya[0] - lam0, yb[0]])

    t = np.linspace(0, horizon, 2001)
    guess = np.vstack([lam0 * np.exp(-t), -lam0 * np.exp(-t)])
    sol = solve_bvp(rhs, bc, t, guess, tol=1e-8, max_nodes=200_000)
    assert sol.success
    return sol.sol(0.0)[1]


def test_nonlinear_quartic_potential_matches_collocation_oracle():
    prov = _quartic_provider()
    solver = ExtremalSolver(prov, BVPConfig(use_linear_flow=False))
    for lam0 in (0.3, 0.8, 1.2):
        mu, info = solver.flux(np.array([lam0]))
        assert mu[0] == pytest.approx(_collocation_flux(lam0), rel=1e-3)
    traj = integrate_nonlinear_stationary(prov, [1.0], T=1.0, dt=0.05)
    assert np.all(traj.irreversible_production >= 0)
    assert np.all(np.diff(np.abs(traj.lambda_path[:, 0])) < 0)
