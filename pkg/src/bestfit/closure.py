"""Closed reduced dynamics in the parameter ``lam``.

Four regimes are integrated with fixed-step RK4:

* ``adiabatic``: ``C(lam) dlam/dt = f(lam)``, reversible and entropy conserving;
* ``linear-stationary``: ``C dlam/dt = (J - M) lam`` with ``M`` from the
  algebraic Riccati equation;
* ``linear-nonstationary``: the same with ``M(t)`` from the Riccati ODE;
* ``nonlinear-stationary``: ``C(lam) dlam/dt = f(lam) + mu_hat(lam)``, where
  the irreversible flux ``mu_hat = -dv/dlam`` is the initial conjugate
  momentum of the extremal path that relaxes ``lam`` to equilibrium.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from . import _kernels
from .errors import (ClosureError, GridMismatchError, InvalidArgumentError, NonConvergenceError,
                     RankDeficiencyError, SolverError)
from .moments import EquilibriumConstants, ModelMatrices
from .riccati import ValueHessian, solve_are

ADIABATIC = "adiabatic"
LINEAR_STATIONARY = "linear-stationary"
LINEAR_NONSTATIONARY = "linear-nonstationary"
NONLINEAR_STATIONARY = "nonlinear-stationary"
ENSEMBLE = "ensemble"
REGIMES = (ADIABATIC, LINEAR_STATIONARY, LINEAR_NONSTATIONARY, NONLINEAR_STATIONARY)


@dataclass
class ReducedTrajectory:
    """Macrostate path on a uniform time grid.

    ``flux_path`` is the irreversible flux ``mu_hat``; ``dadt_path`` the
    total rate ``C dlam/dt``; ``production`` the entropy production
    ``-lam . dadt``; ``entropy_path`` the entropy relative to equilibrium.
    """

    times: np.ndarray
    lambda_path: np.ndarray
    a_path: np.ndarray
    flux_path: np.ndarray
    entropy_path: np.ndarray
    production: np.ndarray
    regime: str
    dadt_path: Optional[np.ndarray] = None
    reversible_path: Optional[np.ndarray] = None
    irreversible_production: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def m(self):
        return self.lambda_path.shape[1]


@dataclass
class LagrangianEval:
    kinetic: float
    potential: float
    total: float


def lagrangian(mats: ModelMatrices, lam, lam_dot) -> LagrangianEval:
    """Lack-of-fit rate: kinetic ``(ldot - C^-1 f).C.(ldot - C^-1 f) / 2`` plus ``lam.D.lam / 2``."""
    lam = np.asarray(lam, dtype=float)
    dev = np.asarray(lam_dot, dtype=float) - np.linalg.solve(mats.C, mats.f)
    kin = 0.5 * dev @ mats.C @ dev
    pot = 0.5 * lam @ mats.D @ lam
    return LagrangianEval(kinetic=float(kin), potential=float(pot), total=float(kin + pot))


def hamiltonian_dual(mats: ModelMatrices, lam, mu) -> float:
    """Convex conjugate of the Lagrangian in its rate argument."""
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    Cmu = np.linalg.solve(mats.C, mu)
    return float(0.5 * mu @ Cmu + mats.f @ Cmu - 0.5 * lam @ mats.D @ lam)


def conjugate_momentum(mats: ModelMatrices, lam_dot):
    """``dL/dldot = C ldot - f``."""
    return mats.C @ np.asarray(lam_dot, dtype=float) - mats.f


# ---------------------------------------------------------------------------
# helpers


def _grid(T, dt, stride):
    if not (T > 0 and dt > 0):
        raise InvalidArgumentError("T and dt must be positive")
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * T:
        raise InvalidArgumentError("T must be an integer multiple of dt")
    if stride < 1 or n_steps % stride:
        raise InvalidArgumentError("stride must divide the number of steps")
    return n_steps


_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


def _anchor(provider, lam0):
    """Macrostate and relative entropy at ``lam0`` (state functions if available)."""
    a0 = provider.macrostate(lam0)
    s0 = provider.entropy(lam0)
    if a0 is not None and s0 is not None:
        return np.asarray(a0, dtype=float), float(s0)
    # integrate da = C dlam and ds = -lam.C.dlam along the ray tau * lam0
    tau = 0.5 * (_GL_X + 1.0)
    wts = 0.5 * _GL_W
    a_acc = np.zeros_like(lam0)
    s_acc = 0.0
    for t, w in zip(tau, wts):
        Cl = provider.matrices(t * lam0).C @ lam0
        a_acc += w * Cl
        s_acc -= w * t * (lam0 @ Cl)
    return (a_acc if a0 is None else np.asarray(a0, dtype=float)), (s_acc if s0 is None else float(s0))


def _stack(rows):
    return np.array(rows, dtype=float)


# ---------------------------------------------------------------------------
# adiabatic closure


def integrate_adiabatic(provider, lambda0, T, dt, stride=1) -> ReducedTrajectory:
    """RK4 for ``C(lam) dlam/dt = f(lam)`` with ``a`` and ``s`` carried along.

    ``a`` and ``s`` are advanced with the same RK4 combination from
    ``da/dt = f`` and ``ds/dt = -lam . f``; when the provider exposes state
    functions, ``a(lam)`` and ``s(lam)`` along the path are also recorded in
    ``metadata`` (``a_state``, ``entropy_state``).
    """
    lam = np.array(lambda0, dtype=float).reshape(provider.m)
    n_steps = _grid(T, dt, stride)
    a, s = _anchor(provider, lam)

    def rates(l):
        C, f = provider.reversible(l)
        try:
            ld = np.linalg.solve(C, f)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(f"singular C at lambda={l}") from exc
        return ld, f, -l @ f

    out = {"lam": [lam.copy()], "a": [a.copy()], "s": [s], "f": [], "prod": []}
    t_now = 0.0
    try:
        for step in range(n_steps):
            l1, a1, s1 = rates(lam)
            if step % stride == 0:
                out["f"].append(a1)
                out["prod"].append(s1)
            l2, a2, s2 = rates(lam + 0.5 * dt * l1)
            l3, a3, s3 = rates(lam + 0.5 * dt * l2)
            l4, a4, s4 = rates(lam + dt * l3)
            lam = lam + dt / 6 * (l1 + 2 * l2 + 2 * l3 + l4)
            a = a + dt / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
            s = s + dt / 6 * (s1 + 2 * s2 + 2 * s3 + s4)
            t_now = (step + 1) * dt
            if not np.all(np.isfinite(lam)):
                raise SolverError(f"adiabatic closure diverged at t={t_now:.4g}")
            if (step + 1) % stride == 0:
                out["lam"].append(lam.copy())
                out["a"].append(a.copy())
                out["s"].append(s)
    except (RankDeficiencyError, SolverError) as exc:
        err = SolverError(f"adiabatic run aborted at t={t_now:.4g}: {exc}")
        err.state = {"t": t_now, "lambda": lam.copy()}
        raise err from exc
    _, f_end, p_end = rates(lam)
    out["f"].append(f_end)
    out["prod"].append(p_end)

    lam_path = _stack(out["lam"])
    f_path = _stack(out["f"])
    s_path = np.array(out["s"])
    times = np.arange(lam_path.shape[0]) * dt * stride
    traj = ReducedTrajectory(
        times=times, lambda_path=lam_path, a_path=_stack(out["a"]), flux_path=np.zeros_like(lam_path),
        entropy_path=s_path, production=np.array(out["prod"]), regime=ADIABATIC,
        dadt_path=f_path, reversible_path=f_path.copy(), irreversible_production=np.zeros(times.size),
        metadata={"dt": dt, "T": T, "stride": stride},
    )
    if provider.macrostate(lam_path[0]) is not None:
        traj.metadata["a_state"] = _stack([provider.macrostate(l) for l in lam_path])
    if provider.entropy(lam_path[0]) is not None:
        traj.metadata["entropy_state"] = np.array([provider.entropy(l) for l in lam_path])
    drift = float(np.max(np.abs(s_path - s_path[0])))
    traj.metadata["entropy_drift"] = drift
    if drift > 1e-8:
        traj.warnings.append(f"adiabatic entropy drift {drift:.3g} exceeds 1e-8")
    return traj


# ---------------------------------------------------------------------------
# linear closures


def _constants(eqc):
    if isinstance(eqc, EquilibriumConstants):
        return eqc.C0, eqc.Jrev
    C, J = eqc[0], eqc[1]
    return np.atleast_2d(np.asarray(C, dtype=float)), np.atleast_2d(np.asarray(J, dtype=float))


def integrate_linear(eqc, M_source, lambda0, T, dt, stride=1) -> ReducedTrajectory:
    """RK4 for ``C dlam/dt = (J - M(t)) lam`` with ``a = C lam``.

    ``M_source`` is a stationary :class:`ValueHessian` (or plain matrix), or
    a Riccati-ODE path starting at ``t = 0``.  For a path, ``dt`` must be an
    integer multiple of the path spacing and the run must not extend past
    its last time; stage midpoints are linearly interpolated.
    """
    C, J = _constants(eqc)
    m = C.shape[0]
    lam0 = np.array(lambda0, dtype=float).reshape(m)
    n_steps = _grid(T, dt, stride)
    if isinstance(M_source, ValueHessian) and not M_source.stationary:
        vh = M_source
        dtM = vh.dt
        if abs(vh.times[0]) > 1e-12:
            raise GridMismatchError(f"M(t) grid starts at {vh.times[0]}, run starts at 0")
        ratio = dt / dtM
        r = int(round(ratio))
        if r < 1 or abs(ratio - r) > 1e-9 * ratio:
            raise GridMismatchError(f"dt={dt} is not a multiple of the M(t) spacing {dtM}")
        if n_steps * r > vh.path.shape[0] - 1:
            raise GridMismatchError(f"run to T={T} extends past the M(t) grid end {vh.times[-1]}")
        Mgrid = np.ascontiguousarray(vh.path)
        regime = LINEAR_NONSTATIONARY
        M_out = Mgrid[np.arange(0, n_steps + 1, stride) * r]
    else:
        M = M_source.M if isinstance(M_source, ValueHessian) else np.atleast_2d(np.asarray(M_source, dtype=float))
        Mgrid = np.ascontiguousarray(M[None])
        dtM = 1.0
        regime = LINEAR_STATIONARY
        M_out = np.broadcast_to(M, (n_steps // stride + 1, m, m))
    Cinv = np.linalg.inv(C)
    lam_path = _kernels.linear_rk4(Cinv, np.ascontiguousarray(J), Mgrid, 0.0, float(dtM), lam0,
                                   float(dt), n_steps, int(stride))
    times = np.arange(lam_path.shape[0]) * dt * stride
    a_path = lam_path @ C.T
    flux = -np.einsum("kij,kj->ki", M_out, lam_path)
    rev = lam_path @ J.T
    dadt = rev + flux
    prod = -np.einsum("ki,ki->k", lam_path, dadt)
    irr = -np.einsum("ki,ki->k", lam_path, flux)
    s_path = -0.5 * np.einsum("ki,ki->k", lam_path, a_path)
    meta = {"dt": dt, "T": T, "stride": stride, "fundamental_identity_error": float(np.max(np.abs(prod - irr)))}
    if regime == LINEAR_STATIONARY:
        meta["M"] = Mgrid[0]
    return ReducedTrajectory(times=times, lambda_path=lam_path, a_path=a_path, flux_path=flux,
                             entropy_path=s_path, production=prod, regime=regime, dadt_path=dadt,
                             reversible_path=rev, irreversible_production=irr, metadata=meta)


# ---------------------------------------------------------------------------
# nonlinear stationary closure


@dataclass
class BVPConfig:
    """Extremal-path solver settings.

    The horizon defaults to ``tc_horizon`` slow relaxation times, capped at
    ``rate_horizon`` fast times so that backward growth stays below
    ``exp(rate_horizon)``, and at ``spread_horizon`` over the spread of decay
    rates, which sets the rounding floor of the backward shot.  The inner
    step resolves the fastest rate with ``inner_per_fast`` steps.
    """

    horizon: Optional[float] = None
    inner_steps: Optional[int] = None
    tc_horizon: float = 20.0
    rate_horizon: float = 25.0
    spread_horizon: float = 10.0
    inner_per_fast: float = 20.0
    max_iter: int = 50
    tol: float = 1e-11
    fd_step: float = 1e-7
    backtrack_warn: int = 3
    use_linear_flow: bool = True


class ExtremalSolver:
    """Irreversible flux ``mu_hat(lam)`` from the relaxing extremal path.

    The extremal path obeys Hamilton's equations of the dual function.  Its
    terminal state is parametrized on the stable subspace of the
    linearization at equilibrium, ``lam(T) = P xi``, ``mu(T) = -M lam(T)``
    with ``P = expm(T C^-1 (J - M))``, and integrated backward to ``t = 0``.
    Damped Newton on ``xi`` then matches ``lam(0)`` to the requested state;
    in this parametrization the Jacobian is close to the identity.
    """

    def __init__(self, provider, config: BVPConfig = None):
        self.provider = provider
        self.cfg = cfg = config or BVPConfig()
        m = self.m = provider.m
        C0, J0, D0 = provider.linearization()
        self.M = solve_are(C0, J0, D0).M
        Acl = np.linalg.solve(C0, J0 - self.M)
        rates = -np.linalg.eigvals(Acl).real
        if rates.min() <= 0:
            raise SolverError("linearized closure is not asymptotically stable; D may be degenerate")
        self.slow, self.fast = float(rates.min()), float(np.max(np.abs(np.linalg.eigvals(Acl))))
        self.t_c = 1.0 / self.slow
        spread = float(rates.max() - rates.min())
        T = cfg.horizon or min(cfg.tc_horizon * self.t_c, cfg.rate_horizon / self.fast,
                               cfg.spread_horizon / spread if spread > 0 else np.inf)
        # rounding in the slow component is amplified by the faster backward growth
        self.floor = 1e3 * np.finfo(float).eps * math.exp(spread * T)
        n = cfg.inner_steps or int(math.ceil(T * self.fast * cfg.inner_per_fast))
        self.T, self.n_inner, self.h = T, n, T / n
        self.P = linalg.expm(T * Acl)
        self._phi = None
        L = provider.extremal_flow_matrix() if cfg.use_linear_flow else None
        if L is not None:
            Z = -self.h * L
            R = np.eye(2 * m) + Z + Z @ Z / 2 + Z @ Z @ Z / 6 + Z @ Z @ Z @ Z / 24
            self._phi = np.linalg.matrix_power(R, n)
        self.jac = np.eye(m)
        self.xi_prev = None
        self.lam_prev = None
        self.backtrack_failures = 0
        self.n_shots = 0

    def _backward(self, lam, mu):
        self.n_shots += lam.shape[0]
        if self._phi is not None:
            y = np.concatenate([lam, mu], axis=1) @ self._phi.T
            return y[:, :self.m], y[:, self.m:]
        h = -self.h
        grad = self.provider.hamiltonian_gradients
        for _ in range(self.n_inner):
            gl1, gm1 = grad(lam, mu)
            gl2, gm2 = grad(lam + 0.5 * h * gm1, mu - 0.5 * h * gl1)
            gl3, gm3 = grad(lam + 0.5 * h * gm2, mu - 0.5 * h * gl2)
            gl4, gm4 = grad(lam + h * gm3, mu - h * gl3)
            lam = lam + h / 6 * (gm1 + 2 * gm2 + 2 * gm3 + gm4)
            mu = mu - h / 6 * (gl1 + 2 * gl2 + 2 * gl3 + gl4)
            if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(mu))):
                break
        return lam, mu

    def shoot(self, xi):
        xi = np.atleast_2d(xi)
        lam_T = xi @ self.P.T
        return self._backward(lam_T, -lam_T @ self.M)

    def _fd_jacobian(self, xi):
        steps = self.cfg.fd_step * (1.0 + np.abs(xi))
        batch = np.vstack([xi, xi + np.diag(steps)])
        lam0, _ = self.shoot(batch)
        return ((lam0[1:] - lam0[0]) / steps[:, None]).T

    def flux(self, lam):
        """``mu_hat(lam)``; ``info`` records iterations and the final residual."""
        lam = np.asarray(lam, dtype=float)
        if not np.any(lam):
            return np.zeros(self.m), {"iterations": 0, "residual": 0.0}
        if self.xi_prev is None:
            xi = lam.copy()
        else:
            xi = self.xi_prev + np.linalg.solve(self.jac, lam - self.lam_prev) \
                if self.jac is not None else self.xi_prev + lam - self.lam_prev
        tol = max(self.cfg.tol, self.floor) * (1.0 + np.max(np.abs(lam)))
        l0, mu0 = self.shoot(xi)
        F = l0[0] - lam
        fnorm = np.max(np.abs(F))
        fresh = False
        for it in range(self.cfg.max_iter):
            if np.isfinite(fnorm) and fnorm <= tol:
                self.xi_prev, self.lam_prev = xi, lam
                return mu0[0], {"iterations": it, "residual": float(fnorm)}
            step = -np.linalg.solve(self.jac, F)
            alpha = 1.0
            accepted = False
            for _ in range(12):
                cand = xi + alpha * step
                l_c, mu_c = self.shoot(cand)
                F_c = l_c[0] - lam
                n_c = np.max(np.abs(F_c))
                if np.isfinite(n_c) and n_c < fnorm:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                self.backtrack_failures += 1
                if fresh:
                    break
                self.jac = self._fd_jacobian(xi)
                fresh = True
                continue
            if n_c > 0.5 * fnorm and not fresh:
                self.jac = self._fd_jacobian(cand)
                fresh = True
            else:
                # Broyden rank-one update keeps convergence superlinear
                ds = cand - xi
                self.jac = self.jac + np.outer(F_c - F - self.jac @ ds, ds) / (ds @ ds)
                fresh = False
            xi, F, fnorm, mu0 = cand, F_c, n_c, mu_c
        raise NonConvergenceError(
            f"extremal shooting did not converge after {self.cfg.max_iter} iterations", residual=float(fnorm)
        )


def integrate_nonlinear_stationary(provider, lambda0, T, dt, bvp: BVPConfig = None, stride=1) -> ReducedTrajectory:
    """RK4 for ``C(lam) dlam/dt = f(lam) + mu_hat(lam)`` with an extremal solve per stage."""
    if provider.m > 4:
        raise InvalidArgumentError("nonlinear stationary closure supports m <= 4")
    lam = np.array(lambda0, dtype=float).reshape(provider.m)
    n_steps = _grid(T, dt, stride)
    solver = ExtremalSolver(provider, bvp)
    a, s = _anchor(provider, lam)
    max_res = 0.0

    def rates(l):
        nonlocal max_res
        mats = provider.matrices(l)
        mu, info = solver.flux(l)
        max_res = max(max_res, info["residual"])
        total = mats.f + mu
        return np.linalg.solve(mats.C, total), total, -l @ total, mu, mats.f

    rec = {"lam": [], "a": [], "s": [], "mu": [], "dadt": [], "f": []}

    def record(l, a_, s_, mu, tot, f):
        rec["lam"].append(l.copy())
        rec["a"].append(a_.copy())
        rec["s"].append(s_)
        rec["mu"].append(mu)
        rec["dadt"].append(tot)
        rec["f"].append(f)

    for step in range(n_steps):
        l1, a1, s1, mu1, f1 = rates(lam)
        if step % stride == 0:
            record(lam, a, s, mu1, a1, f1)
        l2, a2, s2, _, _ = rates(lam + 0.5 * dt * l1)
        l3, a3, s3, _, _ = rates(lam + 0.5 * dt * l2)
        l4, a4, s4, _, _ = rates(lam + dt * l3)
        lam = lam + dt / 6 * (l1 + 2 * l2 + 2 * l3 + l4)
        a = a + dt / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        s = s + dt / 6 * (s1 + 2 * s2 + 2 * s3 + s4)
    _, a_end, _, mu_end, f_end = rates(lam)
    record(lam, a, s, mu_end, a_end, f_end)

    lam_path = _stack(rec["lam"])
    mu_path = _stack(rec["mu"])
    dadt = _stack(rec["dadt"])
    times = np.arange(lam_path.shape[0]) * dt * stride
    traj = ReducedTrajectory(
        times=times, lambda_path=lam_path, a_path=_stack(rec["a"]), flux_path=mu_path,
        entropy_path=np.array(rec["s"]), production=-np.einsum("ki,ki->k", lam_path, dadt),
        regime=NONLINEAR_STATIONARY, dadt_path=dadt, reversible_path=_stack(rec["f"]),
        irreversible_production=-np.einsum("ki,ki->k", lam_path, mu_path),
        metadata={"dt": dt, "T": T, "stride": stride, "bvp_horizon": solver.T,
                  "bvp_inner_steps": solver.n_inner, "bvp_max_residual": max_res,
                  "t_c": solver.t_c, "shots": solver.n_shots, "M_equilibrium": solver.M},
    )
    if solver.backtrack_failures >= solver.cfg.backtrack_warn:
        msg = (f"convexity loss suspected: Newton failed to descend {solver.backtrack_failures} times; "
               "the dual function may not be convex along this path")
        traj.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return traj


# ---------------------------------------------------------------------------
# diagnostics


def thermodynamics(traj: ReducedTrajectory, eqc=None, tol=1e-10) -> ReducedTrajectory:
    """Attach entropy by quadrature of the production and check flux identities.

    ``metadata["entropy_quadrature"]`` is the cumulative trapezoid integral
    of ``-lam . dadt`` anchored at ``entropy_path[0]``; for linear
    stationary runs the identity ``ds/dt = lam.M.lam = 2 v(lam)`` is enforced.
    """
    lam = traj.lambda_path
    dadt = traj.dadt_path if traj.dadt_path is not None else np.gradient(traj.a_path, traj.times, axis=0)
    prod = -np.einsum("ki,ki->k", lam, dadt)
    dt = np.diff(traj.times)
    quad = np.concatenate([[0.0], np.cumsum(0.5 * (prod[1:] + prod[:-1]) * dt)])
    traj.metadata["entropy_quadrature"] = traj.entropy_path[0] + quad
    traj.irreversible_production = -np.einsum("ki,ki->k", lam, traj.flux_path)
    if traj.regime == LINEAR_STATIONARY:
        M = traj.metadata["M"]
        two_v = np.einsum("ki,ij,kj->k", lam, M, lam)
        err = np.abs(prod - two_v)
        bound = tol * (1.0 + np.abs(two_v))
        traj.metadata["production_identity_error"] = float(err.max())
        if np.any(err > bound):
            raise ClosureError(f"entropy production differs from 2v by {err.max():.3g}")
    return traj


def generic_decomposition(traj: ReducedTrajectory, provider=None, tol=1e-10):
    """Split ``da/dt`` into the reversible drift and the irreversible flux.

    Returns ``(reversible, irreversible)`` arrays of shape ``(K, m)``; the
    recomposition error is stored in ``traj.metadata``.
    """
    if provider is not None:
        rev = _stack([provider.matrices(l).f for l in traj.lambda_path])
    elif traj.reversible_path is not None:
        rev = traj.reversible_path
    else:
        raise InvalidArgumentError("need a provider or a stored reversible path")
    irr = traj.flux_path
    if traj.dadt_path is not None:
        err = float(np.max(np.abs(rev + irr - traj.dadt_path)))
        traj.metadata["decomposition_error"] = err
        scale = 1.0 + float(np.max(np.abs(traj.dadt_path)))
        if err > tol * scale:
            raise ClosureError(f"reversible + irreversible differs from da/dt by {err:.3g}")
    return rev, irr
