"""Quadratic value functions: algebraic and differential Riccati equations.

Near equilibrium the value function is ``v(lam) = lam.M.lam / 2`` where
``M`` solves

    M C^-1 M + J C^-1 M - M C^-1 J = D

(stationary) or the matrix ODE ``dM/dt = D - M C^-1 M - J C^-1 M + M C^-1 J``
with ``M(0) = 0`` (nonstationary).  Both are solved in whitened
coordinates ``X = C^-1/2 M C^-1/2``, where the stationary equation becomes
a standard continuous-time algebraic Riccati equation with identity input
and cost weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from . import _kernels
from .errors import InvalidArgumentError, NoSolutionError, NotApplicableError, StepSizeError


@dataclass
class ValueHessian:
    """Stationary ``M`` or a sampled path ``M(t_k)`` on a uniform grid."""

    M: Optional[np.ndarray]
    residual_norm: float
    inputs: tuple
    times: Optional[np.ndarray] = None
    path: Optional[np.ndarray] = None
    flags: dict = field(default_factory=dict)

    @property
    def stationary(self):
        return self.path is None

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if self.times is not None and self.times.size > 1 else None

    def at(self, t):
        """Piecewise-linear ``M(t)``; raises outside the grid."""
        if self.stationary:
            return self.M
        t0, t1 = self.times[0], self.times[-1]
        if t < t0 - 1e-12 or t > t1 + 1e-9 * max(1.0, abs(t1)):
            raise InvalidArgumentError(f"t={t} outside the M(t) grid [{t0}, {t1}]")
        x = (t - t0) / self.dt
        k = min(int(np.floor(x)), self.path.shape[0] - 2)
        frac = x - k
        return (1 - frac) * self.path[k] + frac * self.path[k + 1]


# ---------------------------------------------------------------------------
# input checks and whitening


def _check_inputs(C, J, D):
    C = np.atleast_2d(np.asarray(C, dtype=float))
    m = C.shape[0]
    J = np.zeros((m, m)) if J is None else np.atleast_2d(np.asarray(J, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if C.shape != (m, m) or J.shape != (m, m) or D.shape != (m, m):
        raise InvalidArgumentError("C, J, D must be square with equal size")
    if not (np.all(np.isfinite(C)) and np.all(np.isfinite(J)) and np.all(np.isfinite(D))):
        raise InvalidArgumentError("non-finite matrix entries")
    scale = 1.0 + np.max(np.abs(C))
    if np.max(np.abs(C - C.T)) > 1e-10 * scale:
        raise InvalidArgumentError("C must be symmetric")
    if np.max(np.abs(J + J.T)) > 1e-10 * (1.0 + np.max(np.abs(J))):
        raise InvalidArgumentError("J must be antisymmetric")
    if np.max(np.abs(D - D.T)) > 1e-10 * (1.0 + np.max(np.abs(D))):
        raise InvalidArgumentError("D must be symmetric")
    C = 0.5 * (C + C.T)
    J = 0.5 * (J - J.T)
    D = 0.5 * (D + D.T)
    ev = np.linalg.eigvalsh(C)
    if ev[0] <= 0:
        raise InvalidArgumentError("C must be positive definite")
    evd = np.linalg.eigvalsh(D)
    if evd[0] < -1e-10 * max(1.0, evd[-1]):
        raise InvalidArgumentError("D must be positive semidefinite")
    return C, J, D


def _whitener(C):
    w, V = np.linalg.eigh(C)
    S = (V / np.sqrt(w)) @ V.T       # C^-1/2
    R = (V * np.sqrt(w)) @ V.T       # C^1/2
    return 0.5 * (S + S.T), 0.5 * (R + R.T)


def _sym(X):
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def riccati_residual(M, C, J, D):
    """``M C^-1 M + J C^-1 M - M C^-1 J - D``."""
    Ci = np.linalg.inv(C)
    return M @ Ci @ M + J @ Ci @ M - M @ Ci @ J - D


def _psd_clip(M):
    w, V = np.linalg.eigh(_sym(M))
    if w.size and w.min() < 0:
        w = np.clip(w, 0, None)
        return _sym((V * w) @ np.swapaxes(V, -1, -2))
    return _sym(M)


def time_scales(C, J, D):
    """(fast, slow) relaxation rates of the whitened stationary closure.

    ``slow`` is the smallest real part of the closed-loop rates
    ``eig(C^-1 (M - J))``; ``fast`` bounds every rate in the Riccati flow.
    """
    C, J, D = _check_inputs(C, J, D)
    S, _ = _whitener(C)
    Jt, Dt = S @ J @ S, S @ D @ S
    fast = np.sqrt(max(np.max(np.linalg.eigvalsh(Dt)), 0.0)) + np.linalg.norm(Jt, 2)
    try:
        M = solve_are(C, J, D).M
        rates = np.linalg.eigvals(np.linalg.solve(C, M - J)).real
        slow = float(rates.min())
    except NoSolutionError:
        slow = 0.0
    return float(fast), slow


# ---------------------------------------------------------------------------
# stationary equation


def _schur_solve(Jt, Dt):
    """Stabilizing solution of ``X^2 + Jt X - X Jt = Dt`` via ordered Schur."""
    m = Jt.shape[0]
    # CARE A^T X + X A - X X + Dt = 0 with A = Jt (so A^T = -Jt)
    A = Jt
    H = np.block([[A, -np.eye(m)], [-Dt, -A.T]])
    T, Z, sdim = linalg.schur(H, output="real", sort="lhp")
    eig = np.linalg.eigvals(H)
    margin = np.min(np.abs(eig.real)) if eig.size else 1.0
    scale = 1.0 + np.max(np.abs(H))
    if sdim != m or margin <= 1e-9 * scale:
        return None
    U1, U2 = Z[:m, :m], Z[m:, :m]
    if np.linalg.cond(U1) > 1e12:
        return None
    X = np.linalg.solve(U1.T, U2.T).T
    return _sym(X)


def solve_are(C, Jrev, D, fallback=True) -> ValueHessian:
    """Unique symmetric PSD solution of the algebraic Riccati equation.

    When the Hamiltonian matrix has eigenvalues on (or numerically at) the
    imaginary axis, as happens for singular ``D`` with undetectable modes,
    the Riccati ODE is integrated to its long-time limit instead and the
    result is flagged ``limit_converged``.
    """
    C, J, D = _check_inputs(C, Jrev, D)
    m = C.shape[0]
    tol = 1e-10 * (1.0 + np.linalg.norm(D))
    if not np.any(D):
        return ValueHessian(M=np.zeros((m, m)), residual_norm=0.0, inputs=(C, J, D))
    S, R = _whitener(C)
    Jt = S @ J @ S
    Jt = 0.5 * (Jt - Jt.T)
    Dt = _sym(S @ D @ S)
    X = _schur_solve(Jt, Dt)
    if X is not None:
        M = _psd_clip(R @ X @ R)
        res = float(np.linalg.norm(riccati_residual(M, C, J, D)))
        if res > tol:
            M, res = _newton_refine(M, C, J, D)
        if res <= tol:
            return ValueHessian(M=M, residual_norm=res, inputs=(C, J, D))
    if not fallback:
        raise NoSolutionError("no stabilizing invariant subspace of dimension m")
    return _are_limit(C, J, D, Jt, Dt, tol)


def _newton_refine(M, C, J, D, n_iter=5):
    """Newton (Kleinman) polish in whitened coordinates."""
    S, R = _whitener(C)
    X = S @ M @ S
    Jt, Dt = S @ J @ S, S @ D @ S
    Jt = 0.5 * (Jt - Jt.T)
    best = (M, float(np.linalg.norm(riccati_residual(M, C, J, D))))
    for _ in range(n_iter):
        # residual F(X) = X^2 + Jt X - X Jt - Dt; dF = (X + Jt) dX + dX (X - Jt)
        F = X @ X + Jt @ X - X @ Jt - Dt
        try:
            dX = linalg.solve_sylvester(X + Jt, X - Jt, -F)
        except (linalg.LinAlgError, ValueError):
            break
        X = _sym(X + dX)
        Mn = _psd_clip(R @ X @ R)
        res = float(np.linalg.norm(riccati_residual(Mn, C, J, D)))
        if res < best[1]:
            best = (Mn, res)
        else:
            break
    return best


def _are_limit(C, J, D, Jt, Dt, tol):
    evd = np.linalg.eigvalsh(Dt)
    pos = evd[evd > 1e-12 * evd[-1]]
    fast = np.sqrt(evd[-1]) + np.linalg.norm(Jt, 2)
    T = 1e3 / np.sqrt(pos.min())
    dt = 0.25 / fast
    n_steps = int(min(np.ceil(T / dt), 2_000_000))
    path, status, _ = _kernels.riccati_rk4(Jt, Dt, np.zeros_like(Dt), dt, n_steps, n_steps, True)
    if status:
        raise NoSolutionError("Riccati ODE limit diverged")
    _, R = _whitener(C)
    M = _psd_clip(R @ path[-1] @ R)
    res = float(np.linalg.norm(riccati_residual(M, C, J, D)))
    if res > max(tol, 1e-8 * (1.0 + np.linalg.norm(D))):
        raise NoSolutionError(f"Riccati ODE limit did not converge (residual {res:.3g})")
    return ValueHessian(M=M, residual_norm=res, inputs=(C, J, D),
                        flags={"limit_converged": True, "limit_time": n_steps * dt})


# ---------------------------------------------------------------------------
# nonstationary equation


def solve_riccati_ode(C, Jrev, D, T, dt, stride=1) -> ValueHessian:
    """RK4 path of the Riccati ODE from ``M(0) = 0`` on ``t = 0, dt, ..., T``.

    Only every ``stride``-th step is stored.  Steps are symmetrized; negative
    eigenvalues are projected out during the run when ``D`` is singular and
    always on the stored output.
    """
    C, J, D = _check_inputs(C, Jrev, D)
    if not (T > 0 and dt > 0):
        raise InvalidArgumentError("T and dt must be positive")
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * T:
        raise InvalidArgumentError("T must be an integer multiple of dt")
    if n_steps % stride:
        raise InvalidArgumentError("stride must divide the number of steps")
    S, R = _whitener(C)
    Jt = S @ J @ S
    Jt = 0.5 * (Jt - Jt.T)
    Dt = _sym(S @ D @ S)
    evd = np.linalg.eigvalsh(Dt)
    singular = evd[0] <= 1e-12 * max(evd[-1], 1e-300)
    path, status, done = _kernels.riccati_rk4(Jt, Dt, np.zeros_like(Dt), float(dt), n_steps, int(stride), bool(singular))
    if status:
        raise StepSizeError(f"Riccati ODE blew up at t={done * dt:.4g}; reduce dt (now {dt:g})")
    path = _sym(R @ path @ R)
    w, V = np.linalg.eigh(path)
    neg = w.min(axis=1) < 0
    if np.any(neg):
        wc = np.clip(w[neg], 0, None)
        path[neg] = _sym((V[neg] * wc[:, None, :]) @ np.swapaxes(V[neg], -1, -2))
    times = np.arange(path.shape[0]) * (dt * stride)
    res = float(np.linalg.norm(riccati_residual(path[-1], C, J, D)))
    return ValueHessian(M=path[-1], residual_norm=res, inputs=(C, J, D), times=times, path=path,
                        flags={"stationary_residual_at_T": res})


# ---------------------------------------------------------------------------
# even-parity diagonalization and scalar closed forms


def diagonalize(C, D, Jrev=None, Jrev_stderr=None):
    """Eigenvectors of ``D`` relative to ``C``: ``V^T C V = I``, ``V^T D V = diag(gamma)``.

    Only meaningful when the reversible coupling vanishes.  If ``Jrev`` is
    given, its Frobenius norm must be within three standard errors of zero
    (or rounding level when no error is supplied).
    """
    C, _, D = _check_inputs(C, None, D)
    if Jrev is not None:
        Jrev = np.atleast_2d(np.asarray(Jrev, dtype=float))
        jn = np.linalg.norm(Jrev)
        if Jrev_stderr is None:
            bound = 1e-12 * (1.0 + np.linalg.norm(C))
        else:
            bound = 3.0 * np.linalg.norm(np.asarray(Jrev_stderr, dtype=float))
        if jn > bound:
            raise NotApplicableError(
                f"diagonalization needs vanishing reversible coupling (|Jrev|_F = {jn:.3g} > {bound:.3g})"
            )
    gamma, V = linalg.eigh(D, C)
    gamma = np.clip(gamma, 0.0, None)
    return V, gamma


def diagonal_riccati_path(C, D, times):
    """``M(t)`` assembled from relative eigenpairs (vanishing reversible coupling)."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    V, gamma = diagonalize(C, D)
    t = np.asarray(times, dtype=float)
    r = np.sqrt(gamma)
    diag = r[None, :] * np.tanh(np.outer(t, r))
    CV = C @ V
    return np.einsum("ik,tk,jk->tij", CV, diag, CV)


def diagonal_closure(C, D, a0, times):
    """Nonstationary linear closure via decoupled modes ``b = V^T a``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    V, gamma = diagonalize(C, D)
    b0 = V.T @ np.asarray(a0, dtype=float)
    env = _sech(np.outer(np.asarray(times, dtype=float), np.sqrt(gamma)))
    return (env * b0) @ (C @ V).T


def _sech(x):
    x = np.abs(np.asarray(x, dtype=float))
    e = np.exp(-x)
    return 2.0 * e / (1.0 + e * e)


def scalar_closed_forms(C, D, t):
    """Scalar Riccati solution and the mode decay envelope.

    Returns ``(sqrt(C D) tanh(sqrt(D/C) t), sech(sqrt(D/C) t))``.
    """
    if not C > 0 or D < 0:
        raise InvalidArgumentError("need C > 0 and D >= 0")
    t = np.asarray(t, dtype=float)
    rate = np.sqrt(D / C)
    return np.sqrt(C * D) * np.tanh(rate * t), _sech(rate * t)
