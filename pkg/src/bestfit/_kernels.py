"""Compiled fixed-step RK4 kernels for the matrix Riccati ODE and the linear closure."""

import numpy as np
from numba import njit

BLOWUP = 1e8


@njit(cache=True)
def _riccati_rhs(M, J, D, out):
    # whitened form: dM/dt = D - M M - J M + M J, written in place
    m = M.shape[0]
    for i in range(m):
        for j in range(m):
            acc = D[i, j]
            for k in range(m):
                acc += -M[i, k] * M[k, j] - J[i, k] * M[k, j] + M[i, k] * J[k, j]
            out[i, j] = acc


@njit(cache=True)
def _psd_project(M):
    w, V = np.linalg.eigh(M)
    for i in range(w.size):
        if w[i] < 0.0:
            w[i] = 0.0
    return (V * w) @ V.T


@njit(cache=True)
def riccati_rk4(J, D, M0, dt, n_steps, stride, project):
    """Integrate the whitened Riccati ODE; returns (path, status, steps_done).

    ``path[k]`` holds M after ``k * stride`` steps.  ``status`` is 0 on
    success and 1 when the norm exceeded the blow-up threshold.
    """
    m = J.shape[0]
    n_out = n_steps // stride + 1
    path = np.zeros((n_out, m, m))
    M = M0.copy()
    path[0] = M
    half = 0.5 * dt
    k1 = np.empty((m, m))
    k2 = np.empty((m, m))
    k3 = np.empty((m, m))
    k4 = np.empty((m, m))
    tmp = np.empty((m, m))
    for step in range(1, n_steps + 1):
        _riccati_rhs(M, J, D, k1)
        for i in range(m):
            for j in range(m):
                tmp[i, j] = M[i, j] + half * k1[i, j]
        _riccati_rhs(tmp, J, D, k2)
        for i in range(m):
            for j in range(m):
                tmp[i, j] = M[i, j] + half * k2[i, j]
        _riccati_rhs(tmp, J, D, k3)
        for i in range(m):
            for j in range(m):
                tmp[i, j] = M[i, j] + dt * k3[i, j]
        _riccati_rhs(tmp, J, D, k4)
        big = 0.0
        finite = True
        for i in range(m):
            for j in range(m):
                tmp[i, j] = M[i, j] + (dt / 6.0) * (k1[i, j] + 2.0 * k2[i, j] + 2.0 * k3[i, j] + k4[i, j])
        for i in range(m):
            for j in range(m):
                v = 0.5 * (tmp[i, j] + tmp[j, i])
                M[i, j] = v
                if not np.isfinite(v):
                    finite = False
                elif abs(v) > big:
                    big = abs(v)
        if project:
            M = _psd_project(M)
            big = np.max(np.abs(M))
        if big > BLOWUP or not finite:
            return path, 1, step
        if step % stride == 0:
            path[step // stride] = M
    return path, 0, n_steps


@njit(cache=True)
def _interp_into(Mgrid, t0, dtM, t, out):
    x = (t - t0) / dtM
    k = int(np.floor(x + 1e-9))
    last = Mgrid.shape[0] - 1
    if k < 0:
        k = 0
    frac = x - k
    if k >= last:
        k, frac = last, 0.0
    elif abs(frac) < 1e-9:
        frac = 0.0
    m = out.shape[0]
    for i in range(m):
        for j in range(m):
            if frac == 0.0:
                out[i, j] = Mgrid[k, i, j]
            else:
                out[i, j] = (1.0 - frac) * Mgrid[k, i, j] + frac * Mgrid[k + 1, i, j]


@njit(cache=True)
def _closed_loop(Cinv, J, M, out):
    # out = Cinv (J - M)
    m = J.shape[0]
    for i in range(m):
        for j in range(m):
            acc = 0.0
            for k in range(m):
                acc += Cinv[i, k] * (J[k, j] - M[k, j])
            out[i, j] = acc


@njit(cache=True)
def _matvec(A, x, out):
    m = x.size
    for i in range(m):
        acc = 0.0
        for j in range(m):
            acc += A[i, j] * x[j]
        out[i] = acc


@njit(cache=True)
def linear_rk4(Cinv, J, Mgrid, t0, dtM, lam0, dt, n_steps, stride):
    """RK4 for ``C dlam/dt = (J - M(t)) lam`` with piecewise-linear ``M``.

    A single-entry ``Mgrid`` means constant ``M``.  Returns ``lam`` at every
    ``stride``-th step.
    """
    m = lam0.size
    n_out = n_steps // stride + 1
    out = np.zeros((n_out, m))
    lam = lam0.copy()
    out[0] = lam
    const = Mgrid.shape[0] == 1
    half = 0.5 * dt
    Mt = np.empty((m, m))
    A1 = np.empty((m, m))
    A2 = np.empty((m, m))
    A3 = np.empty((m, m))
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    tmp = np.empty(m)
    if const:
        _closed_loop(Cinv, J, Mgrid[0], A1)
        A2[:, :] = A1
        A3[:, :] = A1
    for step in range(n_steps):
        t = t0 + step * dt
        if not const:
            _interp_into(Mgrid, t0, dtM, t, Mt)
            _closed_loop(Cinv, J, Mt, A1)
            _interp_into(Mgrid, t0, dtM, t + half, Mt)
            _closed_loop(Cinv, J, Mt, A2)
            _interp_into(Mgrid, t0, dtM, t + dt, Mt)
            _closed_loop(Cinv, J, Mt, A3)
        _matvec(A1, lam, k1)
        for i in range(m):
            tmp[i] = lam[i] + half * k1[i]
        _matvec(A2, tmp, k2)
        for i in range(m):
            tmp[i] = lam[i] + half * k2[i]
        _matvec(A2, tmp, k3)
        for i in range(m):
            tmp[i] = lam[i] + dt * k3[i]
        _matvec(A3, tmp, k4)
        for i in range(m):
            lam[i] += (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if (step + 1) % stride == 0:
            out[(step + 1) // stride] = lam
    return out

