"""Direct ensemble propagation under the exact Hamiltonian flow.

Every sample point is integrated independently; means of the observables
and of the energy are accumulated per batch at each output time so that
batch-means standard errors need no stored trajectories.  Work is split
into whole batches, which makes the result independent of the number of
worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._stats import N_BATCHES, batch_means, batch_slices
from .errors import BlowUpError, GridMismatchError, InvalidArgumentError
from .hamiltonian import PhaseSystem, midpoint_step, verlet_step
from .statmodel import EnsembleSample

MAX_DROP_FRACTION = 1e-3
BLOWUP_RADIUS = 1e8


@dataclass
class EmpiricalSeries:
    """Ensemble means ``a(t)`` and ``u(t)`` with batch-means standard errors."""

    times: np.ndarray
    a: np.ndarray
    a_stderr: np.ndarray
    u: np.ndarray
    u_stderr: np.ndarray
    energy_drift: float
    dropped: int
    N: int
    names: tuple = ()
    regime: str = "ensemble"
    metadata: dict = field(default_factory=dict)


def _batch_stats(sums, wsum):
    """Mean and stderr across batches from per-batch weighted sums.

    ``sums`` has shape ``(B, K, ...)`` and ``wsum`` ``(B, K)``.
    """
    W = wsum.sum(axis=0)
    extra = (slice(None),) * 2 + (None,) * (sums.ndim - 2)
    mean = sums.sum(axis=0) / W[(slice(None),) + (None,) * (sums.ndim - 2)]
    B = sums.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        bm = sums / wsum[extra]
    frac = (wsum / W)[extra]
    var = np.nansum(frac * (bm - mean) ** 2, axis=0) * B / (B - 1)
    return mean, np.sqrt(var / B)


def _propagate_block(sys: PhaseSystem, z, w, dt, n_steps, stride, method):
    """Integrate one batch; returns per-output-time sums and drop count."""
    n = sys.n
    n_out = n_steps // stride + 1
    m = sys.m
    sum_a = np.zeros((n_out, m))
    sum_h = np.zeros(n_out)
    sum_w = np.zeros(n_out)
    alive = np.ones(z.shape[0], dtype=bool)

    def accumulate(k, z):
        nonlocal alive
        ok = np.all(np.isfinite(z), axis=1) & (np.max(np.abs(z), axis=1) < BLOWUP_RADIUS)
        alive &= ok
        ww = np.where(alive, w, 0.0)
        zz = np.where(alive[:, None], z, 0.0)
        sum_a[k] = ww @ sys.observable_values(zz)
        sum_h[k] = ww @ sys.hamiltonian(zz)
        sum_w[k] = ww.sum()

    accumulate(0, z)
    if method == "verlet":
        q, p = z[:, :n].copy(), z[:, n:].copy()
        force = -sys.grad_potential(q)
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(1, n_steps + 1):
                q, p, force = verlet_step(sys, q, p, force, dt)
                if k % stride == 0:
                    accumulate(k // stride, np.concatenate([q, p], axis=1))
    else:
        for k in range(1, n_steps + 1):
            z = midpoint_step(sys, z, dt)
            if k % stride == 0:
                accumulate(k // stride, z)
    return sum_a, sum_h, sum_w, int((~alive).sum())


def propagate_ensemble(sys: PhaseSystem, sample0: EnsembleSample, dt, T, stride=None, n_out=200,
                       threads=1, n_batches=N_BATCHES, method=None) -> EmpiricalSeries:
    """Propagate every point of ``sample0`` and return the empirical means.

    ``stride`` (steps between outputs) defaults to storing about ``n_out``
    points.  Trajectories that become non-finite or leave a radius of 1e8
    are dropped and counted; more than 0.1% dropped raises
    :class:`BlowUpError`.
    """
    if not np.all(np.isfinite(sample0.points)):
        raise InvalidArgumentError("initial sample has non-finite points")
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * T:
        raise InvalidArgumentError("T must be an integer multiple of dt")
    if stride is None:
        stride = max(1, n_steps // n_out)
        while n_steps % stride:
            stride -= 1
    if n_steps % stride:
        raise InvalidArgumentError("stride must divide the number of steps")
    method = method or ("verlet" if sys.separable else "midpoint")
    slices = batch_slices(sample0.N, n_batches)
    pts = sample0.points
    wts = sample0.weights

    def run(sl):
        return _propagate_block(sys, pts[sl].copy(), wts[sl], float(dt), n_steps, stride, method)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            results = list(pool.map(run, slices))
    else:
        results = [run(sl) for sl in slices]
    sum_a = np.stack([r[0] for r in results])
    sum_h = np.stack([r[1] for r in results])
    sum_w = np.stack([r[2] for r in results])
    dropped = sum(r[3] for r in results)
    if dropped > MAX_DROP_FRACTION * sample0.N:
        raise BlowUpError(f"{dropped} of {sample0.N} trajectories blew up", time=None)
    a, a_se = _batch_stats(sum_a, sum_w)
    u, u_se = _batch_stats(sum_h, sum_w)
    times = np.arange(n_steps // stride + 1) * dt * stride
    return EmpiricalSeries(times=times, a=a, a_stderr=a_se, u=u, u_stderr=u_se,
                           energy_drift=float(np.max(np.abs(u - u[0]))), dropped=int(dropped), N=sample0.N,
                           names=tuple(sys.names), metadata={"dt": dt, "T": T, "stride": stride, "method": method})


def short_time_slope(sys: PhaseSystem, sample0: EnsembleSample, dt, lam0=None, n_batches=N_BATCHES):
    """Per-trajectory one-step slopes ``(A(z(dt)) - A(z(0))) / dt``.

    Returns ``(slope, stderr)`` and, when ``lam0`` is given, the entropy
    production proxy ``-lam0 . slope`` with its standard error.
    """
    z = sample0.points
    n = sys.n
    if sys.separable:
        q, p = z[:, :n].copy(), z[:, n:].copy()
        q, p, _ = verlet_step(sys, q, p, -sys.grad_potential(q), dt)
        z1 = np.concatenate([q, p], axis=1)
    else:
        z1 = midpoint_step(sys, z, dt)
    per = (sys.observable_values(z1) - sys.observable_values(z)) / dt
    slope, se = batch_means(per, sample0.weights, n_batches)
    if lam0 is None:
        return slope, se
    prod = -(per @ np.asarray(lam0, dtype=float))
    p_mean, p_se = batch_means(prod, sample0.weights, n_batches)
    return slope, se, float(p_mean), float(p_se)


@dataclass
class ValidationReport:
    times: np.ndarray
    empirical_a: np.ndarray
    empirical_stderr: np.ndarray
    closure_a: np.ndarray
    z_scores: np.ndarray
    max_z_score: float
    plateau_slope: float
    plateau_intercept: float
    threshold: float
    passed: bool
    metadata: dict = field(default_factory=dict)


def _common_indices(t_closure, t_emp):
    if t_closure.shape == t_emp.shape and np.allclose(t_closure, t_emp, rtol=1e-9, atol=1e-12):
        return np.arange(t_emp.size)
    idx = np.searchsorted(t_closure, t_emp - 1e-9 * max(1.0, t_emp[-1]))
    idx = np.clip(idx, 0, t_closure.size - 1)
    if not np.allclose(t_closure[idx], t_emp, rtol=1e-9, atol=1e-9):
        raise GridMismatchError("closure and empirical time grids do not align")
    return idx


def validate(closure_traj, emp, t_c=None, threshold=3.0, plateau_frac=0.1) -> ValidationReport:
    """Compare a closure prediction with an empirical series.

    ``emp`` may be an :class:`EmpiricalSeries` or another trajectory (for
    self-comparison).  The plateau slope is the least-squares slope of the
    empirical production proxy ``-lam_closure(t) . da_emp/dt`` over
    ``t <= plateau_frac * t_c`` (``t_c`` defaults to the closure's
    ``metadata["t_c"]`` or the run length).
    """
    t_emp = np.asarray(emp.times)
    idx = _common_indices(np.asarray(closure_traj.times), t_emp)
    a_cl = closure_traj.a_path[idx]
    if isinstance(emp, EmpiricalSeries):
        a_emp, se = emp.a, emp.a_stderr
    else:
        a_emp, se = emp.a_path, np.zeros_like(emp.a_path)
    diff = np.abs(a_emp - a_cl)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / se, np.where(diff == 0, 0.0, np.inf))
    lam = closure_traj.lambda_path[idx]
    dadt = np.gradient(a_emp, t_emp, axis=0) if t_emp.size > 2 else np.zeros_like(a_emp)
    proxy = -np.einsum("ki,ki->k", lam, dadt)
    t_c = t_c or closure_traj.metadata.get("t_c") or float(t_emp[-1])
    window = t_emp <= plateau_frac * t_c
    if window.sum() < 3:
        window = np.zeros_like(window)
        window[:min(3, t_emp.size)] = True
    if window.sum() >= 2:
        slope, intercept = np.polyfit(t_emp[window], proxy[window], 1)
    else:
        slope, intercept = 0.0, float(proxy[0])
    max_z = float(np.max(z)) if z.size else 0.0
    return ValidationReport(times=t_emp, empirical_a=a_emp, empirical_stderr=se, closure_a=a_cl,
                            z_scores=z, max_z_score=max_z, plateau_slope=float(slope),
                            plateau_intercept=float(intercept), threshold=threshold,
                            passed=bool(max_z <= threshold),
                            metadata={"t_c": t_c, "regime": closure_traj.regime,
                                      "plateau_window": float(plateau_frac * t_c)})
