"""Canonical Hamiltonian systems, Poisson brackets and symplectic integration.

Phase points are stored as ``z = (q, p)`` with ``q = z[..., :n]`` and
``p = z[..., n:]``.  Every callable attached to a :class:`PhaseSystem` is
vectorized: it accepts an array of shape ``(N, 2n)`` and returns one value
(or one gradient row) per point.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BlowUpError, InvalidArgumentError, NonConvergenceError

MAX_DEGREES_OF_FREEDOM = 10_000


def symplectic_matrix(n):
    """Return the block matrix ``[[0, I], [-I, 0]]`` of size ``2n``."""
    eye = np.eye(n)
    zero = np.zeros((n, n))
    return np.block([[zero, eye], [-eye, zero]])


def _as_points(z, dim):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.shape[-1] != dim:
        raise InvalidArgumentError(f"expected phase points of length {dim}, got shape {z.shape}")
    return z2, single


def auto_gradient(func: Callable, dim: int, rel_step: float = 1e-6) -> Callable:
    """Central-difference gradient of a vectorized scalar function.

    The step for point ``z`` is ``rel_step * (1 + |z|)``.
    """

    def grad(z):
        z2, single = _as_points(z, dim)
        h = rel_step * (1.0 + np.linalg.norm(z2, axis=1))
        out = np.empty_like(z2)
        for i in range(dim):
            zp = z2.copy()
            zm = z2.copy()
            zp[:, i] += h
            zm[:, i] -= h
            out[:, i] = (func(zp) - func(zm)) / (2 * h)
        return out[0] if single else out

    return grad


@dataclass(frozen=True)
class Observable:
    """A resolved variable ``A_k`` together with its phase-space gradient.

    ``linear`` (optional) records ``A = linear . z + offset`` exactly; it is
    what enables exact Gaussian sampling.  ``momentum_linear`` records the
    weaker structure ``A = g(q) + momentum_linear . p``, which lets samplers
    draw momenta exactly for separable Hamiltonians.  ``parity`` is the
    behaviour under ``p -> -p`` (``"even"``, ``"odd"`` or ``None``).
    """

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    linear: Optional[np.ndarray] = None
    offset: float = 0.0
    momentum_linear: Optional[np.ndarray] = None
    parity: Optional[str] = None

    @classmethod
    def from_linear(cls, name, coeffs, parity=None, offset=0.0):
        b = np.asarray(coeffs, dtype=float)
        n = b.size // 2
        return cls(
            name=name,
            value=lambda z, b=b, c=offset: np.atleast_2d(z) @ b + c,
            grad=lambda z, b=b: np.broadcast_to(b, np.atleast_2d(z).shape).copy(),
            linear=b,
            offset=offset,
            momentum_linear=b[n:].copy(),
            parity=parity,
        )


@dataclass(frozen=True)
class PhaseSystem:
    """An immutable canonical Hamiltonian system with selected observables.

    Separable systems (``H = |p|^2/2 + V(q)``) set ``potential`` and
    ``grad_potential``; they are integrated with Stormer-Verlet, all other
    systems with the implicit midpoint rule.  ``quadratic_form`` is the
    matrix ``K`` of ``H = z.K.z / 2`` when the Hamiltonian is exactly
    quadratic.
    """

    n: int
    hamiltonian: Callable[[np.ndarray], np.ndarray]
    grad_h: Callable[[np.ndarray], np.ndarray]
    observables: tuple
    name: str = "custom"
    potential: Optional[Callable] = None
    grad_potential: Optional[Callable] = None
    quadratic_form: Optional[np.ndarray] = None
    proposal_basis: Optional[np.ndarray] = None
    proposal_scales: Optional[np.ndarray] = None
    h_min: float = -np.inf
    default_dt: float = 1e-3
    params: dict = field(default_factory=dict)
    normalization: Optional[dict] = None

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise InvalidArgumentError(f"n must be a positive integer, got {self.n!r}")
        if self.n > MAX_DEGREES_OF_FREEDOM:
            raise InvalidArgumentError(
                f"n = {self.n} exceeds the cap of {MAX_DEGREES_OF_FREEDOM} degrees of freedom"
            )
        if len(self.observables) < 1:
            raise InvalidArgumentError("at least one observable is required")
        object.__setattr__(self, "observables", tuple(self.observables))

    @property
    def dim(self):
        return 2 * self.n

    @property
    def m(self):
        return len(self.observables)

    @property
    def names(self):
        return [obs.name for obs in self.observables]

    @property
    def separable(self):
        return self.grad_potential is not None

    @property
    def is_gaussian(self):
        """Quadratic Hamiltonian and affine observables (metadata, never inferred)."""
        return self.quadratic_form is not None and all(
            obs.linear is not None for obs in self.observables
        )

    @property
    def momenta_exact(self):
        """True when momenta can be drawn exactly from any tilted density."""
        return self.separable and all(obs.momentum_linear is not None for obs in self.observables)

    def with_observables(self, observables: Sequence[Observable]) -> "PhaseSystem":
        return dataclasses.replace(self, observables=tuple(observables))

    def energy(self, z):
        z2, single = _as_points(z, self.dim)
        h = self.hamiltonian(z2)
        return h[0] if single else h

    def force_field(self, z):
        """Hamiltonian vector field ``J_sym grad H``."""
        z2, single = _as_points(z, self.dim)
        g = self.grad_h(z2)
        out = np.concatenate([g[:, self.n:], -g[:, : self.n]], axis=1)
        return out[0] if single else out

    def observable_values(self, z):
        """Array of shape ``(N, m)``."""
        z2, _ = _as_points(z, self.dim)
        return np.stack([obs.value(z2) for obs in self.observables], axis=1)

    def observable_grads(self, z):
        """Array of shape ``(N, m, 2n)``."""
        z2, _ = _as_points(z, self.dim)
        return np.stack([obs.grad(z2) for obs in self.observables], axis=1)

    def liouville_values(self, z):
        """``(L A_k)(z_i) = {A_k, H}(z_i)`` for every point and observable, shape ``(N, m)``."""
        z2, _ = _as_points(z, self.dim)
        flow = self.force_field(z2)
        return np.einsum("nkd,nd->nk", self.observable_grads(z2), flow)

    def bracket_matrix_values(self, z):
        """``{A_i, A_j}(z)`` for every point, shape ``(N, m, m)``."""
        z2, _ = _as_points(z, self.dim)
        g = self.observable_grads(z2)
        n = self.n
        jg = np.concatenate([g[:, :, n:], -g[:, :, :n]], axis=2)
        return np.einsum("nid,njd->nij", g, jg)

    def check(self, seed=0, n_points=64, scale=1.0, rank_tol=1e-8, grad_rtol=1e-5):
        """Verify the structural invariants on randomly sampled points.

        Raises :class:`InvalidArgumentError` if the observables are linearly
        dependent or if ``grad_h`` disagrees with finite differences of ``H``.
        """
        rng = np.random.default_rng(seed)
        z = scale * rng.standard_normal((n_points, self.dim))
        vals = self.observable_values(z)
        gram = vals.T @ vals / n_points
        ev = np.linalg.eigvalsh(gram)
        if ev[0] <= rank_tol * max(ev[-1], 1e-300):
            raise InvalidArgumentError("observables are numerically linearly dependent")
        fd = auto_gradient(self.hamiltonian, self.dim)(z[:8])
        exact = self.grad_h(z[:8])
        err = np.abs(fd - exact)
        if np.any(err > grad_rtol * np.maximum(np.abs(exact), 1.0)):
            raise InvalidArgumentError("grad_h is inconsistent with finite differences of H")
        return True


def poisson_bracket(sys: PhaseSystem, f_grad, g_grad):
    """Canonical Poisson bracket ``(grad F)^T J_sym (grad G)``.

    Accepts single gradients of length ``2n`` or stacks of shape ``(N, 2n)``.
    """
    f = np.asarray(f_grad, dtype=float)
    g = np.asarray(g_grad, dtype=float)
    if f.shape[-1] != sys.dim or g.shape[-1] != sys.dim:
        raise InvalidArgumentError(
            f"gradients must have length {sys.dim}, got {f.shape[-1]} and {g.shape[-1]}"
        )
    n = sys.n
    return np.sum(f[..., :n] * g[..., n:], axis=-1) - np.sum(f[..., n:] * g[..., :n], axis=-1)


def liouville_action(sys: PhaseSystem, obs_index: int, z):
    """``(L A_k)(z) = {A_k, H}(z)``."""
    if not 0 <= obs_index < sys.m:
        raise InvalidArgumentError(f"observable index {obs_index} out of range [0, {sys.m})")
    z2, single = _as_points(z, sys.dim)
    val = poisson_bracket(sys, sys.observables[obs_index].grad(z2), sys.grad_h(z2))
    return val[0] if single else val


@dataclass
class MicroTrajectory:
    times: np.ndarray
    states: np.ndarray
    energy_drift: float
    drift_bound: float

    @property
    def within_drift_bound(self):
        return self.energy_drift <= self.drift_bound


def verlet_step(sys, q, p, force, dt):
    """One kick-drift-kick step.  ``force`` is ``-grad V(q)`` on entry; the
    updated force is returned so consecutive steps share evaluations."""
    p = p + 0.5 * dt * force
    q = q + dt * p
    force = -sys.grad_potential(q)
    p = p + 0.5 * dt * force
    return q, p, force


def midpoint_step(sys, z, dt, tol=1e-12, max_iter=50):
    """Implicit midpoint rule solved by fixed-point iteration."""
    znew = z + dt * sys.force_field(z)
    for _ in range(max_iter):
        nxt = z + dt * sys.force_field(0.5 * (z + znew))
        err = np.max(np.abs(nxt - znew))
        znew = nxt
        if err <= tol * (1.0 + np.max(np.abs(znew))):
            return znew
    raise NonConvergenceError("implicit midpoint iteration did not converge", residual=err)


def integrate_micro(sys: PhaseSystem, z0, dt=None, T=None, stride=1, drift_rtol=1e-6,
                    drift_atol=1e-10, method=None) -> MicroTrajectory:
    """Integrate a microscopic trajectory of ``dz/dt = J_sym grad H``.

    Stormer-Verlet is used for separable systems and implicit midpoint
    otherwise (``method`` may force ``"verlet"`` or ``"midpoint"``).
    ``z0`` may be a single point or a stack of points; states are recorded
    every ``stride`` steps.  The returned ``energy_drift`` is the maximum
    over recorded times (and points) of ``|H(z(t)) - H(z0)|``.
    """
    dt = sys.default_dt if dt is None else float(dt)
    if not dt > 0:
        raise InvalidArgumentError("dt must be positive")
    if T is None or T < dt * (1 - 1e-12):
        raise InvalidArgumentError("horizon T must satisfy T >= dt")
    method = method or ("verlet" if sys.separable else "midpoint")
    if method == "verlet" and not sys.separable:
        raise InvalidArgumentError("Verlet requires a separable Hamiltonian")

    z, single = _as_points(z0, sys.dim)
    z = z.copy()
    # land exactly on T: shrink the step to T / ceil(T / dt)
    nsteps = int(np.ceil(T / dt * (1 - 1e-12)))
    dt = T / nsteps
    n = sys.n
    h0 = sys.hamiltonian(z)
    states = [z.copy()]
    times = [0.0]
    if method == "verlet":
        q, p = z[:, :n].copy(), z[:, n:].copy()
        force = -sys.grad_potential(q)
    for k in range(1, nsteps + 1):
        if method == "verlet":
            q, p, force = verlet_step(sys, q, p, force, dt)
            if k % stride == 0 or k == nsteps:
                z = np.concatenate([q, p], axis=1)
        else:
            z = midpoint_step(sys, z, dt)
        if k % stride == 0 or k == nsteps:
            if not np.all(np.isfinite(z)):
                raise BlowUpError(f"non-finite state at t = {k * dt:g}", time=k * dt)
            states.append(z.copy())
            times.append(k * dt)
    states = np.array(states)
    drift = float(np.max(np.abs(sys.hamiltonian(states.reshape(-1, sys.dim)).reshape(len(times), -1) - h0)))
    bound = drift_rtol * float(np.max(np.abs(h0))) + drift_atol
    if single:
        states = states[:, 0, :]
    return MicroTrajectory(times=np.array(times), states=states, energy_drift=drift, drift_bound=bound)
