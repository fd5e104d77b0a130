"""Built-in Hamiltonian systems.

===================  ==========================================================
``harmonic-1``       single oscillator ``H = p^2/2 + k q^2/2``
``harmonic-chain``   fixed-end chain of linearly coupled oscillators
``fpu-beta``         fixed-end chain with quartic nearest-neighbour coupling
``resolved-bath``    one oscillator coupled to ``n - 1`` bath oscillators through
                     ``g q0^2 sum_j q_j^2 / 2``
===================  ==========================================================

Each builder takes a list of observable names drawn from the set the
system offers (see :func:`offered_observables`).
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .hamiltonian import MAX_DEGREES_OF_FREEDOM, Observable, PhaseSystem


def _q(z, n):
    return np.atleast_2d(z)[:, :n]


def _p(z, n):
    return np.atleast_2d(z)[:, n:]


def chain_modes(n):
    """Orthonormal sine modes of a fixed-end chain, rows indexed by mode."""
    i = np.arange(1, n + 1)
    return np.sqrt(2.0 / (n + 1)) * np.sin(np.pi * np.outer(i, i) / (n + 1))


def chain_frequencies(n, k=1.0, omega0=0.0):
    j = np.arange(1, n + 1)
    return np.sqrt(4.0 * k * np.sin(np.pi * j / (2 * (n + 1))) ** 2 + omega0 ** 2)


def _energy_observable(name, hamiltonian, grad_h):
    return Observable(name=name, value=hamiltonian, grad=grad_h, parity="even")


def _unit(n, index, momentum=False):
    b = np.zeros(2 * n)
    b[index + (n if momentum else 0)] = 1.0
    return b


def _mode_observables(n, modes, freqs):
    """Mode amplitudes ``Qj``, mode momenta ``Pj`` and harmonic mode energies ``Ej``."""
    offered = {}
    for j in range(n):
        s = modes[j]
        bq = np.concatenate([s, np.zeros(n)])
        bp = np.concatenate([np.zeros(n), s])
        offered[f"Q{j + 1}"] = Observable.from_linear(f"Q{j + 1}", bq, parity="even")
        offered[f"P{j + 1}"] = Observable.from_linear(f"P{j + 1}", bp, parity="odd")
        w2 = freqs[j] ** 2

        def e_val(z, s=s, w2=w2):
            return 0.5 * (_p(z, n) @ s) ** 2 + 0.5 * w2 * (_q(z, n) @ s) ** 2

        def e_grad(z, s=s, w2=w2):
            qs = _q(z, n) @ s
            ps = _p(z, n) @ s
            return np.concatenate([w2 * qs[:, None] * s, ps[:, None] * s], axis=1)

        offered[f"E{j + 1}"] = Observable(f"E{j + 1}", e_val, e_grad, parity="even")
    return offered


def _site_observables(n):
    offered = {}
    for i in range(n):
        offered[f"q{i}"] = Observable.from_linear(f"q{i}", _unit(n, i), parity="even")
        offered[f"p{i}"] = Observable.from_linear(f"p{i}", _unit(n, i, True), parity="odd")
    return offered


def _select(offered, observables, system_name):
    chosen = []
    for name in observables:
        if name not in offered:
            raise InvalidArgumentError(
                f"system {system_name!r} offers no observable {name!r}; "
                f"available: {sorted(offered)}"
            )
        chosen.append(offered[name])
    return tuple(chosen)


def harmonic_1(k=1.0, observables=("q",)):
    """Single harmonic oscillator.  Offered observables: ``q, p, q2, energy``."""
    k = float(k)
    if k <= 0:
        raise InvalidArgumentError("spring constant k must be positive")

    def H(z):
        z = np.atleast_2d(z)
        return 0.5 * z[:, 1] ** 2 + 0.5 * k * z[:, 0] ** 2

    def grad_h(z):
        z = np.atleast_2d(z)
        return np.stack([k * z[:, 0], z[:, 1]], axis=1)

    offered = {
        "q": Observable.from_linear("q", [1.0, 0.0], parity="even"),
        "p": Observable.from_linear("p", [0.0, 1.0], parity="odd"),
        "q2": Observable(
            "q2",
            lambda z: np.atleast_2d(z)[:, 0] ** 2,
            lambda z: np.stack([2 * np.atleast_2d(z)[:, 0], np.zeros(len(np.atleast_2d(z)))], axis=1),
            momentum_linear=np.zeros(1),
            parity="even",
        ),
        "energy": _energy_observable("energy", H, grad_h),
    }
    return PhaseSystem(
        n=1,
        hamiltonian=H,
        grad_h=grad_h,
        observables=_select(offered, observables, "harmonic-1"),
        name="harmonic-1",
        potential=lambda q: 0.5 * k * np.atleast_2d(q)[:, 0] ** 2,
        grad_potential=lambda q: k * np.atleast_2d(q),
        quadratic_form=np.diag([k, 1.0]),
        proposal_scales=np.array([1.0 / np.sqrt(k)]),
        h_min=0.0,
        default_dt=1e-3,
        params={"k": k, "offered": sorted(offered)},
    )


def _chain_potential(n, k, omega0, quartic):
    def V(q):
        q = np.atleast_2d(q)
        dq = np.diff(q, axis=1, prepend=0.0, append=0.0)
        d2 = dq * dq
        v = 0.5 * k * np.sum(d2, axis=1) + 0.5 * omega0 ** 2 * np.sum(q * q, axis=1)
        if quartic:
            v = v + 0.25 * quartic * np.sum(d2 * d2, axis=1)
        return v

    def grad_V(q):
        q = np.atleast_2d(q)
        dq = np.diff(q, axis=1, prepend=0.0, append=0.0)
        bond = k * dq
        if quartic:
            bond = bond + quartic * (dq * dq) * dq
        # q_i enters bond i as +q_i and bond i+1 as -q_i
        return bond[:, :-1] - bond[:, 1:] + omega0 ** 2 * q

    return V, grad_V


def _chain_system(name, n, k, omega0, quartic, observables, default_dt):
    n = int(n)
    if n < 1:
        raise InvalidArgumentError("chain length n must be >= 1")
    if n > MAX_DEGREES_OF_FREEDOM:
        raise InvalidArgumentError(f"n = {n} exceeds the cap of {MAX_DEGREES_OF_FREEDOM} degrees of freedom")
    if k <= 0:
        raise InvalidArgumentError("coupling k must be positive")
    V, grad_V = _chain_potential(n, k, omega0, quartic)

    def H(z):
        return 0.5 * np.sum(_p(z, n) ** 2, axis=1) + V(_q(z, n))

    def grad_h(z):
        return np.concatenate([grad_V(_q(z, n)), _p(z, n)], axis=1)

    modes = chain_modes(n)
    freqs = chain_frequencies(n, k, omega0)
    offered = _site_observables(n)
    offered.update(_mode_observables(n, modes, freqs))
    offered["energy"] = _energy_observable("energy", H, grad_h)
    quadratic = None
    if not quartic:
        Kq = k * (2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)) + omega0 ** 2 * np.eye(n)
        quadratic = np.block([[Kq, np.zeros((n, n))], [np.zeros((n, n)), np.eye(n)]])
    return PhaseSystem(
        n=n,
        hamiltonian=H,
        grad_h=grad_h,
        observables=_select(offered, observables, name),
        name=name,
        potential=V,
        grad_potential=grad_V,
        quadratic_form=quadratic,
        proposal_basis=modes,
        proposal_scales=1.0 / freqs,
        h_min=0.0,
        default_dt=default_dt,
        params={"n": n, "k": k, "omega0": omega0, "quartic": quartic,
                "offered": sorted(offered)},
    )


def harmonic_chain(n=8, k=1.0, omega0=0.0, observables=("Q1",)):
    """Fixed-end harmonic chain ``H = sum p^2/2 + k/2 sum (q_{i+1} - q_i)^2 + omega0^2/2 sum q^2``.

    Offered observables: site coordinates ``q0..``, ``p0..``, mode
    amplitudes ``Q1..Qn``, mode momenta ``P1..Pn``, mode energies
    ``E1..En`` and ``energy``.
    """
    return _chain_system("harmonic-chain", n, float(k), float(omega0), 0.0, observables, 1e-3)


def fpu_beta(n=8, k=1.0, quartic=1.0, observables=("Q1",)):
    """Fixed-end Fermi-Pasta-Ulam-Tsingou beta chain.

    ``V = sum_bonds [k dq^2/2 + quartic dq^4/4]``.  Offered observables as
    for :func:`harmonic_chain` (modes are the harmonic sine modes).
    """
    if quartic < 0:
        raise InvalidArgumentError("quartic coupling must be non-negative")
    return _chain_system("fpu-beta", n, float(k), 0.0, float(quartic), observables, 2e-4)


def resolved_bath(n=8, omega0=1.0, bath_frequencies=None, g=0.5, observables=("q",)):
    """Distinguished oscillator ``(q0, p0)`` coupled to ``n - 1`` bath oscillators.

    ``V = omega0^2 q0^2/2 + sum_j omega_j^2 q_j^2/2 + g q0^2 sum_j q_j^2 / 2``.
    Offered observables: ``q`` and ``p`` (the distinguished pair), ``e0``
    (its harmonic energy), bath coordinates ``q1..``, ``p1..`` and ``energy``.
    """
    n = int(n)
    if n < 2:
        raise InvalidArgumentError("resolved-bath needs n >= 2")
    if n > MAX_DEGREES_OF_FREEDOM:
        raise InvalidArgumentError(f"n = {n} exceeds the cap of {MAX_DEGREES_OF_FREEDOM} degrees of freedom")
    if g < 0:
        raise InvalidArgumentError("coupling g must be non-negative")
    if bath_frequencies is None:
        bath_frequencies = np.linspace(0.5, 2.0, n - 1)
    w = np.asarray(bath_frequencies, dtype=float)
    if w.shape != (n - 1,):
        raise InvalidArgumentError("need n - 1 bath frequencies")
    w2 = np.concatenate([[omega0 ** 2], w ** 2])

    def V(q):
        q = np.atleast_2d(q)
        return 0.5 * q ** 2 @ w2 + 0.5 * g * q[:, 0] ** 2 * np.sum(q[:, 1:] ** 2, axis=1)

    def grad_V(q):
        q = np.atleast_2d(q)
        out = q * w2
        bath = np.sum(q[:, 1:] ** 2, axis=1)
        out[:, 0] += g * q[:, 0] * bath
        out[:, 1:] += g * (q[:, 0] ** 2)[:, None] * q[:, 1:]
        return out

    def H(z):
        return 0.5 * np.sum(_p(z, n) ** 2, axis=1) + V(_q(z, n))

    def grad_h(z):
        return np.concatenate([grad_V(_q(z, n)), _p(z, n)], axis=1)

    def e0(z):
        z = np.atleast_2d(z)
        return 0.5 * z[:, n] ** 2 + 0.5 * omega0 ** 2 * z[:, 0] ** 2

    def e0_grad(z):
        z = np.atleast_2d(z)
        out = np.zeros_like(z)
        out[:, 0] = omega0 ** 2 * z[:, 0]
        out[:, n] = z[:, n]
        return out

    offered = {
        "q": Observable.from_linear("q", _unit(n, 0), parity="even"),
        "p": Observable.from_linear("p", _unit(n, 0, True), parity="odd"),
        "e0": Observable("e0", e0, e0_grad, parity="even"),
        "energy": _energy_observable("energy", H, grad_h),
    }
    for j in range(1, n):
        offered[f"q{j}"] = Observable.from_linear(f"q{j}", _unit(n, j), parity="even")
        offered[f"p{j}"] = Observable.from_linear(f"p{j}", _unit(n, j, True), parity="odd")
    return PhaseSystem(
        n=n,
        hamiltonian=H,
        grad_h=grad_h,
        observables=_select(offered, observables, "resolved-bath"),
        name="resolved-bath",
        potential=V,
        grad_potential=grad_V,
        proposal_scales=1.0 / np.sqrt(w2),
        h_min=0.0,
        default_dt=1e-3,
        params={"n": n, "omega0": omega0, "g": g, "bath_frequencies": w.tolist(),
                "offered": sorted(offered)},
    )


BUILTIN_SYSTEMS = {
    "harmonic-1": harmonic_1,
    "harmonic-chain": harmonic_chain,
    "fpu-beta": fpu_beta,
    "resolved-bath": resolved_bath,
}


def build_system(name, params=None, observables=None):
    """Construct a built-in system by name (used by the config front end)."""
    if name not in BUILTIN_SYSTEMS:
        raise InvalidArgumentError(f"unknown system {name!r}; built-ins: {sorted(BUILTIN_SYSTEMS)}")
    kwargs = dict(params or {})
    if observables is not None:
        kwargs["observables"] = tuple(observables)
    try:
        return BUILTIN_SYSTEMS[name](**kwargs)
    except TypeError as exc:
        raise InvalidArgumentError(f"bad parameters for {name!r}: {exc}") from None


def offered_observables(name, params=None):
    """Names of the observables a built-in system offers."""
    return list(build_system(name, params).params["offered"])
