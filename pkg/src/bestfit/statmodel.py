"""Quasi-equilibrium (exponential-family) trial densities.

The trial density at parameter ``lam`` is proportional to
``exp(-beta H + lam . A)``.  Two variants are supported:

* ``fixed-beta``: the inverse temperature is a constant of the model and
  ``lam = 0`` is the Gibbs density.
* ``fixed-energy``: ``beta = beta(lam)`` is solved so that the mean energy
  stays equal to ``E`` along every path.

Expectations are realized with ensemble samples.  Gaussian systems
(quadratic ``H`` and affine observables, as declared by the system
metadata) are sampled exactly and also expose closed-form moments,
log-partition function and entropy; everything else goes through a
vectorized random-walk Metropolis sampler.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import linalg

from ._stats import batch_means, weighted_mean
from .errors import (DegenerateModelError, DivergenceError, InvalidArgumentError,
                     NoSolutionError, RankDeficiencyError)
from .hamiltonian import Observable, PhaseSystem, symplectic_matrix

FIXED_BETA = "fixed-beta"
FIXED_ENERGY = "fixed-energy"
VARIANTS = (FIXED_BETA, FIXED_ENERGY)

BETA_BRACKET = (1e-6, 1e6)


@dataclass(frozen=True)
class SamplerConfig:
    burn_in: int = 10_000
    thinning: int = 10
    samples_per_chain: int = 100
    tune_interval: int = 200
    target_acceptance: tuple = (0.3, 0.5)
    guard_radius: float = 1e6
    force_mcmc: bool = False


@dataclass(frozen=True, eq=False)
class StatModel:
    """Exponential tilt of the Gibbs density by ``lam . A``.

    For ``fixed-beta`` models ``beta`` is the inverse temperature.  For
    ``fixed-energy`` models ``energy`` is the conserved mean energy and
    ``beta`` (optional) is the equilibrium inverse temperature, used as the
    starting guess when solving ``beta(lam)`` and returned exactly at
    ``lam = 0``.
    """

    sys: PhaseSystem
    lam: np.ndarray
    variant: str = FIXED_BETA
    beta: Optional[float] = None
    energy: Optional[float] = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    solve_samples: int = 20_000
    solve_seed: int = 2024

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float).reshape(-1)
        if lam.size != self.sys.m:
            raise InvalidArgumentError(f"lambda has {lam.size} entries, system has {self.sys.m} observables")
        if not np.all(np.isfinite(lam)):
            raise InvalidArgumentError("lambda must be finite")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"variant must be one of {VARIANTS}")
        if self.variant == FIXED_BETA and not (self.beta is not None and self.beta > 0):
            raise InvalidArgumentError("fixed-beta model needs beta > 0")
        if self.variant == FIXED_ENERGY and self.energy is None:
            raise InvalidArgumentError("fixed-energy model needs an energy")

    @classmethod
    def fixed_beta(cls, sys, beta, lam=None, **kwargs):
        lam = np.zeros(sys.m) if lam is None else lam
        return cls(sys=sys, lam=lam, variant=FIXED_BETA, beta=float(beta), **kwargs)

    @classmethod
    def fixed_energy(cls, sys, energy=None, beta_eq=None, lam=None, seed=2024, **kwargs):
        """Fixed-energy model; ``energy`` defaults to the equilibrium energy at ``beta_eq``."""
        lam = np.zeros(sys.m) if lam is None else lam
        if energy is None:
            if beta_eq is None:
                raise InvalidArgumentError("give either energy or beta_eq")
            energy = equilibrium_energy(sys, beta_eq, seed=seed, **kwargs)
        return cls(sys=sys, lam=lam, variant=FIXED_ENERGY, beta=beta_eq, energy=float(energy), **kwargs)

    def with_lambda(self, lam):
        obj = dataclasses.replace(self, lam=np.asarray(lam, dtype=float))
        return obj

    @property
    def m(self):
        return self.sys.m

    @property
    def is_gaussian(self):
        return self.sys.is_gaussian

    @cached_property
    def beta_of_lambda(self):
        if self.variant == FIXED_BETA:
            return self.beta
        if self.beta is not None and not np.any(self.lam):
            return float(self.beta)
        return solve_beta(self)


@dataclass
class EnsembleSample:
    points: np.ndarray
    weights: np.ndarray
    provenance: dict

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.points.shape[0],) or np.any(w < 0):
            raise InvalidArgumentError("weights must be non-negative, one per point")
        self.weights = w / w.sum()

    @property
    def N(self):
        return self.points.shape[0]

    @property
    def uniform(self):
        return bool(np.all(self.weights == self.weights[0]))

    def irange(self, sl):
        return EnsembleSample(self.points[sl], self.weights[sl], dict(self.provenance))


@dataclass
class ThermoState:
    """Macrostate summary of a sample.

    ``s`` is the absolute maximum-entropy value ``s(u, a)`` (Gaussian systems
    only, else ``None``); ``s_rel`` is the entropy relative to equilibrium that
    the closure uses (relative entropy for fixed beta, ``s(E, a) - s(E, 0)``
    for fixed energy).
    """

    a: np.ndarray
    u: float
    s: Optional[float]
    s_rel: Optional[float]
    lam: np.ndarray
    beta: float
    psi: Optional[float] = None
    a_stderr: Optional[np.ndarray] = None
    u_stderr: Optional[float] = None


# ---------------------------------------------------------------------------
# Gaussian closed forms


@dataclass
class GaussianMoments:
    """Exact moments of ``exp(-beta z.K.z/2 + lam . (B z + offset))``."""

    beta: float
    mean: np.ndarray          # mean phase point
    cov: np.ndarray           # phase covariance (beta K)^-1
    B: np.ndarray
    offset: np.ndarray
    K: np.ndarray
    n: int

    @property
    def a(self):
        return self.B @ self.mean + self.offset

    @property
    def cov_aa(self):
        return self.B @ self.cov @ self.B.T

    @property
    def mean_energy(self):
        return self.n / self.beta + 0.5 * self.mean @ self.K @ self.mean

    @property
    def var_energy(self):
        km = self.K @ self.mean
        return self.n / self.beta ** 2 + km @ self.cov @ km

    @property
    def cov_ah(self):
        return self.B @ self.cov @ (self.K @ self.mean)

    @property
    def liouville_matrix(self):
        """``G`` with ``L A = G z`` (``L A = B J_sym K z``)."""
        return self.B @ symplectic_matrix(self.n) @ self.K

    def log_partition(self, lam):
        _, logdet = np.linalg.slogdet(self.beta * self.K)
        return (self.n * math.log(2 * math.pi) - 0.5 * logdet
                + 0.5 * lam @ self.cov_aa @ lam + lam @ self.offset)

    def entropy(self):
        _, logdet = np.linalg.slogdet(self.beta * self.K)
        return self.n * (1.0 + math.log(2 * math.pi)) - 0.5 * logdet


def gaussian_moments(sys: PhaseSystem, beta, lam) -> GaussianMoments:
    if not sys.is_gaussian:
        raise InvalidArgumentError(f"system {sys.name!r} is not flagged Gaussian")
    K = sys.quadratic_form
    B = np.array([obs.linear for obs in sys.observables])
    offset = np.array([obs.offset for obs in sys.observables])
    cov = np.linalg.inv(beta * K)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (B.T @ np.asarray(lam, dtype=float))
    return GaussianMoments(beta=float(beta), mean=mean, cov=cov, B=B, offset=offset, K=K, n=sys.n)


def equilibrium_energy(sys, beta, seed=2024, N=20_000, sampler=None, **_):
    """Mean energy of the Gibbs density at ``beta``."""
    if sys.is_gaussian:
        return gaussian_moments(sys, beta, np.zeros(sys.m)).mean_energy
    model = StatModel.fixed_beta(sys, beta, sampler=sampler or SamplerConfig())
    smp = sample(model, N, seed)
    return float(weighted_mean(sys.hamiltonian(smp.points), smp.weights))


def gaussian_relative_entropy(model: StatModel, lam=None):
    """Closed-form entropy relative to equilibrium at ``lam`` (Gaussian systems)."""
    lam = model.lam if lam is None else np.asarray(lam, dtype=float)
    if model.variant == FIXED_BETA:
        g = gaussian_moments(model.sys, model.beta, lam)
        return -0.5 * lam @ g.cov_aa @ lam
    b = model.with_lambda(lam).beta_of_lambda
    b0 = model.with_lambda(np.zeros(model.m)).beta_of_lambda
    return -model.sys.n * math.log(b / b0)


def gaussian_macrostate(model: StatModel, lam=None):
    """Exact ``a(lam)`` for Gaussian systems (either variant)."""
    lam = model.lam if lam is None else np.asarray(lam, dtype=float)
    beta = model.with_lambda(lam).beta_of_lambda
    return gaussian_moments(model.sys, beta, lam).a


def conjugate_parameters(model: StatModel, a, lam_guess=None, tol=1e-12):
    """Invert ``a(lam)`` for a Gaussian model by Newton iteration on ``C(lam)``."""
    a = np.asarray(a, dtype=float)
    lam = np.zeros(model.m) if lam_guess is None else np.array(lam_guess, dtype=float)
    for _ in range(100):
        mdl = model.with_lambda(lam)
        g = gaussian_moments(model.sys, mdl.beta_of_lambda, lam)
        resid = g.a - a
        if np.max(np.abs(resid)) <= tol * (1 + np.max(np.abs(a))):
            return lam
        C = g.cov_aa
        if model.variant == FIXED_ENERGY:
            C = C - np.outer(g.cov_ah, g.cov_ah) / g.var_energy
        lam = lam - np.linalg.solve(C, resid)
    raise NoSolutionError("conjugate parameter iteration did not converge")


# ---------------------------------------------------------------------------
# sampling


def _log_target(model, beta, lam):
    sys = model.sys
    n = sys.n
    if sys.momenta_exact:
        g_obs = [obs for obs in sys.observables]

        def logp(q):
            z = np.concatenate([q, np.zeros_like(q)], axis=1)
            val = -beta * sys.potential(q)
            if np.any(lam):
                val = val + np.stack([o.value(z) for o in g_obs], axis=1) @ lam
            return val
        return logp, n

    def logp(z):
        val = -beta * sys.hamiltonian(z)
        if np.any(lam):
            val = val + sys.observable_values(z) @ lam
        return val
    return logp, 2 * n


def _proposal_basis(sys, dim):
    n = sys.n
    basis = sys.proposal_basis if sys.proposal_basis is not None else np.eye(n)
    hints = sys.proposal_scales if sys.proposal_scales is not None else np.ones(n)
    if dim == 2 * n:
        basis = linalg.block_diag(basis, basis)
        hints = np.concatenate([hints, np.ones(n)])
    return basis, np.asarray(hints, dtype=float)


def _metropolis(model, beta, lam, N, rng, cfg: SamplerConfig):
    """Vectorized random-walk Metropolis over independent chains.

    Proposals are Gaussian and componentwise in the system's proposal basis
    (normal modes for chains), with per-component scales tuned during
    burn-in to the target acceptance window.
    """
    sys = model.sys
    logp, dim = _log_target(model, beta, lam)
    per_chain = max(1, min(cfg.samples_per_chain, N))
    n_chains = -(-N // per_chain)
    basis, hints = _proposal_basis(sys, dim)
    hints = hints / math.sqrt(beta)
    y = rng.standard_normal((n_chains, dim)) * hints
    x = y @ basis
    lp = logp(x)
    scale = 2.38 / math.sqrt(dim)
    comp = hints.copy()
    lo, hi = cfg.target_acceptance
    acc_window = 0
    steps_window = 0

    def step(x, lp):
        prop = x + (rng.standard_normal((n_chains, dim)) * (scale * comp)) @ basis
        lpp = logp(prop)
        with np.errstate(over="ignore", invalid="ignore"):
            accept = np.log(rng.random(n_chains)) < (lpp - lp)
        accept &= np.isfinite(lpp)
        x = np.where(accept[:, None], prop, x)
        lp = np.where(accept, lpp, lp)
        if np.max(np.abs(x)) > cfg.guard_radius:
            raise DivergenceError(
                f"Metropolis chain left the guard radius {cfg.guard_radius:g}; "
                "the tilted density is probably not normalizable"
            )
        return x, lp, accept

    # mean squared radius and log density over the second and last quarters of burn-in
    q1, q2, q3 = cfg.burn_in // 4, cfg.burn_in // 2, 3 * cfg.burn_in // 4
    r2 = np.zeros(2)
    lpm = np.zeros(2)
    for it in range(1, cfg.burn_in + 1):
        x, lp, accept = step(x, lp)
        acc_window += accept.sum()
        steps_window += n_chains
        k = 0 if q1 < it <= q2 else 1 if it > q3 else -1
        if k >= 0:
            r2[k] += np.mean(x * x)
            lpm[k] += np.mean(lp)
        if it % cfg.tune_interval == 0:
            rate = acc_window / steps_window
            if rate < lo:
                scale *= 0.8
            elif rate > hi:
                scale *= 1.25
            if n_chains >= 10:
                spread = np.std(x @ basis.T, axis=0)
                comp = np.where(spread > 0, spread, comp)
            acc_window = steps_window = 0

    # an escaping chain moves at least ballistically while the density keeps rising
    if cfg.burn_in >= 400 and r2[1] > 4.0 * r2[0] and lpm[1] > lpm[0]:
        raise DivergenceError(
            "Metropolis chains drift outward with increasing density during burn-in; "
            "the tilted density is probably not normalizable"
        )
    out = np.empty((n_chains, per_chain, dim))
    accepted = 0
    total = 0
    for s in range(per_chain):
        for _ in range(cfg.thinning):
            x, lp, accept = step(x, lp)
            accepted += accept.sum()
            total += n_chains
        out[:, s, :] = x
    # chain-major order: contiguous batches are groups of whole chains
    pts = out.reshape(n_chains * per_chain, dim)[:N]
    return pts, accepted / total, n_chains


def sample(model: StatModel, N: int, seed: int, config: SamplerConfig = None) -> EnsembleSample:
    """Draw ``N`` phase points from the trial density of ``model``."""
    if N < 10:
        raise InvalidArgumentError("need N >= 10 sample points")
    cfg = config or model.sampler
    sys = model.sys
    beta = model.beta_of_lambda
    lam = model.lam
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    prov = {"seed": int(seed), "lambda": lam.tolist(), "beta": float(beta),
            "variant": model.variant, "system": sys.name}
    if sys.is_gaussian and not cfg.force_mcmc:
        g = gaussian_moments(sys, beta, lam)
        L = np.linalg.cholesky(beta * sys.quadratic_form)
        xi = rng.standard_normal((N, sys.dim))
        pts = g.mean + linalg.solve_triangular(L, xi.T, lower=True, trans="T").T
        prov.update(sampler="gaussian-exact", burn_in=0, thinning=1, acceptance=1.0, flagged=False)
        return EnsembleSample(pts, np.full(N, 1.0 / N), prov)

    x, acc, n_chains = _metropolis(model, beta, lam, N, rng, cfg)
    if sys.momenta_exact:
        c = np.array([obs.momentum_linear for obs in sys.observables])
        p = lam @ c / beta + rng.standard_normal((N, sys.n)) / math.sqrt(beta)
        pts = np.concatenate([x, p], axis=1)
        kind = "metropolis+exact-momenta"
    else:
        pts = x
        kind = "metropolis"
    prov.update(sampler=kind, burn_in=cfg.burn_in, thinning=cfg.thinning, acceptance=float(acc),
                chains=int(n_chains), samples_per_chain=int(min(cfg.samples_per_chain, N)),
                flagged=bool(not 0.1 <= acc <= 0.9))
    return EnsembleSample(pts, np.full(N, 1.0 / N), prov)


# ---------------------------------------------------------------------------
# fixed-energy temperature


def _solve_monotone(mean_energy, E, beta0, tol_fn, bracket=BETA_BRACKET, max_iter=80):
    """Root of the decreasing function ``mean_energy(beta) - E``.

    ``mean_energy`` returns ``(u, du/dbeta)``.  Bracket by doubling/halving,
    then safeguarded Newton.
    """
    lo_lim, hi_lim = bracket
    beta = min(max(beta0, lo_lim), hi_lim)
    u, du = mean_energy(beta)
    if abs(u - E) <= tol_fn(beta):
        return beta
    lo = hi = beta
    if u > E:
        while True:
            hi = min(hi * 2, hi_lim)
            u_hi, _ = mean_energy(hi)
            if u_hi < E:
                break
            if hi >= hi_lim:
                raise NoSolutionError(f"no beta in {bracket} reaches energy {E:g}")
            lo = hi
    else:
        while True:
            lo = max(lo / 2, lo_lim)
            u_lo, _ = mean_energy(lo)
            if u_lo > E:
                break
            if lo <= lo_lim:
                raise NoSolutionError(f"no beta in {bracket} reaches energy {E:g}")
            hi = lo
    beta = 0.5 * (lo + hi)
    for _ in range(max_iter):
        u, du = mean_energy(beta)
        if abs(u - E) <= tol_fn(beta):
            return beta
        if u > E:
            lo = beta
        else:
            hi = beta
        nxt = beta - (u - E) / du if du < 0 else None
        beta = nxt if nxt is not None and lo < nxt < hi else 0.5 * (lo + hi)
    raise NoSolutionError("beta iteration did not converge")


def solve_beta(model: StatModel) -> float:
    """``beta(lam)`` such that the tilted density has mean energy ``E``."""
    if model.variant != FIXED_ENERGY:
        raise InvalidArgumentError("solve_beta applies to fixed-energy models")
    sys = model.sys
    E = model.energy
    if not E > sys.h_min:
        raise NoSolutionError(f"energy {E:g} is not above inf H = {sys.h_min:g}")
    lam = model.lam
    if sys.is_gaussian and not model.sampler.force_mcmc:
        def mean_energy(beta):
            g = gaussian_moments(sys, beta, lam)
            return g.mean_energy, -g.var_energy

        beta0 = model.beta or sys.n / (E - max(sys.h_min, 0.0))
        return _solve_monotone(mean_energy, E, beta0, lambda b: 1e-13 * abs(E))

    stderr = {}

    def mean_energy(beta):
        fb = StatModel.fixed_beta(sys, beta, lam, sampler=model.sampler)
        smp = sample(fb, model.solve_samples, model.solve_seed)
        h = sys.hamiltonian(smp.points)
        u, se = batch_means(h)
        stderr[beta] = se
        return float(u), -float(np.var(h))

    beta0 = model.beta or sys.n / (E - max(sys.h_min, 0.0))
    return _solve_monotone(mean_energy, E, beta0, lambda b: 2.0 * stderr.get(b, 0.0))


# ---------------------------------------------------------------------------
# scores and macrostates


def score_values(A, h, weights, variant=FIXED_BETA):
    """Scores from observable and energy values on a weighted sample."""
    U = A - weighted_mean(A, weights)
    if variant == FIXED_ENERGY:
        dh = h - weighted_mean(h, weights)
        var_h = weighted_mean(dh ** 2, weights)
        if var_h < 1e-12:
            raise DegenerateModelError("energy fluctuations vanish on the sample")
        coef = weighted_mean(U * dh[:, None], weights) / var_h
        U = U - np.outer(dh, coef)
    return U


def score(model: StatModel, sample: EnsembleSample) -> np.ndarray:
    """Per-point score vectors, shape ``(N, m)``.

    Fixed beta: ``A - a``.  Fixed energy: the centered observables minus
    their regression on the centered energy, so the scores are exactly
    centered and exactly uncorrelated with ``H`` on the sample.
    """
    sys = model.sys
    h = sys.hamiltonian(sample.points) if model.variant == FIXED_ENERGY else None
    return score_values(sys.observable_values(sample.points), h, sample.weights, model.variant)


def entropy_differences(lambda_path, a_path):
    """Cumulative ``-int lam . da`` along a path (trapezoid rule)."""
    lam = np.asarray(lambda_path, dtype=float)
    a = np.asarray(a_path, dtype=float)
    incr = -0.5 * np.sum((lam[1:] + lam[:-1]) * np.diff(a, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(incr)])


def macrostate(model: StatModel, sample: EnsembleSample, lambda_path=None, a_path=None) -> ThermoState:
    """Empirical macrostate ``a``, mean energy ``u`` and entropies.

    For non-Gaussian systems ``s`` is unavailable and ``s_rel`` is obtained
    by thermodynamic integration along the supplied ``(lambda_path,
    a_path)`` history (which should start at equilibrium), if any.
    """
    sys = model.sys
    A = sys.observable_values(sample.points)
    h = sys.hamiltonian(sample.points)
    a, a_se = batch_means(A, sample.weights)
    u, u_se = batch_means(h, sample.weights)
    beta = model.beta_of_lambda
    s = psi = s_rel = None
    if sys.is_gaussian:
        g = gaussian_moments(sys, beta, model.lam)
        psi = g.log_partition(model.lam)
        s = g.entropy()
        s_rel = gaussian_relative_entropy(model)
    elif lambda_path is not None and a_path is not None:
        s_rel = float(entropy_differences(lambda_path, a_path)[-1])
    return ThermoState(a=a, u=float(u), s=s, s_rel=s_rel, lam=model.lam.copy(), beta=beta,
                       psi=psi, a_stderr=a_se, u_stderr=float(u_se))


def normalize_observables(sys: PhaseSystem, eq_sample: EnsembleSample, rank_tol=1e-10,
                          exact_beta=None) -> PhaseSystem:
    """Center the observables and make them energy-orthogonal at equilibrium.

    Returns a system with ``A_i' = A_i - <A_i> - alpha_i (H - E)`` and
    ``alpha_i = <A_i H>_c / <(H - E)^2>``; the coefficients are recorded in
    ``normalization``.  They are estimated on ``eq_sample`` unless
    ``exact_beta`` is given for a Gaussian system, in which case the exact
    equilibrium moments at that temperature are used (then ``alpha = 0``
    and affine observables stay affine).
    """
    w = eq_sample.weights
    A = sys.observable_values(eq_sample.points)
    if exact_beta is not None and sys.is_gaussian:
        g = gaussian_moments(sys, exact_beta, np.zeros(sys.m))
        shift, alpha, E = g.a, g.cov_ah / g.var_energy, float(g.mean_energy)
    else:
        h = sys.hamiltonian(eq_sample.points)
        shift = weighted_mean(A, w)
        E = float(weighted_mean(h, w))
        dh = h - E
        var_h = weighted_mean(dh ** 2, w)
        if var_h < 1e-12:
            raise DegenerateModelError("energy fluctuations vanish on the equilibrium sample")
        alpha = weighted_mean((A - shift) * dh[:, None], w) / var_h

    new_obs = []
    for obs, m_i, a_i in zip(sys.observables, shift, alpha):
        if a_i == 0.0:
            new_obs.append(dataclasses.replace(
                obs,
                value=lambda z, f=obs.value, c=m_i: f(z) - c,
                offset=obs.offset - m_i,
            ))
            continue
        new_obs.append(Observable(
            name=obs.name,
            value=lambda z, f=obs.value, c=m_i, a=a_i: f(z) - c - a * (sys.hamiltonian(z) - E),
            grad=lambda z, g=obs.grad, a=a_i: g(z) - a * sys.grad_h(z),
            parity="even" if obs.parity == "even" else None,
        ))
    out = dataclasses.replace(sys, observables=tuple(new_obs),
                              normalization={"shift": shift, "alpha": alpha, "energy": E})
    vals = out.observable_values(eq_sample.points)
    gram = vals.T @ (vals * w[:, None])
    ev, vec = np.linalg.eigh(gram)
    scale = max(np.trace(gram) / sys.m, np.max(np.abs(A)) ** 2 * 1e-300, 1e-300)
    if ev[0] <= rank_tol * scale or np.trace(gram) < 1e-24:
        raise RankDeficiencyError(
            "normalized observables are linearly dependent; null direction "
            + ", ".join(f"{c:+.3g}*{nm}" for c, nm in zip(vec[:, 0], sys.names)),
            direction=vec[:, 0],
        )
    return out
