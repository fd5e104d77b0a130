"""Coefficient-matrix providers for reduced dynamics at arbitrary ``lam``.

A provider returns :class:`~bestfit.moments.ModelMatrices` for any
parameter vector and, where available, the macrostate ``a(lam)`` and the
entropy relative to equilibrium.  It also supplies the gradients of the
dual function ``H(lam, mu) = mu.C^-1.mu / 2 + f.C^-1.mu - lam.D.lam / 2``
used by the extremal-path solver.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgumentError, NoSolutionError
from .hamiltonian import symplectic_matrix
from .moments import ModelMatrices, WeightSpec, matrices_from_arrays, model_matrices
from .statmodel import (FIXED_BETA, FIXED_ENERGY, EnsembleSample, StatModel, gaussian_moments,
                        gaussian_relative_entropy, sample, score_values)


class _LastCache:
    def __init__(self, size=8):
        self.size = size
        self.data = OrderedDict()

    def get(self, key, fn):
        if key in self.data:
            self.data.move_to_end(key)
            return self.data[key]
        val = fn()
        self.data[key] = val
        if len(self.data) > self.size:
            self.data.popitem(last=False)
        return val


class MatrixProvider:
    """Base class; subclasses implement :meth:`_compute`."""

    m: int
    cache_size = 8

    def __init__(self):
        self._cache = _LastCache(self.cache_size)

    def matrices(self, lam) -> ModelMatrices:
        lam = np.ascontiguousarray(lam, dtype=float).reshape(self.m)
        return self._cache.get(lam.tobytes(), lambda: self._compute(lam))

    def _compute(self, lam) -> ModelMatrices:
        raise NotImplementedError

    def reversible(self, lam):
        """``(C, f)`` at ``lam``; enough for the adiabatic closure."""
        mats = self.matrices(lam)
        return mats.C, mats.f

    def macrostate(self, lam) -> Optional[np.ndarray]:
        return None

    def entropy(self, lam) -> Optional[float]:
        return None

    def linearization(self, h=1e-5):
        """``(C0, J, D0)`` at equilibrium; ``J`` is the Jacobian of ``f`` at 0."""
        zero = np.zeros(self.m)
        mats = self.matrices(zero)
        J = np.empty((self.m, self.m))
        for j in range(self.m):
            e = np.zeros(self.m)
            e[j] = h
            J[:, j] = (self.matrices(e).f - self.matrices(-e).f) / (2 * h)
        return mats.C, 0.5 * (J - J.T), mats.D

    def extremal_flow_matrix(self):
        """Constant ``L`` with ``d(lam, mu)/dt = L (lam, mu)`` if the flow is linear, else ``None``."""
        return None

    def matrices_batch(self, lams):
        """``(C, f, D)`` stacked over rows of ``lams``."""
        mats = [self.matrices(l) for l in np.atleast_2d(lams)]
        return (np.stack([x.C for x in mats]), np.stack([x.f for x in mats]),
                np.stack([x.D for x in mats]))

    def dual(self, lam, mu):
        mats = self.matrices(lam)
        Cmu = np.linalg.solve(mats.C, mu)
        return 0.5 * mu @ Cmu + mats.f @ Cmu - 0.5 * lam @ mats.D @ lam

    def hamiltonian_gradients(self, lam, mu, h=1e-6):
        """``(dH/dlam, dH/dmu)`` for row-stacked ``lam``, ``mu`` of shape ``(B, m)``.

        ``dH/dmu = C^-1 (mu + f)`` is exact; ``dH/dlam`` uses central
        differences of the dual function, evaluated in one batch.
        """
        lam = np.atleast_2d(lam)
        mu = np.atleast_2d(mu)
        B, m = lam.shape
        steps = h * (1.0 + np.abs(lam))                      # (B, m)
        offs = np.concatenate([np.zeros((1, m)), np.eye(m), -np.eye(m)])   # (2m+1, m)
        pts = lam[:, None, :] + offs[None] * steps[:, None, :]
        C, f, D = self.matrices_batch(pts.reshape(-1, m))
        mus = np.repeat(mu, 2 * m + 1, axis=0)
        Cmu = np.linalg.solve(C, mus[..., None])[..., 0]
        lp = pts.reshape(-1, m)
        dual = (0.5 * np.einsum("bi,bi->b", mus, Cmu) + np.einsum("bi,bi->b", f, Cmu)
                - 0.5 * np.einsum("bi,bij,bj->b", lp, D, lp)).reshape(B, 2 * m + 1)
        g_lam = (dual[:, 1:m + 1] - dual[:, m + 1:]) / (2 * steps)
        base = np.arange(B) * (2 * m + 1)
        g_mu = np.linalg.solve(C[base], (mu + f[base])[..., None])[..., 0]
        return g_lam, g_mu


class ConstantProvider(MatrixProvider):
    """State-independent ``C``, ``D`` and linear drift ``f = J lam``."""

    def __init__(self, C, J, D):
        super().__init__()
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.m = self.C.shape[0]
        self.J = np.zeros((self.m, self.m)) if J is None else np.atleast_2d(np.asarray(J, dtype=float))
        self.D = np.atleast_2d(np.asarray(D, dtype=float))
        self.Cinv = np.linalg.inv(self.C)

    @classmethod
    def from_constants(cls, eqc):
        return cls(eqc.C0, eqc.Jrev, eqc.D0)

    def _compute(self, lam):
        return ModelMatrices(C=self.C, f=self.J @ lam, Omega=self.J, D=self.D, lam=lam, beta=1.0)

    def macrostate(self, lam):
        return self.C @ lam

    def entropy(self, lam):
        return -0.5 * lam @ self.C @ lam

    def linearization(self, h=None):
        return self.C, self.J, self.D

    def extremal_flow_matrix(self):
        # dlam/dt = C^-1 (mu + J lam); dmu/dt = -(J^T C^-1 mu - D lam)
        Ci = self.Cinv
        return np.block([[Ci @ self.J, Ci], [self.D, -self.J.T @ Ci]])

    def hamiltonian_gradients(self, lam, mu, h=None):
        lam = np.atleast_2d(lam)
        mu = np.atleast_2d(mu)
        g_mu = (mu + lam @ self.J.T) @ self.Cinv
        g_lam = mu @ self.Cinv @ self.J - lam @ self.D
        return g_lam, g_mu


class CallableProvider(MatrixProvider):
    """Matrices from user functions ``C(lam)``, ``f(lam)``, ``D(lam)``.

    With ``vectorized=True`` the functions take row-stacked ``(B, m)``
    arrays and return ``(B, m, m)`` / ``(B, m)`` arrays.
    """

    def __init__(self, m, C: Callable, f: Callable, D: Callable, Omega: Callable = None, vectorized=False):
        super().__init__()
        self.m = int(m)
        self._C, self._f, self._D = C, f, D
        self._Omega = Omega
        self.vectorized = vectorized

    def _compute(self, lam):
        if self.vectorized:
            C, f, D = (x[0] for x in self.matrices_batch(lam[None]))
        else:
            C = np.atleast_2d(np.asarray(self._C(lam), dtype=float))
            f = np.asarray(self._f(lam), dtype=float).reshape(self.m)
            D = np.atleast_2d(np.asarray(self._D(lam), dtype=float))
        Om = np.zeros((self.m, self.m)) if self._Omega is None else np.atleast_2d(self._Omega(lam))
        return ModelMatrices(C=C, f=f, Omega=Om, D=D, lam=lam)

    def matrices_batch(self, lams):
        if not self.vectorized:
            return super().matrices_batch(lams)
        lams = np.atleast_2d(lams)
        B, m = lams.shape
        return (np.asarray(self._C(lams), dtype=float).reshape(B, m, m),
                np.asarray(self._f(lams), dtype=float).reshape(B, m),
                np.asarray(self._D(lams), dtype=float).reshape(B, m, m))


class GaussianProvider(MatrixProvider):
    """Closed-form matrices for quadratic ``H`` with affine observables."""

    def __init__(self, model: StatModel, weights):
        super().__init__()
        if not model.is_gaussian:
            raise InvalidArgumentError("GaussianProvider needs a Gaussian system")
        self.model = model
        self.m = model.m
        self.wvec = WeightSpec.coerce(weights).vector(self.m)
        if model.variant == FIXED_BETA:
            g = gaussian_moments(model.sys, model.beta, np.zeros(self.m))
            Om = g.B @ symplectic_matrix(g.n) @ g.B.T
            self._rev = (g.cov_aa, 0.5 * (Om - Om.T) / model.beta)

    def reversible(self, lam):
        if self.model.variant != FIXED_BETA:
            return super().reversible(lam)
        # fixed beta: C is independent of lam and f is linear
        C, F = self._rev
        return C, F @ np.asarray(lam, dtype=float).reshape(self.m)

    def _state(self, lam):
        mdl = self.model.with_lambda(lam)
        return mdl, gaussian_moments(mdl.sys, mdl.beta_of_lambda, lam)

    def _compute(self, lam):
        mdl, g = self._state(lam)
        B, Sig = g.B, g.cov
        G = g.liouville_matrix
        Omega = B @ symplectic_matrix(g.n) @ B.T
        Omega = 0.5 * (Omega - Omega.T)
        f = Omega @ lam / g.beta
        C = g.cov_aa
        X = G @ Sig @ B.T
        if mdl.variant == FIXED_ENERGY:
            alpha = g.cov_ah / g.var_energy
            C = C - np.outer(g.cov_ah, g.cov_ah) / g.var_energy
            X = X - np.outer(G @ Sig @ (g.K @ g.mean), alpha)
        C = 0.5 * (C + C.T)
        second = G @ Sig @ G.T + np.outer(f, f) - X @ np.linalg.solve(C, X.T)
        W = self.wvec
        D = 0.5 * (second + second.T) * np.outer(W, W)
        return ModelMatrices(C=C, f=f, Omega=Omega, D=D, lam=lam, beta=g.beta)

    def macrostate(self, lam):
        return self._state(np.asarray(lam, dtype=float))[1].a

    def entropy(self, lam):
        return gaussian_relative_entropy(self.model, np.asarray(lam, dtype=float))


class ReweightingProvider(MatrixProvider):
    """Smooth deterministic matrices by importance reweighting one equilibrium sample.

    Point weights are ``exp(lam . A)`` (fixed beta) or
    ``exp(-(beta - beta0) H + lam . A)`` with ``beta`` solved so that the
    reweighted mean energy equals the sample's equilibrium energy (fixed
    energy).  The drift is the bracket form ``beta^-1 Omega(lam) lam``,
    which keeps ``lam . f = 0`` exact.
    """

    def __init__(self, model: StatModel, eq_sample: EnsembleSample, weights, drift="bracket"):
        super().__init__()
        sys = model.sys
        z = eq_sample.points
        self.model = model
        self.m = sys.m
        self.variant = model.variant
        self.wspec = WeightSpec.coerce(weights)
        self.A = np.ascontiguousarray(sys.observable_values(z), dtype=float)
        self.H = sys.hamiltonian(z)
        self.LA = sys.liouville_values(z)
        self.brackets = sys.bracket_matrix_values(z)
        # affine observables have constant brackets
        self._const_bracket = bool(np.all(self.brackets == self.brackets[:1]))
        self.logw0 = np.log(eq_sample.weights)
        self.beta0 = float(model.with_lambda(np.zeros(self.m)).beta_of_lambda)
        self.energy = float(np.exp(self.logw0) @ self.H)
        self.drift = drift
        self.names = list(sys.names)

    def _log_weights(self, lam, beta):
        if beta == self.beta0:
            return self.logw0 + self.A @ lam
        return self.logw0 + self.A @ lam - (beta - self.beta0) * self.H

    @staticmethod
    def _normalize(logw):
        c = logw.max()
        w = np.exp(logw - c)
        s = w.sum()
        return w / s, c + math.log(s)

    def _beta(self, lam):
        if self.variant == FIXED_BETA:
            return self.beta0
        beta = self.beta0
        for _ in range(100):
            w, _ = self._normalize(self._log_weights(lam, beta))
            u = w @ self.H
            var = w @ (self.H - u) ** 2
            step = (u - self.energy) / var
            beta_new = beta + step
            if beta_new <= 0:
                beta_new = 0.5 * beta
            if abs(beta_new - beta) <= 1e-14 * beta:
                return beta_new
            beta = beta_new
        raise NoSolutionError("reweighted energy equation did not converge")

    def _weights(self, lam):
        beta = self._beta(lam)
        w, logz = self._normalize(self._log_weights(lam, beta))
        return w, beta, logz

    def _compute(self, lam):
        w, beta, _ = self._weights(lam)
        Om = np.tensordot(w, self.brackets, axes=1)
        mats = matrices_from_arrays(self.A, self.H, self.LA, Om, w, lam, beta, self.variant,
                                    self.wspec, names=self.names, with_stderr=False)
        if self.drift == "bracket":
            mats.diagnostics["f_direct"] = mats.f
            mats.f = mats.Omega @ lam / beta
        ess = 1.0 / np.sum(w ** 2)
        mats.diagnostics["effective_sample_size"] = float(ess)
        return mats

    def reversible(self, lam):
        lam = np.ascontiguousarray(lam, dtype=float).reshape(self.m)
        w, beta, _ = self._weights(lam)
        if self.variant == FIXED_BETA:
            a = w @ self.A
            C = (self.A.T * w) @ self.A - np.outer(a, a)
        else:
            U = score_values(self.A, self.H, w, self.variant)
            C = U.T @ (U * w[:, None])
        Om = self.brackets[0] if self._const_bracket else np.tensordot(w, self.brackets, axes=1)
        Om = 0.5 * (Om - Om.T)
        f = Om @ lam / beta if self.drift == "bracket" else w @ self.LA
        return 0.5 * (C + C.T), f

    def macrostate(self, lam):
        w, _, _ = self._weights(np.asarray(lam, dtype=float))
        return w @ self.A

    def entropy(self, lam):
        lam = np.asarray(lam, dtype=float)
        w, beta, logz = self._weights(lam)
        a = w @ self.A
        # log Z(beta, lam) / Z(beta0, 0) relative to the base sample
        logz0 = self._normalize(self.logw0)[1]
        dpsi = logz - logz0
        if self.variant == FIXED_BETA:
            return float(dpsi - lam @ a)
        return float((beta - self.beta0) * self.energy - lam @ a + dpsi)


class MonteCarloProvider(MatrixProvider):
    """Fresh samples at each requested ``lam`` (quantized), with an LRU cache."""

    cache_size = 256

    def __init__(self, model: StatModel, weights, N=20_000, seed=0, grid=1e-3):
        super().__init__()
        self.model = model
        self.m = model.m
        self.wspec = WeightSpec.coerce(weights)
        self.N = int(N)
        self.seed = int(seed)
        self.grid = float(grid)
        self._samples = _LastCache(self.cache_size)

    def _key(self, lam):
        return tuple(int(k) for k in np.round(np.asarray(lam, dtype=float) / self.grid))

    def _sample(self, key):
        def draw():
            lam_q = np.array(key, dtype=float) * self.grid
            mdl = self.model.with_lambda(lam_q)
            ss = np.random.SeedSequence([self.seed, *[k & 0xFFFFFFFF for k in key]])
            return mdl, sample(mdl, self.N, int(ss.generate_state(1)[0]))
        return self._samples.get(key, draw)

    def matrices(self, lam):
        key = self._key(lam)
        return self._cache.get(key, lambda: self._compute_key(key))

    def _compute_key(self, key):
        mdl, smp = self._sample(key)
        return model_matrices(mdl, smp, self.wspec)

    def macrostate(self, lam):
        mdl, smp = self._sample(self._key(lam))
        return smp.weights @ mdl.sys.observable_values(smp.points)
