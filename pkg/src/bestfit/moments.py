"""Sample estimators of the closure coefficient matrices.

All estimators work on one weighted sample and return batch-means standard
errors alongside the point estimates.  Symmetric objects (``C``, ``D``) are
symmetrized on output and antisymmetric ones (``Omega``, ``Jrev``) are
antisymmetrized, with the raw (anti)symmetry defect kept for diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ._stats import batch_means, weighted_mean
from .errors import InvalidArgumentError, RankDeficiencyError
from .hamiltonian import PhaseSystem
from .statmodel import FIXED_BETA, EnsembleSample, StatModel, score_values

RANK_TOL = 1e-10
PSD_TOL = 1e-10


@dataclass(frozen=True)
class WeightSpec:
    """Scalar weight on the whole unresolved subspace, or one per residual component."""

    value: Union[float, tuple]

    def __post_init__(self):
        v = np.asarray(self.value, dtype=float)
        if v.ndim > 1 or np.any(v < 0) or not np.all(np.isfinite(v)):
            raise InvalidArgumentError("weights must be a non-negative scalar or vector")
        object.__setattr__(self, "value", float(v) if v.ndim == 0 else tuple(v.tolist()))

    @classmethod
    def coerce(cls, w):
        return w if isinstance(w, cls) else cls(w)

    @property
    def is_scalar(self):
        return isinstance(self.value, float)

    def vector(self, m):
        if self.is_scalar:
            return np.full(m, self.value)
        if len(self.value) != m:
            raise InvalidArgumentError(f"diagonal weights have {len(self.value)} entries, expected {m}")
        return np.array(self.value)


@dataclass
class ModelMatrices:
    C: np.ndarray
    f: np.ndarray
    Omega: np.ndarray
    D: np.ndarray
    lam: np.ndarray
    mc_stderr: dict = field(default_factory=dict)
    beta: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def m(self):
        return self.C.shape[0]


@dataclass
class EquilibriumConstants:
    C0: np.ndarray
    Jrev: np.ndarray
    D0: np.ndarray
    mc_stderr: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def m(self):
        return self.C0.shape[0]


def _sym(X):
    return 0.5 * (X + X.T)


def _antisym(X):
    return 0.5 * (X - X.T)


def _outer_rows(X, Y=None):
    Y = X if Y is None else Y
    return X[:, :, None] * Y[:, None, :]


def _check_spd(C, names=None):
    m = C.shape[0]
    ev, vec = np.linalg.eigh(C)
    tr = np.trace(C)
    if not tr > 0 or ev[0] <= RANK_TOL * tr / m:
        names = names or [f"A{i}" for i in range(m)]
        direction = vec[:, 0]
        desc = " ".join(f"{c:+.3g}*{nm}" for c, nm in zip(direction, names))
        raise RankDeficiencyError(
            f"Fisher matrix is rank deficient (min eigenvalue {ev[0]:.3g}); null direction {desc}",
            direction=direction,
        )


def _clip_psd(D):
    D = _sym(D)
    ev, vec = np.linalg.eigh(D)
    scale = max(1.0, np.max(np.abs(ev))) if ev.size else 1.0
    if ev.size and ev[0] < -PSD_TOL * scale:
        raise InvalidArgumentError(f"matrix is not PSD (eigenvalue {ev[0]:.3g})")
    if ev.size and ev[0] < 0:
        D = _sym((vec * np.clip(ev, 0, None)) @ vec.T)
    return D


# ---------------------------------------------------------------------------
# array-level estimators (shared by sample and reweighting paths)


def _moment(P, weights, with_stderr=True):
    if with_stderr:
        return batch_means(P, weights)
    return weighted_mean(P, weights), None


def fisher_from_scores(U, weights, names=None, with_stderr=True):
    P = _outer_rows(U)
    C, se = _moment(P, weights, with_stderr)
    C = _sym(C)
    _check_spd(C, names)
    return C, (None if se is None else _sym(se))


def residuals(LA, U, weights, C):
    """Part of ``LA`` orthogonal to the span of the scores."""
    X = weighted_mean(_outer_rows(LA, U), weights)
    coef = np.linalg.solve(C, X.T).T
    return LA - U @ coef.T


def closure_from_residuals(r, weights, wvec, with_stderr=True):
    rw = r * wvec
    P = _outer_rows(rw)
    D, se = _moment(P, weights, with_stderr)
    return _clip_psd(D), (None if se is None else _sym(se))


def matrices_from_arrays(A, h, LA, brackets, weights, lam, beta, variant, weights_spec,
                         names=None, with_stderr=True) -> ModelMatrices:
    """``C, f, Omega, D`` from per-point values on one weighted sample.

    ``brackets`` may be the per-point bracket matrices ``(N, m, m)`` or
    their precomputed mean ``(m, m)``.
    """
    lam = np.asarray(lam, dtype=float)
    m = A.shape[1]
    wspec = WeightSpec.coerce(weights_spec)
    U = score_values(A, h, weights, variant)
    C, C_se = fisher_from_scores(U, weights, names, with_stderr)
    f, f_se = _moment(LA, weights, with_stderr)
    brackets = np.asarray(brackets)
    if brackets.ndim == 2:
        Om_raw, Om_se = brackets, np.zeros_like(brackets)
    else:
        Om_raw, Om_se = _moment(brackets, weights, with_stderr)
    Omega = _antisym(Om_raw)
    r = residuals(LA, U, weights, C)
    D, D_se = closure_from_residuals(r, weights, wspec.vector(m), with_stderr)
    f_alt = Omega @ lam / beta
    diag = {
        "f_alt": f_alt,
        "drift_discrepancy": float(np.max(np.abs(f - f_alt))) if m else 0.0,
        "omega_raw_asymmetry": float(np.max(np.abs(_sym(Om_raw)))),
        "lambda_dot_f": float(lam @ f),
    }
    return ModelMatrices(C=C, f=f, Omega=Omega, D=D, lam=lam.copy(), beta=beta,
                         mc_stderr={} if not with_stderr else
                         {"C": C_se, "f": f_se, "Omega": _sym(Om_se), "D": D_se},
                         diagnostics=diag)


# ---------------------------------------------------------------------------
# sample-level operations


def _arrays(model: StatModel, sample: EnsembleSample):
    sys = model.sys
    z = sample.points
    return sys.observable_values(z), sys.hamiltonian(z)


def fisher(model: StatModel, sample: EnsembleSample, return_stderr=False):
    """Covariance of the score vectors (the Fisher matrix)."""
    A, h = _arrays(model, sample)
    U = score_values(A, h, sample.weights, model.variant)
    C, se = fisher_from_scores(U, sample.weights, list(model.sys.names))
    return (C, se) if return_stderr else C


@dataclass
class DriftEstimate:
    f: np.ndarray
    f_alt: np.ndarray
    discrepancy: float
    stderr: np.ndarray


def drift(model: StatModel, sample: EnsembleSample) -> DriftEstimate:
    """Mean Liouville action of the observables plus the bracket-based estimate.

    In the fixed-energy variant the projected scores differ from ``A`` only
    by a multiple of ``H``, whose Liouville action vanishes, so both
    variants use ``L A``.
    """
    sys = model.sys
    LA = sys.liouville_values(sample.points)
    f, se = batch_means(LA, sample.weights)
    Omega = poisson_matrix(model, sample)
    f_alt = Omega @ model.lam / model.beta_of_lambda
    return DriftEstimate(f=f, f_alt=f_alt, discrepancy=float(np.max(np.abs(f - f_alt))), stderr=se)


def poisson_matrix(model: StatModel, sample: EnsembleSample, return_stderr=False):
    """Mean bracket matrix ``<{A_i, A_j}>``, antisymmetrized.

    With ``return_stderr`` also returns the standard errors and the raw
    symmetric defect (max-abs) before antisymmetrization.
    """
    B = model.sys.bracket_matrix_values(sample.points)
    raw, se = batch_means(B, sample.weights)
    Omega = _antisym(raw)
    if return_stderr:
        return Omega, _sym(se), float(np.max(np.abs(_sym(raw))))
    return Omega


def closure_matrix(model: StatModel, sample: EnsembleSample, weights, return_stderr=False):
    """Weighted second moment of the unresolved part of ``L A``.

    The resolved part is the least-squares projection of ``L A`` on the
    score span with Gram matrix ``C``.
    """
    sys = model.sys
    A, h = _arrays(model, sample)
    w = sample.weights
    U = score_values(A, h, w, model.variant)
    C, _ = fisher_from_scores(U, w, list(sys.names))
    r = residuals(sys.liouville_values(sample.points), U, w, C)
    D, se = closure_from_residuals(r, w, WeightSpec.coerce(weights).vector(sys.m))
    return (D, se) if return_stderr else D


def model_matrices(model: StatModel, sample: EnsembleSample, weights, check_sample=None) -> ModelMatrices:
    """All coefficient matrices at ``model.lam`` from one shared sample.

    ``check_sample``, if given, is an independent sample from the same
    state; the entrywise differences are stored under
    ``diagnostics["independent"]``.
    """
    sys = model.sys
    z = sample.points
    mats = matrices_from_arrays(
        sys.observable_values(z), sys.hamiltonian(z), sys.liouville_values(z),
        sys.bracket_matrix_values(z), sample.weights, model.lam, model.beta_of_lambda,
        model.variant, weights, names=list(sys.names),
    )
    if check_sample is not None:
        other = model_matrices(model, check_sample, weights)
        mats.diagnostics["independent"] = {
            k: float(np.max(np.abs(getattr(mats, k) - getattr(other, k)))) for k in ("C", "f", "Omega", "D")
        }
    return mats


def equilibrium_constants(sys: PhaseSystem, eq_sample: EnsembleSample, weights,
                          variant=FIXED_BETA) -> EquilibriumConstants:
    """Near-equilibrium constants ``C0``, ``Jrev`` and ``D0``.

    ``Jrev`` is the cross moment of ``L A`` with the (centered) observables,
    antisymmetrized; its raw symmetric defect is returned in
    ``diagnostics["jrev_raw_asymmetry"]`` together with its standard error.
    """
    z = eq_sample.points
    w = eq_sample.weights
    A = sys.observable_values(z)
    h = sys.hamiltonian(z)
    LA = sys.liouville_values(z)
    U = score_values(A, h, w, variant)
    C0, C_se = fisher_from_scores(U, w, list(sys.names))
    Jraw, J_se = batch_means(_outer_rows(LA, U), w)
    Jrev = _antisym(Jraw)
    r = residuals(LA, U, w, C0)
    D0, D_se = closure_from_residuals(r, w, WeightSpec.coerce(weights).vector(sys.m))
    sym_part = _sym(Jraw)
    sym_se = _sym(J_se)
    with np.errstate(divide="ignore", invalid="ignore"):
        z_asym = np.where(sym_se > 0, np.abs(sym_part) / sym_se, 0.0)
    diag = {
        "jrev_raw_asymmetry": float(np.max(np.abs(sym_part))),
        "jrev_asymmetry_z": float(np.max(z_asym)),
        "N": int(eq_sample.N),
    }
    return EquilibriumConstants(C0=C0, Jrev=Jrev, D0=D0,
                                mc_stderr={"C0": C_se, "Jrev": _sym(J_se), "D0": D_se},
                                diagnostics=diag)
