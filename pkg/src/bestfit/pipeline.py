"""End-to-end runs: model, matrices, Riccati solve, closures, ensemble, validation.

Every stochastic step draws its seed from one ``numpy.random.SeedSequence``
rooted at the configured seed, so a run is fully determined by
``(config, seed)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from . import serialize
from .closure import (BVPConfig, integrate_adiabatic, integrate_linear, integrate_nonlinear_stationary,
                      thermodynamics)
from .config import RunConfig, config_dict
from .ensemble import propagate_ensemble, validate
from .errors import ConfigError, GridMismatchError, InvalidArgumentError
from .moments import EquilibriumConstants, equilibrium_constants, model_matrices
from .providers import GaussianProvider, ReweightingProvider
from .riccati import solve_are, solve_riccati_ode, time_scales
from .statmodel import SamplerConfig, StatModel, normalize_observables, sample
from .systems import build_system


CLOSURE_REGIMES = ("linear-nonstationary", "linear-stationary", "nonlinear-stationary", "adiabatic")


@dataclass
class RunContext:
    cfg: RunConfig
    sys: object
    eq_model: StatModel
    model0: StatModel
    seeds: dict
    eq_sample: object = None
    unit_eqc: EquilibriumConstants = None
    weight: object = None
    outputs: dict = field(default_factory=dict)


def derive_seeds(seed):
    """Independent integer seeds for the equilibrium, initial and matrix samples."""
    s = np.random.SeedSequence(int(seed)).generate_state(3)
    return {"equilibrium": int(s[0]), "initial": int(s[1]), "matrices": int(s[2])}


def build_context(cfg: RunConfig) -> RunContext:
    try:
        sys = build_system(cfg.system.name, cfg.system.params, cfg.observables)
    except InvalidArgumentError as exc:
        raise ConfigError(f"system: {exc}") from None
    if len(cfg.model.lambda0) != sys.m:
        raise ConfigError(f"model.lambda0: has {len(cfg.model.lambda0)} entries, {sys.m} observables selected")
    seeds = derive_seeds(cfg.sampling.seed)
    sampler = SamplerConfig(burn_in=cfg.sampling.burn_in, thinning=cfg.sampling.thinning,
                            force_mcmc=cfg.sampling.force_mcmc)
    m = cfg.model
    if m.variant == "fixed-beta":
        eq_model = StatModel.fixed_beta(sys, m.beta, sampler=sampler)
    else:
        eq_model = StatModel.fixed_energy(sys, energy=m.energy, beta_eq=m.beta, seed=seeds["equilibrium"],
                                          sampler=sampler)
    ctx = RunContext(cfg=cfg, sys=sys, eq_model=eq_model, model0=eq_model.with_lambda(m.lambda0), seeds=seeds)
    if cfg.run.normalize:
        eqs = equilibrium_sample(ctx)
        ctx.sys = normalize_observables(sys, eqs, exact_beta=m.beta if sys.is_gaussian else None)
        ctx.eq_model = StatModel(sys=ctx.sys, lam=np.zeros(sys.m), variant=eq_model.variant, beta=eq_model.beta,
                                 energy=eq_model.energy, sampler=sampler)
        ctx.model0 = ctx.eq_model.with_lambda(m.lambda0)
        ctx.eq_sample = None
    return ctx


def equilibrium_sample(ctx: RunContext):
    if ctx.eq_sample is None:
        ctx.eq_sample = sample(ctx.eq_model, ctx.cfg.sampling.N, ctx.seeds["equilibrium"], ctx.eq_model.sampler)
    return ctx.eq_sample


def unit_constants(ctx: RunContext) -> EquilibriumConstants:
    """Equilibrium constants at unit weight (``D`` scales with the weight squared)."""
    if ctx.unit_eqc is None:
        ctx.unit_eqc = equilibrium_constants(ctx.sys, equilibrium_sample(ctx), 1.0, ctx.eq_model.variant)
    return ctx.unit_eqc


def weighted_constants(eqc: EquilibriumConstants, weight) -> EquilibriumConstants:
    """Rescale unit-weight constants by a scalar or diagonal weight."""
    w = np.atleast_1d(np.asarray(weight, dtype=float))
    if w.size == 1:
        w = np.full(eqc.m, float(w[0]))
    if w.size != eqc.m:
        raise ConfigError(f"weights: {w.size} entries for {eqc.m} observables")
    W = np.outer(w, w)
    se = dict(eqc.mc_stderr)
    if "D0" in se:
        se["D0"] = se["D0"] * W
    return EquilibriumConstants(C0=eqc.C0, Jrev=eqc.Jrev, D0=eqc.D0 * W, mc_stderr=se,
                                diagnostics=dict(eqc.diagnostics, weight=w.tolist()))


def current_weight(ctx: RunContext):
    if ctx.weight is not None:
        return ctx.weight
    if ctx.cfg.weights == "fit":
        raise ConfigError("weights: fit is only available inside a run with an ensemble")
    return ctx.cfg.weights


def _provider(ctx: RunContext, weight):
    if ctx.sys.is_gaussian and ctx.eq_model.variant == "fixed-beta":
        return GaussianProvider(ctx.eq_model, weight)
    return ReweightingProvider(ctx.eq_model, equilibrium_sample(ctx), weight)


# ---------------------------------------------------------------------------
# matrices


def compute_matrices(ctx: RunContext):
    """Equilibrium constants at the configured weight and matrices at ``lambda0``."""
    weight = 1.0 if ctx.cfg.weights == "fit" else ctx.cfg.weights
    eqc = weighted_constants(unit_constants(ctx), weight)
    s0 = sample(ctx.model0, ctx.cfg.sampling.N, ctx.seeds["matrices"], ctx.model0.sampler)
    mats = model_matrices(ctx.model0, s0, weight)
    return eqc, mats, s0


def matrices_summary(eqc: EquilibriumConstants, mats=None) -> str:
    lines = ["equilibrium constants:"]
    fmt = lambda v: np.array2string(np.atleast_1d(v), precision=6, suppress_small=True)
    lines.append(f"  eig(C)      = {fmt(np.linalg.eigvalsh(eqc.C0))}")
    lines.append(f"  eig(D)      = {fmt(np.linalg.eigvalsh(eqc.D0))}")
    lines.append(f"  |Jrev|_F    = {np.linalg.norm(eqc.Jrev):.6g}")
    for key in ("C0", "Jrev", "D0"):
        if key in eqc.mc_stderr:
            lines.append(f"  max se({key}) = {np.max(eqc.mc_stderr[key]):.3g}")
    if eqc.m == 1:
        lines.append(f"  C = {eqc.C0[0, 0]:.6g} +/- {eqc.mc_stderr.get('C0', np.zeros((1, 1)))[0, 0]:.3g}, "
                     f"D = {eqc.D0[0, 0]:.6g} +/- {eqc.mc_stderr.get('D0', np.zeros((1, 1)))[0, 0]:.3g}")
    if mats is not None:
        lines.append("matrices at lambda0:")
        lines.append(f"  f           = {fmt(mats.f)}")
        lines.append(f"  eig(C)      = {fmt(np.linalg.eigvalsh(mats.C))}")
        lines.append(f"  eig(D)      = {fmt(np.linalg.eigvalsh(mats.D))}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# closures


def riccati_path(eqc: EquilibriumConstants, T, dt):
    # half-step spacing so that every RK4 stage of the closure lands on a node
    return solve_riccati_ode(eqc.C0, eqc.Jrev, eqc.D0, T, dt / 2)


def run_closure(ctx: RunContext, regime, weight=None, T=None):
    cfg = ctx.cfg.run
    T = cfg.T if T is None else T
    weight = current_weight(ctx) if weight is None else weight
    lam0 = np.asarray(ctx.cfg.model.lambda0, dtype=float)
    if regime == "adiabatic":
        return integrate_adiabatic(_provider(ctx, weight), lam0, T, cfg.dt, cfg.stride)
    if regime == "nonlinear-stationary":
        return integrate_nonlinear_stationary(_provider(ctx, weight), lam0, T, cfg.dt, BVPConfig(), cfg.stride)
    eqc = weighted_constants(unit_constants(ctx), weight)
    if regime == "linear-stationary":
        vh = solve_are(eqc.C0, eqc.Jrev, eqc.D0)
        traj = integrate_linear(eqc, vh, lam0, T, cfg.dt, cfg.stride)
        return thermodynamics(traj, eqc)
    if regime == "linear-nonstationary":
        vh = riccati_path(eqc, T, cfg.dt)
        return integrate_linear(eqc, vh, lam0, T, cfg.dt, cfg.stride)
    raise ConfigError(f"run.regimes: {regime!r} is not a closure regime")


def run_ensemble(ctx: RunContext, T=None):
    cfg = ctx.cfg
    T = cfg.run.T if T is None else T
    N = cfg.ensemble.N or cfg.sampling.N
    dt = cfg.ensemble.dt or ctx.sys.default_dt
    spacing = cfg.run.dt * cfg.run.stride
    n_closure = int(round(T / spacing))
    k = max(1, int(np.ceil(n_closure / cfg.ensemble.max_outputs)))
    while n_closure % k:
        k += 1
    out_spacing = k * spacing
    stride = int(round(out_spacing / dt))
    if stride < 1 or abs(stride * dt - out_spacing) > 1e-9 * out_spacing:
        raise ConfigError(f"ensemble.dt={dt} does not divide the output spacing {out_spacing}")
    s0 = sample(ctx.model0, N, ctx.seeds["initial"], ctx.model0.sampler)
    emp = propagate_ensemble(ctx.sys, s0, dt, T, stride=stride, threads=cfg.ensemble.threads)
    emp.metadata.update(seed=ctx.seeds["initial"], lambda0=list(cfg.model.lambda0))
    return emp


def fit_weight(ctx: RunContext, emp, regime="linear-nonstationary", w_max=10.0, T=None):
    """Scalar weight minimizing the summed squared z-scores against ``emp``."""
    T = emp.times[-1] if T is None else T
    window = emp.times <= T + 1e-12
    se = np.where(emp.a_stderr[window] > 0, emp.a_stderr[window], np.inf)

    def cost(w):
        traj = run_closure(ctx, regime, weight=w, T=ctx.cfg.run.T)
        idx = np.searchsorted(traj.times, emp.times[window] - 1e-9)
        return float(np.sum(((traj.a_path[idx] - emp.a[window]) / se) ** 2))

    res = minimize_scalar(cost, bounds=(0.0, w_max), method="bounded", options={"xatol": 1e-4})
    return float(res.x), float(res.fun)


def closure_tc(ctx: RunContext, weight):
    eqc = weighted_constants(unit_constants(ctx), weight)
    _, slow = time_scales(eqc.C0, eqc.Jrev, eqc.D0)
    return 1.0 / slow if slow > 0 else np.inf


def execute(cfg: RunConfig, out: Path = None, log_fn=print) -> RunContext:
    """Run every configured regime, write the outputs and, with an ensemble, a validation report."""
    ctx = build_context(cfg)
    out = Path(out or cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": config_dict(cfg), "seeds": ctx.seeds}
    names = list(ctx.sys.names)
    emp = None
    if "ensemble" in cfg.run.regimes:
        emp = run_ensemble(ctx)
        serialize.save_trajectory(out / "ensemble", emp, names, meta)
        ctx.outputs["ensemble"] = emp
        log_fn(f"ensemble: N={emp.N}, dropped={emp.dropped}, energy drift {emp.energy_drift:.3g}")
    if cfg.weights == "fit":
        regime = next((r for r in cfg.run.regimes if r in ("linear-nonstationary", "linear-stationary")),
                      "linear-nonstationary")
        win = cfg.validate_.window_tc
        T_fit = None
        if win is not None:
            T_fit = min(emp.times[-1], win * closure_tc(ctx, 1.0))
        ctx.weight, cost = fit_weight(ctx, emp, regime, cfg.validate_.fit_weight_max, T_fit)
        meta["fitted_weight"] = ctx.weight
        log_fn(f"fitted weight w = {ctx.weight:.6g} (cost {cost:.4g})")
    weight = current_weight(ctx)
    meta["weights"] = weight
    for regime in cfg.run.regimes:
        if regime == "ensemble":
            continue
        traj = run_closure(ctx, regime, weight)
        serialize.save_trajectory(out / regime, traj, names, meta)
        ctx.outputs[regime] = traj
        log_fn(f"{regime}: {traj.times.size} points to T={traj.times[-1]:g}")
    if emp is not None:
        closure = cfg.validate_.closure or next((r for r in CLOSURE_REGIMES if r in ctx.outputs), None)
        if closure is not None:
            ctx.outputs["report"] = make_report(ctx, ctx.outputs[closure], emp, weight)
            serialize.save_report(out / "validation.json", ctx.outputs["report"])
    return ctx


def make_report(ctx: RunContext, traj, emp, weight):
    vcfg = ctx.cfg.validate_
    t_c = None
    if traj.regime.startswith("linear"):
        t_c = closure_tc(ctx, weight)
    series = emp
    if vcfg.window_tc is not None and t_c is not None and np.isfinite(t_c):
        keep = emp.times <= vcfg.window_tc * t_c + 1e-12
        series = type(emp)(times=emp.times[keep], a=emp.a[keep], a_stderr=emp.a_stderr[keep], u=emp.u[keep],
                           u_stderr=emp.u_stderr[keep], energy_drift=emp.energy_drift, dropped=emp.dropped,
                           N=emp.N, names=emp.names, metadata=emp.metadata)
    try:
        rep = validate(traj, series, t_c=t_c if t_c is not None and np.isfinite(t_c) else None,
                       threshold=vcfg.threshold, plateau_frac=vcfg.plateau_frac)
    except GridMismatchError as exc:
        raise ConfigError(f"run/ensemble grids: {exc}") from None
    rep.metadata.update(weight=weight, N=emp.N, seed=emp.metadata.get("seed"))
    return rep
