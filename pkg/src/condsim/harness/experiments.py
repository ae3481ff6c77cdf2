"""End-to-end experiments: invariance diagnostics, the b phi^2 versus b phi
comparison, and the two moment counterexamples.

Each runner takes a RunConfig and returns a DiagnosticsReport.  Stages that
raise a package error are recorded in ``stage_status`` and the first such
error is re-raised with the partial report attached as ``exc.report``.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .._rng import derive, TAG_REPLICATE
from ..corrector import build_phi, build_psi, extrapolate_eps
from ..dual import dual_ensemble, clock_slope
from ..env import EnvSpec, build_env
from ..errors import CondsimError, ConfigError
from ..kernel import diffusive_radius, phi_eps_field, tail_horizon
from ..walk import ensemble_x, walk_endpoints
from .config import RunConfig
from .report import DiagnosticsReport, Table
from .stats import (Estimate, batch_means, cluster_mean_se, concordant, ks_gaussian, mean_se,
                    ratio, strictly_decreasing, strictly_increasing, variance_se)

STAGE_WALK = 1
STAGE_PHI = 2
STAGE_MART = 3
STAGE_DUAL = 4
STAGE_CONTROL = 5
STAGE_RBETA = 6
STAGE_ENV = 7

TAIL_TOL = 1e-8
QUANTILES = (0.5, 0.9, 0.99)


def stage_seed(master_seed: int, stage: int, *labels: int) -> int:
    return derive(master_seed, TAG_REPLICATE, stage, *labels)


class _Stages:
    """Runs named stages, recording failures instead of aborting the report."""

    def __init__(self, report: DiagnosticsReport):
        self.report = report
        self.errors = []

    def run(self, name: str, fn: Callable[[], None]) -> bool:
        try:
            fn()
        except CondsimError as exc:
            self.report.stage_status[name] = f"failed: {exc}"
            self.report.checks[f"stage_{name}"] = False
            self.errors.append(exc)
            return False
        self.report.stage_status[name] = "ok"
        return True

    def finish(self) -> DiagnosticsReport:
        if self.errors:
            exc = self.errors[0]
            exc.report = self.report
            raise exc
        return self.report


def _new_report(cfg: RunConfig, kind: str) -> DiagnosticsReport:
    return DiagnosticsReport(kind=kind, config_hash=cfg.config_hash(),
                             seeds={"master_seed": int(cfg.master_seed)})


# --- phi at sites ----------------------------------------------------------

def phi_sites(spec: EnvSpec, env_seed: int, n_sites: int, epsilons=(0.1, 0.01),
              coarse: float = 0.1, tail_tol: float = TAIL_TOL):
    """Rates b_0(x) and phi(0, x) on n_sites consecutive edges around the origin.

    Closed forms are used where they exist (phi = 1 on spatially homogeneous
    fields, c_h / a on static ones); otherwise phi_eps at each epsilon is
    extrapolated to zero.
    """
    lo, hi = -(n_sites // 2), n_sites - n_sites // 2 - 1
    if spec.is_spatially_homogeneous or not spec.is_dynamic:
        env = build_env(spec, lo - 1, hi + 2, -1.0, 1.0, env_seed)
        b = np.array([env.rate_at(x, 0.0) for x in range(lo, hi + 1)])
        if spec.is_spatially_homogeneous:
            return b, np.ones_like(b)
        return b, (1.0 / spec.mean_inverse_rate()) / b
    eps = [float(e) for e in epsilons]
    horizon = tail_horizon(min(eps), tail_tol)
    margin = diffusive_radius(spec, horizon)
    env = build_env(spec, lo - margin - 2, hi + margin + 2, -1.0, horizon + 1.0, env_seed)
    raw = []
    for e in eps:
        m = diffusive_radius(spec, tail_horizon(e, tail_tol))
        v, _, _ = phi_eps_field(env, e, [0.0], lo, hi, tail_tol=tail_tol, margin=m, coarse=coarse)
        raw.append(v[0])
    phi, _ = extrapolate_eps(eps, raw)
    b = np.array([env.rate_at(x, 0.0) for x in range(lo, hi + 1)])
    return b, phi


def _site_estimate(per_env: list) -> Estimate:
    """Mean over sites; SE across environments, or batch means for a single one."""
    if len(per_env) > 1:
        m = mean_se([a.mean() for a in per_env])
        return Estimate(m.value, m.se, int(sum(len(a) for a in per_env)))
    return batch_means(per_env[0])


def _collect_phi(cfg: RunConfig):
    spec = cfg.env
    bs, phis = [], []
    for e in range(int(cfg.param("phi_envs"))):
        b, phi = phi_sites(spec, stage_seed(cfg.master_seed, STAGE_PHI, e), int(cfg.param("phi_sites")),
                           cfg.param("epsilons"), float(cfg.param("coarse")))
        bs.append(b)
        phis.append(phi)
    return bs, phis


def _dual_slope(cfg: RunConfig, workers: int) -> Estimate:
    ens = dual_ensemble(cfg.env, cfg.param("dual_mode"), int(cfg.param("dual_paths")),
                        float(cfg.param("dual_horizon")), stage_seed(cfg.master_seed, STAGE_DUAL),
                        workers=workers)
    cs = clock_slope(ens)
    return Estimate(cs.mean, cs.se, cs.n)


# --- martingale stage ------------------------------------------------------

def _rates_at(spec: EnvSpec, env_seed: int, x_lo: int, x_hi: int, t_hi: float, ks, xs, times):
    """b_t(x) for the (time index, edge) pairs requested."""
    small = build_env(spec, x_lo, x_hi + 1, 0.0, t_hi, env_seed)
    tracks = small.tracks
    out = np.empty(len(ks))
    from ..env import Edge
    for x in np.unique(xs):
        sel = xs == x
        tr = tracks[Edge(int(x))]
        idx = np.searchsorted(tr.breakpoints, times[ks[sel]], side="right") - 1
        out[sel] = tr.values[np.clip(idx, 0, len(tr.values) - 1)]
    return out


def psi_on_grid(spec: EnvSpec, env_seed: int, times, half_width: int, epsilons=(0.1, 0.01),
                coarse: float = 0.1, exact_transport: bool = True):
    """(env, phi, psi) on times x [-half_width, half_width] in the environment with this seed.

    Dynamic fields get phi_eps anchors at the top time (coarse rates except
    for the stretch just above the grid) and an exact downward transport.
    With ``exact_transport`` False both the anchor and the transport use
    coarse rates throughout.
    """
    times = np.asarray(times, dtype=np.float64)
    horizon = float(times.max() - min(times.min(), 0.0))
    top = float(times.max())
    lo, hi = -int(half_width), int(half_width)
    if spec.is_dynamic and not spec.is_spatially_homogeneous:
        m = diffusive_radius(spec, horizon)
        e_min = min(float(e) for e in epsilons)
        pad = diffusive_radius(spec, tail_horizon(e_min, TAIL_TOL))
        t_hi = top + tail_horizon(e_min, TAIL_TOL)
        env = build_env(spec, lo - m - pad - 4, hi + m + pad + 4, min(times.min(), 0.0) - 1.0,
                        t_hi + 1.0, env_seed)
        phi = build_phi(env, "kernel-extrapolated", [top], lo - m, hi + m, epsilons, TAIL_TOL,
                        coarse=coarse, exact_span=float(m) if exact_transport else 0.0)
        psi = build_psi(env, phi, times, lo, hi, margin=m, coarse=0.0 if exact_transport else coarse)
    else:
        method = "homogeneous-unit" if spec.is_spatially_homogeneous else "static-closed-form"
        env = build_env(spec, lo - 2, hi + 2, min(times.min(), 0.0) - 1.0, top + 1.0, env_seed)
        phi = build_phi(env, method, [top], lo, hi)
        psi = build_psi(env, phi, times, lo, hi)
    return env, phi, psi


def martingale_env(spec: EnvSpec, env_seed: int, path_seed: int, n_paths: int, horizon: float,
                   dt: float, epsilons=(0.1, 0.01), coarse: float = 0.1, workers: int = 1) -> dict:
    """M_t = psi(t, X_t) along quenched paths in one environment.

    Returns per-path arrays: final increment, mean lag-1 product, mean squared
    increment, Riemann sum of Theta along the path divided by the horizon, and
    M_T^2 / T; plus the number of paths that left the psi grid.
    """
    K = int(round(horizon / dt))
    if K < 2 or not math.isclose(K * dt, horizon, rel_tol=1e-9):
        raise ConfigError("martingale horizon must be a multiple (>= 2) of its time step")
    times = dt * np.arange(K + 1)
    R = diffusive_radius(spec, horizon)
    _, _, psi = psi_on_grid(spec, env_seed, times, R, epsilons, coarse)
    ens = ensemble_x(spec, "quenched", n_paths, times[1:], path_seed, workers=workers, env_seed=env_seed)
    pos = np.concatenate((np.zeros((n_paths, 1), dtype=np.int64), ens.positions), axis=1)
    inside = np.all((pos > psi.x_lo) & (pos < psi.x_hi), axis=1) & ~ens.truncated
    pos = pos[inside]
    j = pos - psi.x_lo
    kk = np.broadcast_to(np.arange(K + 1), pos.shape)
    M = psi.psi[kk, j]
    dM = np.diff(M, axis=1)
    k_flat = kk[:, :-1].ravel()
    x_flat = pos[:, :-1].ravel()
    b_here = _rates_at(spec, env_seed, psi.x_lo, psi.x_hi, horizon, k_flat, x_flat, times)
    b_left = _rates_at(spec, env_seed, psi.x_lo, psi.x_hi, horizon, k_flat, x_flat - 1, times)
    rows = psi.phi_rows
    jj = j[:, :-1].ravel()
    theta = b_here * rows[k_flat, jj] ** 2 + b_left * rows[k_flat, jj - 1] ** 2
    theta = theta.reshape(len(pos), K)
    return {"increment": M[:, -1] - M[:, 0], "lag1": np.mean(dM[:, :-1] * dM[:, 1:], axis=1),
            "sq": np.mean(dM ** 2, axis=1), "qv": theta.sum(axis=1) * dt / horizon,
            "m2": M[:, -1] ** 2 / horizon, "left_grid": int(n_paths - inside.sum()),
            "pde_residual": psi.pde_residual()}


def martingale_summary(spec: EnvSpec, master_seed: int, n_envs: int, n_paths: int, horizon: float,
                       dt: float, epsilons=(0.1, 0.01), coarse: float = 0.1, workers: int = 1) -> dict:
    """Pooled martingale statistics of psi(t, X_t) over independent environments.

    Standard errors treat each environment as one cluster.  The lag-1
    autocorrelation is mean(dM_k dM_{k+1}) / mean(dM_k^2).
    """
    out = {k: [] for k in ("increment", "lag1", "sq", "qv", "m2")}
    left, pde = 0, 0.0
    for e in range(n_envs):
        r = martingale_env(spec, stage_seed(master_seed, STAGE_MART, e),
                           stage_seed(master_seed, STAGE_MART, e, 1), n_paths, horizon, dt,
                           epsilons, coarse, workers)
        for k in out:
            out[k].append(r[k])
        left += r["left_grid"]
        pde = max(pde, r["pde_residual"])
    lag = cluster_mean_se(out["lag1"])
    sq = cluster_mean_se(out["sq"]).value
    lag_corr = Estimate(lag.value / sq, lag.se / sq, lag.n) if sq > 0 else lag
    return {"mean_increment": cluster_mean_se(out["increment"]), "lag1_autocorrelation": lag_corr,
            "E_bracket_over_T": cluster_mean_se(out["qv"]), "E_M2_over_T": cluster_mean_se(out["m2"]),
            "horizon": float(horizon), "dt": float(dt), "n_envs": int(n_envs),
            "paths_left_grid": left, "psi_pde_residual": pde}


# --- invariance ------------------------------------------------------------

def run_invariance_check(cfg: RunConfig, workers: int = 1) -> DiagnosticsReport:
    """sigma^2 three ways, KS against the Gaussian limit, martingale checks and the dual clock."""
    spec = cfg.env
    spec.require_compliant("the invariance check")
    rep = _new_report(cfg, "invariance")
    st = _Stages(rep)
    chk = cfg.checks
    z_conc = float(chk.get("concordance_z", 2.0))
    z_mart = float(chk.get("martingale_z", 3.0))
    rtol = float(chk.get("sigma2_rtol", 0.05))
    ref = chk.get("sigma2_reference")
    ladder = [float(n) for n in cfg.param("n_ladder")]
    ks_time = float(cfg.param("ks_time"))
    horizon = float(cfg.param("walk_horizon"))
    walk = {}

    def walk_stage():
        times = sorted(set([n * ks_time for n in ladder] + [horizon]))
        seed = stage_seed(cfg.master_seed, STAGE_WALK)
        rep.seeds["walk"] = seed
        ens = ensemble_x(spec, cfg.param("walk_mode"), int(cfg.param("walk_paths")), times, seed,
                         workers=workers)
        walk["ens"], walk["times"] = ens, np.asarray(times)
        col = int(np.searchsorted(walk["times"], horizon))
        rep.sigma2_walk["empirical_variance"] = ratio(variance_se(ens.positions[:, col]), horizon)
        rep.checks["walk_not_truncated"] = not bool(ens.truncated.any())
        tab = Table(["n", "quantile", "value"])
        for n in ladder:
            c = int(np.searchsorted(walk["times"], n * ks_time))
            a = np.abs(ens.positions[:, c]) / math.sqrt(n)
            qs = {str(q): float(np.quantile(a, q)) for q in QUANTILES}
            rep.tightness_quantiles.append({"n": n, "t": ks_time, "quantiles": qs, "n_paths": len(a)})
            for q in QUANTILES:
                tab.rows.append([n, q, qs[str(q)]])
        rep.tables["tightness"] = tab

    def phi_stage():
        bs, phis = _collect_phi(cfg)
        rep.sigma2_walk["two_E_b_phi2"] = _site_estimate([2.0 * b * p ** 2 for b, p in zip(bs, phis)])
        th = [b[1:] * p[1:] ** 2 + b[:-1] * p[:-1] ** 2 for b, p in zip(bs, phis)]
        rep.theta_mean = _site_estimate(th)
        rep.sections["phi_normalization"] = _site_estimate(phis)

    def mart_stage():
        ms = martingale_summary(spec, cfg.master_seed, int(cfg.param("mart_envs")),
                                int(cfg.param("mart_paths")), float(cfg.param("mart_horizon")),
                                float(cfg.param("mart_dt")), cfg.param("epsilons"),
                                float(cfg.param("coarse")), workers)
        rep.sigma2_walk["quadratic_variation"] = ms["E_bracket_over_T"]
        rep.martingale_stats = ms
        inc, lag_corr = ms["mean_increment"], ms["lag1_autocorrelation"]
        rep.checks["martingale_mean_increment"] = abs(inc.value) <= z_mart * inc.se
        rep.checks["martingale_lag1"] = abs(lag_corr.value) <= z_mart * lag_corr.se

    def dual_stage():
        seed = stage_seed(cfg.master_seed, STAGE_DUAL)
        rep.seeds["dual"] = seed
        rep.sigma2_dual = _dual_slope(cfg, workers)

    st.run("walk", walk_stage)
    st.run("phi", phi_stage)
    st.run("martingale", mart_stage)
    st.run("dual", dual_stage)

    # reference law for the KS table
    if "two_E_b_phi2" in rep.sigma2_walk:
        s2, src = rep.sigma2_walk["two_E_b_phi2"].value, "two_E_b_phi2"
    elif "empirical_variance" in rep.sigma2_walk:
        s2, src = rep.sigma2_walk["empirical_variance"].value, "empirical_variance"
    else:
        s2, src = None, None
    if s2 is not None and "ens" in walk:
        rep.W_ref = {"family": "gaussian", "mean": 0.0, "variance": s2 * ks_time,
                     "sigma2": s2, "sigma2_source": src, "t": ks_time}
        ks_max = chk.get("ks_max")
        if ks_max is not None and len(ks_max) != len(ladder):
            raise ConfigError("checks.ks_max must have one entry per n_ladder value")
        tab = Table(["n", "t", "ks_distance", "p_value", "n_paths"])
        for i, n in enumerate(ladder):
            c = int(np.searchsorted(walk["times"], n * ks_time))
            d, p = ks_gaussian(walk["ens"].positions[:, c] / math.sqrt(n), s2 * ks_time)
            rep.ks_table.append({"n": n, "t": ks_time, "distance": d, "p_value": p,
                                 "n_paths": walk["ens"].n_paths})
            tab.rows.append([n, ks_time, d, p, walk["ens"].n_paths])
            if ks_max is not None:
                rep.checks[f"ks_n{n:g}"] = d <= float(ks_max[i])
        rep.tables["ks"] = tab

    ests = {k: v for k, v in rep.sigma2_walk.items()}
    names = sorted(ests)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            rep.checks[f"concordance_{a}_vs_{b}"] = concordant(ests[a], ests[b], z_conc)
    if ref is not None:
        for k, v in ests.items():
            rep.checks[f"sigma2_{k}"] = v.within(float(ref), rtol)
        if rep.sigma2_dual is not None:
            rep.checks["sigma2_dual"] = rep.sigma2_dual.within(float(ref), float(chk.get("dual_rtol", rtol)))
    tab = Table(["estimator", "value", "se", "n"])
    for k in names:
        tab.rows.append([k, ests[k].value, ests[k].se, ests[k].n])
    if rep.sigma2_dual is not None:
        tab.rows.append(["dual_clock_slope", rep.sigma2_dual.value, rep.sigma2_dual.se, rep.sigma2_dual.n])
    if rep.theta_mean is not None:
        tab.rows.append(["theta_mean", rep.theta_mean.value, rep.theta_mean.se, rep.theta_mean.n])
    rep.tables["sigma2"] = tab
    if rep.martingale_stats:
        tab = Table(["statistic", "value", "se", "n"])
        for k in ("mean_increment", "lag1_autocorrelation", "E_bracket_over_T", "E_M2_over_T"):
            e = rep.martingale_stats[k]
            tab.rows.append([k, e.value, e.se, e.n])
        rep.tables["martingale"] = tab
    return st.finish()


# --- b phi^2 versus b phi ----------------------------------------------------

def run_remark84(cfg: RunConfig, workers: int = 1) -> DiagnosticsReport:
    """Compare 2E[b phi^2] with 2E[b phi] and the dual clock slope; flags agreement only."""
    spec = cfg.env
    spec.require_compliant("the b phi^2 / b phi comparison")
    rep = _new_report(cfg, "remark84")
    st = _Stages(rep)
    z = float(cfg.checks.get("remark84_gap_z", 2.0))

    def phi_stage():
        bs, phis = _collect_phi(cfg)
        s_sq = _site_estimate([2.0 * b * p ** 2 for b, p in zip(bs, phis)])
        s_lin = _site_estimate([2.0 * b * p for b, p in zip(bs, phis)])
        gap = _site_estimate([2.0 * b * p * (p - 1.0) for b, p in zip(bs, phis)])
        rep.sigma2_walk = {"two_E_b_phi2": s_sq, "two_E_b_phi": s_lin}
        agree = abs(gap.value) <= z * gap.se if gap.se > 0 else gap.value == 0.0
        norm = ratio(gap, s_sq.value) if s_sq.value else gap
        rep.sections["remark84"] = {
            "gap": gap, "normalized_gap": norm,
            "ci95": [gap.value - 1.96 * gap.se, gap.value + 1.96 * gap.se],
            "z": z, "agreement": bool(agree), "phi_normalization": _site_estimate(phis)}
        if "remark84_gap_z" in cfg.checks:
            rep.checks["remark84_gap"] = bool(agree)

    def dual_stage():
        rep.seeds["dual"] = stage_seed(cfg.master_seed, STAGE_DUAL)
        rep.sigma2_dual = _dual_slope(cfg, workers)

    st.run("phi", phi_stage)
    st.run("dual", dual_stage)
    tab = Table(["estimator", "value", "se", "n"])
    for k in sorted(rep.sigma2_walk):
        e = rep.sigma2_walk[k]
        tab.rows.append([k, e.value, e.se, e.n])
    if "remark84" in rep.sections:
        g = rep.sections["remark84"]["gap"]
        tab.rows.append(["gap", g.value, g.se, g.n])
    if rep.sigma2_dual is not None:
        tab.rows.append(["dual_clock_slope", rep.sigma2_dual.value, rep.sigma2_dual.se, rep.sigma2_dual.n])
    rep.tables["remark84"] = tab
    ref = cfg.checks.get("sigma2_reference")
    if ref is not None and rep.sigma2_dual is not None:
        rep.checks["sigma2_dual"] = rep.sigma2_dual.within(float(ref), float(cfg.checks.get("sigma2_rtol", 0.05)))
    return st.finish()


# --- lower counterexample ------------------------------------------------------

def escape_probabilities(spec: EnvSpec, t_ladder, replicates: int, paths: int, delta: float,
                         master_seed: int, stage: int, workers: int = 1) -> np.ndarray:
    """Annealed P(|X_t| >= delta sqrt(t)), one row per replicate, one column per t."""
    out = np.empty((replicates, len(t_ladder)))
    ts = np.asarray(t_ladder, dtype=np.float64)
    for r in range(replicates):
        ens = ensemble_x(spec, "annealed", paths, ts, stage_seed(master_seed, stage, r), workers=workers)
        out[r] = np.mean(np.abs(ens.positions) >= delta * np.sqrt(ts)[None, :], axis=0)
    return out


def r_beta(spec: EnvSpec, t: float, beta: float, n_paths: int, seed: int, workers: int = 1) -> Estimate:
    """Laplace-averaged box occupation (1/sqrt t) E sum (2m+1-|x|) int e^{-beta u} P(X_{tu} = x) du.

    With U ~ Exp(beta) this is E[(2m+1 - |X_{tU}|)^+] / (beta sqrt t), m = floor(sqrt t).
    """
    rng = np.random.default_rng(derive(seed, 0))
    ends = t * rng.exponential(1.0 / beta, size=n_paths)
    pos, trunc = walk_endpoints(spec, "annealed", ends, seed, workers=workers)
    if trunc.any():
        raise ConfigError("walk step cap reached while estimating the return functional")
    m = math.floor(math.sqrt(t))
    vals = np.maximum(2 * m + 1 - np.abs(pos), 0) / (beta * math.sqrt(t))
    return mean_se(vals)


def run_counterexample_lower(cfg: RunConfig, workers: int = 1) -> DiagnosticsReport:
    """Escape probabilities and R_beta for a static law with infinite inverse moment."""
    spec = cfg.env
    rep = _new_report(cfg, "counterexample_lower")
    st = _Stages(rep)
    ladder = [float(t) for t in cfg.param("t_ladder")]
    delta = float(cfg.param("delta"))
    beta = float(cfg.param("beta"))
    R, paths = int(cfg.param("replicates")), int(cfg.param("paths"))
    chk = cfg.checks

    def main_stage():
        p = escape_probabilities(spec, ladder, R, paths, delta, cfg.master_seed, STAGE_WALK, workers)
        med = np.median(p, axis=0)
        tab = Table(["replicate", "t", "probability"])
        for r in range(R):
            for j, t in enumerate(ladder):
                tab.rows.append([r, t, p[r, j]])
        rep.tables["escape_probability"] = tab
        rep.sections["escape"] = {"t": ladder, "median": med.tolist(), "delta": delta,
                                  "replicates": R, "paths": paths,
                                  "strictly_decreasing": strictly_decreasing(med)}
        rep.checks["escape_median_strictly_decreasing"] = strictly_decreasing(med)

    def rbeta_stage():
        tab = Table(["t", "R_beta", "se", "n", "upper_bound"])
        for i, t in enumerate([float(x) for x in cfg.param("r_beta_t")]):
            est = r_beta(spec, t, beta, int(cfg.param("r_beta_paths")),
                         stage_seed(cfg.master_seed, STAGE_RBETA, i), workers)
            bound = (2 * math.sqrt(t) + 1) / (math.sqrt(t) * beta)
            rep.r_beta_curve.append({"t": t, "beta": beta, "estimate": est, "upper_bound": bound})
            tab.rows.append([t, est.value, est.se, est.n, bound])
        rep.tables["r_beta"] = tab
        last = rep.r_beta_curve[-1]["estimate"]
        rep.checks["r_beta_upper_bound"] = all(
            c["estimate"].value <= c["upper_bound"] + 3 * c["estimate"].se for c in rep.r_beta_curve)
        rtol = float(chk.get("r_beta_rtol", 0.10))
        rep.checks["r_beta_limit"] = abs(last.value - 2.0 / beta) <= rtol * 2.0 / beta

    def control_stage():
        ctrl = EnvSpec.from_dict(cfg.param("control"))
        p = escape_probabilities(ctrl, ladder, R, paths, delta, cfg.master_seed, STAGE_CONTROL, workers)
        med = np.median(p, axis=0)
        tab = Table(["replicate", "t", "probability"])
        for r in range(R):
            for j, t in enumerate(ladder):
                tab.rows.append([r, t, p[r, j]])
        rep.tables["control_escape_probability"] = tab
        stable = bool(med[-1] > 0 and abs(med[-1] - med[-2]) <= 0.2 * med[-2]) if len(med) > 1 else bool(med[-1] > 0)
        rep.sections["control"] = {"spec": ctrl.to_dict(), "median": med.tolist(), "stable": stable}
        rep.checks["control_stable"] = stable

    st.run("escape", main_stage)
    st.run("r_beta", rbeta_stage)
    st.run("control", control_stage)
    return st.finish()


# --- upper counterexample --------------------------------------------------------

def clock_samples(spec: EnvSpec, env_seed: int, times) -> np.ndarray:
    """Ã(t) = 2 int_0^t eta_s ds on a spatially homogeneous field, at each t."""
    if not spec.is_spatially_homogeneous:
        raise ConfigError("the time-change sampler needs a spatially homogeneous field")
    ts = np.asarray(times, dtype=np.float64)
    env = build_env(spec, -1, 1, -1.0, float(ts.max()) + 1.0, env_seed)
    grid = np.concatenate(([0.0], ts))
    parts = [env.integrated_rate(0, float(a), float(b)) for a, b in zip(grid[:-1], grid[1:])]
    return 2.0 * np.cumsum(parts)


def sample_positions(clock: float, n_paths: int, rng: np.random.Generator) -> np.ndarray:
    """X_t = Z_{N(Ã(t))}: Poisson jump count, then a symmetric +-1 sum."""
    m = rng.poisson(clock, size=n_paths)
    return 2 * rng.binomial(m, 0.5) - m


def tightness_growth(spec: EnvSpec, n_ladder, t: float, envs: int, paths: int, q: float,
                     master_seed: int, stage: int):
    """Per environment: q-quantile of |X_{nt}|/sqrt(n) along the ladder, and Ã(nt)/(nt)."""
    ns = np.asarray(n_ladder, dtype=np.float64)
    quant = np.empty((envs, len(ns)))
    slope = np.empty((envs, len(ns)))
    for e in range(envs):
        clock = clock_samples(spec, stage_seed(master_seed, stage, e), ns * t)
        rng = np.random.default_rng(stage_seed(master_seed, stage, e, 1))
        for j, n in enumerate(ns):
            x = sample_positions(clock[j], paths, rng)
            quant[e, j] = np.quantile(np.abs(x) / math.sqrt(n), q)
        slope[e] = clock / (ns * t)
    return quant, slope


def run_counterexample_upper(cfg: RunConfig, workers: int = 1) -> DiagnosticsReport:
    """Quantile growth of |X_{nt}|/sqrt(n) when the mean rate is infinite."""
    spec = cfg.env
    rep = _new_report(cfg, "counterexample_upper")
    st = _Stages(rep)
    ns = [float(n) for n in cfg.param("n_ladder")]
    t, q = float(cfg.param("t")), float(cfg.param("quantile"))
    envs, paths = int(cfg.param("envs")), int(cfg.param("paths"))
    chk = cfg.checks

    def section(s: EnvSpec, stage: int, prefix: str):
        quant, slope = tightness_growth(s, ns, t, envs, paths, q, cfg.master_seed, stage)
        growth = quant[:, -1] / quant[:, 0]
        tq = Table(["env", "n", "quantile"])
        tc = Table(["env", "t", "clock_over_t"])
        for e in range(envs):
            for j, n in enumerate(ns):
                tq.rows.append([e, n, quant[e, j]])
                tc.rows.append([e, n * t, slope[e, j]])
        rep.tables[f"{prefix}quantiles"] = tq
        rep.tables[f"{prefix}clock"] = tc
        med_slope = np.median(slope, axis=0)
        sec = {"spec": s.to_dict(), "quantile_level": q, "median_quantiles": np.median(quant, axis=0).tolist(),
               "median_growth": float(np.median(growth)), "growth": growth.tolist(),
               "median_clock_over_t": med_slope.tolist(), "envs": envs, "paths": paths}
        return sec, med_slope

    def main_stage():
        sec, med_slope = section(spec, STAGE_WALK, "")
        rep.sections["upper"] = sec
        rep.tightness_quantiles = [{"n": n, "t": t, "median_quantile": v}
                                   for n, v in zip(ns, sec["median_quantiles"])]
        rep.checks["quantile_growth"] = sec["median_growth"] >= float(chk.get("growth_min", 3.0))
        rep.checks["clock_over_t_strictly_increasing"] = strictly_increasing(med_slope)

    def control_stage():
        ctrl = EnvSpec.from_dict(cfg.param("control"))
        sec, _ = section(ctrl, STAGE_CONTROL, "control_")
        rep.sections["control"] = sec
        rep.checks["control_growth"] = sec["median_growth"] < float(chk.get("control_growth_max", 1.3))

    st.run("upper", main_stage)
    st.run("control", control_stage)
    return st.finish()


RUNNERS = {
    "invariance": run_invariance_check,
    "remark84": run_remark84,
    "counterexample_lower": run_counterexample_lower,
    "counterexample_upper": run_counterexample_upper,
}


def calibrate_ks(n_ladder, t: float, paths: int, runs: int = 20, master_seed: int = 0,
                 workers: int = 1) -> list:
    """Null KS distances on Constant(1) (exact sigma^2 = 2): for each n, the
    largest distance over ``runs`` independent ensembles of ``paths`` walks.

    These maxima are the frozen KS thresholds of the shipped configurations.
    """
    spec = EnvSpec.constant(1.0)
    ns = [float(n) for n in n_ladder]
    worst = np.zeros(len(ns))
    for r in range(runs):
        ens = ensemble_x(spec, "annealed", paths, [n * t for n in ns],
                         stage_seed(master_seed, STAGE_WALK, r), workers=workers)
        for j, n in enumerate(ns):
            d, _ = ks_gaussian(ens.positions[:, j] / math.sqrt(n), 2.0 * t)
            worst[j] = max(worst[j], d)
    return worst.tolist()
