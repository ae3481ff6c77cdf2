"""The dual walk Y: jump rate 2 b(y) at vertex y, run backward in environment time.

Y is built as a time change of a discrete simple random walk Z: with N a
rate-one Poisson process (arrivals tau_k), the change W solves

    int_{W(tau_k)}^{W(tau_{k+1})} 2 b_{-s}(Z_k) ds = tau_{k+1} - tau_k,

A is its inverse, and Y_s = Z_{N(A(s))}.  On piecewise-constant tracks every
step is an exact inversion of an integrated rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy import stats

from . import _envcore as core
from ._rng import derive, exponential, uniform, TAG_DUAL, TAG_ENV, TAG_ENV_PER_PATH
from .env import EnvSpec, EnvironmentWindow
from .errors import ConfigError, WindowExhausted
from .walk import run_chunked, env_keys, FAR


@njit(cache=True, nogil=True)
def _dual_kernel(envp, z0, t0, horizon, key, mirror, clock_times, clock_out, pos_out,
                 record, rec_steps, rec_tau, rec_w, e_lo, e_hi):
    """Returns (status, final vertex, number of Z-steps, A(horizon))."""
    buf_t = np.empty(core.BUF)
    buf_u = np.empty(core.BUF)
    nc = clock_times.shape[0]
    z = z0
    w = 0.0
    tau = 0.0
    k = 0
    ci = 0
    while True:
        if z < e_lo or z > e_hi:
            return 2, z, k, tau
        gap = exponential(key, 2 * k)
        r = core.ring_backward(envp, z, t0 - w, 0.5 * gap, t0 - horizon, buf_t, buf_u)
        w_next = t0 - r if r > -np.inf else np.inf
        while ci < nc and clock_times[ci] < w_next:
            clock_out[ci] = tau + 2.0 * core.integrate_core(envp, z, t0 - clock_times[ci], t0 - w,
                                                            buf_t, buf_u)
            pos_out[ci] = z
            ci += 1
        if w_next > horizon:
            a_h = tau + 2.0 * core.integrate_core(envp, z, t0 - horizon, t0 - w, buf_t, buf_u)
            return 0, z, k, a_h
        if record and k >= rec_steps.shape[0]:
            return 3, z, k, tau
        step = -1 if uniform(key, 2 * k + 1) < 0.5 else 1
        if mirror:
            step = -step
        tau += gap
        w = w_next
        z += step
        if record:
            rec_steps[k] = step
            rec_tau[k] = tau
            rec_w[k] = w
        k += 1


@njit(cache=True, nogil=True)
def _dual_batch(envp, static_keys, cell_keys, path_keys, starts, mirror, t0, horizon,
                clock_times, clock_out, pos_out, final, n_steps, a_h):
    e0 = np.empty(0, dtype=np.int8)
    e1 = np.empty(0)
    for i in range(path_keys.shape[0]):
        ep = (envp[0], envp[1], envp[2], static_keys[i], cell_keys[i], envp[5], envp[6],
              envp[7], envp[8], envp[9], envp[10])
        st, z, k, a = _dual_kernel(ep, starts[i], t0, horizon, path_keys[i], mirror[i],
                                   clock_times, clock_out[i], pos_out[i], False, e0, e1, e1,
                                   -FAR, FAR)
        final[i] = z
        n_steps[i] = k
        a_h[i] = a


@njit(cache=True, nogil=True)
def _dual_thinning(envp, z0, t0, horizon, key, lam):
    """Event-driven reference simulator: candidate events at rate lam, accepted
    with probability 2 b / lam."""
    buf_t = np.empty(core.BUF)
    buf_u = np.empty(core.BUF)
    z = z0
    s = 0.0
    c = 0
    while True:
        s += exponential(key, c) / lam
        if s > horizon:
            return z
        b = core.rate_at_core(envp, z, t0 - s, buf_t, buf_u)
        if uniform(key, c + 1) * lam < 2.0 * b:
            z += -1 if uniform(key, c + 2) < 0.5 else 1
        c += 3


@dataclass
class DualPathRecord:
    start_vertex: int
    srw_steps: np.ndarray
    poisson_arrivals: np.ndarray
    w_values: np.ndarray
    horizon: float
    clock_samples: np.ndarray
    seed: int

    @property
    def z_positions(self) -> np.ndarray:
        return self.start_vertex + np.concatenate(([0], np.cumsum(self.srw_steps)))

    def position_at(self, s: float) -> int:
        if not 0.0 <= s <= self.horizon:
            raise ConfigError(f"elapsed time {s} outside [0, {self.horizon}]")
        n = int(np.searchsorted(self.w_values, s, side="right"))
        return int(self.z_positions[n])


def _clock_grid(horizon: float, clock_times) -> np.ndarray:
    if clock_times is None:
        clock_times = np.linspace(0.0, horizon, 65) if horizon > 0 else np.zeros(1)
    ct = np.asarray(clock_times, dtype=np.float64)
    if np.any(ct < 0) or np.any(ct > horizon) or np.any(np.diff(ct) < 0):
        raise ConfigError("clock sample times must lie in [0, horizon] in order")
    return ct


def simulate_y(env: EnvironmentWindow, x0: int, horizon: float, seed: int,
               clock_times: Optional[Sequence[float]] = None, extend: bool = True) -> DualPathRecord:
    """Dual walk from vertex x0 at view time 0, elapsed time up to ``horizon``."""
    if horizon < 0:
        raise ConfigError("negative horizon")
    if env.t_max < 0 or env.t_min > -horizon:
        raise ConfigError("the window must cover times [-horizon, 0]")
    s_off, y_off = env.shift_offset
    ct = _clock_grid(horizon, clock_times)
    cap = 256
    key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    win = env
    while True:
        steps = np.empty(cap, dtype=np.int8)
        tau = np.empty(cap)
        wv = np.empty(cap)
        c_out = np.zeros(len(ct))
        p_out = np.zeros(len(ct), dtype=np.int64)
        st, z, k, a_h = _dual_kernel(win.core, x0 + y_off, s_off, float(horizon), key, False, ct,
                                     c_out, p_out, True, steps, tau, wv,
                                     win.x_min + y_off, win.x_max - 1 + y_off)
        if st == 3:
            cap *= 4
        elif st == 2:
            if not extend:
                raise WindowExhausted(f"dual walk left [{win.x_min}, {win.x_max}]")
            w = win.x_max - win.x_min
            win = win.extended(x_min=win.x_min - w, x_max=win.x_max + w)
        else:
            break
    return DualPathRecord(int(x0), steps[:k].copy(), tau[:k].copy(), wv[:k].copy(), float(horizon),
                          np.column_stack((ct, c_out)), int(seed))


def simulate_y_reference(env: EnvironmentWindow, x0: int, horizon: float, seed: int) -> int:
    """Final position of an event-driven (thinning) simulation of Y; test oracle only."""
    lam = 2.0 * env.spec.rate_bound()
    if not math.isfinite(lam):
        raise ConfigError("reference simulator needs bounded rates")
    s_off, y_off = env.shift_offset
    return int(_dual_thinning(env.core, x0 + y_off, s_off, float(horizon),
                              np.uint64(seed & 0xFFFFFFFFFFFFFFFF), lam)) - y_off


@dataclass
class DualEnsemble:
    spec: EnvSpec
    mode: str
    horizon: float
    starts: np.ndarray
    final: np.ndarray
    n_steps: np.ndarray
    clock_at_horizon: np.ndarray
    clock_times: np.ndarray
    clock_samples: np.ndarray
    master_seed: int

    @property
    def n_paths(self) -> int:
        return len(self.final)

    def clock_csv(self) -> str:
        lines = ["path_id,t,A_t"]
        for i in range(self.n_paths):
            for t, a in zip(self.clock_times, self.clock_samples[i]):
                lines.append(f"{i},{float(t)!r},{float(a)!r}")
        return "\n".join(lines) + "\n"


def dual_ensemble(spec: EnvSpec, mode: str, n_paths: int, horizon: float, master_seed: int,
                  workers: int = 1, starts=None, mirror=None, path_keys=None,
                  clock_times=None, origin_time: float = 0.0, env_seed: Optional[int] = None
                  ) -> DualEnsemble:
    """Many dual paths; path i uses key derive(master_seed, TAG_DUAL, i)."""
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    ct = _clock_grid(horizon, clock_times if clock_times is not None else [horizon])
    if env_seed is not None:
        if mode != "quenched":
            raise ConfigError("an explicit environment seed implies quenched mode")
        from ._rng import TAG_STATIC, TAG_CELL
        sk = np.full(n_paths, derive(env_seed, TAG_STATIC), dtype=np.uint64)
        ck = np.full(n_paths, derive(env_seed, TAG_CELL), dtype=np.uint64)
    else:
        _, sk, ck = env_keys(mode, n_paths, master_seed)
    if path_keys is None:
        path_keys = np.array([derive(master_seed, TAG_DUAL, i) for i in range(n_paths)], dtype=np.uint64)
    starts = np.zeros(n_paths, dtype=np.int64) if starts is None else np.asarray(starts, dtype=np.int64)
    mirror = np.zeros(n_paths, dtype=np.bool_) if mirror is None else np.asarray(mirror, dtype=np.bool_)
    envp = spec.core(0)
    final = np.zeros(n_paths, dtype=np.int64)
    nst = np.zeros(n_paths, dtype=np.int64)
    a_h = np.zeros(n_paths)
    c_out = np.zeros((n_paths, len(ct)))
    p_out = np.zeros((n_paths, len(ct)), dtype=np.int64)

    def work(a, b):
        _dual_batch(envp, sk[a:b], ck[a:b], path_keys[a:b], starts[a:b], mirror[a:b],
                    float(origin_time), float(horizon), ct, c_out[a:b], p_out[a:b],
                    final[a:b], nst[a:b], a_h[a:b])

    run_chunked(work, n_paths, workers)
    return DualEnsemble(spec, mode, float(horizon), starts, final, nst, a_h, ct, c_out, int(master_seed))


@dataclass
class ClockSlope:
    mean: float
    se: float
    std: float
    n: int

    @property
    def ci95(self):
        return self.mean - 1.96 * self.se, self.mean + 1.96 * self.se


def clock_slope(ensemble) -> ClockSlope:
    """Mean of A(horizon)/horizon over the paths, with its standard error."""
    if isinstance(ensemble, DualEnsemble):
        h = ensemble.horizon
        a = ensemble.clock_at_horizon
    else:
        recs = list(ensemble)
        if not recs:
            raise ConfigError("empty ensemble")
        h = recs[0].horizon
        if any(r.horizon != h for r in recs):
            raise ConfigError("all paths must share the horizon")
        a = np.array([r.clock_samples[-1, 1] for r in recs])
        if any(r.clock_samples[-1, 0] != h for r in recs):
            raise ConfigError("clock samples must end at the horizon")
    if len(a) == 0:
        raise ConfigError("empty ensemble")
    if h <= 0:
        raise ConfigError("horizon must be positive")
    r = np.asarray(a) / h
    sd = float(r.std(ddof=1)) if len(r) > 1 else 0.0
    return ClockSlope(float(r.mean()), sd / math.sqrt(len(r)), sd, len(r))


@dataclass
class KSResult:
    distance: float
    n: int
    sigma2: float
    pvalue: float


def dual_clt_check(ensemble: DualEnsemble, sigma2: Optional[float] = None) -> KSResult:
    """KS distance of Y_h/sqrt(h) against N(0, sigma2); sigma2 defaults to the clock slope."""
    if ensemble.n_paths < 100:
        raise ConfigError("dual_clt_check needs at least 100 paths")
    if sigma2 is None:
        sigma2 = clock_slope(ensemble).mean
    x = (ensemble.final - ensemble.starts) / math.sqrt(ensemble.horizon)
    res = stats.kstest(x, stats.norm(scale=math.sqrt(sigma2)).cdf)
    return KSResult(float(res.statistic), len(x), float(sigma2), float(res.pvalue))
