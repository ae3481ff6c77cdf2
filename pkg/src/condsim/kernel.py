"""Sub-stochastic kernel K(s,x;t,y) of the dual walk and the densities built from it.

K(s,x;t,y) (s >= t) is the probability that the dual walk started at vertex x
at time s sits at y when the environment clock has run back to time t.  It is
computed by exact uniformization on constant-rate slices of a finite window
of 2R+1 vertices with an absorbing boundary.

Source-anchored grids fix (s, x) and evolve the target variables downward in
time with the transposed generator; target-anchored grids fix (t, y) and
evolve the source variables upward with the generator itself.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _sweep
from .env import EnvironmentWindow, EnvSpec
from .errors import ConfigError, NumericalError


@dataclass
class WindowSpec:
    radius: int
    center: Optional[int] = None
    tolerance: float = 1e-12
    record_times: Optional[Sequence[float]] = None
    boundary: str = "absorbing"

    def __post_init__(self):
        if self.radius < 1:
            raise ConfigError("window radius must be >= 1")
        if self.boundary != "absorbing":
            raise ConfigError("only absorbing boundaries are supported")


@dataclass
class KernelGrid:
    anchor: str
    anchor_time: float
    anchor_vertex: int
    times: np.ndarray
    vertices: np.ndarray
    values: np.ndarray
    n_jumps: Optional[int]
    mass_deficit: np.ndarray
    tolerance: float
    n_slices: int = 0

    def value(self, t: float, v: int) -> float:
        i = int(np.searchsorted(self.times, t))
        if i >= len(self.times) or self.times[i] != t:
            raise ConfigError(f"time {t} is not on the grid")
        j = v - int(self.vertices[0])
        if not 0 <= j < len(self.vertices):
            return 0.0
        return float(self.values[i, j])

    def row(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.times, t))
        if i >= len(self.times) or self.times[i] != t:
            raise ConfigError(f"time {t} is not on the grid")
        return self.values[i]

    @property
    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("time,vertex,value\n")
        for i, t in enumerate(self.times):
            for j, v in enumerate(self.vertices):
                out.write(f"{float(t)!r},{int(v)},{float(self.values[i, j])!r}\n")
        return out.getvalue()

    def summary(self) -> dict:
        return {
            "anchor": self.anchor, "anchor_time": self.anchor_time,
            "anchor_vertex": self.anchor_vertex, "n_jumps": self.n_jumps,
            "tolerance": self.tolerance, "n_times": len(self.times),
            "radius": (len(self.vertices) - 1) // 2,
            "max_mass_deficit": float(np.nanmax(self.mass_deficit)) if len(self.mass_deficit) else 0.0,
            "n_slices": self.n_slices,
        }


def diffusive_radius(spec: EnvSpec, duration: float, m: float = 6.0, pad: int = 8) -> int:
    """Radius beyond which a dual walk run for ``duration`` is negligible."""
    b = spec.rate_bound()
    if not math.isfinite(b):
        b = max(spec.mean_rate(), 1.0) if math.isfinite(spec.mean_rate()) else 10.0
    return int(math.ceil(m * math.sqrt(2.0 * b * max(duration, 0.0)))) + pad


def _run(env, up, c_lo, c_hi, ta, tb, V0, split, eps, source, origin, rec, r_lo, r_hi, tol, want_g,
         coarse=0.0):
    """Sweep on view vertices c_lo..c_hi over view times [ta, tb]."""
    s_off, y_off = env.shift_offset
    if not (env.t_min <= ta and tb <= env.t_max):
        raise ConfigError(f"solve interval [{ta}, {tb}] outside the window's time range "
                          f"[{env.t_min}, {env.t_max}]; enlarge the window")
    rec_b = np.asarray(rec, dtype=np.float64) + s_off
    st, recV, recG, mass, acc, V, n_sl, kmax = _sweep.sweep(
        env.core, up, c_lo + y_off, c_hi - c_lo + 1, ta + s_off, tb + s_off, V0, split,
        float(eps), source, origin + s_off, rec_b, r_lo - c_lo, r_hi - c_lo, tol, want_g, float(coarse))
    if st != 0:
        raise NumericalError(f"uniformization did not reach tolerance {tol} on a slice of "
                             f"[{ta}, {tb}] (rate bound exceeded the term cap)")
    return recV, recG, mass, acc, V, n_sl


def _record_grid(env, lo, hi, window, c_lo, c_hi):
    if window.record_times is not None:
        rt = np.unique(np.asarray(window.record_times, dtype=np.float64))
        if len(rt) and (rt[0] < lo or rt[-1] > hi):
            raise ConfigError("record times outside the solve interval")
        return np.unique(np.concatenate((rt, [lo, hi])))
    s_off, y_off = env.shift_offset
    from ._envcore import materialize
    ptr, st, _, ok = materialize(env.core, c_lo + y_off, c_hi + y_off, lo + s_off, hi + s_off, 200000)
    if ok and len(st) < 100000:
        pts = st - s_off
        pts = pts[(pts > lo) & (pts < hi)]
        return np.unique(np.concatenate((pts, [lo, hi])))
    return np.linspace(lo, hi, 257)


def _kernel(env, source, target, interval, window, n):
    if (source is None) == (target is None):
        raise ConfigError("give exactly one of source or target")
    lo, hi = float(interval[0]), float(interval[1])
    if hi < lo:
        raise ConfigError("reversed interval")
    if source is not None:
        s, x = float(source[0]), int(source[1])
        if s != hi:
            raise ConfigError("a source-anchored solve must start at the interval's upper end")
        anchor, at, av = "source", s, x
    else:
        t, y = float(target[0]), int(target[1])
        if t != lo:
            raise ConfigError("a target-anchored solve must start at the interval's lower end")
        anchor, at, av = "target", t, y
    c = av if window.center is None else int(window.center)
    c_lo, c_hi = c - window.radius, c + window.radius
    if not c_lo <= av <= c_hi:
        raise ConfigError("anchor vertex outside the window")
    W = c_hi - c_lo + 1
    verts = np.arange(c_lo, c_hi + 1)
    rec = _record_grid(env, lo, hi, window, c_lo, c_hi)
    if n is not None and n <= 0:
        vals = np.zeros((len(rec), W))
        return KernelGrid(anchor, at, av, rec, verts, vals, 0, np.ones(len(rec)), window.tolerance)
    nj = 1 if n is None else int(n)
    V0 = np.zeros((nj, W))
    V0[0, av - c_lo] = 1.0
    if lo == hi:
        vals = V0[:1].copy()
        return KernelGrid(anchor, at, av, rec[:1], verts, vals, n, np.zeros(1), window.tolerance)
    up = anchor == "target"
    recV, _, mass, _, _, n_sl = _run(env, up, c_lo, c_hi, lo, hi, V0, n is not None, 0.0, False,
                                     0.0, rec, c_lo, c_hi, window.tolerance, False)
    deficit = 1.0 - mass if not up else np.full(len(rec), np.nan)
    return KernelGrid(anchor, at, av, rec, verts, np.maximum(recV, 0.0), n, deficit,
                      window.tolerance, n_sl)


def solve_kernel(env: EnvironmentWindow, source=None, target=None, interval=None,
                 window: Optional[WindowSpec] = None) -> KernelGrid:
    """K on a time grid, anchored at ``source`` (s, x) or ``target`` (t, y)."""
    if interval is None:
        raise ConfigError("interval required")
    if window is None:
        window = WindowSpec(radius=diffusive_radius(env.spec, interval[1] - interval[0]))
    return _kernel(env, source, target, interval, window, None)


def kernel_n(env: EnvironmentWindow, source=None, target=None, interval=None,
             window: Optional[WindowSpec] = None, n: int = 1) -> KernelGrid:
    """Kernel of the walk restricted to fewer than ``n`` jumps; K_0 = 0."""
    if n < 0:
        raise ConfigError("n must be >= 0")
    if interval is None:
        raise ConfigError("interval required")
    if window is None:
        window = WindowSpec(radius=max(n, 1) + 1)
    return _kernel(env, source, target, interval, window, int(n))


def kernel_value(env, s, x, t, y, radius=None, center=None, n=None, tol=1e-12) -> float:
    """Single entry K(s,x;t,y) from a source-anchored solve."""
    R = radius if radius is not None else diffusive_radius(env.spec, s - t)
    w = WindowSpec(radius=R, center=center, tolerance=tol, record_times=[t])
    g = _kernel(env, (s, x), None, (t, s), w, n)
    return g.value(t, y)


def shift_covariance_check(env: EnvironmentWindow, probes, shift, radius: int = 20) -> float:
    """max |K on the shifted view at p  -  K on env at p + shift| over probes (s,x,t,y)."""
    u, z = float(shift[0]), int(shift[1])
    view = env.shift(u, z)
    worst = 0.0
    for s, x, t, y in probes:
        a = kernel_value(view, s, x, t, y, radius=radius)
        b = kernel_value(env, s + u, x + z, t + u, y + z, radius=radius)
        worst = max(worst, abs(a - b))
    return worst


def identity_suite(env: EnvironmentWindow, n_probes: int = 50, seed: int = 0,
                   span: float = 2.0, radius: int = 25, t0: float = 0.0) -> dict:
    """Residuals of the kernel identities at random probes.

    Each probe draws s in [t0 + span/2, t0 + span], t in [t0, s), vertices x, y
    near 0.  The forward solve (from the source) and backward solve (from the
    target) share one window so both compute the same killed kernel.
    """
    rng = np.random.default_rng(seed)
    out = {"row_sum_vs_deficit": 0.0, "row_sum_excess": 0.0, "forward_backward": 0.0,
           "chapman_kolmogorov": 0.0, "monotone_n": 0.0, "k1_closed_form": 0.0,
           "shift_covariance": 0.0, "min_entry": 0.0, "n_probes": n_probes}
    for _ in range(n_probes):
        s = t0 + span * (0.5 + 0.5 * rng.random())
        t = t0 + (s - t0) * rng.random() * 0.9
        u = t + (s - t) * rng.random()
        x = int(rng.integers(-3, 4))
        y = x + int(rng.integers(-3, 4))
        w = WindowSpec(radius=radius, center=0, record_times=[t, u])
        fwd = _kernel(env, (s, x), None, (t, s), w, None)
        rs = fwd.row_sums
        out["row_sum_vs_deficit"] = max(out["row_sum_vs_deficit"],
                                        float(np.max(np.abs(1.0 - rs - fwd.mass_deficit))))
        out["row_sum_excess"] = max(out["row_sum_excess"], float(np.max(rs - 1.0)))
        out["min_entry"] = min(out["min_entry"], float(fwd.values.min()))
        wb = WindowSpec(radius=radius, center=0, record_times=[u, s])
        bwd = _kernel(env, None, (t, y), (t, s), wb, None)
        out["forward_backward"] = max(out["forward_backward"], abs(fwd.value(t, y) - bwd.value(s, x)))
        ck = float(np.dot(fwd.row(u), bwd.row(u)))
        out["chapman_kolmogorov"] = max(out["chapman_kolmogorov"], abs(ck - fwd.value(t, y)))
        prev = None
        for n in (1, 2, 3, 5, 8):
            g = _kernel(env, (s, x), None, (t, s), WindowSpec(radius=radius, center=0, record_times=[t]), n)
            if prev is not None:
                out["monotone_n"] = max(out["monotone_n"], float(np.max(prev - g.row(t))))
            prev = g.row(t)
            if n == 1:
                exact = math.exp(-2.0 * env.integrated_rate(x, t, s))
                k1 = g.value(t, x)
                off = float(np.abs(np.delete(g.row(t), x - int(g.vertices[0]))).max())
                out["k1_closed_form"] = max(out["k1_closed_form"], abs(k1 - exact), off)
        out["monotone_n"] = max(out["monotone_n"], float(np.max(prev - fwd.row(t))))
        shift = (float(rng.uniform(-1, 1)), int(rng.integers(-3, 4)))
        view = env.shift(*shift)
        a = kernel_value(view, s - shift[0], x - shift[1], t - shift[0], y - shift[1],
                         radius=radius, center=-shift[1])
        out["shift_covariance"] = max(out["shift_covariance"], abs(a - fwd.value(t, y)))
    return out


# --------------------------------------------------------------------------
# phi_eps, phi_{eps,n}, chi_{eps,n}


@dataclass
class PhiEpsRecord:
    epsilon: float
    n_jumps: Optional[int]
    shifts: list
    values: np.ndarray
    t_max_integral: float
    tail_bound: float
    by_n: Optional[np.ndarray] = None
    chi_eps_grid: Optional[np.ndarray] = None

    def to_csv(self) -> str:
        lines = ["time,vertex,value"]
        for (t, x), v in zip(self.shifts, self.values):
            lines.append(f"{float(t)!r},{int(x)},{float(v)!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"epsilon": self.epsilon, "n_jumps": self.n_jumps, "t_max_integral": self.t_max_integral,
                "tail_bound": self.tail_bound, "n_shifts": len(self.shifts),
                "min": float(np.min(self.values)), "max": float(np.max(self.values))}


def tail_horizon(epsilon: float, tail_tol: float) -> float:
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    if not 0 < tail_tol < 1:
        raise ConfigError("tail tolerance must lie in (0, 1)")
    return math.log(1.0 / tail_tol) / epsilon


def phi_eps(env: EnvironmentWindow, epsilon: float, n_jumps: Optional[int] = None,
            shifts=((0.0, 0),), radius: Optional[int] = None, tail_tol: float = 1e-10,
            tol: float = 1e-12, coarse: float = 0.0) -> PhiEpsRecord:
    """phi_eps at each shift (t, x): eps * int_0^T exp(-eps u) sum_y K(u, y; 0, 0) du
    on the shifted view, with K evolved in its source variables."""
    T = tail_horizon(epsilon, tail_tol)
    if radius is None:
        radius = (n_jumps + 1) if n_jumps is not None else diffusive_radius(env.spec, T)
    vals, by_n = [], []
    nj = 1 if n_jumps is None else int(n_jumps)
    for (t, x) in shifts:
        view = env.shift(float(t), int(x))
        if view.t_min > 0 or view.t_max < T:
            raise ConfigError(f"window must cover shift time {t} + {T:.4g} (tail tolerance "
                              f"{tail_tol}); enlarge the window")
        if n_jumps is not None and n_jumps <= 0:
            vals.append(0.0)
            by_n.append(np.zeros(0))
            continue
        W = 2 * radius + 1
        V0 = np.zeros((nj, W))
        V0[0, radius] = 1.0
        _, _, _, acc, _, _ = _run(view, True, -radius, radius, 0.0, T, V0, n_jumps is not None,
                                  epsilon, False, 0.0, np.zeros(0), 0, 0, tol, False, coarse)
        by_n.append(np.cumsum(acc))
        vals.append(float(acc.sum()))
    return PhiEpsRecord(float(epsilon), n_jumps, [(float(t), int(x)) for t, x in shifts],
                        np.array(vals), T, math.exp(-epsilon * T),
                        np.array(by_n) if n_jumps is not None else None)


def phi_eps_field(env: EnvironmentWindow, epsilon: float, times: Sequence[float], x_lo: int,
                  x_hi: int, n_jumps: Optional[int] = None, tail_tol: float = 1e-10,
                  margin: Optional[int] = None, tol: float = 1e-12, want_flux: bool = False,
                  coarse: float = 0.0, exact_span: Optional[float] = None):
    """phi_eps (or phi_{eps,n}) at every shift (t, x), t in ``times``, x in [x_lo, x_hi].

    One downward sweep of F(t) = eps int_0^{T_end - t} exp(-eps u) m(t, t+u) du with
    m(t, t+u)(x) = sum_y K(t+u, y; t, x), started from F = 0 at T_end.
    Returns (values[time, x], flux[time, x] or None, T_end) where flux is
    int_t^{T_end} exp(-eps s) b_s(x) F(s, x) ds.

    With ``coarse`` > 0 dynamic rates are replaced by cell averages; if
    ``exact_span`` is also given, the stretch below max(times) + exact_span is
    still solved with the exact rates.
    """
    times = np.asarray(times, dtype=np.float64)
    T = tail_horizon(epsilon, tail_tol)
    t_end = float(times.max()) + T
    if margin is None:
        margin = (n_jumps + 1) if n_jumps is not None else diffusive_radius(env.spec, T)
    c_lo, c_hi = x_lo - margin, x_hi + margin
    nj = 1 if n_jumps is None else int(n_jumps)
    V0 = np.zeros((nj, c_hi - c_lo + 1))
    order = np.argsort(times)
    split = n_jumps is not None
    t_lo = float(times.min())
    G_top = None
    if coarse > 0 and exact_span is not None and float(times.max()) + exact_span < t_end:
        t_sw = float(times.max()) + float(exact_span)
        _, g1, _, _, V0, _ = _run(env, False, c_lo, c_hi, t_sw, t_end, V0, split, epsilon, True,
                                  0.0, np.array([t_sw]), x_lo, x_hi, tol, want_flux, coarse)
        G_top = g1[0]
        t_end, coarse = t_sw, 0.0
    recV, recG, _, _, _, _ = _run(env, False, c_lo, c_hi, t_lo, t_end, V0, split, epsilon, True,
                                  0.0, times[order], x_lo, x_hi, tol, want_flux, coarse)
    vals = np.empty_like(recV)
    vals[order] = recV
    flux = None
    if want_flux:
        if G_top is not None:
            recG = recG + G_top
        flux = np.empty_like(recG)
        flux[order] = recG
    return vals, flux, float(times.max()) + T


@dataclass
class ChiEpsRecord:
    epsilon: float
    n_jumps: int
    shifts: list
    values: np.ndarray
    bounds: np.ndarray
    t_max_integral: float


def _weighted_integral(env: EnvironmentWindow, x: int, eps: float, t0: float, t1: float) -> float:
    """int_{t0}^{t1} exp(-eps t) b_t(x) dt, exact on the piecewise-constant track."""
    s_off, y_off = env.shift_offset
    from ._envcore import materialize
    cap = 1024
    while True:
        ptr, st, va, ok = materialize(env.core, x + y_off, x + y_off, t0 + s_off, t1 + s_off, cap)
        if ok:
            break
        cap *= 4
    a = st - s_off
    b = np.append(a[1:], t1)
    return float(np.sum(va * (np.exp(-eps * a) - np.exp(-eps * b)) / eps))


def chi_eps_truncated(env: EnvironmentWindow, epsilon: float, n: int, shifts=((0.0, 0),),
                      tail_tol: float = 1e-10, tol: float = 1e-13) -> ChiEpsRecord:
    """chi_{eps,n} = int_0^inf exp(-eps t)[b_t(0) phi_{eps,n}(t,0) - b_t(-1) phi_{eps,n}(t,-1)] dt
    at each shift, with the companion bound (2n+1) int exp(-eps t)[b_t(0)+b_t(-1)] dt."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    b = env.spec.rate_bound()
    if not math.isfinite(b):
        raise ConfigError("chi_eps_truncated needs bounded rates")
    T = (math.log(1.0 / tail_tol) + math.log(max(1.0, 4.0 * (2 * n + 1) * b / epsilon)) + 5.0) / epsilon
    vals, bounds = [], []
    for (t, x) in shifts:
        view = env.shift(float(t), int(x))
        if view.t_min > 0 or view.t_max < T:
            raise ConfigError(f"window must cover shift time {t} + {T:.4g}; enlarge the window")
        c_lo, c_hi = -1 - n, n
        V0 = np.zeros((n, c_hi - c_lo + 1))
        _, recG, _, _, _, _ = _run(view, False, c_lo, c_hi, 0.0, T, V0, True, epsilon, True, 0.0,
                                   np.zeros(1), -1, 0, tol, True)
        vals.append(float(recG[0, 1] - recG[0, 0]))
        bounds.append((2 * n + 1) * (_weighted_integral(view, 0, epsilon, 0.0, T)
                                     + _weighted_integral(view, -1, epsilon, 0.0, T)))
    return ChiEpsRecord(float(epsilon), int(n), [(float(t), int(x)) for t, x in shifts],
                        np.array(vals), np.array(bounds), T)


def transport_field(env: EnvironmentWindow, anchor_time: float, anchor: np.ndarray, a_lo: int,
                    times: Sequence[float], r_lo: int, r_hi: int, tol: float = 1e-12,
                    coarse: float = 0.0):
    """Carry a density row downward in time with the transposed generator.

    Starting from ``anchor`` on vertices a_lo..a_lo+len-1 at ``anchor_time``,
    returns (rows[time, x], flux[time, x]) for x in r_lo..r_hi, where
    flux(t, x) = int_t^{anchor_time} b_s(x) F(s, x) ds.
    """
    times = np.asarray(times, dtype=np.float64)
    if np.any(times > anchor_time):
        raise ConfigError("transport only runs downward from the anchor time")
    a_hi = a_lo + len(anchor) - 1
    if not (a_lo <= r_lo and r_hi <= a_hi):
        raise ConfigError("record range must lie inside the anchor row")
    V0 = np.asarray(anchor, dtype=np.float64).reshape(1, -1).copy()
    order = np.argsort(times)
    recV, recG, _, _, _, _ = _run(env, False, a_lo, a_hi, float(times.min()), float(anchor_time), V0,
                                  False, 0.0, False, 0.0, times[order], r_lo, r_hi, tol, True, coarse)
    rows = np.empty_like(recV)
    rows[order] = recV
    flux = np.empty_like(recG)
    flux[order] = recG
    return rows, flux


def _truncated_flux(view, epsilon, n, T, tol):
    """int_0^T exp(-eps t) b_t(x) phi_{eps,n}(t, x) dt at x = -1, 0, 1."""
    c_lo, c_hi = -1 - n, n + 1
    V0 = np.zeros((n, c_hi - c_lo + 1))
    _, recG, _, _, _, _ = _run(view, False, c_lo, c_hi, 0.0, T, V0, True, epsilon, True, 0.0,
                               np.zeros(1), -1, 1, tol, True)
    return recG[0]


def gradient_identity_residual(env: EnvironmentWindow, epsilon: float, n: int,
                           tail_tol: float = 1e-10, tol: float = 1e-13):
    """Residuals of the finite-n gradient identity for chi_{eps,n} at the origin.

    Returns (stated, corrected):
      stated    = |chi_{eps,n}(0,1) - chi_{eps,n}(0,0) - (phi_{eps,n+1} - 1)|
      corrected = the same with the extra diagonal term
                  2 int exp(-eps t) b_t(0) [phi_{eps,n+1} - phi_{eps,n}](t, 0) dt
                  added to the right-hand side.
    The extra term appears because the jump-restricted kernel keeps the
    (n+1)-level kernel on its diagonal; it vanishes as n grows.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    b = env.spec.rate_bound()
    if not math.isfinite(b):
        raise ConfigError("needs bounded rates")
    T = (math.log(1.0 / tail_tol) + math.log(max(1.0, 4.0 * (2 * n + 3) * b / epsilon)) + 5.0) / epsilon
    if env.t_min > 0 or env.t_max < T:
        raise ConfigError(f"window must cover [0, {T:.4g}]; enlarge the window")
    g_n = _truncated_flux(env, epsilon, n, T, tol)
    g_n1 = _truncated_flux(env, epsilon, n + 1, T, tol)
    lhs = (g_n[2] - g_n[1]) - (g_n[1] - g_n[0])
    phi = phi_eps(env, epsilon, n_jumps=n + 1, tail_tol=tail_tol * 1e-2).values[0]
    extra = 2.0 * (g_n1[1] - g_n[1])
    return abs(lhs - (phi - 1.0)), abs(lhs - (phi - 1.0 + extra))


@dataclass
class WeightedL2:
    epsilon: float
    e_b_phi2: float
    se_b_phi2: float
    e_b: float
    se_b: float
    e_b_phi: float
    se_b_phi: float
    e_phi: float
    se_phi: float
    identity_residual: float
    n_env: int
    n_sites: int

    @property
    def holds(self) -> bool:
        """E[b phi^2] <= E[b] up to three combined standard errors."""
        return self.e_b_phi2 <= self.e_b + 3.0 * math.hypot(self.se_b_phi2, self.se_b)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["holds"] = self.holds
        return d


def _mean_se(per_env: np.ndarray, pooled: np.ndarray):
    if len(per_env) > 1:
        return float(per_env.mean()), float(per_env.std(ddof=1) / math.sqrt(len(per_env)))
    from .corrector import batch_mean_se
    return batch_mean_se(pooled)


def weighted_l2_check(spec: EnvSpec, epsilon: float, n_env_samples: int, seed: int = 0,
                      n_sites: int = 200, tail_tol: float = 1e-8, coarse: float = 0.0,
                      exact_span: Optional[float] = None, margin: Optional[int] = None
                      ) -> WeightedL2:
    """E[b phi_eps^2] against E[b] from phi_eps fields at time 0.

    Each environment contributes the spatial average over ``n_sites`` vertices;
    standard errors come from the spread over environments (or batch means for
    a single environment).  Also reports the residual
    eps E[chi_eps^2] + E[b phi_eps^2] - E[b phi_eps].
    """
    from ._rng import derive, TAG_ENV_PER_PATH
    spec.require_compliant()
    T = tail_horizon(epsilon, tail_tol)
    if margin is None:
        margin = diffusive_radius(spec, T)
    lo, hi = -(n_sites // 2), n_sites - n_sites // 2 - 1
    rows = {k: [] for k in ("bp2", "b", "bp", "p", "chi2")}
    for e in range(n_env_samples):
        env = build_env_for(spec, derive(seed, TAG_ENV_PER_PATH, e), lo - margin - 2, hi + margin + 2, T)
        v, flux, _ = phi_eps_field(env, epsilon, [0.0], lo - 1, hi, tail_tol=tail_tol, margin=margin,
                                   want_flux=True, coarse=coarse, exact_span=exact_span)
        phi = v[0, 1:]
        chi = flux[0, 1:] - flux[0, :-1]
        b = np.array([env.rate_at(x, 0.0) for x in range(lo, hi + 1)])
        for k, arr in (("bp2", b * phi ** 2), ("b", b), ("bp", b * phi), ("p", phi), ("chi2", chi ** 2)):
            rows[k].append(arr)
    stats_ = {}
    for k, arrs in rows.items():
        per = np.array([a.mean() for a in arrs])
        stats_[k] = _mean_se(per, arrs[0])
    resid = epsilon * stats_["chi2"][0] + stats_["bp2"][0] - stats_["bp"][0]
    return WeightedL2(float(epsilon), *stats_["bp2"], *stats_["b"], *stats_["bp"], *stats_["p"],
                      float(resid), n_env_samples, n_sites)


def build_env_for(spec: EnvSpec, seed: int, x_lo: int, x_hi: int, horizon: float) -> EnvironmentWindow:
    """A window covering [x_lo, x_hi] x [-1, horizon + 1] with the given seed."""
    from .env import build_env
    return build_env(spec, int(x_lo), int(x_hi), -1.0, float(horizon) + 1.0, seed)
