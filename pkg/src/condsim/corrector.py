"""Invariant density phi, parabolic coordinates psi and the corrector chi.

phi(t, x) is the density of the environment seen from the dual walk.  It is
obtained either in closed form (spatially homogeneous or static
environments) or from phi_eps at a schedule of epsilon values extrapolated
to epsilon = 0.

psi is assembled from phi: along a time slice psi(t, x+1) - psi(t, x) =
phi(t, x), and along the vertical line through the origin
d/dt psi(t, 0) = -[b_t(0) phi(t, 0) - b_t(-1) phi(t, -1)].  Time integrals of
b phi are carried by the flux table flux(t, x) = int_t^top b_s(x) phi(s, x) ds,
where phi rows below the top time are obtained by transporting the top row
downward with the transposed generator.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from ._rng import derive, TAG_DUAL
from .dual import dual_ensemble
from .env import EnvironmentWindow
from .errors import ConfigError, NumericalError
from .kernel import (WindowSpec, _kernel, diffusive_radius, phi_eps_field, transport_field)

METHODS = ("kernel-extrapolated", "static-closed-form", "homogeneous-unit")


def batch_mean_se(values: np.ndarray, n_batches: int = 10):
    """Mean of a spatially correlated sequence with a batch-means standard error."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) < 2 * n_batches:
        n_batches = max(2, len(v) // 2)
    if len(v) < 2:
        return float(v.mean()) if len(v) else float("nan"), float("nan")
    m = len(v) // n_batches
    means = v[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(v.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))


def extrapolate_eps(eps: Sequence[float], raw: Sequence[np.ndarray]):
    """Linear extrapolation to epsilon = 0 through the two smallest epsilons.

    Points where the extrapolated value is not positive fall back to the
    smallest-epsilon value.  Returns (values, number of fallbacks).
    """
    order = np.argsort(eps)
    if len(eps) == 1:
        return np.array(raw[0], copy=True), 0
    e1, e2 = float(eps[order[0]]), float(eps[order[1]])
    f1, f2 = np.asarray(raw[order[0]]), np.asarray(raw[order[1]])
    ext = f1 + (f1 - f2) * e1 / (e2 - e1)
    bad = ~(ext > 0)
    ext[bad] = f1[bad]
    return ext, int(bad.sum())


@dataclass
class PhiField:
    method: str
    times: np.ndarray
    x_lo: int
    values: np.ndarray
    epsilons: tuple = ()
    raw: dict = field(default_factory=dict)
    c_h: Optional[float] = None
    normalization: dict = field(default_factory=dict)
    fallbacks: int = 0

    @property
    def x_hi(self) -> int:
        return self.x_lo + self.values.shape[1] - 1

    def _ti(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t))
        if i >= len(self.times) or not math.isclose(self.times[i], t, rel_tol=1e-12, abs_tol=1e-12):
            raise ConfigError(f"time {t} is not on the phi grid")
        return i

    def row(self, t: float) -> np.ndarray:
        return self.values[self._ti(t)]

    def at(self, t: float, x: int) -> float:
        if not self.x_lo <= x <= self.x_hi:
            raise ConfigError(f"vertex {x} outside the phi grid")
        return float(self.values[self._ti(t), x - self.x_lo])

    def covers(self, lo: int, hi: int) -> bool:
        return self.x_lo <= lo and hi <= self.x_hi

    def perturbed(self, t: float, x: int, factor: float) -> "PhiField":
        v = self.values.copy()
        v[self._ti(t), x - self.x_lo] *= factor
        return replace(self, values=v)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("t,x,value\n")
        for i, t in enumerate(self.times):
            for j in range(self.values.shape[1]):
                out.write(f"{float(t)!r},{self.x_lo + j},{float(self.values[i, j])!r}\n")
        return out.getvalue()

    def metadata(self) -> dict:
        return {"method": self.method, "epsilons": list(self.epsilons), "c_h": self.c_h,
                "x_range": [self.x_lo, self.x_hi], "n_times": len(self.times),
                "normalization": self.normalization, "extrapolation_fallbacks": self.fallbacks}


def build_phi(env: EnvironmentWindow, method: str, times: Sequence[float], x_lo: int, x_hi: int,
              epsilons: Sequence[float] = (1e-1, 1e-2, 1e-3), tail_tol: float = 1e-8,
              margin: Optional[int] = None, coarse: float = 0.0,
              exact_span: Optional[float] = None) -> PhiField:
    """phi on times x [x_lo, x_hi] by the requested method."""
    spec = env.spec
    if method not in METHODS:
        raise ConfigError(f"unknown phi method {method!r}; choose from {METHODS}")
    times = np.unique(np.asarray(times, dtype=np.float64))
    if len(times) == 0 or x_hi < x_lo:
        raise ConfigError("empty phi grid")
    nx = x_hi - x_lo + 1
    if method == "homogeneous-unit":
        if not spec.is_spatially_homogeneous:
            raise ConfigError("homogeneous-unit phi needs a spatially homogeneous environment")
        vals = np.ones((len(times), nx))
        return PhiField(method, times, x_lo, vals, normalization={"mean": 1.0, "se": 0.0, "n": vals.size})
    if method == "static-closed-form":
        if spec.is_dynamic:
            raise ConfigError("static-closed-form phi needs a static environment")
        m_inv = spec.mean_inverse_rate()
        if not (math.isfinite(m_inv) and m_inv > 0):
            raise ConfigError("static-closed-form phi needs a finite mean inverse rate")
        c_h = 1.0 / m_inv
        a = np.array([env.rate_at(x, float(times[0])) for x in range(x_lo, x_hi + 1)])
        row = c_h / a
        mean, se = batch_mean_se(row)
        return PhiField(method, times, x_lo, np.tile(row, (len(times), 1)), c_h=c_h,
                        normalization={"mean": mean, "se": se, "n": nx})
    raw = {}
    for eps in epsilons:
        v, _, _ = phi_eps_field(env, float(eps), times, x_lo, x_hi, tail_tol=tail_tol, margin=margin,
                                coarse=coarse, exact_span=exact_span)
        raw[float(eps)] = v
    eps_list = list(raw)
    vals, fb = extrapolate_eps(eps_list, [raw[e] for e in eps_list])
    mean, se = batch_mean_se(vals[0])
    return PhiField(method, times, x_lo, vals, tuple(eps_list), raw,
                    normalization={"mean": mean, "se": se, "n": nx}, fallbacks=fb)


def phi_selfconsistency(env: EnvironmentWindow, phi: PhiField, t: float, probes=None,
                        radius: Optional[int] = None, tol: float = 1e-12):
    """Max relative residual of phi(t0, x0) = sum_x phi(t0 + t, x) K(t0 + t, x; t0, x0).

    ``probes`` are (t0, x0) pairs; both t0 and t0 + t must be phi grid times.
    Returns (max residual, per-probe residuals).
    """
    if t <= 0:
        raise ConfigError("t must be positive")
    R = radius if radius is not None else diffusive_radius(env.spec, t)
    if probes is None:
        t0 = float(phi.times[0])
        mid = (phi.x_lo + phi.x_hi) // 2
        probes = [(t0, x) for x in range(mid - 10, mid + 10)]
    res = []
    for t0, x0 in probes:
        if not phi.covers(x0 - R, x0 + R):
            raise ConfigError(f"phi grid does not cover the kernel window around vertex {x0}")
        w = WindowSpec(radius=R, tolerance=tol, record_times=[t0 + t])
        g = _kernel(env, None, (t0, x0), (t0, t0 + t), w, None)
        row = phi.row(t0 + t)[x0 - R - phi.x_lo: x0 + R + 1 - phi.x_lo]
        rhs = float(np.dot(g.row(t0 + t), row))
        lhs = phi.at(t0, x0)
        res.append(abs(lhs - rhs) / abs(lhs))
    return float(max(res)), res


@dataclass
class PsiField:
    times: np.ndarray
    x_lo: int
    phi_rows: np.ndarray
    flux: np.ndarray
    psi: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def x_hi(self) -> int:
        return self.x_lo + self.psi.shape[1] - 1

    def _ti(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t))
        if i >= len(self.times) or not math.isclose(self.times[i], t, rel_tol=1e-12, abs_tol=1e-12):
            raise ConfigError(f"time {t} is not on the psi grid")
        return i

    def _xi(self, x: int) -> int:
        if not self.x_lo <= x <= self.x_hi:
            raise ConfigError(f"vertex {x} outside the psi grid")
        return x - self.x_lo

    def value(self, t: float, x: int) -> float:
        return float(self.psi[self._ti(t), self._xi(x)])

    def chi(self, t: float, x: int) -> float:
        return self.value(t, x) - x

    @property
    def chi_grid(self) -> np.ndarray:
        return self.psi - np.arange(self.x_lo, self.x_hi + 1)[None, :]

    @property
    def gradients(self) -> np.ndarray:
        return np.diff(self.psi, axis=1)

    def time_increment(self, t1: float, t2: float, x: int) -> float:
        """psi(t2, x) - psi(t1, x) from the flux table alone (x and x-1 on the grid)."""
        i1, i2 = self._ti(t1), self._ti(t2)
        j, jm = self._xi(x), self._xi(x - 1)
        F = self.flux
        return float((F[i2, j] - F[i1, j]) - (F[i2, jm] - F[i1, jm]))

    def pde_residual(self) -> float:
        """max |psi(t', x) - psi(t, x) - time increment| over consecutive grid times."""
        if len(self.times) < 2:
            return 0.0
        dpsi = np.diff(self.psi, axis=0)[:, 1:]
        dF = np.diff(self.flux, axis=0)
        inc = dF[:, 1:] - dF[:, :-1]
        return float(np.max(np.abs(dpsi - inc)))

    def cocycle_residual(self, n_probes: int = 50, seed: int = 0) -> float:
        """max |psi(t+s, x+y) - psi(t, x) - psi_(t,x)(s, y)| over random grid probes.

        psi_(t,x) is the coordinate rooted at (t, x): first along time at
        vertex x, then along the time-(t+s) slice.
        """
        rng = np.random.default_rng(seed)
        nt, nx = self.psi.shape
        worst = 0.0
        for _ in range(n_probes):
            i, k = rng.integers(0, nt, size=2)
            j = int(rng.integers(1, nx))
            m = int(rng.integers(1, nx))
            x, xy = self.x_lo + j, self.x_lo + m
            t, ts = float(self.times[i]), float(self.times[k])
            rooted = self.time_increment(t, ts, x)
            row = self.phi_rows[k]
            if xy >= x:
                rooted += float(row[j:m].sum())
            else:
                rooted -= float(row[m:j].sum())
            worst = max(worst, abs(self.psi[k, m] - self.psi[i, j] - rooted))
        return worst

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("t,x,psi,chi\n")
        for i, t in enumerate(self.times):
            for j in range(self.psi.shape[1]):
                x = self.x_lo + j
                out.write(f"{float(t)!r},{x},{float(self.psi[i, j])!r},{float(self.psi[i, j] - x)!r}\n")
        return out.getvalue()


def _assemble(times, x_lo, rows, flux):
    """psi from phi rows and flux: vertical at x = 0, then along each slice."""
    i0 = int(np.searchsorted(times, 0.0))
    j0, jm = -x_lo, -1 - x_lo
    vert = (flux[:, j0] - flux[i0, j0]) - (flux[:, jm] - flux[i0, jm])
    cs = np.concatenate((np.zeros((len(times), 1)), np.cumsum(rows, axis=1)), axis=1)
    psi = vert[:, None] + cs[:, :-1] - cs[:, j0][:, None]
    psi[i0, j0] = 0.0
    return psi


def build_psi(env: EnvironmentWindow, phi: PhiField, times: Sequence[float], x_lo: int, x_hi: int,
              margin: Optional[int] = None, tol: float = 1e-12, coarse: float = 0.0) -> PsiField:
    """psi and chi on times x [x_lo, x_hi] (time 0 and vertices -1, 0 always included)."""
    times = np.unique(np.concatenate((np.asarray(times, dtype=np.float64), [0.0])))
    x_lo, x_hi = min(int(x_lo), -1), max(int(x_hi), 0)
    nx = x_hi - x_lo + 1
    meta = {"phi_method": phi.method, "tolerance": tol, "coarse": coarse}
    if phi.method in ("homogeneous-unit", "static-closed-form"):
        if not phi.covers(x_lo, x_hi):
            raise ConfigError("phi grid does not cover the psi grid")
        row = phi.values[0, x_lo - phi.x_lo: x_hi + 1 - phi.x_lo]
        rows = np.tile(row, (len(times), 1))
        top = float(times.max())
        if phi.method == "static-closed-form":
            flux = np.tile((top - times)[:, None] * phi.c_h, (1, nx))
        else:
            g = np.array([env.integrated_rate(0, float(t), top) for t in times])
            flux = np.tile(g[:, None], (1, nx))
        meta["anchor_time"] = top
    else:
        top = float(phi.times.max())
        if top < times.max():
            raise ConfigError(f"phi's top time {top} lies below the psi grid's top {times.max()}")
        need = margin if margin is not None else diffusive_radius(env.spec, top - float(times.min()))
        if not phi.covers(x_lo - need, x_hi + need):
            raise ConfigError(f"phi row at time {top} must cover [{x_lo - need}, {x_hi + need}]")
        rows, flux = transport_field(env, top, phi.row(top), phi.x_lo, times, x_lo, x_hi, tol=tol,
                                     coarse=coarse)
        meta["anchor_time"] = top
        meta["anchor_range"] = [phi.x_lo, phi.x_hi]
    psi = _assemble(times, x_lo, rows, flux)
    return PsiField(times, x_lo, rows, flux, psi, meta)


def corrector_fields(env: EnvironmentWindow, times: Sequence[float], x_lo: int, x_hi: int,
                     method: Optional[str] = None, epsilons=(1e-1, 1e-2, 1e-3),
                     tail_tol: float = 1e-8, margin: Optional[int] = None, coarse: float = 0.0,
                     exact_span: Optional[float] = None):
    """phi anchored at the grid's top time and the psi field built from it."""
    spec = env.spec
    if method is None:
        if spec.is_spatially_homogeneous:
            method = "homogeneous-unit"
        elif not spec.is_dynamic:
            method = "static-closed-form"
        else:
            method = "kernel-extrapolated"
    t = np.unique(np.concatenate((np.asarray(times, dtype=np.float64), [0.0])))
    lo, hi = min(x_lo, -1), max(x_hi, 0)
    if method == "kernel-extrapolated":
        m = margin if margin is not None else diffusive_radius(spec, float(t.max() - t.min()))
        phi = build_phi(env, method, [float(t.max())], lo - m, hi + m, epsilons, tail_tol,
                        coarse=coarse, exact_span=exact_span)
        psi = build_psi(env, phi, t, lo, hi, margin=m, coarse=coarse)
    else:
        phi = build_phi(env, method, [float(t.max())], lo, hi)
        psi = build_psi(env, phi, t, lo, hi)
    return phi, psi


@dataclass
class DualChiEstimate:
    t: float
    estimate: float
    se: float
    n_paths: int
    truncation: int
    tail_proxy: float


def chi_dual_mc(env: EnvironmentWindow, phi_row: np.ndarray, row_lo: int, t: float, n_paths: int,
                M: float = 6.0, seed: int = 0, workers: int = 1) -> DualChiEstimate:
    """Monte-Carlo estimate of chi(-t, 0) from dual walks started at time 0.

    sum_{x>=0} phi(0,x) P^x(Y_t < 0) - sum_{x<0} phi(0,x) P^x(Y_t >= 0) over
    |x| <= M sqrt(t).  Start x >= 0 and its mirror -1-x share random numbers
    with negated steps, which makes the estimate exactly zero on spatially
    homogeneous environments.
    """
    if t <= 0 or n_paths < 2:
        raise ConfigError("need t > 0 and at least two paths")
    K = int(math.ceil(M * math.sqrt(t)))
    if row_lo > -K or row_lo + len(phi_row) - 1 < K - 1:
        raise ConfigError(f"phi row must cover [{-K}, {K - 1}]")
    s_off, y_off = env.shift_offset
    xs = np.arange(K)
    starts = np.concatenate((np.repeat(xs, n_paths), np.repeat(-1 - xs, n_paths))) + y_off
    mirror = np.concatenate((np.zeros(K * n_paths, bool), np.ones(K * n_paths, bool)))
    keys = np.array([derive(seed, TAG_DUAL, int(x), i) for x in xs for i in range(n_paths)],
                    dtype=np.uint64)
    keys = np.concatenate((keys, keys))
    ens = dual_ensemble(env.spec, "quenched", len(starts), float(t), seed, workers=workers,
                        starts=starts, mirror=mirror, path_keys=keys, origin_time=s_off,
                        env_seed=env.base_seed)
    fin = ens.final - y_off
    pos, neg = fin[: K * n_paths].reshape(K, n_paths), fin[K * n_paths:].reshape(K, n_paths)
    w_pos = phi_row[xs - row_lo][:, None]
    w_neg = phi_row[-1 - xs - row_lo][:, None]
    D = (w_pos * (pos < 0) - w_neg * (neg >= 0)).sum(axis=0)
    b = env.spec.mean_rate()
    sd = math.sqrt(2.0 * (b if math.isfinite(b) else 1.0) * t)
    tail = float(2.0 * np.sum(stats.norm.sf(np.arange(K, K + 20 * int(sd) + 20) / sd)))
    return DualChiEstimate(float(t), float(D.mean()), float(D.std(ddof=1) / math.sqrt(n_paths)),
                           n_paths, K, tail)


@dataclass
class SublinearityReport:
    n_list: list
    box_ratio: list
    spatial_ratio: list
    temporal_ratio: list

    def to_dict(self) -> dict:
        return {"n": self.n_list, "box_ratio": self.box_ratio, "spatial_ratio": self.spatial_ratio,
                "temporal_ratio": self.temporal_ratio}


def sublinearity_report(psi: PsiField, n_list: Sequence[float]) -> SublinearityReport:
    """Diffusive-box, spatial and temporal corrector ratios for each n.

    box: max over |x| <= sqrt(n), 0 <= t <= n of |chi(t,x)| / sqrt(n);
    spatial: max over sqrt(n)/2 < |x| <= sqrt(n) of |chi(0,x)| / |x|;
    temporal: |chi(n, 0)| / sqrt(n) at the largest grid time <= n.
    """
    chi = psi.chi_grid
    box, spat, temp = [], [], []
    for n in n_list:
        r = int(math.floor(math.sqrt(n)))
        if psi.x_lo > -r or psi.x_hi < r or psi.times.min() > 0 or psi.times.max() < n:
            raise ConfigError(f"psi grid does not cover the diffusive box of size {n}")
        ti = (psi.times >= 0) & (psi.times <= n)
        sub = chi[ti][:, -r - psi.x_lo: r + 1 - psi.x_lo]
        box.append(float(np.max(np.abs(sub)) / math.sqrt(n)))
        i0 = psi._ti(0.0)
        xs = np.array([x for x in range(-r, r + 1) if r / 2 < abs(x) <= r])
        spat.append(float(np.max(np.abs(chi[i0, xs - psi.x_lo]) / np.abs(xs))) if len(xs) else 0.0)
        it = int(np.nonzero(psi.times <= n)[0].max())
        temp.append(float(abs(chi[it, -psi.x_lo]) / math.sqrt(n)))
    return SublinearityReport([float(n) for n in n_list], box, spat, temp)
