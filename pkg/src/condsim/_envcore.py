"""Procedural evaluation of conductance tracks inside compiled loops.

A compiled environment is the tuple returned by ``EnvSpec.core(seed)``:

    (dynamic, homogeneous, law, static_key, cell_key, nu, cell_len, p0, p1,
     law_values, law_cum)

Static fields draw one level per edge. Dynamic fields are refresh processes:
Poisson(nu) event times per edge (one shared track when spatially
homogeneous), each event redrawing the level from the stationary law.  Events
are generated per time cell of length ``cell_len`` from a key that depends
only on (seed, edge, cell), which makes the field two-sided stationary and
independent of the window that happens to be materialized.
"""

import numpy as np
from numba import njit

from ._rng import subkey, uniform, exponential

BUF = 512

LAW_DISCRETE = 0
LAW_PARETO = 1
LAW_POWER = 2


@njit(cache=True, inline="always")
def level_of(u, law, p0, p1, lvals, lcum):
    if law == LAW_DISCRETE:
        # laws have a handful of atoms, so a linear scan beats searchsorted
        n = lvals.shape[0]
        i = 0
        while i < n - 1 and i < lcum.shape[0] and lcum[i] <= u:
            i += 1
        return lvals[i]
    elif law == LAW_PARETO:
        return p1 * u ** (-1.0 / p0)
    else:
        return u ** p0 + p1


@njit(cache=True, inline="always")
def edge_key(envp, e):
    if envp[1] == 1:
        return subkey(envp[4], 0)
    return subkey(envp[4], e)


@njit(cache=True, inline="always")
def static_rate(envp, e):
    k = subkey(envp[3], e)
    return level_of(uniform(k, 0), envp[2], envp[7], envp[8], envp[9], envp[10])


@njit(cache=True)
def cell_of(t, L):
    j = np.int64(np.floor(t / L))
    if (j + 1) * L <= t:
        j += 1
    elif j * L > t:
        j -= 1
    return j


@njit(cache=True)
def cell_events(ek, j, nu, L, buf_t, buf_u):
    """Fill the buffers with the ordered events of cell ``j``; return count."""
    ck = subkey(ek, j)
    t = j * L
    end = (j + 1) * L
    n = 0
    while True:
        t += exponential(ck, 2 * n) / nu
        if t >= end:
            break
        if n >= buf_t.shape[0]:
            raise RuntimeError("cell event buffer overflow")
        buf_t[n] = t
        buf_u[n] = uniform(ck, 2 * n + 1)
        n += 1
    return n


@njit(cache=True)
def dyn_level_at(envp, ek, t, strict, buf_t, buf_u):
    """Level of the last refresh at or before ``t`` (strictly before if ``strict``)."""
    nu = envp[5]
    L = envp[6]
    j = cell_of(t, L)
    while True:
        n = cell_events(ek, j, nu, L, buf_t, buf_u)
        for i in range(n - 1, -1, -1):
            if buf_t[i] < t or (not strict and buf_t[i] == t):
                return level_of(buf_u[i], envp[2], envp[7], envp[8], envp[9], envp[10])
        j -= 1


@njit(cache=True)
def rate_at_core(envp, e, t, buf_t, buf_u):
    if envp[0] == 0:
        return static_rate(envp, e)
    return dyn_level_at(envp, edge_key(envp, e), t, False, buf_t, buf_u)


@njit(cache=True)
def integrate_core(envp, e, t0, t1, buf_t, buf_u):
    """Exact integral of the rate of edge ``e`` over [t0, t1]."""
    if t1 <= t0:
        return 0.0
    if envp[0] == 0:
        return static_rate(envp, e) * (t1 - t0)
    ek = edge_key(envp, e)
    nu = envp[5]
    L = envp[6]
    lvl = dyn_level_at(envp, ek, t0, False, buf_t, buf_u)
    j = cell_of(t0, L)
    cur = t0
    acc = 0.0
    while True:
        n = cell_events(ek, j, nu, L, buf_t, buf_u)
        for i in range(n):
            ev = buf_t[i]
            if ev <= cur:
                continue
            if ev >= t1:
                return acc + lvl * (t1 - cur)
            acc += lvl * (ev - cur)
            cur = ev
            lvl = level_of(buf_u[i], envp[2], envp[7], envp[8], envp[9], envp[10])
        if (j + 1) * L >= t1:
            return acc + lvl * (t1 - cur)
        j += 1


@njit(cache=True)
def ring_forward(envp, e, t, target, t_cap, buf_t, buf_u):
    """Time r >= t with integral of the rate over [t, r] equal to ``target``.

    Returns +inf when r would exceed ``t_cap``.
    """
    if envp[0] == 0:
        r = t + target / static_rate(envp, e)
        return r if r <= t_cap else np.inf
    ek = edge_key(envp, e)
    nu = envp[5]
    L = envp[6]
    lvl = dyn_level_at(envp, ek, t, False, buf_t, buf_u)
    j = cell_of(t, L)
    cur = t
    rem = target
    while True:
        n = cell_events(ek, j, nu, L, buf_t, buf_u)
        for i in range(n):
            ev = buf_t[i]
            if ev <= cur:
                continue
            seg = lvl * (ev - cur)
            if seg >= rem:
                r = cur + rem / lvl
                return r if r <= t_cap else np.inf
            rem -= seg
            cur = ev
            if cur > t_cap:
                return np.inf
            lvl = level_of(buf_u[i], envp[2], envp[7], envp[8], envp[9], envp[10])
        end = (j + 1) * L
        if end > t_cap:
            r = cur + rem / lvl
            return r if r <= t_cap else np.inf
        j += 1


@njit(cache=True)
def ring_backward(envp, e, t, target, t_floor, buf_t, buf_u):
    """Time r <= t with integral of the rate over [r, t] equal to ``target``.

    Returns -inf when r would fall below ``t_floor``.
    """
    if envp[0] == 0:
        r = t - target / static_rate(envp, e)
        return r if r >= t_floor else -np.inf
    ek = edge_key(envp, e)
    nu = envp[5]
    L = envp[6]
    j = cell_of(t, L)
    cur = t
    rem = target
    while True:
        n = cell_events(ek, j, nu, L, buf_t, buf_u)
        for i in range(n - 1, -1, -1):
            ev = buf_t[i]
            if ev >= cur:
                continue
            lvl = level_of(buf_u[i], envp[2], envp[7], envp[8], envp[9], envp[10])
            seg = lvl * (cur - ev)
            if seg >= rem:
                r = cur - rem / lvl
                return r if r >= t_floor else -np.inf
            rem -= seg
            cur = ev
            if cur < t_floor:
                return -np.inf
        j -= 1


@njit(cache=True)
def edge_changes(envp, e, t0, t1, buf_t, buf_u, out_t, out_v):
    """Initial level at t0 and the level changes in (t0, t1).

    Writes change times/new levels into ``out_t``/``out_v`` and returns
    (initial_level, count).  Refreshes that keep the level are dropped.
    """
    if envp[0] == 0:
        return static_rate(envp, e), 0
    ek = edge_key(envp, e)
    nu = envp[5]
    L = envp[6]
    lvl0 = dyn_level_at(envp, ek, t0, False, buf_t, buf_u)
    lvl = lvl0
    j = cell_of(t0, L)
    m = 0
    while j * L < t1:
        n = cell_events(ek, j, nu, L, buf_t, buf_u)
        for i in range(n):
            ev = buf_t[i]
            if ev <= t0 or ev >= t1:
                continue
            v = level_of(buf_u[i], envp[2], envp[7], envp[8], envp[9], envp[10])
            if v != lvl:
                if m >= out_t.shape[0]:
                    return lvl0, -1
                out_t[m] = ev
                out_v[m] = v
                m += 1
                lvl = v
        j += 1
    return lvl0, m


@njit(cache=True)
def materialize(envp, e_lo, e_hi, t0, t1, cap):
    """CSR arrays (ptr, starts, values) for edges e_lo..e_hi over [t0, t1)."""
    n_e = e_hi - e_lo + 1
    buf_t = np.empty(BUF)
    buf_u = np.empty(BUF)
    ptr = np.zeros(n_e + 1, dtype=np.int64)
    starts = np.empty(cap)
    vals = np.empty(cap)
    tmp_t = np.empty(cap)
    tmp_v = np.empty(cap)
    pos = 0
    for k in range(n_e):
        lvl0, m = edge_changes(envp, e_lo + k, t0, t1, buf_t, buf_u, tmp_t, tmp_v)
        if m < 0 or pos + m + 1 > cap:
            return ptr, starts, vals, False
        starts[pos] = t0
        vals[pos] = lvl0
        pos += 1
        for i in range(m):
            starts[pos] = tmp_t[i]
            vals[pos] = tmp_v[i]
            pos += 1
        ptr[k + 1] = pos
    return ptr, starts[:pos], vals[:pos], True
