"""Compiled uniformization sweeps over a window of sites.

Two sweep directions are supported:

* ``up``: time increases, the vector evolves with the dual-walk generator
  (L f)(x) = b(x) [f(x+1) + f(x-1) - 2 f(x)];
* ``down``: time decreases, the vector evolves with the transpose
  (L+ g)(y) = b(y+1) g(y+1) + b(y-1) g(y-1) - 2 b(y) g(y).

Sites outside the window are absorbing (values there are zero).  Vectors may
be split into jump-count classes, in which case a jump moves mass from class
j to class j+1 and the top class overflows out of the stack.

On each slice with constant rates the exponential is applied by
uniformization, exp(dt Q) = sum_k pi_k(Lam dt) P^k with P = I + Q/Lam, and all
time integrals over a slice reduce to closed-form scalar weights on the same
powers P^k v.
"""

import math

import numpy as np
from numba import njit

from . import _envcore as core

LAM_DT_MAX = 24.0
ERR_TERMS = 1


@njit(cache=True, nogil=True)
def _apply(up, b, lam, src, dst, nj, split):
    """dst = P src (stack-aware).  Returns the mass that leaves the stack."""
    W = b.shape[0]
    lost = 0.0
    for j in range(nj):
        jin = j - 1 if split else j
        for x in range(W):
            val = (1.0 - 2.0 * b[x] / lam) * src[j, x]
            if jin >= 0:
                if up:
                    s = 0.0
                    if x + 1 < W:
                        s += src[jin, x + 1]
                    if x > 0:
                        s += src[jin, x - 1]
                    val += b[x] / lam * s
                else:
                    s = 0.0
                    if x + 1 < W:
                        s += b[x + 1] * src[jin, x + 1]
                    if x > 0:
                        s += b[x - 1] * src[jin, x - 1]
                    val += s / lam
            dst[j, x] = val
        if not up:
            if split and j == nj - 1:
                for x in range(W):
                    lost += 2.0 * b[x] * src[j, x] / lam
            else:
                lost += (b[0] * src[j, 0] + b[W - 1] * src[j, W - 1]) / lam
    return lost


@njit(cache=True, nogil=True)
def _weights(lam, dt, eps, tol, kmax_cap):
    """Poisson weights and slice integrals for one sub-slice.

    pi_k    = exp(-lam dt) (lam dt)^k / k!
    gam_k   = int_0^dt pi_k(r) dr
    alpha_k = eps int_0^dt exp(-eps r) pi_k(r) dr
    beta_k  = int_0^dt exp(eps r) alpha_k(r) dr
    """
    z = lam * dt
    z2 = (lam + eps) * dt
    zz = max(z, z2)
    kmax = int(zz + 12.0 * math.sqrt(zz) + 40.0)
    if kmax > kmax_cap:
        kmax = kmax_cap
    pi = np.zeros(kmax + 1)
    gam = np.zeros(kmax + 1)
    alpha = np.zeros(kmax + 1)
    beta = np.zeros(kmax + 1)
    p = math.exp(-z)
    q = math.exp(-z2)
    cum_p = 0.0
    cum_q = 0.0
    ratio = 1.0  # (lam / (lam + eps))^k
    K = -1
    for k in range(kmax + 1):
        if k > 0:
            p *= z / k
            q *= z2 / k
            ratio *= lam / (lam + eps)
        cum_p += p
        cum_q += q
        pi[k] = p
        gam[k] = max(0.0, 1.0 - cum_p) / lam
        if eps > 0.0:
            a = eps / (lam + eps) * ratio * max(0.0, 1.0 - cum_q)
            alpha[k] = a
            beta[k] = math.exp(eps * dt) * a / eps - gam[k]
        if 1.0 - cum_p < tol and 1.0 - cum_q < tol and k >= 1:
            K = k
            break
    return pi, gam, alpha, beta, K


@njit(cache=True, nogil=True)
def _block_events(envp, e_lo, W, t_lo, t_hi, buf_t, buf_u, ev_t, ev_s, ev_b, ev_a):
    """Level changes with t_lo <= time < t_hi.  Returns count (or -1 on overflow)."""
    n_sites = 1 if envp[1] == 1 else W
    m = 0
    nu = envp[5]
    L = envp[6]
    for s in range(n_sites):
        ek = core.edge_key(envp, e_lo + s)
        lvl = core.dyn_level_at(envp, ek, t_lo, True, buf_t, buf_u)
        j = core.cell_of(t_lo, L)
        while j * L < t_hi:
            n = core.cell_events(ek, j, nu, L, buf_t, buf_u)
            for i in range(n):
                ev = buf_t[i]
                if ev < t_lo or ev >= t_hi:
                    continue
                v = core.level_of(buf_u[i], envp[2], envp[7], envp[8], envp[9], envp[10])
                if v != lvl:
                    if m >= ev_t.shape[0]:
                        return -1
                    ev_t[m] = ev
                    ev_s[m] = -1 if envp[1] == 1 else s
                    ev_b[m] = lvl
                    ev_a[m] = v
                    m += 1
                    lvl = v
            j += 1
    return m


@njit(cache=True, nogil=True)
def _rates_at(envp, e_lo, W, t, strict, out):
    buf_t = np.empty(core.BUF)
    buf_u = np.empty(core.BUF)
    for s in range(W):
        if envp[0] == 0:
            out[s] = core.static_rate(envp, e_lo + s)
        elif envp[1] == 1 and s > 0:
            out[s] = out[0]
        else:
            out[s] = core.dyn_level_at(envp, core.edge_key(envp, e_lo + s), t, strict, buf_t, buf_u)


@njit(cache=True, nogil=True)
def sweep(envp, up, e_lo, W, t_a, t_b, V0, split, eps, source, origin, rec_times,
          rec_lo, rec_hi, tol, want_g, coarse):
    """Run one sweep over [t_a, t_b] (base time).

    coarse > 0 replaces every dynamic rate by its exact average over the cells
    [k coarse, (k+1) coarse) instead of slicing at each level change.

    up=True starts from V0 at t_a; up=False starts from V0 at t_b.  Returns
    (status, recV, recG, rec_mass, acc, final_V, n_slices, max_terms).

    recV[r]  : class-summed vector on sites rec_lo..rec_hi at rec_times[r]
    recG[r]  : (down only) int_{t}^{t_b} w(s) b_s(x) F(s, x) ds with
               w(s) = exp(-eps (s - origin)) (w = 1 when eps = 0)
    rec_mass : (down only, no source) bookkeeping mass, i.e. initial mass
               minus everything that left the stack
    acc[j]   : (up only) int eps exp(-eps (u - origin)) sum_x V_j(u, x) du
    """
    nj = V0.shape[0]
    nrec = rec_times.shape[0]
    nr_sites = rec_hi - rec_lo + 1
    recV = np.zeros((nrec, nr_sites))
    recG = np.zeros((nrec, nr_sites))
    rec_mass = np.zeros(nrec)
    acc = np.zeros(nj)
    V = V0.copy()
    cur = np.empty((nj, W))
    nxt = np.empty((nj, W))
    newV = np.empty((nj, W))
    accg = np.empty(W)
    G = np.zeros(W)
    b = np.empty(W)
    U0 = np.zeros((nj, W))
    if source:
        for x in range(W):
            U0[0, x] = 1.0
    mass = 0.0
    for j in range(nj):
        for x in range(W):
            mass += V[j, x]
    buf_t = np.empty(core.BUF)
    buf_u = np.empty(core.BUF)
    dynamic = envp[0] == 1
    averaged = dynamic and coarse > 0.0
    # block bookkeeping; averaged blocks are aligned to the coarse grid
    blk_len = 8.0 * envp[6]
    if averaged:
        blk_len = coarse * math.ceil(blk_len / coarse)
    cap = 16 * (W + 1) * 64 + 1024
    ev_t = np.empty(cap)
    ev_s = np.empty(cap, dtype=np.int64)
    ev_b = np.empty(cap)
    ev_a = np.empty(cap)
    order = np.empty(0, dtype=np.int64)
    n_ev = 0
    ei = 0
    if up:
        _rates_at(envp, e_lo, W, t_a, False, b)
        now = t_a
        ri = 0
        blk_end = t_a
    else:
        _rates_at(envp, e_lo, W, t_b, True, b)
        now = t_b
        ri = nrec - 1
        blk_end = t_b
    bc = b.copy()
    last = np.empty(W)
    area = np.zeros(W)
    n_slices = 0
    max_terms = 0
    while True:
        # refill events for the next block
        if dynamic and ((up and ei >= n_ev and blk_end < t_b) or ((not up) and ei >= n_ev and blk_end > t_a)):
            if up:
                lo = blk_end
                hi = lo + blk_len
                if averaged:
                    hi = (math.floor(lo / blk_len) + 1.0) * blk_len
                    if hi <= lo + 1e-12 * max(1.0, abs(lo)):
                        hi += blk_len
                hi = min(t_b, hi)
            else:
                hi = blk_end
                lo = hi - blk_len
                if averaged:
                    lo = (math.ceil(hi / blk_len) - 1.0) * blk_len
                    if lo >= hi - 1e-12 * max(1.0, abs(hi)):
                        lo -= blk_len
                lo = max(t_a, lo)
            while True:
                n_ev = _block_events(envp, e_lo, W, lo, hi, buf_t, buf_u, ev_t, ev_s, ev_b, ev_a)
                if n_ev >= 0:
                    break
                cap *= 2
                ev_t = np.empty(cap)
                ev_s = np.empty(cap, dtype=np.int64)
                ev_b = np.empty(cap)
                ev_a = np.empty(cap)
            order = np.argsort(ev_t[:n_ev], kind="mergesort")
            if not up:
                order = order[::-1].copy()
            ei = 0
            blk_end = hi if up else lo
        # next stopping time
        if up:
            nxt_t = t_b
            if dynamic and ei < n_ev and not averaged:
                nxt_t = min(nxt_t, ev_t[order[ei]])
            elif dynamic:
                nxt_t = min(nxt_t, blk_end)
            if ri < nrec:
                nxt_t = min(nxt_t, rec_times[ri])
            if averaged:
                g = (math.floor(now / coarse) + 1.0) * coarse
                if g <= now + 1e-12 * max(1.0, abs(now)):
                    g += coarse
                nxt_t = min(nxt_t, g)
            dt = nxt_t - now
        else:
            nxt_t = t_a
            if dynamic and ei < n_ev and not averaged:
                nxt_t = max(nxt_t, ev_t[order[ei]])
            elif dynamic:
                nxt_t = max(nxt_t, blk_end)
            if ri >= 0:
                nxt_t = max(nxt_t, rec_times[ri])
            if averaged:
                g = (math.ceil(now / coarse) - 1.0) * coarse
                if g >= now - 1e-12 * max(1.0, abs(now)):
                    g -= coarse
                nxt_t = max(nxt_t, g)
            dt = now - nxt_t
        if averaged and dt > 0.0:
            # exact time average of each rate over the slice
            for x in range(W):
                area[x] = 0.0
                last[x] = now
            while ei < n_ev:
                k = order[ei]
                ev = ev_t[k]
                if (up and ev >= nxt_t) or ((not up) and ev < nxt_t):
                    break
                sx = ev_s[k]
                val = ev_a[k] if up else ev_b[k]
                if sx < 0:
                    for x in range(W):
                        area[x] += bc[x] * abs(ev - last[x])
                        last[x] = ev
                        bc[x] = val
                else:
                    area[sx] += bc[sx] * abs(ev - last[sx])
                    last[sx] = ev
                    bc[sx] = val
                ei += 1
            for x in range(W):
                b[x] = (area[x] + bc[x] * abs(nxt_t - last[x])) / dt
        # propagate across [now, nxt_t]
        if dt > 0.0:
            bmax = 0.0
            for x in range(W):
                if b[x] > bmax:
                    bmax = b[x]
            lam = 2.0 * bmax if bmax > 0.0 else 1.0
            nsub = int(math.ceil(lam * dt / LAM_DT_MAX))
            if nsub < 1:
                nsub = 1
            h = dt / nsub
            pi, gam, alpha, beta, K = _weights(lam, h, eps, tol, 100000)
            if K < 0:
                return ERR_TERMS, recV, recG, rec_mass, acc, V, n_slices, max_terms
            if K > max_terms:
                max_terms = K
            decay = math.exp(-eps * h)
            for sub in range(nsub):
                n_slices += 1
                if up:
                    u_a = now + sub * h
                else:
                    t_top = now - sub * h
                # propagate V
                for j in range(nj):
                    for x in range(W):
                        cur[j, x] = V[j, x]
                        newV[j, x] = 0.0
                if want_g:
                    for x in range(W):
                        accg[x] = 0.0
                lost_cum = 0.0
                m_pred = 0.0
                for k in range(K + 1):
                    c = pi[k] * (decay if (not up) else 1.0)
                    for j in range(nj):
                        for x in range(W):
                            newV[j, x] += c * cur[j, x]
                    if want_g:
                        for j in range(nj):
                            for x in range(W):
                                accg[x] += gam[k] * cur[j, x]
                    if up and eps > 0.0:
                        for j in range(nj):
                            sj = 0.0
                            for x in range(W):
                                sj += cur[j, x]
                            acc[j] += math.exp(-eps * (u_a - origin)) * alpha[k] * sj
                    m_pred += pi[k] * (mass - lost_cum)
                    if k < K:
                        lost_cum += _apply(up, b, lam, cur, nxt, nj, split)
                        tmp = cur
                        cur = nxt
                        nxt = tmp
                if (not up) and source and eps > 0.0:
                    for j in range(nj):
                        for x in range(W):
                            cur[j, x] = U0[j, x]
                    for k in range(K + 1):
                        for j in range(nj):
                            for x in range(W):
                                newV[j, x] += alpha[k] * cur[j, x]
                        if want_g:
                            for j in range(nj):
                                for x in range(W):
                                    accg[x] += beta[k] * cur[j, x]
                        if k < K:
                            _apply(up, b, lam, cur, nxt, nj, split)
                            tmp = cur
                            cur = nxt
                            nxt = tmp
                if want_g and not up:
                    wb = math.exp(-eps * (t_top - origin)) if eps > 0.0 else 1.0
                    for x in range(W):
                        G[x] += wb * b[x] * accg[x]
                for j in range(nj):
                    for x in range(W):
                        V[j, x] = newV[j, x]
                mass = m_pred
        now = nxt_t
        # records at this time
        if up:
            while ri < nrec and rec_times[ri] <= now:
                for x in range(nr_sites):
                    s = 0.0
                    for j in range(nj):
                        s += V[j, rec_lo + x]
                    recV[ri, x] = s
                rec_mass[ri] = mass
                ri += 1
        else:
            while ri >= 0 and rec_times[ri] >= now:
                for x in range(nr_sites):
                    s = 0.0
                    for j in range(nj):
                        s += V[j, rec_lo + x]
                    recV[ri, x] = s
                    recG[ri, x] = G[rec_lo + x]
                rec_mass[ri] = mass
                ri -= 1
        # apply events at this time
        if averaged:
            for x in range(W):
                b[x] = bc[x]
        elif dynamic:
            while ei < n_ev and ev_t[order[ei]] == now:
                k = order[ei]
                s = ev_s[k]
                val = ev_a[k] if up else ev_b[k]
                if s < 0:
                    for x in range(W):
                        b[x] = val
                else:
                    b[s] = val
                ei += 1
        if up and now >= t_b:
            break
        if (not up) and now <= t_a:
            break
    return 0, recV, recG, rec_mass, acc, V, n_slices, max_terms
