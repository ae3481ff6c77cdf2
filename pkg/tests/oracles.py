"""Independent reference computations used by the tests: dense matrix
exponentials over the piecewise-constant tracks of a realized window."""

import numpy as np
from scipy.linalg import expm
from scipy.special import ive


def _pieces(env, x_lo, x_hi, t0, t1):
    """Breakpoints in [t0, t1] across edges x_lo..x_hi-1 and the rate matrix on each piece."""
    cuts = {t0, t1}
    for x in range(x_lo, x_hi):
        bp = env.tracks[_edge(x)].breakpoints
        cuts.update(float(b) for b in bp if t0 < b < t1)
    cuts = sorted(cuts)
    out = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        m = 0.5 * (a + b)
        rates = np.array([env.rate_at(x, m) for x in range(x_lo, x_hi)])
        out.append((a, b, rates))
    return out


def _edge(x):
    from condsim.env import Edge
    return Edge(x)


def _generator(rates):
    """Killed generator of X on vertices x_lo..x_hi; edge k joins vertices k and k+1."""
    n = len(rates) + 1
    Q = np.zeros((n, n))
    for k, r in enumerate(rates):
        Q[k, k + 1] += r
        Q[k + 1, k] += r
        Q[k, k] -= r
        Q[k + 1, k + 1] -= r
    return Q


def _dual_generator(rates):
    """Killed generator of Y: vertex k left at rate 2 rates[k], to either side."""
    n = len(rates)
    Q = np.diag(-2.0 * np.asarray(rates))
    for k, r in enumerate(rates):
        if k + 1 < n:
            Q[k, k + 1] = r
        if k >= 1:
            Q[k, k - 1] = r
    return Q


def walk_law(env, x0, t, x_lo, x_hi):
    """Law of X_t started at (0, x0), killed outside [x_lo, x_hi]."""
    p = np.zeros(x_hi - x_lo + 1)
    p[x0 - x_lo] = 1.0
    for a, b, rates in _pieces(env, x_lo, x_hi, 0.0, t):
        p = p @ expm(_generator(rates) * (b - a))
    return p


def dual_law(env, y0, s, x_lo, x_hi):
    """Law of Y_s started at vertex y0 at view time 0 and run back to time -s."""
    p = np.zeros(x_hi - x_lo + 1)
    p[y0 - x_lo] = 1.0
    for a, b, rates in reversed(_pieces(env, x_lo, x_hi + 1, -s, 0.0)):
        p = p @ expm(_dual_generator(rates) * (b - a))
    return p


def skellam_pmf(k, mu):
    """P(N1 - N2 = k) for independent Poisson(mu) counts: e^{-2mu} I_k(2mu)."""
    return ive(np.abs(k), 2.0 * mu)
