"""Small estimators shared by the experiments; every one returns an Estimate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float
    n: int

    def to_dict(self) -> dict:
        return {"value": self.value, "se": self.se, "n": self.n}

    def within(self, target: float, rtol: float) -> bool:
        return abs(self.value - target) <= rtol * abs(target)

    def zscore(self, target: float = 0.0) -> float:
        if self.se > 0:
            return (self.value - target) / self.se
        return 0.0 if self.value == target else math.inf


def mean_se(values) -> Estimate:
    v = np.asarray(values, dtype=np.float64).ravel()
    n = len(v)
    if n == 0:
        return Estimate(math.nan, math.nan, 0)
    se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return Estimate(float(v.mean()), se, n)


def variance_se(values) -> Estimate:
    """Sample variance with the large-sample standard error sqrt((m4 - s^4) / n)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    n = len(v)
    if n < 2:
        return Estimate(math.nan, math.nan, n)
    d = v - v.mean()
    s2 = float(d @ d / (n - 1))
    m4 = float(np.mean(d ** 4))
    return Estimate(s2, math.sqrt(max(m4 - s2 * s2, 0.0) / n), n)


def cluster_mean_se(groups: Sequence[np.ndarray]) -> Estimate:
    """Pooled mean of grouped observations; the SE treats groups as independent clusters."""
    arrs = [np.asarray(g, dtype=np.float64).ravel() for g in groups if len(g)]
    if not arrs:
        return Estimate(math.nan, math.nan, 0)
    allv = np.concatenate(arrs)
    n, mean = len(allv), float(allv.mean())
    if len(arrs) < 2:
        return mean_se(allv)
    g = len(arrs)
    resid = np.array([np.sum(a - mean) for a in arrs])
    se = math.sqrt(g / (g - 1) * float(resid @ resid)) / n
    return Estimate(mean, se, n)


def batch_means(values, n_batches: int = 10) -> Estimate:
    """Mean of a correlated sequence with a batch-means SE."""
    v = np.asarray(values, dtype=np.float64).ravel()
    n = len(v)
    k = min(n_batches, n // 2)
    if k < 2:
        return mean_se(v)
    m = n // k
    means = v[: m * k].reshape(k, m).mean(axis=1)
    return Estimate(float(v.mean()), float(means.std(ddof=1) / math.sqrt(k)), n)


def ratio(num: Estimate, scale: float) -> Estimate:
    return Estimate(num.value / scale, num.se / abs(scale), num.n)


def difference(a: Estimate, b: Estimate) -> Estimate:
    """a - b for independent estimates."""
    return Estimate(a.value - b.value, math.hypot(a.se, b.se), min(a.n, b.n))


def concordant(a: Estimate, b: Estimate, z: float) -> bool:
    return abs(a.value - b.value) <= z * math.hypot(a.se, b.se)


def ks_gaussian(samples, variance: float):
    """KS distance (and p-value) of the samples against N(0, variance)."""
    x = np.asarray(samples, dtype=np.float64)
    res = stats.kstest(x, stats.norm(scale=math.sqrt(variance)).cdf)
    return float(res.statistic), float(res.pvalue)


def strictly_decreasing(values) -> bool:
    v = list(values)
    return all(b < a for a, b in zip(v, v[1:]))


def strictly_increasing(values) -> bool:
    v = list(values)
    return all(b > a for a, b in zip(v, v[1:]))
