"""Counter-based random numbers (splitmix64 finalizer).

Every random quantity in the package is a pure function of a 64-bit key and
an integer counter, so values can be addressed directly by position instead
of being consumed from a sequential stream.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def mix64(z):
    z = np.uint64(z)
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def subkey(key, a):
    """Key of the child stream labelled by the signed integer ``a``."""
    return mix64(np.uint64(key) ^ mix64(np.uint64(np.int64(a)) + _GOLDEN))


@njit(cache=True, inline="always")
def uniform(key, counter):
    """Uniform variate in the open interval (0, 1)."""
    h = mix64(np.uint64(key) + (np.uint64(np.int64(counter)) + np.uint64(1)) * _GOLDEN)
    return (np.float64(h >> _S11) + 0.5) * _INV53


@njit(cache=True, inline="always")
def exponential(key, counter):
    return -np.log(uniform(key, counter))


_MASK = 0xFFFFFFFFFFFFFFFF


def _mix64_py(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive(master_seed: int, *labels: int) -> int:
    """Child seed for the substream addressed by ``labels`` (same map as ``subkey``)."""
    k = int(master_seed) & _MASK
    for lab in labels:
        k = _mix64_py(k ^ _mix64_py(((int(lab) & _MASK) + 0x9E3779B97F4A7C15) & _MASK))
    return k


# stream labels used across modules
TAG_ENV = 1
TAG_PATH = 2
TAG_DUAL = 3
TAG_ENV_PER_PATH = 4
TAG_REPLICATE = 5
TAG_STATIC = 11
TAG_CELL = 12
