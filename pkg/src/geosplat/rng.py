"""Counter-based random numbers.

Every random draw is a pure function of ``(seed, *counters)``, so results do
not depend on evaluation order or on how work is split between batches.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)


def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def hash_u64(seed, *counters):
    """SplitMix64 chain over the seed and any number of broadcastable counters."""
    with np.errstate(over="ignore"):
        h = _mix(np.asarray(seed, dtype=np.uint64) + _GOLDEN)
        for c in counters:
            c = np.asarray(c).astype(np.uint64)
            h = _mix(h ^ (c + _GOLDEN + (h << np.uint64(6)) + (h >> np.uint64(2))))
    return h


def uniform(seed, *counters):
    """Uniform floats in [0, 1) with 53 random bits."""
    return (hash_u64(seed, *counters) >> _S11).astype(np.float64) * (1.0 / 9007199254740992.0)


def normal(seed, *counters):
    """Standard normal draws via Box-Muller on two decorrelated uniform streams."""
    u1 = uniform(seed, *counters, 0x5EED1)
    u2 = uniform(seed, *counters, 0x5EED2)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
