"""Counter-based random streams keyed by (seed, domain, iteration, particle).

Every draw is a pure function of its key and counter, so particle updates
give the same numbers in any order, on any number of threads, and in both
the compiled and the pure-Python kernels.
"""
from __future__ import annotations

import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

DOMAIN_SUBSAMPLE = 0x5B5A
DOMAIN_NOISE = 0x4E01

_TWO_M53 = 1.0 / (1 << 53)


def mix(z: int) -> int:
    """splitmix64 finalizer applied to ``z + golden``."""
    z = (z + GOLDEN) & MASK
    z = ((z ^ (z >> 30)) * _M1) & MASK
    z = ((z ^ (z >> 27)) * _M2) & MASK
    return z ^ (z >> 31)


def iteration_key(seed: int, domain: int, iteration: int) -> int:
    return mix(mix(mix(seed & MASK) ^ domain) ^ (iteration & MASK))


def particle_key(key: int, particle: int) -> int:
    return mix(key ^ particle)


def uniform(pkey: int, counter: int) -> float:
    """Uniform double in [0, 1) with 53 random bits."""
    return (mix((pkey + counter) & MASK) >> 11) * _TWO_M53


# -- vectorized versions (uint64 arithmetic wraps modulo 2^64) --

def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def uniform_block(key: int, n_particles: int, n_draws: int) -> np.ndarray:
    """``(n_particles, n_draws)`` uniforms; row j equals ``uniform(particle_key(key, j), .)``."""
    with np.errstate(over="ignore"):
        pk = _mix_array(np.uint64(key) ^ np.arange(n_particles, dtype=np.uint64))
        z = _mix_array(pk[:, None] + np.arange(n_draws, dtype=np.uint64)[None, :])
    return (z >> np.uint64(11)).astype(np.float64) * _TWO_M53


def normal_block(seed: int, iteration: int, n_particles: int, dim: int) -> np.ndarray:
    """Standard normal ``(n_particles, dim)`` draws via Box-Muller."""
    half = (dim + 1) // 2
    u = uniform_block(iteration_key(seed, DOMAIN_NOISE, iteration), n_particles, 2 * half)
    u1 = 1.0 - u[:, 0::2]  # in (0, 1]
    u2 = u[:, 1::2]
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    z = np.empty((n_particles, 2 * half))
    z[:, 0::2] = rad * np.cos(ang)
    z[:, 1::2] = rad * np.sin(ang)
    return z[:, :dim]
