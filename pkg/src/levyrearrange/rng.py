"""Philox4x32-10 counter-based generator, compiled with numba.

Every random number is a pure function of ``(key, counter)``. The samplers
derive the counter from (draw index, time interval, path index, role), so a
path's randomness does not depend on how paths are split across workers.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

__all__ = ["philox4x32", "seed_key", "uniform_pair", "normal_pair", "poisson", "positive_poisson", "uniforms"]

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_TWO53 = 1.0 / 9007199254740992.0

ROLE_GAUSS = 0
ROLE_COUNT = 1
ROLE_JUMP = 2
ROLE_AUX = 3


@njit(cache=True, nogil=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on one 128-bit counter; returns four uint32 words."""
    x0, x1, x2, x3 = np.uint64(c0), np.uint64(c1), np.uint64(c2), np.uint64(c3)
    a, b = np.uint64(k0), np.uint64(k1)
    for _ in range(10):
        p0 = _M0 * x0
        p1 = _M1 * x2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK
        x0, x1, x2, x3 = (hi1 ^ x1 ^ a) & _MASK, lo1, (hi0 ^ x3 ^ b) & _MASK, lo0
        a = (a + np.uint64(_W0)) & _MASK
        b = (b + np.uint64(_W1)) & _MASK
    return np.uint32(x0), np.uint32(x1), np.uint32(x2), np.uint32(x3)


def seed_key(seed: int) -> tuple[int, int]:
    """Split a 64-bit seed into the two Philox key words."""
    s = int(seed) & 0xFFFFFFFFFFFFFFFF
    return s & 0xFFFFFFFF, s >> 32


@njit(cache=True, nogil=True, inline="always")
def _to_unit(hi, lo):
    # 53-bit float in [0, 1)
    return ((np.uint64(hi) >> np.uint64(5)) * np.uint64(67108864) + (np.uint64(lo) >> np.uint64(6))) * _TWO53


@njit(cache=True, nogil=True)
def uniform_pair(k0, k1, draw, interval, path, role):
    """Two independent uniforms on [0, 1) from one Philox block."""
    r0, r1, r2, r3 = philox4x32(draw, interval, path, role, k0, k1)
    return _to_unit(r0, r1), _to_unit(r2, r3)


@njit(cache=True, nogil=True)
def normal_pair(k0, k1, draw, interval, path, role):
    """Two independent standard normals by the polar method.

    A rejected point moves to the next block at ``draw + (j << 20)``.
    """
    j = 0
    while True:
        u1, u2 = uniform_pair(k0, k1, (draw + (j << 20)) & 0xFFFFFFFF, interval, path, role)
        v1 = 2.0 * u1 - 1.0
        v2 = 2.0 * u2 - 1.0
        s = v1 * v1 + v2 * v2
        if 0.0 < s < 1.0:
            f = math.sqrt(-2.0 * math.log(s) / s)
            return v1 * f, v2 * f
        j += 1


@njit(cache=True, nogil=True)
def poisson(mean, k0, k1, interval, path, role):
    """Poisson variate by sequential inversion of one uniform (mean <= 700)."""
    if mean <= 0.0:
        return 0
    u, _ = uniform_pair(k0, k1, 0, interval, path, role)
    p = math.exp(-mean)
    cdf = p
    k = 0
    while u >= cdf:
        k += 1
        p *= mean / k
        cdf += p
        if p == 0.0 and cdf < u:
            # cdf rounded short of u in the far tail
            break
    return k


@njit(cache=True, nogil=True)
def positive_poisson(mean, u):
    """Poisson variate conditioned on being >= 1, by inversion of ``u``."""
    p = mean * math.exp(-mean) / -math.expm1(-mean)
    cdf = p
    k = 1
    while u >= cdf:
        k += 1
        p *= mean / k
        cdf += p
        if p == 0.0 and cdf < u:
            break
    return k


@njit(cache=True)
def _uniforms(k0, k1, n, interval, path, role):
    out = np.empty(n)
    for i in range(0, n, 2):
        a, b = uniform_pair(k0, k1, i // 2, interval, path, role)
        out[i] = a
        if i + 1 < n:
            out[i + 1] = b
    return out


def uniforms(seed: int, n: int, interval: int = 0, path: int = 0, role: int = ROLE_AUX) -> np.ndarray:
    """``n`` uniforms from the stream addressed by ``(seed, interval, path, role)``."""
    k0, k1 = seed_key(seed)
    return _uniforms(k0, k1, int(n), interval, path, role)
