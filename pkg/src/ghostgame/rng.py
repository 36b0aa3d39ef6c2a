"""Counter-based random numbers (Philox4x32-10).

A draw depends only on (seed, path, counter, stream), so any subset of paths can be
regenerated in any order or chunking with bitwise-identical results.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

_MASK = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_TWO32 = 4294967296.0

STREAM_PATH = 0
STREAM_DRAWS = 1
STREAM_REFINE = 2


@njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32 with 10 rounds; all arguments are uint64 holding 32-bit words."""
    for i in range(10):
        if i > 0:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> np.uint64(32)
        lo0 = p0 & _MASK
        hi1 = p1 >> np.uint64(32)
        lo1 = p1 & _MASK
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@njit(cache=True, inline="always")
def seed_key(seed):
    s = np.uint64(seed)
    return s & _MASK, (s >> np.uint64(32)) & _MASK


@njit(cache=True, inline="always")
def uniforms4(seed, path, counter, stream):
    """Four uniforms in (0, 1) with 32-bit resolution."""
    k0, k1 = seed_key(seed)
    c = np.uint64(counter)
    w0, w1, w2, w3 = philox4x32(
        c & _MASK, np.uint64(path) & _MASK, np.uint64(stream) & _MASK, (c >> np.uint64(32)) & _MASK, k0, k1
    )
    return (
        (float(w0) + 0.5) / _TWO32,
        (float(w1) + 0.5) / _TWO32,
        (float(w2) + 0.5) / _TWO32,
        (float(w3) + 0.5) / _TWO32,
    )


@njit(cache=True, inline="always")
def box_muller(u1, u2):
    rad = math.sqrt(-2.0 * math.log(u1))
    ang = 2.0 * math.pi * u2
    return rad * math.cos(ang), rad * math.sin(ang)


@njit(cache=True)
def uniform_block(seed, path_ids, stream):
    """Four uniforms per path from counter 0 of `stream`, shape (n, 4)."""
    n = path_ids.size
    out = np.empty((n, 4))
    for i in range(n):
        a, b, c, d = uniforms4(seed, path_ids[i], 0, stream)
        out[i, 0] = a
        out[i, 1] = b
        out[i, 2] = c
        out[i, 3] = d
    return out


@njit(cache=True)
def raw_words(c0, c1, c2, c3, k0, k1):
    """Philox output words as a uint64 array (for known-answer tests)."""
    w = philox4x32(np.uint64(c0), np.uint64(c1), np.uint64(c2), np.uint64(c3), np.uint64(k0), np.uint64(k1))
    out = np.empty(4, dtype=np.uint64)
    out[0], out[1], out[2], out[3] = w
    return out
