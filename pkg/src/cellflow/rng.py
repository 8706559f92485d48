"""Counter-based random numbers (Philox4x32-10) for reproducible parallel Monte Carlo.

Every draw is a pure function of ``(seed, path, step, stream)``: the 64-bit
seed is the Philox key, the counter packs the step index, a small stream id
and the 64-bit path id.  Nothing depends on scheduling or thread count.

Counter layout (four 32-bit words)::

    c0 = step & 0xFFFFFFFF
    c1 = ((step >> 32) & 0xFFFF) | (stream << 16)
    c2 = path & 0xFFFFFFFF
    c3 = path >> 32
"""

import math

import numpy as np
from numba import njit

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_MASK16 = np.uint64(0xFFFF)
_S32 = np.uint64(32)
_S16 = np.uint64(16)
_S5 = np.uint64(5)
_S6 = np.uint64(6)
_TWO26 = np.uint64(67108864)
_INV53 = 1.0 / 9007199254740992.0

# stream ids used across the package
STREAM_STEP = 0
STREAM_START = 1
STREAM_VERTEX = 2
STREAM_EXTRA = 3
# Brownian-bridge midpoints: STREAM_BRIDGE | heap index of the dyadic sub-interval
STREAM_BRIDGE = 0x8000


@njit(inline="always", cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on uint64-held 32-bit words; returns four words."""
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = ((p1 >> _S32) ^ c1 ^ k0) & _MASK32
        n2 = ((p0 >> _S32) ^ c3 ^ k1) & _MASK32
        c1 = p1 & _MASK32
        c3 = p0 & _MASK32
        c0 = n0
        c2 = n2
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return c0, c1, c2, c3


@njit(inline="always", cache=True)
def _block(seed, path, step, stream):
    s = np.uint64(seed)
    p = np.uint64(path)
    n = np.uint64(step)
    c1 = ((n >> _S32) & _MASK16) | (np.uint64(stream) << _S16)
    return philox4x32(n & _MASK32, c1, p & _MASK32, p >> _S32, s & _MASK32, s >> _S32)


@njit(inline="always", cache=True)
def uniform_pair(seed, path, step, stream):
    """Two independent uniforms in (0, 1) with 53-bit resolution."""
    r0, r1, r2, r3 = _block(seed, path, step, stream)
    u1 = ((r0 >> _S5) * _TWO26 + (r1 >> _S6)) * _INV53 + 0.5 * _INV53
    u2 = ((r2 >> _S5) * _TWO26 + (r3 >> _S6)) * _INV53 + 0.5 * _INV53
    return u1, u2


@njit(inline="always", cache=True)
def normal_pair(seed, path, step, stream):
    """Two independent standard normals (Box-Muller on ``uniform_pair``)."""
    u1, u2 = uniform_pair(seed, path, step, stream)
    r = math.sqrt(-2.0 * math.log(u1))
    a = 2.0 * math.pi * u2
    return r * math.cos(a), r * math.sin(a)


@njit(cache=True)
def _fill_normals(seed, path, n, stream, out):
    for i in range(n):
        z0, z1 = normal_pair(seed, path, i, stream)
        out[2 * i] = z0
        out[2 * i + 1] = z1


@njit(cache=True)
def _fill_uniforms(seed, path, n, stream, out):
    for i in range(n):
        u0, u1 = uniform_pair(seed, path, i, stream)
        out[2 * i] = u0
        out[2 * i + 1] = u1


@njit(cache=True)
def _raw(c0, c1, c2, c3, k0, k1):
    return philox4x32(np.uint64(c0), np.uint64(c1), np.uint64(c2), np.uint64(c3),
                      np.uint64(k0), np.uint64(k1))


def philox_raw(counter, key):
    """Python entry point to the bare block function (used for known-answer tests)."""
    c = [int(v) & 0xFFFFFFFF for v in counter]
    k = [int(v) & 0xFFFFFFFF for v in key]
    return tuple(int(v) for v in _raw(c[0], c[1], c[2], c[3], k[0], k[1]))


def normals(seed, path, n, stream=STREAM_STEP):
    """``2*n`` standard normals for one (seed, path, stream), steps ``0..n-1``."""
    out = np.empty(2 * n)
    _fill_normals(seed, path, n, stream, out)
    return out


def uniforms(seed, path, n, stream=STREAM_STEP):
    out = np.empty(2 * n)
    _fill_uniforms(seed, path, n, stream, out)
    return out
