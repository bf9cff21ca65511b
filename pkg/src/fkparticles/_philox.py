"""Philox4x64-10 for compiled code, bit-compatible with ``numpy.random.Philox``.

A stream is ``(key[2], counter[4], buffer[4], buffer position)``. The counter is
bumped before each block of four outputs, exactly as numpy does, so a stream
created here with counter ``[0, 0, 0, purpose]`` reproduces the raw output of
``np.random.Philox(key=k, counter=[0, 0, 0, purpose])``.
"""

from __future__ import annotations

import numpy as np
from numba import njit, uint64

M0 = np.uint64(0xD2E7470EE14C6C93)
M1 = np.uint64(0xCA5A826395121157)
W0 = np.uint64(0x9E3779B97F4A7C15)
W1 = np.uint64(0xBB67AE8584CAA73B)
MASK32 = np.uint64(0xFFFFFFFF)
S32 = np.uint64(32)
S11 = np.uint64(11)
ONE = np.uint64(1)
ZERO = np.uint64(0)
TWO_M53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def _mulhilo(a, b):
    a_lo = a & MASK32
    a_hi = a >> S32
    b_lo = b & MASK32
    b_hi = b >> S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    mid = (p0 >> S32) + (p1 & MASK32) + (p2 & MASK32)
    hi = p3 + (p1 >> S32) + (p2 >> S32) + (mid >> S32)
    lo = a * b
    return hi, lo


@njit(cache=True, inline="always")
def philox_block(c0, c1, c2, c3, k0, k1):
    for r in range(10):
        if r > 0:
            k0 = k0 + W0
            k1 = k1 + W1
        hi0, lo0 = _mulhilo(M0, c0)
        hi1, lo1 = _mulhilo(M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@njit(cache=True)
def new_streams(key, n_purposes):
    """Counters and buffers for ``n_purposes`` substreams under a 64-bit key."""
    ctr = np.zeros((n_purposes, 4), dtype=np.uint64)
    buf = np.zeros((n_purposes, 4), dtype=np.uint64)
    pos = np.full(n_purposes, 4, dtype=np.int64)
    for p in range(n_purposes):
        ctr[p, 3] = uint64(p)
    keys = np.zeros(2, dtype=np.uint64)
    keys[0] = key
    return keys, ctr, buf, pos


@njit(cache=True, inline="always")
def next_u64(keys, ctr, buf, pos, p):
    if pos[p] < 4:
        out = buf[p, pos[p]]
        pos[p] += 1
        return out
    ctr[p, 0] += ONE
    if ctr[p, 0] == ZERO:
        ctr[p, 1] += ONE
        if ctr[p, 1] == ZERO:
            ctr[p, 2] += ONE
            if ctr[p, 2] == ZERO:
                ctr[p, 3] += ONE
    b0, b1, b2, b3 = philox_block(ctr[p, 0], ctr[p, 1], ctr[p, 2], ctr[p, 3], keys[0], keys[1])
    buf[p, 0] = b0
    buf[p, 1] = b1
    buf[p, 2] = b2
    buf[p, 3] = b3
    pos[p] = 1
    return b0


@njit(cache=True, inline="always")
def next_double(keys, ctr, buf, pos, p):
    """Uniform on [0, 1) with 53 bits, same mapping as ``Generator.random``."""
    return float(next_u64(keys, ctr, buf, pos, p) >> S11) * TWO_M53


@njit(cache=True, inline="always")
def next_exponential(keys, ctr, buf, pos, p, rate):
    return -np.log1p(-next_double(keys, ctr, buf, pos, p)) / rate


SPLIT_WORD = np.uint64(0xFFFFFFFFFFFFFFFF)  # top counter word reserved for key splitting


@njit(cache=True)
def split_keys(base, count):
    """Child keys ``0..count-1`` of ``base``: first output of block ``(r, 0, 0, SPLIT_WORD)``."""
    out = np.empty(count, dtype=np.uint64)
    for r in range(count):
        out[r] = philox_block(uint64(r), ZERO, ZERO, SPLIT_WORD, base, ZERO)[0]
    return out
