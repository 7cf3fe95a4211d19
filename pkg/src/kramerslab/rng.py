"""Counter-based random numbers (Philox4x32-10).

Every Gaussian draw is a pure function of ``(seed, trajectory, step, block, tag)``,
so increments can be regenerated anywhere, in any order, by any thread.

Counter layout (four 32-bit words)::

    c0 = step          (coarse step / attempt index)
    c1 = block         (flat index // 4 inside the step)
    c2 = trajectory id
    c3 = stream tag    (what the numbers are used for)

The 64-bit master seed is split into the two 32-bit key words.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from .trig import sincos

MASK32 = 0xFFFFFFFF
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(MASK32)
_SHIFT = np.uint64(32)

# stream tags
TAG_BROWNIAN = 0
TAG_MOMENTUM = 1
TAG_POSITION = 2
TAG_ACCEPT = 3
TAG_BURNIN = 4

_INV32 = 1.0 / 4294967296.0
_TWO_PI = 2.0 * math.pi


def split_seed(seed: int) -> tuple[int, int]:
    """Split a 64-bit seed into the two Philox key words."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return seed & MASK32, (seed >> 32) & MASK32


@njit(cache=True, nogil=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten-round Philox4x32 on uint64 words holding 32-bit values."""
    c0 = np.uint64(c0) & _MASK
    c1 = np.uint64(c1) & _MASK
    c2 = np.uint64(c2) & _MASK
    c3 = np.uint64(c3) & _MASK
    k0 = np.uint64(k0) & _MASK
    k1 = np.uint64(k1) & _MASK
    for i in range(10):
        if i > 0:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _SHIFT
        lo0 = p0 & _MASK
        hi1 = p1 >> _SHIFT
        lo1 = p1 & _MASK
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@njit(cache=True, nogil=True, inline="always")
def normal4(c0, c1, c2, c3, k0, k1, out, offset):
    """Write four standard normals (Box-Muller on one Philox block) at ``out[offset:offset+4]``."""
    x0, x1, x2, x3 = philox4x32(c0, c1, c2, c3, k0, k1)
    u0 = (float(x0) + 0.5) * _INV32
    u1 = (float(x1) + 0.5) * _INV32
    u2 = (float(x2) + 0.5) * _INV32
    u3 = (float(x3) + 0.5) * _INV32
    r0 = math.sqrt(-2.0 * math.log(u0))
    r1 = math.sqrt(-2.0 * math.log(u2))
    s1, c1 = sincos(_TWO_PI * u1)
    s3, c3 = sincos(_TWO_PI * u3)
    out[offset] = r0 * c1
    out[offset + 1] = r0 * s1
    out[offset + 2] = r1 * c3
    out[offset + 3] = r1 * s3


@njit(cache=True, nogil=True)
def fill_normals(step, traj, tag, k0, k1, out, work):
    """Fill ``out`` with the normals of one (step, trajectory, tag) stream.

    ``work`` must have length ``>= 4 * ceil(len(out) / 4)``.
    """
    n = out.shape[0]
    nblocks = (n + 3) // 4
    for b in range(nblocks):
        normal4(step, b, traj, tag, k0, k1, work, 4 * b)
    for i in range(n):
        out[i] = work[i]


@njit(cache=True, nogil=True)
def uniform4(c0, c1, c2, c3, k0, k1, out, offset):
    x0, x1, x2, x3 = philox4x32(c0, c1, c2, c3, k0, k1)
    out[offset] = (float(x0) + 0.5) * _INV32
    out[offset + 1] = (float(x1) + 0.5) * _INV32
    out[offset + 2] = (float(x2) + 0.5) * _INV32
    out[offset + 3] = (float(x3) + 0.5) * _INV32


@njit(cache=True)
def _normals_batch(seed0, seed1, steps, traj_ids, tag, width, out):
    work = np.empty(4 * ((width + 3) // 4))
    row = np.empty(width)
    for i in range(traj_ids.shape[0]):
        for j in range(steps.shape[0]):
            fill_normals(steps[j], traj_ids[i], tag, seed0, seed1, row, work)
            for k in range(width):
                out[i, j, k] = row[k]


def normals(seed: int, traj_ids, steps, width: int, tag: int = TAG_BROWNIAN) -> np.ndarray:
    """Standard normals of shape ``(len(traj_ids), len(steps), width)``.

    Entry ``[i, j, k]`` is the ``k``-th number of the stream keyed by
    ``(seed, traj_ids[i], steps[j], tag)``; it does not depend on which other
    trajectories or steps are requested alongside.
    """
    k0, k1 = split_seed(seed)
    traj_ids = np.ascontiguousarray(traj_ids, dtype=np.int64)
    steps = np.ascontiguousarray(steps, dtype=np.int64)
    out = np.empty((traj_ids.shape[0], steps.shape[0], int(width)))
    _normals_batch(k0, k1, steps, traj_ids, int(tag), int(width), out)
    return out


def philox_reference(counter, key) -> tuple[int, int, int, int]:
    """Plain-Python Philox4x32-10, used to cross-check the compiled version."""
    c = [int(x) & MASK32 for x in counter]
    k = [int(x) & MASK32 for x in key]
    for i in range(10):
        if i > 0:
            k = [(k[0] + 0x9E3779B9) & MASK32, (k[1] + 0xBB67AE85) & MASK32]
        p0 = 0xD2511F53 * c[0]
        p1 = 0xCD9E8D57 * c[2]
        c = [((p1 >> 32) ^ c[1] ^ k[0]) & MASK32, p1 & MASK32,
             ((p0 >> 32) ^ c[3] ^ k[1]) & MASK32, p0 & MASK32]
    return tuple(c)


def bootstrap_rng(seed: int, tag: int = 0) -> np.random.Generator:
    """Generator for resampling statistics, derived from the master seed."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), 0x5EED0000 + int(tag)]))
