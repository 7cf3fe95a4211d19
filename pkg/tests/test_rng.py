import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numba import njit

from kramerslab import rng
from kramerslab.trig import sincos

# Known-answer vectors for Philox4x32-10.
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
]


@njit
def _compiled(c0, c1, c2, c3, k0, k1):
    return rng.philox4x32(c0, c1, c2, c3, k0, k1)


@pytest.mark.parametrize("ctr,key,expected", KAT)
def test_philox_known_answers(ctr, key, expected):
    assert rng.philox_reference(ctr, key) == expected
    assert tuple(int(x) for x in _compiled(*ctr, *key)) == expected


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 2**32 - 1), min_size=6, max_size=6))
def test_compiled_matches_reference(words):
    ref = rng.philox_reference(words[:4], words[4:])
    assert tuple(int(x) for x in _compiled(*words)) == ref


def test_normals_moments():
    z = rng.normals(7, np.arange(2000), np.arange(50), 4).ravel()
    assert abs(z.mean()) < 4 / math.sqrt(z.size)
    assert abs(z.var() - 1) < 5 * math.sqrt(2 / z.size)
    assert abs(np.mean(z ** 4) - 3) < 0.05


def test_normals_do_not_depend_on_batch():
    full = rng.normals(3, np.arange(10), np.arange(6), 3)
    part = rng.normals(3, np.array([7, 2]), np.array([5]), 3)
    np.testing.assert_array_equal(part[0, 0], full[7, 5])
    np.testing.assert_array_equal(part[1, 0], full[2, 5])


def test_streams_differ_by_tag_and_seed():
    a = rng.normals(1, [0], [0], 4, tag=rng.TAG_BROWNIAN)
    b = rng.normals(1, [0], [0], 4, tag=rng.TAG_MOMENTUM)
    c = rng.normals(2, [0], [0], 4, tag=rng.TAG_BROWNIAN)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)


def test_split_seed_rejects_out_of_range():
    with pytest.raises(ValueError):
        rng.split_seed(-1)
    with pytest.raises(ValueError):
        rng.split_seed(2**64)


def test_bootstrap_rng_reproducible():
    a = rng.bootstrap_rng(5, 1).integers(0, 100, 10)
    b = rng.bootstrap_rng(5, 1).integers(0, 100, 10)
    np.testing.assert_array_equal(a, b)


@settings(max_examples=300, deadline=None)
@given(st.floats(-2e5, 2e5, allow_nan=False))
def test_sincos_accuracy(x):
    s, c = sincos(x)
    assert abs(s - math.sin(x)) <= 4e-16 * max(1.0, abs(x) * 1e-5) + 2.3e-16
    assert abs(c - math.cos(x)) <= 4e-16 * max(1.0, abs(x) * 1e-5) + 2.3e-16
