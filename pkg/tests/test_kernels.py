import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabinfer import _kernels


def object_matmul(a, b):
    return np.array(a.astype(object).dot(b.astype(object)) % 2**64, dtype=np.uint64)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32))
def test_ring_matmul_paths_agree_with_big_integer_oracle(m, n, p, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2**64 - 1, (m, n), dtype=np.uint64, endpoint=True)
    b = rng.integers(0, 2**64 - 1, (n, p), dtype=np.uint64, endpoint=True)
    expected = object_matmul(a, b)
    assert np.array_equal(_kernels.ring_matmul_numpy(a, b), expected)
    assert np.array_equal(_kernels.ring_matmul(a, b), expected)
    if _kernels.HAVE_NUMBA:
        assert np.array_equal(_kernels.ring_matmul_numba(a, b), expected)


def test_ring_matmul_shape_check():
    with pytest.raises(ValueError):
        _kernels.ring_matmul(np.zeros((2, 3), np.uint64), np.zeros((2, 3), np.uint64))


@pytest.mark.parametrize("degrees", [-10.0, -3.3, 0.0, 7.5, 90.0])
def test_rotate_paths_agree(degrees):
    img = np.random.default_rng(2).uniform(size=(9, 7, 3))
    ref = _kernels._bilinear_rotate_py(img, math.radians(degrees))
    assert np.allclose(_kernels.bilinear_rotate_numpy(img, math.radians(degrees)), ref, atol=1e-12)
    assert np.allclose(_kernels.bilinear_rotate(img, math.radians(degrees)), ref, atol=1e-12)


def test_disable_flag_selects_numpy():
    code = "from collabinfer import _kernels as k; print(k.USE_NUMBA)"
    env = dict(os.environ, COLLABINFER_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
