import numpy as np
import pytest

from matserve import wire
from matserve.engine import EngineError, RoutineError

from util import run_routine_dense


def tsqr(A, p=2):
    (Q, R), _ = run_routine_dense(p, "tsqr", [A])
    return Q, R


def oracle_qr(A):
    """Sequential Householder QR with the same sign convention."""
    Q, R = np.linalg.qr(A, mode="reduced")
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs[None, :], R * signs[:, None]


def test_identity():
    Q, R = tsqr(np.eye(4), p=2)
    np.testing.assert_allclose(Q, np.eye(4), atol=1e-14)
    np.testing.assert_allclose(R, np.eye(4), atol=1e-14)


def test_orthogonal_columns_give_selector_q():
    A = np.array([[2.0, 0.0], [0.0, 0.0], [0.0, 3.0], [0.0, 0.0]])
    Q, R = tsqr(A, p=2)
    np.testing.assert_allclose(R, np.diag([2.0, 3.0]), atol=1e-14)
    expected_q = np.zeros((4, 2))
    expected_q[0, 0] = 1.0
    expected_q[2, 1] = 1.0
    np.testing.assert_allclose(Q, expected_q, atol=1e-14)


def test_random_300x12_matches_sequential_oracle():
    rng = np.random.default_rng(300)
    A = rng.standard_normal((300, 12))
    Q, R = tsqr(A, p=4)
    Qo, Ro = oracle_qr(A)
    scale = np.linalg.norm(A)
    assert np.linalg.norm(R - Ro) <= 1e-10 * scale
    assert np.linalg.norm(Q - Qo) <= 1e-10 * np.sqrt(A.shape[1])


def test_factorization_and_orthogonality_bounds():
    rng = np.random.default_rng(17)
    for shape, p in [((64, 8), 3), ((33, 5), 8), ((200, 30), 2)]:
        A = rng.standard_normal(shape)
        Q, R = tsqr(A, p=p)
        n = shape[1]
        assert np.linalg.norm(A - Q @ R) <= 1e-10 * np.linalg.norm(A)
        assert np.linalg.norm(Q.T @ Q - np.eye(n)) <= 1e-10
        assert np.all(np.diag(R) >= 0)
        assert np.allclose(R, np.triu(R))


def test_r_invariant_across_worker_counts():
    rng = np.random.default_rng(23)
    A = rng.standard_normal((120, 10))
    rs = {p: tsqr(A, p=p)[1] for p in (1, 2, 4, 8)}
    for p in (2, 4, 8):
        assert np.linalg.norm(rs[p] - rs[1]) <= 1e-8 * np.linalg.norm(rs[1])


def test_bit_reproducible():
    rng = np.random.default_rng(29)
    A = rng.standard_normal((50, 6))
    q1, r1 = tsqr(A, p=3)
    q2, r2 = tsqr(A, p=3)
    assert q1.tobytes() == q2.tobytes() and r1.tobytes() == r2.tobytes()


def test_more_workers_than_rows():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((5, 3))
    Q, R = tsqr(A, p=8)
    assert np.linalg.norm(A - Q @ R) <= 1e-10 * np.linalg.norm(A)


def test_wide_matrix_is_schema_violation():
    with pytest.raises(EngineError) as err:
        tsqr(np.ones((3, 5)), p=2)
    assert err.value.code == wire.ERR_SCHEMA_VIOLATION


def test_rank_deficient_is_numerical_failure():
    A = np.ones((10, 3))  # rank 1
    with pytest.raises(RoutineError) as err:
        tsqr(A, p=2)
    assert err.value.code == wire.ERR_NUMERICAL_FAILURE
