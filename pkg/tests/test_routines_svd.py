import numpy as np
import pytest

from matserve import wire
from matserve.engine import EngineError, RoutineError

from util import run_routine_dense


def svd(A, k, p=2, **params):
    (U, V), scalars = run_routine_dense(p, "truncated_svd", [A], {"k": k, **params})
    S = np.array([scalars[f"sigma.{j}"] for j in range(k)])
    return U, S, V, scalars


def fix_signs(V):
    """Apply the deterministic sign convention to an oracle's vectors."""
    V = V.copy()
    for j in range(V.shape[1]):
        i = np.argmax(np.abs(V[:, j]))
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    return V


def test_embedded_diagonal_top_two():
    A = np.zeros((10, 3))
    A[:3, :3] = np.diag([3.0, 2.0, 1.0])
    U, S, V, _ = svd(A, 2, p=2)
    np.testing.assert_allclose(S, [3.0, 2.0], atol=1e-10)
    assert U.shape == (10, 2) and V.shape == (3, 2)
    np.testing.assert_allclose(np.abs(V[:2, :2]), np.eye(2), atol=1e-9)


def test_rank_one_matrix():
    rng = np.random.default_rng(21)
    u = rng.standard_normal(40)
    v = rng.standard_normal(6)
    A = np.outer(u, v)
    U, S, V, _ = svd(A, 1, p=3)
    np.testing.assert_allclose(S[0], np.linalg.norm(u) * np.linalg.norm(v), rtol=1e-12)
    v_ref = fix_signs((v / np.linalg.norm(v)).reshape(-1, 1))
    np.testing.assert_allclose(V, v_ref, atol=1e-10)
    u_unit = u / np.linalg.norm(u)
    assert min(
        np.linalg.norm(U[:, 0] - u_unit), np.linalg.norm(U[:, 0] + u_unit)
    ) < 1e-10


def test_random_500x80_matches_dense_oracle():
    rng = np.random.default_rng(500)
    A = rng.standard_normal((500, 80))
    k = 20
    U, S, V, _ = svd(A, k, p=4, max_subspace=80)
    expected = np.linalg.svd(A, compute_uv=False)[:k]
    np.testing.assert_allclose(S, expected, rtol=1e-8)
    assert np.all(np.diff(S) <= 1e-12)  # descending
    assert np.linalg.norm(A @ V - U * S) <= 1e-8 * np.linalg.norm(A)
    assert np.linalg.norm(V.T @ V - np.eye(k)) <= 1e-8
    assert np.linalg.norm(U.T @ U - np.eye(k)) <= 1e-8


def test_rayleigh_quotients_match_sigma_squared():
    rng = np.random.default_rng(77)
    A = rng.standard_normal((200, 40))
    k = 8
    _, S, V, _ = svd(A, k, p=2, max_subspace=40)
    G = A.T @ A
    for j in range(k):
        rq = V[:, j] @ (G @ V[:, j])
        assert abs(rq - S[j] ** 2) <= 1e-8 * S[j] ** 2


def test_decaying_spectrum_converges_with_default_subspace():
    rng = np.random.default_rng(3)
    left = np.linalg.qr(rng.standard_normal((300, 30)))[0]
    right = np.linalg.qr(rng.standard_normal((60, 30)))[0]
    spectrum = 10.0 * 0.5 ** np.arange(30)
    A = (left * spectrum) @ right.T
    U, S, V, scalars = svd(A, 5, p=2)  # default max_subspace = max(2k, k+10)
    np.testing.assert_allclose(S, spectrum[:5], rtol=1e-8)
    assert scalars["basis"] <= 15


def test_invariant_across_worker_counts():
    rng = np.random.default_rng(31)
    A = rng.standard_normal((240, 50))
    results = {}
    for p in (1, 2, 4, 8):
        _, S, _, _ = svd(A, 10, p=p, max_subspace=50)
        results[p] = S
    for p in (2, 4, 8):
        np.testing.assert_allclose(results[p], results[1], rtol=1e-8)


def test_bit_reproducible_for_fixed_p_and_seed():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((100, 20))
    U1, S1, V1, _ = svd(A, 4, p=2, seed=5, max_subspace=20)
    U2, S2, V2, _ = svd(A, 4, p=2, seed=5, max_subspace=20)
    assert U1.tobytes() == U2.tobytes()
    assert V1.tobytes() == V2.tobytes()
    assert S1.tobytes() == S2.tobytes()


def test_tiny_singular_values_flagged_unreliable():
    rng = np.random.default_rng(14)
    u = rng.standard_normal(30)
    v = rng.standard_normal(5)
    A = np.outer(u, v)  # exact rank 1
    _, S, _, scalars = svd(A, 2, p=2)
    assert scalars["unreliable.0"] is False
    assert scalars["unreliable.1"] is True
    assert S[1] <= 1e-7 * S[0]


def test_k_too_large_is_schema_violation():
    with pytest.raises(EngineError) as err:
        svd(np.eye(4), 5, p=1)
    assert err.value.code == wire.ERR_SCHEMA_VIOLATION


def test_non_convergence_is_numerical_failure_with_residuals():
    rng = np.random.default_rng(99)
    # flat spectrum: interior Ritz values converge slowly
    A = rng.standard_normal((160, 120))
    with pytest.raises(RoutineError) as err:
        svd(A, 30, p=2, max_subspace=60, tol=1e-12)
    assert err.value.code == wire.ERR_NUMERICAL_FAILURE
    assert "residual" in str(err.value)
