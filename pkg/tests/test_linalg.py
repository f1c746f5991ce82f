import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from shapefilter.linalg import (
    SolverError,
    TripletBuffer,
    assemble,
    cg_solve,
    condition_number,
    solve_spd,
    spmv,
    symmetry_error,
    write_matrix_market,
)


def random_spd(n, seed=0):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    return B @ B.T + n * np.eye(n)


def test_assemble_sums_duplicates():
    tb = TripletBuffer()
    tb.add([0, 0], [0, 0], [1.0, 2.0])
    A = assemble(tb, 2)
    assert A.nnz == 1 and A[0, 0] == 3.0


def test_assemble_empty_and_symmetric():
    assert assemble(TripletBuffer(), 3).nnz == 0
    tb = TripletBuffer()
    tb.add([0, 1], [1, 0], [2.5, 2.5])
    assert symmetry_error(assemble(tb, 2)) == 0.0


def test_assemble_index_out_of_range():
    tb = TripletBuffer()
    tb.add([3], [0], [1.0])
    with pytest.raises(IndexError):
        assemble(tb, 3)


def test_spmv():
    v = np.arange(4.0)
    assert np.array_equal(spmv(sp.identity(4, format="csr"), v), v)
    assert np.array_equal(spmv(sp.csr_matrix((4, 4)), v), np.zeros(4))
    A = random_spd(8)
    x = np.random.default_rng(1).standard_normal(8)
    assert np.allclose(spmv(sp.csr_matrix(A), x), A @ x, rtol=1e-14, atol=0)
    with pytest.raises(ValueError):
        spmv(sp.identity(4), np.zeros(3))


def test_spmv_symmetric_spot_checks():
    A = sp.csr_matrix(random_spd(10, 3))
    rng = np.random.default_rng(0)
    for _ in range(5):
        i, j = rng.integers(0, 10, 2)
        ei, ej = np.eye(10)[i], np.eye(10)[j]
        assert spmv(A, ei) @ ej == pytest.approx(spmv(A, ej) @ ei, rel=1e-15)


def test_cg_identity_one_iteration():
    b = np.array([1.0, -2.0, 3.0])
    x, info = cg_solve(sp.identity(3, format="csr"), b)
    assert info.converged and info.iterations == 1
    assert np.allclose(x, b)


def test_cg_diagonal():
    x = solve_spd(sp.diags([2.0, 3.0]).tocsr(), np.array([2.0, 3.0]))
    assert np.allclose(x, [1.0, 1.0], atol=1e-12)


def test_cg_random_spd_vs_dense():
    A = random_spd(20, 5)
    b = np.random.default_rng(2).standard_normal(20)
    x, info = cg_solve(sp.csr_matrix(A), b, tol=1e-10)
    assert info.converged
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)
    assert np.allclose(x, np.linalg.solve(A, b), rtol=1e-8)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 30), k=st.integers(1, 4), seed=st.integers(0, 1000))
def test_cg_residual_contract_multi_rhs(n, k, seed):
    A = sp.csr_matrix(random_spd(n, seed))
    B = np.random.default_rng(seed).standard_normal((n, k))
    X, info = cg_solve(A, B)
    assert info.converged
    res = np.linalg.norm(A @ X - B, axis=0) / np.linalg.norm(B, axis=0)
    assert np.all(res <= 1e-10 * 1.0001)


def test_cg_deterministic():
    A = sp.csr_matrix(random_spd(15, 7))
    b = np.ones(15)
    assert np.array_equal(cg_solve(A, b)[0], cg_solve(A, b)[0])


def test_cg_non_convergence_flag_and_raise():
    A = sp.csr_matrix(random_spd(30, 1))
    b = np.ones(30)
    x, info = cg_solve(A, b, max_iter=2)
    assert not info.converged and info.iterations == 2
    with pytest.raises(SolverError):
        solve_spd(A, b, max_iter=2)


def test_cg_indefinite_breakdown():
    A = sp.diags([1.0, -1.0]).tocsr()
    with pytest.raises(SolverError):
        cg_solve(A, np.array([1.0, 1.0]), preconditioner=None)


def test_cg_zero_rhs():
    x, info = cg_solve(sp.identity(3, format="csr"), np.zeros(3))
    assert info.converged and not np.any(x)


def test_condition_numbers():
    assert condition_number(np.eye(5)) == pytest.approx(1.0)
    assert condition_number(np.diag([1.0, 4.0])) == pytest.approx(4.0)
    assert condition_number(7.5 * np.eye(4)) == pytest.approx(1.0)
    assert condition_number(np.diag([1.0, 0.0])) == np.inf


def test_condition_number_general_matrix_uses_singular_values():
    A = np.array([[1.0, 5.0], [0.0, 2.0]])
    s = np.linalg.svd(A, compute_uv=False)
    assert condition_number(A) == pytest.approx(s[0] / s[-1], rel=1e-12)


def test_condition_number_lanczos_within_5_percent():
    A = sp.csr_matrix(random_spd(200, 4))
    dense = condition_number(A, "dense")
    assert condition_number(A, "lanczos") == pytest.approx(dense, rel=0.05)
    G = sp.csr_matrix(np.triu(random_spd(60, 2)))
    assert condition_number(G, "lanczos", symmetric=False) == pytest.approx(
        condition_number(G.toarray(), symmetric=False), rel=0.05)


def test_matrix_market_dump(tmp_path):
    import scipy.io

    A = sp.csr_matrix(random_spd(5))
    write_matrix_market(A, tmp_path / "a.mtx")
    assert np.allclose(scipy.io.mmread(str(tmp_path / "a.mtx")).toarray(), A.toarray())
