import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stvf.fem_core import assemble_mass
from stvf.linalg import CgFailure, SparseMatrix, cg_solve, kahan_sum, spmv
from stvf.mesh import build_unit_square_mesh


def identity_matrix(n):
    idx = np.arange(n)
    return SparseMatrix(n, n, np.arange(n + 1), idx, np.ones(n))


def random_spd(rng, n):
    dense = rng.standard_normal((n, n))
    dense = dense @ dense.T + n * np.eye(n)
    rows, cols = np.nonzero(np.ones((n, n)))
    return SparseMatrix.from_coo(n, n, rows, cols, dense[rows, cols]), dense


def test_spmv_identity():
    m = identity_matrix(2)
    np.testing.assert_array_equal(spmv(m, np.array([3.0, -1.0])), [3.0, -1.0])


def test_spmv_zero_matrix():
    m = SparseMatrix(3, 3, np.zeros(4, dtype=int), np.array([], dtype=int), np.array([]))
    np.testing.assert_array_equal(spmv(m, np.array([1.0, 2.0, 3.0])), np.zeros(3))


def test_spmv_hand_case():
    m = SparseMatrix.from_coo(2, 2, [0, 0, 1, 1], [0, 1, 0, 1], [2.0, 1.0, 1.0, 2.0])
    np.testing.assert_array_equal(spmv(m, np.array([1.0, 1.0])), [3.0, 3.0])


def test_spmv_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        spmv(identity_matrix(2), np.ones(3))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_spmv_linearity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 12))
    m, _ = random_spd(rng, n)
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    alpha, beta = rng.standard_normal(2)
    left = spmv(m, alpha * x + beta * y)
    right = alpha * spmv(m, x) + beta * spmv(m, y)
    scale = np.abs(right).max() + 1.0
    assert np.abs(left - right).max() <= 1e-13 * scale


def test_from_coo_sums_duplicates():
    m = SparseMatrix.from_coo(2, 2, [0, 0, 1], [1, 1, 0], [2.0, 3.0, 4.0])
    assert m.nnz == 2
    dense = m.to_dense()
    np.testing.assert_array_equal(dense, [[0.0, 5.0], [4.0, 0.0]])


def test_invariant_validation():
    with pytest.raises(ValueError, match="nondecreasing"):
        SparseMatrix(2, 2, np.array([0, 2, 1]), np.array([0, 1]), np.ones(2))
    with pytest.raises(ValueError, match="strictly increasing"):
        SparseMatrix(1, 3, np.array([0, 2]), np.array([1, 1]), np.ones(2))
    with pytest.raises(ValueError, match="out of range"):
        SparseMatrix(1, 2, np.array([0, 1]), np.array([5]), np.ones(1))


def test_assembly_symmetry_is_exact(operators):
    # duplicate (i,j)/(j,i) sums accumulate in the same element order
    for n in (2, 8):
        m = assemble_mass(build_unit_square_mesh(n))
        dense = m.to_dense()
        assert np.array_equal(dense, dense.T)


def test_restrict_matches_dense(rng):
    m, dense = random_spd(rng, 7)
    keep = np.array([0, 2, 3, 6])
    np.testing.assert_array_equal(
        m.restrict(keep).to_dense(), dense[np.ix_(keep, keep)]
    )


def test_diagonal(rng):
    m, dense = random_spd(rng, 6)
    np.testing.assert_array_equal(m.diagonal(), np.diag(dense))


def test_cg_identity_single_iteration(rng):
    b = rng.standard_normal(5)
    x, iters = cg_solve(identity_matrix(5), b)
    assert iters == 1
    np.testing.assert_allclose(x, b, rtol=0, atol=1e-15)


def test_cg_zero_rhs():
    x, iters = cg_solve(identity_matrix(4), np.zeros(4))
    assert iters == 0
    np.testing.assert_array_equal(x, np.zeros(4))


def test_cg_against_dense_lu_on_mass(rng):
    # 3x3-node mesh: full mass matrix, 9 unknowns, dense LU as the oracle
    mesh = build_unit_square_mesh(2)
    m = assemble_mass(mesh)
    b = rng.standard_normal(mesh.n_nodes)
    x, _ = cg_solve(m, b, tol=1e-12)
    assert np.linalg.norm(spmv(m, x) - b) <= 1e-12 * np.linalg.norm(b)
    x_dense = np.linalg.solve(m.to_dense(), b)
    np.testing.assert_allclose(x, x_dense, rtol=0, atol=1e-9)


def test_cg_energy_norm_error_is_monotone(rng):
    mesh = build_unit_square_mesh(3)
    m = assemble_mass(mesh)
    dense = m.to_dense()
    b = rng.standard_normal(mesh.n_nodes)
    x_star = np.linalg.solve(dense, b)
    log = []
    cg_solve(m, b, tol=1e-13, iterate_log=log)
    errors = [float((x - x_star) @ dense @ (x - x_star)) for x in log]
    for prev, cur in zip(errors, errors[1:]):
        assert cur <= prev * (1 + 1e-12) + 1e-30


def test_cg_failure_reports_residual(rng):
    m, _ = random_spd(rng, 20)
    b = rng.standard_normal(20)
    with pytest.raises(CgFailure) as info:
        cg_solve(m, b, tol=1e-14, max_iter=1)
    assert info.value.iterations == 1
    assert info.value.residual > 0


def test_kahan_sum_order_independent(rng):
    values = rng.standard_normal(1000) * 10.0 ** rng.integers(-8, 8, size=1000)
    total = kahan_sum(values)
    assert kahan_sum(values[::-1]) == total
    assert kahan_sum(rng.permutation(values)) == total
