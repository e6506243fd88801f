import numpy as np
import pytest
from scipy import sparse

from paleorecon._core import ArrowheadCholesky
from paleorecon.exceptions import SingularPrecisionError


def arrowhead(rng, n_local, n_dense, bandwidth):
    diagonals = [np.full(n_local, 4.0 + bandwidth)]
    offsets = [0]
    for k in range(1, bandwidth + 1):
        band = rng.uniform(-0.5, 0.5, n_local - k)
        diagonals += [band, band]
        offsets += [-k, k]
    local = sparse.diags(diagonals, offsets).toarray()
    coupling = rng.normal(0.0, 0.1, (n_local, n_dense))
    dense = np.eye(n_dense) * 3.0 + 0.1
    return np.block([[local, coupling], [coupling.T, dense]])


@pytest.mark.parametrize("bandwidth", [0, 1, 3])
def test_matches_dense_linear_algebra(rng, bandwidth):
    Q = arrowhead(rng, 25, 6, bandwidth)
    factor = ArrowheadCholesky(sparse.csr_matrix(Q), 25)
    inverse = np.linalg.inv(Q)

    assert factor.bandwidth == bandwidth
    assert factor.logdet == pytest.approx(np.linalg.slogdet(Q)[1], abs=1e-10)

    b = rng.normal(size=31)
    np.testing.assert_allclose(factor.solve(b), np.linalg.solve(Q, b), atol=1e-10)
    B = rng.normal(size=(31, 4))
    np.testing.assert_allclose(factor.solve(B), np.linalg.solve(Q, B), atol=1e-10)

    np.testing.assert_allclose(factor.marginal_variances(), np.diag(inverse), atol=1e-10)
    np.testing.assert_allclose(factor.covariance(), inverse, atol=1e-10)


def test_solve_lt_gives_inverse_covariance(rng):
    Q = arrowhead(rng, 12, 3, 2)
    factor = ArrowheadCholesky(sparse.csr_matrix(Q), 12)
    X = factor.solve_lt(np.eye(15))
    np.testing.assert_allclose(X @ X.T, np.linalg.inv(Q), atol=1e-10)


def test_dense_only_and_local_only():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    dense = ArrowheadCholesky(sparse.csr_matrix(Q), 0)
    assert dense.logdet == pytest.approx(np.log(1.75))

    local = ArrowheadCholesky(sparse.diags([1.0, 4.0]), 2)
    np.testing.assert_allclose(local.marginal_variances(), [1.0, 0.25])
    np.testing.assert_allclose(local.solve(np.array([1.0, 1.0])), [1.0, 0.25])


def test_not_positive_definite():
    Q = sparse.csr_matrix(np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(SingularPrecisionError):
        ArrowheadCholesky(Q, 1)


def test_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ArrowheadCholesky(sparse.identity(3), 4)
    factor = ArrowheadCholesky(sparse.identity(3), 1)
    with pytest.raises(ValueError):
        factor.solve(np.ones(2))
