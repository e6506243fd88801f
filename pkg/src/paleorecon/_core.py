import logging

import numpy as np
from scipy import linalg, sparse

from .exceptions import SingularPrecisionError

logger = logging.getLogger(__name__)


class ArrowheadCholesky:
    """
    Cholesky factorization of a sparse symmetric positive definite precision
    whose leading `n_local` block is banded (the latent process, ordered by year)
    and whose trailing block is small and dense (fixed effects appended last).

    With Q = [[A, C], [C^T, E]] the factor is L = [[L_A, 0], [W^T, L_S]] where
    L_A is the banded factor of A, W = L_A^{-1} C and L_S is the dense factor of
    the Schur complement E - W^T W. Work is O(n b^2 + n m^2 + m^3).

    Parameters:
        precision (sparse matrix): Symmetric positive definite matrix (N x N).
        n_local (int): Size of the leading banded block.
    """

    def __init__(self, precision, n_local: int):
        q = sparse.csr_matrix(precision, dtype=float)
        size = q.shape[0]
        if q.shape != (size, size):
            raise ValueError(f"Precision must be square, got shape {q.shape}")
        if not 0 <= n_local <= size:
            raise ValueError(f"n_local={n_local} outside [0, {size}]")

        self.size = size
        self.n_local = int(n_local)
        self.n_dense = size - self.n_local
        n = self.n_local

        try:
            self._factor_local(q[:n, :n])
            coupling = q[:n, n:].toarray()
            self._w = self._solve_lower(coupling) if n else np.zeros((0, self.n_dense))
            schur = q[n:, n:].toarray() - self._w.T @ self._w
            self._dense = (
                linalg.cholesky(schur, lower=True)
                if self.n_dense
                else np.zeros((0, 0))
            )
        except (np.linalg.LinAlgError, linalg.LinAlgError, ValueError) as e:
            logger.error(f"Error factorizing precision of size {size}: {e}")
            raise SingularPrecisionError(f"Precision is not positive definite: {e}")

    def _factor_local(self, block):
        n = self.n_local
        if n == 0:
            self.bandwidth = 0
            self._band = np.ones((1, 0))
            self._upper = np.ones((1, 0))
            return

        coo = block.tocoo()
        self.bandwidth = int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0
        band = np.zeros((self.bandwidth + 1, n))
        for k in range(self.bandwidth + 1):
            band[k, : n - k] = block.diagonal(-k)
        self._band = linalg.cholesky_banded(band, lower=True)

        # upper storage of L_A^T for back substitution
        self._upper = np.zeros_like(self._band)
        for k in range(self.bandwidth + 1):
            self._upper[self.bandwidth - k, k:] = self._band[k, : n - k]

    def _solve_lower(self, b):
        if self.bandwidth == 0:
            return b / self._band[0].reshape((-1,) + (1,) * (b.ndim - 1))
        return linalg.solve_banded((self.bandwidth, 0), self._band, b)

    def _solve_upper(self, b):
        if self.bandwidth == 0:
            return b / self._band[0].reshape((-1,) + (1,) * (b.ndim - 1))
        return linalg.solve_banded((0, self.bandwidth), self._upper, b)

    def _triangular(self, b, transpose: bool = False):
        if self.n_dense == 0:
            return b
        return linalg.solve_triangular(
            self._dense, b, lower=True, trans="T" if transpose else "N"
        )

    def _split(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.size:
            raise ValueError(f"Right-hand side has {b.shape[0]} rows, expected {self.size}")
        return b[: self.n_local], b[self.n_local :]

    @property
    def logdet(self) -> float:
        """log-determinant of the factorized precision."""
        return float(
            2.0 * np.sum(np.log(self._band[0]))
            + 2.0 * np.sum(np.log(np.diag(self._dense)))
        )

    def solve(self, b) -> np.ndarray:
        """Solves Q x = b for a vector or a matrix of right-hand sides."""
        b_local, b_dense = self._split(b)
        z_local = self._solve_lower(b_local)
        z_dense = self._triangular(b_dense - self._w.T @ z_local)
        x_dense = self._triangular(z_dense, transpose=True)
        x_local = self._solve_upper(z_local - self._w @ x_dense)
        return np.concatenate([x_local, x_dense], axis=0)

    def solve_lt(self, z) -> np.ndarray:
        """Solves L^T x = z; for z ~ N(0, I) the result has covariance Q^{-1}."""
        z_local, z_dense = self._split(z)
        x_dense = self._triangular(z_dense, transpose=True)
        x_local = self._solve_upper(z_local - self._w @ x_dense)
        return np.concatenate([x_local, x_dense], axis=0)

    def marginal_variances(self) -> np.ndarray:
        """
        Diagonal of Q^{-1}, the column norms of L^{-1}.

        Returns:
            np.ndarray: Marginal variances, length N.
        """
        n, m = self.n_local, self.n_dense
        dense_inv = self._triangular(np.eye(m))
        var_dense = np.sum(dense_inv**2, axis=0)
        if n == 0:
            return var_dense

        if self.bandwidth == 0:
            local_sq = 1.0 / self._band[0] ** 2
            cross = dense_inv @ (self._w.T / self._band[0][None, :])
        else:
            local_inv = self._solve_lower(np.eye(n))
            local_sq = np.sum(local_inv**2, axis=0)
            cross = dense_inv @ (self._w.T @ local_inv)
        var_local = local_sq + np.sum(cross**2, axis=0)
        return np.concatenate([var_local, var_dense])

    def covariance(self) -> np.ndarray:
        """Dense Q^{-1}. Only meant for small problems and tests."""
        return self.solve(np.eye(self.size))
