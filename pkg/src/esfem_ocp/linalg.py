"""Sparse LDL^T factorizations of a family of matrices sharing one sparsity pattern.

Factorizations are computed with qdldl (AMD ordering). Only the numeric values
of the unit lower factor and the diagonal are kept per matrix; the pattern and
permutation are shared, which keeps a thousand factorizations of a surface
mesh system within a few hundred megabytes. Substitutions run in numba.
"""
from __future__ import annotations

import numba
import numpy as np
import qdldl
import scipy.sparse as sp


class FactorizationError(RuntimeError):
    pass


@numba.njit(cache=True)
def _ldl_solve(indptr, indices, data, d, perm, b):
    n = d.shape[0]
    x = np.empty(n)
    for i in range(n):
        x[i] = b[perm[i]]
    # (I + L) y = x, L strictly lower, CSC
    for j in range(n):
        xj = x[j]
        if xj != 0.0:
            for q in range(indptr[j], indptr[j + 1]):
                x[indices[q]] -= data[q] * xj
    for i in range(n):
        x[i] /= d[i]
    # (I + L)^T z = y
    for j in range(n - 1, -1, -1):
        s = x[j]
        for q in range(indptr[j], indptr[j + 1]):
            s -= data[q] * x[indices[q]]
        x[j] = s
    out = np.empty(n)
    for i in range(n):
        out[perm[i]] = x[i]
    return out


class LDLFactor:
    """LDL^T factorization of one symmetric positive definite sparse matrix."""

    __slots__ = ("pattern", "data", "d")

    def __init__(self, pattern, data, d):
        self.pattern = pattern
        self.data = data
        self.d = d

    def solve(self, b: np.ndarray) -> np.ndarray:
        indptr, indices, perm = self.pattern
        return _ldl_solve(indptr, indices, self.data, self.d, perm, np.ascontiguousarray(b, dtype=float))


class SharedPatternFactorizer:
    """Factorize many SPD matrices that share a sparsity pattern.

    The first matrix fixes the pattern and the fill-reducing ordering. Later
    matrices must have the same pattern; they are refactorized numerically.
    """

    def __init__(self):
        self._solver = None
        self._pattern = None
        self._a_pattern = None

    def factorize(self, matrix) -> LDLFactor:
        a = sp.csc_matrix(matrix)
        a.sort_indices()
        if self._solver is None:
            self._solver = qdldl.Solver(a)
            self._a_pattern = (a.indptr.copy(), a.indices.copy())
        else:
            if not (
                np.array_equal(a.indptr, self._a_pattern[0]) and np.array_equal(a.indices, self._a_pattern[1])
            ):
                raise FactorizationError("matrix pattern differs from the shared pattern")
            self._solver.update(a)
        lower, d, perm = self._solver.factors()
        if not np.all(d > 0):
            raise FactorizationError("matrix is not positive definite")
        lower = sp.csc_matrix(lower)
        if self._pattern is None:
            self._pattern = (
                lower.indptr.astype(np.int64),
                lower.indices.astype(np.int64),
                np.asarray(perm, dtype=np.int64),
            )
        elif lower.nnz != self._pattern[1].shape[0]:
            raise FactorizationError("factor pattern changed")
        return LDLFactor(self._pattern, np.array(lower.data, dtype=float), np.array(d, dtype=float))
