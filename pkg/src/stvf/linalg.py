"""Sparse symmetric matrices in CSR form and a Jacobi-preconditioned CG solver.

Everything in here is deliberately plain: matrices are immutable after
construction, products are assembled with deterministic numpy reductions, and
the solver reports its iteration count so callers can log it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np


class CgFailure(RuntimeError):
    """CG did not reach the requested tolerance within max_iter."""

    def __init__(self, iterations: int, residual: float, target: float):
        super().__init__(
            f"CG failed after {iterations} iterations: "
            f"residual {residual:.3e} > target {target:.3e}"
        )
        self.iterations = iterations
        self.residual = residual
        self.target = target


def kahan_sum(values) -> float:
    """Compensated sum (math.fsum): result independent of accumulation order."""
    return math.fsum(values)


@dataclass(frozen=True)
class SparseMatrix:
    """Compressed-row matrix with sorted, unique column indices per row."""

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray  # int64, length n_rows + 1
    col_indices: np.ndarray  # int64, length nnz
    values: np.ndarray       # float64, length nnz

    def __post_init__(self):
        offsets = np.asarray(self.row_offsets, dtype=np.int64)
        cols = np.asarray(self.col_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if offsets.shape != (self.n_rows + 1,):
            raise ValueError("row_offsets must have length n_rows + 1")
        if offsets[0] != 0 or offsets[-1] != len(vals) or np.any(np.diff(offsets) < 0):
            raise ValueError("row_offsets must be nondecreasing from 0 to nnz")
        if cols.shape != vals.shape:
            raise ValueError("col_indices and values must have equal length")
        if len(cols) and (cols.min() < 0 or cols.max() >= self.n_cols):
            raise ValueError("column index out of range")
        if len(cols) > 1:
            increasing = np.diff(cols) > 0
            row_starts = offsets[1:-1]
            row_starts = row_starts[(row_starts > 0) & (row_starts < len(cols))]
            increasing[row_starts - 1] = True
            if not np.all(increasing):
                raise ValueError("col_indices must be strictly increasing within rows")
        for f in (offsets, cols, vals):
            f.setflags(write=False)
        object.__setattr__(self, "row_offsets", offsets)
        object.__setattr__(self, "col_indices", cols)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_coo(cls, n_rows, n_cols, rows, cols, vals) -> "SparseMatrix":
        """Build CSR from triplets, summing duplicates.

        The sort is stable, so duplicate (i, j) contributions are accumulated in
        their original (element) order; symmetric assemblies therefore produce
        bitwise-identical values at (i, j) and (j, i).
        """
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if not (len(rows) == len(cols) == len(vals)):
            raise ValueError("rows, cols, vals must have equal length")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows):
            new_group = np.empty(len(rows), dtype=bool)
            new_group[0] = True
            new_group[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(new_group)
            summed = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
        else:
            summed = vals
        counts = np.bincount(rows, minlength=n_rows)
        offsets = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(n_rows, n_cols, offsets, cols, summed)

    @cached_property
    def _entry_rows(self) -> np.ndarray:
        """Row index of every stored entry (precomputed for spmv)."""
        return np.repeat(
            np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_offsets)
        )

    @property
    def nnz(self) -> int:
        return len(self.values)

    def diagonal(self) -> np.ndarray:
        diag = np.zeros(self.n_rows)
        on_diag = self.col_indices == self._entry_rows
        diag[self._entry_rows[on_diag]] = self.values[on_diag]
        return diag

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_rows, self.n_cols))
        dense[self._entry_rows, self.col_indices] = self.values
        return dense

    def restrict(self, keep) -> "SparseMatrix":
        """Submatrix on the index set `keep` (row/column elimination)."""
        keep = np.asarray(keep, dtype=np.int64)
        renumber = -np.ones(max(self.n_rows, self.n_cols), dtype=np.int64)
        renumber[keep] = np.arange(len(keep))
        rows = renumber[self._entry_rows]
        cols = renumber[self.col_indices]
        kept = (rows >= 0) & (cols >= 0)
        return SparseMatrix.from_coo(
            len(keep), len(keep), rows[kept], cols[kept], self.values[kept]
        )

    def with_values(self, values) -> "SparseMatrix":
        """Same sparsity pattern, new values (used for weighted re-assembly)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ValueError("value array does not match pattern")
        return SparseMatrix(
            self.n_rows, self.n_cols, self.row_offsets, self.col_indices, values
        )


def spmv(m: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """Exact sparse matrix-vector product."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.n_cols,):
        raise ValueError(f"dimension mismatch: matrix is {m.n_rows}x{m.n_cols}, "
                         f"vector has shape {x.shape}")
    return np.bincount(
        m._entry_rows, weights=m.values * x[m.col_indices], minlength=m.n_rows
    )


class CgResult(NamedTuple):
    x: np.ndarray
    iterations: int


def cg_solve(m, b, tol=1e-12, max_iter=None, x0=None, iterate_log=None) -> CgResult:
    """Jacobi-preconditioned conjugate gradient for SPD systems.

    Returns x with ||m x - b||_2 <= tol * ||b||_2. The recurrence residual is
    confirmed against the true residual before declaring convergence.
    `iterate_log`, if given, collects a copy of every iterate (for tests).

    Raises CgFailure when the tolerance is not met within max_iter.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (m.n_rows,):
        raise ValueError("right-hand side has wrong length")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter is None:
        max_iter = 10 * m.n_rows

    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return CgResult(np.zeros(m.n_rows), 0)
    target = tol * norm_b

    diag = m.diagonal()
    if np.any(diag <= 0):
        raise ValueError("matrix has nonpositive diagonal; not SPD")
    inv_diag = 1.0 / diag

    x = np.zeros(m.n_rows) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - spmv(m, x)
    if float(np.linalg.norm(r)) <= target:
        return CgResult(x, 0)

    z = inv_diag * r
    p = z.copy()
    rz = float(np.dot(r, z))
    residual = float(np.linalg.norm(r))
    for k in range(1, max_iter + 1):
        ap = spmv(m, p)
        pap = float(np.dot(p, ap))
        if pap <= 0:
            raise CgFailure(k, residual, target)
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        if iterate_log is not None:
            iterate_log.append(x.copy())
        residual = float(np.linalg.norm(r))
        if residual <= target:
            r_true = b - spmv(m, x)
            residual_true = float(np.linalg.norm(r_true))
            if residual_true <= target:
                return CgResult(x, k)
            r = r_true
            residual = residual_true
        z = inv_diag * r
        rz_next = float(np.dot(r, z))
        p = z + (rz_next / rz) * p
        rz = rz_next
    raise CgFailure(max_iter, residual, target)
