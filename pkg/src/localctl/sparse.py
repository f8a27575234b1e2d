"""Sparse matrix kernels: products, pattern algebra, approximate inversion.

Matrices are `scipy.sparse` CSR/CSC matrices throughout; sparsity patterns
are boolean CSR matrices (True marks an allowed/stored position).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

# Dense symmetric eigensolves are allowed up to this dimension; above it the
# iterative extremal-eigenvalue path is used.
DENSE_EIG_LIMIT = 4096


class ConvergenceError(RuntimeError):
    """An iterative solve stopped before reaching its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NotPositiveDefiniteError(ValueError):
    """A matrix required to be symmetric positive definite is not."""


def as_csr(m) -> sp.csr_matrix:
    """Convert any array/sparse input to CSR without copying when possible."""
    if sp.issparse(m):
        return m.tocsr()
    return sp.csr_matrix(np.asarray(m, dtype=float))


def spgemm(a, b) -> sp.csr_matrix:
    """Exact sparse-sparse product a @ b (no numerical thresholding)."""
    a = as_csr(a)
    b = as_csr(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return (a @ b).tocsr()


def pattern_of(m) -> sp.csr_matrix:
    """Boolean pattern of the stored entries of m (stored zeros included)."""
    m = as_csr(m)
    p = sp.csr_matrix(
        (np.ones(m.nnz, dtype=bool), m.indices.copy(), m.indptr.copy()),
        shape=m.shape,
    )
    return p


def pattern_union(p, q) -> sp.csr_matrix:
    """Set union of two sparsity patterns of equal dimensions."""
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    u = p.astype(np.int8) + q.astype(np.int8)
    u = (u > 0).tocsr()
    u.sort_indices()
    return u


def pattern_product(p, q) -> sp.csr_matrix:
    """Structural product: positions reachable by p@q, immune to cancellation."""
    if p.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: {p.shape} @ {q.shape}")
    prod = p.astype(np.float64) @ q.astype(np.float64)
    out = (prod > 0).tocsr()
    out.sort_indices()
    return out


def pattern_positions(p) -> set:
    """Stored positions of a pattern as a set of (row, col) pairs."""
    c = p.tocoo()
    return set(zip(c.row.tolist(), c.col.tolist()))


def identity_pattern(n) -> sp.csr_matrix:
    return sp.identity(n, dtype=bool, format="csr")


def fill_in(m) -> float:
    """Percentage of entries that are stored and numerically nonzero."""
    if sp.issparse(m):
        nnz = int(np.count_nonzero(m.tocsr().data))
    else:
        nnz = int(np.count_nonzero(np.asarray(m)))
    rows, cols = m.shape
    return 100.0 * nnz / (rows * cols)


class SpaiResult(NamedTuple):
    x: sp.csr_matrix
    rank_deficient: np.ndarray  # bool flag per column


def spai(w, pattern, threads=1) -> SpaiResult:
    """Sparse approximate inverse of a symmetric matrix w.

    Minimizes ||I - w @ X||_F over matrices X whose stored entries are
    confined to `pattern`, solving one independent dense least-squares
    problem per column (Householder QR with column pivoting; rank-deficient
    local systems fall back to a minimum-norm SVD solve and are flagged).

    Parameters
    ----------
    w : sparse matrix, square symmetric
    pattern : boolean sparse matrix, same shape, no empty columns
    threads : int
        Worker threads for the per-column solves. Columns are independent,
        so the result does not depend on the execution order.

    Returns
    -------
    SpaiResult with the CSR approximate inverse and a per-column
    rank-deficiency flag array.
    """
    w = as_csr(w)
    n = w.shape[0]
    if w.shape[0] != w.shape[1]:
        raise ValueError(f"w must be square, got {w.shape}")
    if pattern.shape != w.shape:
        raise ValueError(f"pattern shape {pattern.shape} != w shape {w.shape}")
    pat = pattern.tocsc()
    if np.any(np.diff(pat.indptr) == 0):
        k = int(np.flatnonzero(np.diff(pat.indptr) == 0)[0])
        raise ValueError(f"pattern column {k} is empty")
    w_csc = w.tocsc()

    # Columns with identical allowed-row sets share one QR factorization
    # (with a full/dense pattern every column lands in a single group).
    groups: dict[bytes, list[int]] = {}
    col_rows: list[np.ndarray] = []
    for k in range(n):
        rows_k = pat.indices[pat.indptr[k]:pat.indptr[k + 1]]
        col_rows.append(rows_k)
        groups.setdefault(rows_k.tobytes(), []).append(k)

    flags = np.zeros(n, dtype=bool)
    results: list = [None] * n

    def solve_group(cols):
        j_rows = col_rows[cols[0]]
        # Row set of w touched by the allowed columns, plus the unit rows.
        touched = w_csc.indices[
            np.concatenate(
                [np.arange(w_csc.indptr[j], w_csc.indptr[j + 1]) for j in j_rows]
            )
        ] if len(j_rows) else np.empty(0, dtype=np.int64)
        i_rows = np.unique(np.concatenate([touched, np.asarray(cols)]))
        block = np.zeros((len(i_rows), len(j_rows)))
        for jj, j in enumerate(j_rows):
            lo, hi = w_csc.indptr[j], w_csc.indptr[j + 1]
            block[np.searchsorted(i_rows, w_csc.indices[lo:hi]), jj] = w_csc.data[lo:hi]
        rhs = np.zeros((len(i_rows), len(cols)))
        rhs[np.searchsorted(i_rows, cols), np.arange(len(cols))] = 1.0

        q, r, perm = scipy.linalg.qr(block, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        tol = max(block.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
        rank = int(np.count_nonzero(diag > tol))
        if rank == len(j_rows):
            sol = np.empty_like(rhs, shape=(len(j_rows), len(cols)))
            y = q.T @ rhs
            sol[perm] = scipy.linalg.solve_triangular(r, y, lower=False)
            deficient = False
        else:
            sol, _, _, _ = scipy.linalg.lstsq(block, rhs, lapack_driver="gelsd")
            deficient = True
        for idx, k in enumerate(cols):
            results[k] = sol[:, idx]
            flags[k] = deficient

    group_list = list(groups.values())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(solve_group, group_list))
    else:
        for cols in group_list:
            solve_group(cols)

    data = np.concatenate([results[k] for k in range(n)]) if n else np.empty(0)
    indices = np.concatenate(col_rows) if n else np.empty(0, dtype=np.int32)
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in col_rows])
    x = sp.csc_matrix((data, indices, indptr), shape=(n, n)).tocsr()
    return SpaiResult(x, flags)


def cg_solve(w, b, tol=1e-10, max_iters=None):
    """Conjugate-gradient solve of w @ y = b for symmetric positive definite w.

    Converges when ||w@y - b||_2 <= tol * ||b||_2 (verified against the true
    residual, not only the recurrence). Raises ConvergenceError carrying the
    achieved residual if max_iters is exhausted.
    """
    w = as_csr(w)
    b = np.asarray(b, dtype=float)
    n = w.shape[0]
    if w.shape[0] != w.shape[1] or b.shape != (n,):
        raise ValueError(f"dimension mismatch: w {w.shape}, b {b.shape}")
    if max_iters is None:
        max_iters = 10 * n + 50
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    x = np.zeros(n)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for _ in range(max_iters):
        if np.sqrt(rs) <= tol * bnorm:
            true_r = b - w @ x
            rs = float(true_r @ true_r)
            if np.sqrt(rs) <= tol * bnorm:
                return x
            r = true_r
            p = r.copy()
        q = w @ p
        pq = float(p @ q)
        if pq <= 0.0:
            raise NotPositiveDefiniteError(
                f"conjugate gradient breakdown (p^T w p = {pq:g})"
            )
        alpha = rs / pq
        x += alpha * p
        r -= alpha * q
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    achieved = float(np.linalg.norm(b - w @ x) / bnorm)
    if achieved <= tol:
        return x
    raise ConvergenceError(
        f"CG did not reach tol={tol:g} in {max_iters} iterations "
        f"(achieved relative residual {achieved:g})",
        residual=achieved,
        iterations=max_iters,
    )


def _lanczos_lambda_max(w, rtol=1e-4, max_steps=300, seed=0):
    """Largest eigenvalue of symmetric w by Lanczos with reorthogonalization."""
    n = w.shape[0]
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    qs = [q]
    alphas: list[float] = []
    betas: list[float] = []
    prev = 0.0
    for j in range(min(max_steps, n)):
        v = w @ qs[-1]
        if j > 0:
            v -= betas[-1] * qs[-2]
        a = float(qs[-1] @ v)
        alphas.append(a)
        v -= a * qs[-1]
        # full reorthogonalization keeps the tridiagonal model honest
        for u in qs:
            v -= (u @ v) * u
        beta = float(np.linalg.norm(v))
        est = float(
            scipy.linalg.eigvalsh_tridiagonal(np.array(alphas), np.array(betas))[-1]
        ) if betas else alphas[0]
        if beta < 1e-14 * max(abs(est), 1.0):
            return est
        if j >= 4 and abs(est - prev) <= rtol * abs(est):
            return est
        prev = est
        betas.append(beta)
        qs.append(v / beta)
    return prev


def _inverse_iteration_lambda_min(w, rtol=1e-4, max_steps=200, seed=1):
    """Smallest eigenvalue of SPD w by shift-free inverse iteration via CG."""
    n = w.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    prev = None
    for _ in range(max_steps):
        y = cg_solve(w, x, tol=1e-10)
        ynorm = np.linalg.norm(y)
        if ynorm == 0.0:
            raise NotPositiveDefiniteError("inverse iteration produced zero vector")
        x_new = y / ynorm
        lam = float(x_new @ (w @ x_new))  # Rayleigh quotient
        if prev is not None and abs(lam - prev) <= rtol * abs(lam):
            return lam
        prev = lam
        x = x_new
    return prev


def extremal_eigenvalues(w, mode="auto"):
    """(lambda_min, lambda_max) of a symmetric positive definite matrix.

    mode "exact" uses a dense symmetric eigendecomposition (dimension
    <= DENSE_EIG_LIMIT); "iterative" uses Lanczos for lambda_max and
    shift-free inverse iteration through cg_solve for lambda_min, with
    relative accuracy ~1e-3. "auto" picks by the dimension crossover.
    """
    w = as_csr(w)
    n = w.shape[0]
    if mode == "auto":
        mode = "exact" if n <= DENSE_EIG_LIMIT else "iterative"
    if mode == "exact":
        if n > DENSE_EIG_LIMIT:
            raise ValueError(
                f"exact mode limited to dimension {DENSE_EIG_LIMIT}, got {n}"
            )
        vals = scipy.linalg.eigvalsh(w.toarray())
        lmin, lmax = float(vals[0]), float(vals[-1])
    elif mode == "iterative":
        lmax = _lanczos_lambda_max(w)
        lmin = _inverse_iteration_lambda_min(w)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if lmin <= 0.0:
        raise NotPositiveDefiniteError(f"smallest eigenvalue {lmin:g} <= 0")
    return lmin, lmax


def condition_number(w, mode="auto") -> float:
    """Spectral condition number lambda_max / lambda_min of an SPD matrix."""
    lmin, lmax = extremal_eigenvalues(w, mode=mode)
    return lmax / lmin


def write_matrix_market(path, m):
    """Write a matrix in Matrix Market coordinate format (1-based, general)."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(m), field="real", symmetry="general")


def read_matrix_market(path) -> sp.csr_matrix:
    """Read a Matrix Market coordinate file as CSR."""
    return sp.coo_matrix(scipy.io.mmread(str(path))).tocsr()
