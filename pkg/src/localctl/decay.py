"""Localization diagnostics for inverse Gramians: ordered-magnitude curves,
row envelopes, and the geometric off-diagonal decay bound for banded SPD
matrices (rate set by the condition number and bandwidth)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import sparse
from .control import ControlProblem, gramian
from .sparse import fill_in


@dataclass(frozen=True)
class DecayBound:
    """|inverse_ij| <= c * lam ** |i - j| for a banded SPD matrix."""

    c: float
    lam: float
    beta: int
    kappa: float

    def envelope(self, distances) -> np.ndarray:
        d = np.asarray(distances, dtype=float)
        if self.lam == 0.0:
            return np.where(d == 0, self.c, 0.0)
        return self.c * self.lam ** d


def ordered_magnitudes(m) -> np.ndarray:
    """All |entries| in descending order (unstored entries count as zeros)."""
    if sp.issparse(m):
        m = m.tocsr()
        mags = np.sort(np.abs(m.data))[::-1]
        total = m.shape[0] * m.shape[1]
        return np.concatenate([mags, np.zeros(total - len(mags))])
    return np.sort(np.abs(np.asarray(m)).ravel())[::-1]


def bandwidth(m) -> int:
    """max |i - j| over numerically nonzero stored entries of a square matrix."""
    if m.shape[0] != m.shape[1]:
        raise ValueError("bandwidth is defined for square matrices")
    coo = sp.coo_matrix(m)
    live = coo.data != 0
    if not np.any(live):
        return 0
    return int(np.max(np.abs(coo.row[live] - coo.col[live])))


def demko_bound(w, mode="auto") -> DecayBound:
    """Off-diagonal decay certificate for the inverse of a banded SPD matrix.

    lam = ((sqrt(k)-1)/(sqrt(k)+1))**(2/beta) and
    c = ||w^-1||_2 * max(1, (sqrt(k)+1)**2 / (2k)), with k the condition
    number and beta the bandwidth of w.
    """
    lmin, lmax = sparse.extremal_eigenvalues(w, mode=mode)
    kappa = lmax / lmin
    beta = bandwidth(w)
    sqrt_k = np.sqrt(kappa)
    ratio = (sqrt_k - 1.0) / (sqrt_k + 1.0)
    lam = 0.0 if (beta == 0 or ratio == 0.0) else float(ratio ** (2.0 / beta))
    c = (1.0 / lmin) * max(1.0, (sqrt_k + 1.0) ** 2 / (2.0 * kappa))
    return DecayBound(c=float(c), lam=lam, beta=beta, kappa=float(kappa))


def decay_violations(w, inverse=None, mode="auto"):
    """Entries of the dense inverse violating the decay bound.

    Returns (bound, list of (i, j, bound_value, actual) tuples); the list is
    expected to be empty.
    """
    bound = demko_bound(w, mode=mode)
    if inverse is None:
        inverse = scipy.linalg.inv(sp.csr_matrix(w).toarray())
    n = inverse.shape[0]
    idx = np.arange(n)
    dist = np.abs(idx[:, None] - idx[None, :])
    limit = bound.envelope(dist)
    bad = np.argwhere(np.abs(inverse) > limit)
    rows = [
        (int(i), int(j), float(limit[i, j]), float(abs(inverse[i, j])))
        for i, j in bad
    ]
    return bound, rows


def row_envelope(m_inv, row) -> np.ndarray:
    """|entries| of one row of a dense inverse, per column."""
    m_inv = np.asarray(m_inv)
    if not 0 <= row < m_inv.shape[0]:
        raise ValueError(f"row {row} out of range")
    return np.abs(m_inv[row, :])


def distance_binned_maxima(values, distances) -> np.ndarray:
    """Max |value| per integer distance bin; raw envelopes oscillate within
    bands, so monotonicity checks use these."""
    values = np.abs(np.asarray(values, dtype=float))
    distances = np.asarray(distances, dtype=int)
    out = np.zeros(int(distances.max()) + 1)
    np.maximum.at(out, distances, values)
    return out


@dataclass(frozen=True)
class LocalizationRecord:
    """Dense-inversion localization diagnostics for one input preset."""

    preset: str
    kappa: float
    fill_in_percent: float
    ordered: np.ndarray
    envelope: np.ndarray
    middle_row: int


def localization_report(a, presets_b: dict, f, layout) -> dict:
    """Per-preset localization diagnostics (dense inversion path).

    presets_b maps a preset label to its input matrix. Feasible only while
    the state dimension stays within the dense-eigensolve limit.
    """
    records = {}
    for label, b in presets_b.items():
        ns = a.shape[0]
        if ns > sparse.DENSE_EIG_LIMIT:
            raise ValueError(
                f"dense localization analysis limited to {sparse.DENSE_EIG_LIMIT}"
            )
        p = ControlProblem(
            a=sparse.as_csr(a), b=sparse.as_csr(b), f=f,
            x0=np.zeros(ns), xd=np.zeros(ns), layout=layout,
        )
        w = gramian(p)
        lmin, lmax = sparse.extremal_eigenvalues(w, mode="exact")
        w_inv = scipy.linalg.inv(w.toarray())
        mid = ns // 2
        records[label] = LocalizationRecord(
            preset=label,
            kappa=float(lmax / lmin),
            fill_in_percent=fill_in(w),
            ordered=ordered_magnitudes(w_inv),
            envelope=row_envelope(w_inv, mid),
            middle_row=mid,
        )
    return records
