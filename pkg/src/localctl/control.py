"""Finite-horizon minimum-energy control of sparse linear network systems.

The centralized route solves the controllability-Gramian normal equations by
conjugate gradient; the localized route replaces the Gramian inverse with a
sparse approximate inverse, which confines each node's input computation to a
state information neighborhood (SIN).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from . import sparse
from .sparse import as_csr, cg_solve, fill_in, pattern_product, pattern_union, spai

TIME_MAJOR = "time-major"
NODE_MAJOR = "node-major"


class BlockLayout(NamedTuple):
    """Per-node state and input dimensions of a block-structured system.

    Uniform networks have n state and m input channels at every node; the
    power-grid model mixes two-channel generator nodes with one-channel bus
    nodes, so dimensions are kept per node.
    """

    state_dims: np.ndarray
    input_dims: np.ndarray

    @classmethod
    def uniform(cls, node_count, n, m):
        return cls(
            np.full(node_count, n, dtype=int), np.full(node_count, m, dtype=int)
        )

    @property
    def node_count(self) -> int:
        return len(self.state_dims)

    @property
    def state_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.state_dims)])

    @property
    def input_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.input_dims)])

    @property
    def total_state(self) -> int:
        return int(np.sum(self.state_dims))

    @property
    def total_input(self) -> int:
        return int(np.sum(self.input_dims))


@dataclass(frozen=True)
class ControlProblem:
    """Drive x(0) to xd in f steps of x(k+1) = a x(k) + b u(k)."""

    a: sp.csr_matrix
    b: sp.csr_matrix
    f: int
    x0: np.ndarray
    xd: np.ndarray
    layout: BlockLayout

    def __post_init__(self):
        ns, nu = self.layout.total_state, self.layout.total_input
        if self.a.shape != (ns, ns):
            raise ValueError(f"a has shape {self.a.shape}, expected {(ns, ns)}")
        if self.b.shape != (ns, nu):
            raise ValueError(f"b has shape {self.b.shape}, expected {(ns, nu)}")
        if self.f < 1:
            raise ValueError("horizon must be >= 1")
        if self.x0.shape != (ns,) or self.xd.shape != (ns,):
            raise ValueError("state vectors do not match the layout")

    @classmethod
    def uniform(cls, a, b, f, x0, xd, node_count, n, m):
        return cls(
            as_csr(a), as_csr(b), f,
            np.asarray(x0, dtype=float), np.asarray(xd, dtype=float),
            BlockLayout.uniform(node_count, n, m),
        )


@dataclass(frozen=True)
class InputSequence:
    """Stacked control inputs over a horizon, in one of two orderings.

    time-major stacks u(0), u(1), ... (each a full network input vector);
    node-major stacks per-node sequences u_i(0..f-1) node by node.
    """

    values: np.ndarray
    ordering: str = NODE_MAJOR

    def __post_init__(self):
        if self.ordering not in (TIME_MAJOR, NODE_MAJOR):
            raise ValueError(f"unknown ordering {self.ordering!r}")


def input_permutation(layout: BlockLayout, f) -> np.ndarray:
    """Gather map p with node_major_values = time_major_values[p].

    Sends the input of node i, channel c at time k from time-major position
    (k, i, c) to node-major position (i, k, c). The map is a bijection on
    0..f*total_input-1.
    """
    total = layout.total_input
    offs = layout.input_offsets
    perm = np.empty(f * total, dtype=np.int64)
    pos = 0
    for i in range(layout.node_count):
        mi = layout.input_dims[i]
        for k in range(f):
            src = k * total + offs[i]
            perm[pos:pos + mi] = np.arange(src, src + mi)
            pos += mi
    return perm


def permutation_map(node_count, m, f) -> np.ndarray:
    """input_permutation for the uniform m-inputs-per-node layout."""
    return input_permutation(BlockLayout.uniform(node_count, 1, m), f)


def to_node_major(u: InputSequence, layout: BlockLayout, f) -> InputSequence:
    if u.ordering == NODE_MAJOR:
        return u
    return InputSequence(u.values[input_permutation(layout, f)], NODE_MAJOR)


def to_time_major(u: InputSequence, layout: BlockLayout, f) -> InputSequence:
    if u.ordering == TIME_MAJOR:
        return u
    perm = input_permutation(layout, f)
    values = np.empty_like(u.values)
    values[perm] = u.values
    return InputSequence(values, TIME_MAJOR)


def propagate(p: ControlProblem, u: InputSequence) -> np.ndarray:
    """Terminal state after f steps, never forming a dense power of a."""
    total = p.layout.total_input
    if u.values.shape != (p.f * total,):
        raise ValueError(
            f"input length {u.values.shape} != horizon * inputs {(p.f * total,)}"
        )
    ut = to_time_major(u, p.layout, p.f).values
    x = p.x0.copy()
    for k in range(p.f):
        x = p.a @ x + p.b @ ut[k * total:(k + 1) * total]
    return x


def controllability_matrix(p: ControlProblem) -> sp.csr_matrix:
    """[a^(f-1) b, ..., a b, b] with time-major column order."""
    blocks = [p.b.tocsr()]
    for _ in range(p.f - 1):
        blocks.append(sparse.spgemm(p.a, blocks[-1]))
    return sp.hstack(blocks[::-1], format="csr")


def gramian(p: ControlProblem) -> sp.csr_matrix:
    """Controllability Gramian: sum of a^j b b^T (a^T)^j over j < f."""
    mj = p.b.tocsr()
    w = sparse.spgemm(mj, mj.T)
    for _ in range(p.f - 1):
        mj = sparse.spgemm(p.a, mj)
        w = (w + sparse.spgemm(mj, mj.T)).tocsr()
    w.sort_indices()
    return w


def matrix_power_pattern(a_pattern, l):
    """Structural pattern of a^l (l >= 0)."""
    n = a_pattern.shape[0]
    out = sparse.identity_pattern(n)
    for _ in range(l):
        out = pattern_product(a_pattern, out)
    return out


def apriori_pattern(p: ControlProblem, q) -> sp.csr_matrix:
    """Pattern of I + sum_{l<=q} a^l b b^T (a^T)^l, computed structurally so
    numerical cancellation cannot shrink it."""
    if q < 0:
        raise ValueError("pattern order q must be >= 0")
    pa = sparse.pattern_of(p.a)
    pb = sparse.pattern_of(p.b)
    out = sparse.identity_pattern(p.layout.total_state)
    term = pb
    for l in range(q + 1):
        if l > 0:
            term = pattern_product(pa, term)
        out = pattern_union(out, pattern_product(term, term.T.tocsr()))
    return out


def _a_power_apply(a, x, f):
    for _ in range(f):
        x = a @ x
    return x


def centralized_control(p: ControlProblem, tol=1e-10, max_iters=None) -> InputSequence:
    """Minimum-energy input sequence through a conjugate-gradient Gramian
    solve (raises if the Gramian is numerically singular, i.e. f < nu)."""
    w = gramian(p)
    rhs = p.xd - _a_power_apply(p.a, p.x0, p.f)
    y = cg_solve(w, rhs, tol=tol, max_iters=max_iters)
    kf = controllability_matrix(p)
    u_time = kf.T @ y
    return to_node_major(InputSequence(u_time, TIME_MAJOR), p.layout, p.f)


def block_frobenius_norms(mat, row_offsets, col_offsets) -> sp.csr_matrix:
    """Frobenius norm of every (row-block, col-block) submatrix, as CSR."""
    coo = sp.coo_matrix(mat)
    rb = np.searchsorted(row_offsets, coo.row, side="right") - 1
    cb = np.searchsorted(col_offsets, coo.col, side="right") - 1
    sq = sp.coo_matrix(
        (coo.data ** 2, (rb, cb)),
        shape=(len(row_offsets) - 1, len(col_offsets) - 1),
    ).tocsr()
    sq.sum_duplicates()
    sq.data = np.sqrt(sq.data)
    return sq


@dataclass(frozen=True)
class LocalizedController:
    """Input synthesis from local state information only.

    q:      pattern order used for the sparse approximate Gramian inverse
    qmat:   maps desired states to node-major inputs
    rmat:   maps initial states to node-major inputs
    delta:  block-norm threshold defining the effective SINs
    sins_desired[i]: nodes whose desired state node i needs (N1)
    sins_initial[i]: nodes whose initial state node i needs (N2)
    """

    q: int
    f: int
    layout: BlockLayout
    qmat: sp.csr_matrix
    rmat: sp.csr_matrix
    delta: float
    qnorms: sp.csr_matrix
    rnorms: sp.csr_matrix
    sins_desired: tuple
    sins_initial: tuple
    rank_deficient_columns: np.ndarray

    @property
    def sin_sizes_desired(self) -> np.ndarray:
        return np.array([len(s) for s in self.sins_desired])

    @property
    def sin_sizes_initial(self) -> np.ndarray:
        return np.array([len(s) for s in self.sins_initial])


def _sin_sets(norms: sp.csr_matrix, delta) -> tuple:
    out = []
    for i in range(norms.shape[0]):
        lo, hi = norms.indptr[i], norms.indptr[i + 1]
        cols = norms.indices[lo:hi]
        vals = norms.data[lo:hi]
        out.append(tuple(np.sort(cols[vals > delta]).tolist()))
    return tuple(out)


def _input_row_offsets(layout: BlockLayout, f) -> np.ndarray:
    # node i owns f*m_i consecutive node-major rows
    return np.concatenate([[0], np.cumsum(layout.input_dims * f)])


def build_localized(p: ControlProblem, q, delta=0.0, spai_threads=1) -> LocalizedController:
    """Localized controller of pattern order q.

    The Gramian inverse is replaced by its sparse approximation on the
    a-priori pattern; unlike the centralized solve this remains defined when
    the Gramian is singular.
    """
    w = gramian(p)
    x, flags = spai(w, apriori_pattern(p, q), threads=spai_threads)
    kf = controllability_matrix(p)
    perm = input_permutation(p.layout, p.f)
    kt_x = sparse.spgemm(kf.T.tocsr(), x)
    qmat = kt_x[perm, :].tocsr()
    af = p.a.tocsr()
    for _ in range(p.f - 1):
        af = sparse.spgemm(p.a, af)
    rmat = sparse.spgemm(kt_x, af)[perm, :].tocsr()

    row_offs = _input_row_offsets(p.layout, p.f)
    col_offs = p.layout.state_offsets
    qnorms = block_frobenius_norms(qmat, row_offs, col_offs)
    rnorms = block_frobenius_norms(rmat, row_offs, col_offs)
    return LocalizedController(
        q=q, f=p.f, layout=p.layout, qmat=qmat, rmat=rmat, delta=delta,
        qnorms=qnorms, rnorms=rnorms,
        sins_desired=_sin_sets(qnorms, delta),
        sins_initial=_sin_sets(rnorms, delta),
        rank_deficient_columns=flags,
    )


def effective_sins(c: LocalizedController, delta) -> LocalizedController:
    """Same controller values with SIN membership rethresholded at delta."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    return replace(
        c, delta=delta,
        sins_desired=_sin_sets(c.qnorms, delta),
        sins_initial=_sin_sets(c.rnorms, delta),
    )


def _mask_to_sins(mat, norms, delta, row_offsets, col_offsets) -> sp.csr_matrix:
    """Drop every block whose Frobenius norm is <= delta."""
    coo = mat.tocoo()
    rb = np.searchsorted(row_offsets, coo.row, side="right") - 1
    cb = np.searchsorted(col_offsets, coo.col, side="right") - 1
    keep = np.asarray(norms[rb, cb]).ravel() > delta
    return sp.csr_matrix(
        (coo.data[keep], (coo.row[keep], coo.col[keep])), shape=mat.shape
    )


def apply_localized(c: LocalizedController, x0, xd) -> InputSequence:
    """Node-major inputs assembled only from blocks inside the SINs."""
    ns = c.layout.total_state
    x0 = np.asarray(x0, dtype=float)
    xd = np.asarray(xd, dtype=float)
    if x0.shape != (ns,) or xd.shape != (ns,):
        raise ValueError("state vectors do not match the layout")
    row_offs = _input_row_offsets(c.layout, c.f)
    col_offs = c.layout.state_offsets
    if c.delta > 0.0:
        qe = _mask_to_sins(c.qmat, c.qnorms, c.delta, row_offs, col_offs)
        re = _mask_to_sins(c.rmat, c.rnorms, c.delta, row_offs, col_offs)
    else:
        qe, re = c.qmat, c.rmat
    return InputSequence(qe @ xd - re @ x0, NODE_MAJOR)


def control_error(p: ControlProblem, u: InputSequence) -> float:
    """Relative terminal error ||xd - x(f)|| / ||xd - x0||."""
    denom = np.linalg.norm(p.xd - p.x0)
    if denom == 0.0:
        raise ValueError("control error undefined for xd == x0")
    xf = propagate(p, u)
    return float(np.linalg.norm(p.xd - xf) / denom)


class RankDeficiencyError(RuntimeError):
    """The controllability matrix never reached full rank."""

    def __init__(self, max_f, achieved_rank, needed_rank):
        super().__init__(
            f"controllability matrix rank {achieved_rank} < {needed_rank} "
            f"for every horizon up to {max_f}"
        )
        self.max_f = max_f
        self.achieved_rank = achieved_rank
        self.needed_rank = needed_rank


def controllability_index(p: ControlProblem, max_f) -> int:
    """Smallest horizon with a full-rank controllability matrix (dense rank)."""
    ns = p.layout.total_state
    if ns > 2000:
        raise ValueError("dense rank computation limited to dimension 2000")
    if max_f < 1:
        raise ValueError("max_f must be >= 1")
    block = p.b.toarray()
    k = block
    rank = 0
    for f in range(1, max_f + 1):
        if f > 1:
            block = p.a @ block
            k = np.hstack([block, k])
        rank = int(np.linalg.matrix_rank(k))
        if rank == ns:
            return f
    raise RankDeficiencyError(max_f, rank, ns)


@dataclass(frozen=True)
class GramianReport:
    """Gramian plus the scalars experiments record about it."""

    w: sp.csr_matrix
    kappa: float
    fill_in_percent: float
    nu: int | None = None


def gramian_report(p: ControlProblem, mode="auto", with_nu=False, max_f=None) -> GramianReport:
    w = gramian(p)
    kappa = sparse.condition_number(w, mode=mode)
    nu = None
    if with_nu:
        nu = controllability_index(p, max_f or p.f)
    return GramianReport(w=w, kappa=kappa, fill_in_percent=fill_in(w), nu=nu)


def export_controller(c: LocalizedController, q_path, r_path, sin_path):
    """Write the two gain matrices (Matrix Market) and the SIN listing."""
    sparse.write_matrix_market(q_path, c.qmat)
    sparse.write_matrix_market(r_path, c.rmat)
    with open(sin_path, "w") as fh:
        for i in range(c.layout.node_count):
            fh.write(f"node {i} n1 {' '.join(map(str, c.sins_desired[i]))}\n")
            fh.write(f"node {i} n2 {' '.join(map(str, c.sins_initial[i]))}\n")
