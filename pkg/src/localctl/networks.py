"""Network topologies (lattice / Erdos-Renyi / random geometric) and the
block coupling and input matrices defined on them."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg
import scipy.spatial

DEFAULT_SPECTRAL_RADIUS = 0.8

B_PRESETS = ("B1", "B2", "B3")


@dataclass(frozen=True)
class Graph:
    """Undirected graph without self-edges; nodes are 0..node_count-1."""

    node_count: int
    edges: tuple  # tuple of (u, v) pairs with u < v
    coordinates: np.ndarray | None = None  # (node_count, 2) for geometric graphs

    def __post_init__(self):
        for u, v in self.edges:
            if u == v:
                raise ValueError(f"self-edge at node {u}")
            if not (0 <= u < self.node_count and 0 <= v < self.node_count):
                raise ValueError(f"edge ({u},{v}) out of bounds")

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def neighbor_lists(self) -> list:
        adj = [[] for _ in range(self.node_count)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return adj


@dataclass(frozen=True)
class CouplingSpec:
    """How to draw the block coupling matrix on a graph."""

    n: int = 3
    weight_seed: int = 0
    spectral_radius_target: float = DEFAULT_SPECTRAL_RADIUS

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("per-node state dimension must be >= 1")
        if not np.isfinite(self.spectral_radius_target) or self.spectral_radius_target <= 0:
            raise ValueError("spectral radius target must be positive and finite")


@dataclass(frozen=True)
class InputSpec:
    """Block-diagonal input matrix description.

    preset selects the 0/1 diagonal block: "B1" = diag(1,..,1), "B2" zeros
    the last channel, "B3" keeps only the first. controlled_nodes=None
    controls every node.
    """

    n: int = 3
    m: int = 3
    preset: str = "B1"
    controlled_nodes: tuple | None = None

    def __post_init__(self):
        if self.preset not in B_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")

    def block(self) -> np.ndarray:
        k = {"B1": min(self.n, self.m), "B2": min(self.n, self.m) - 1, "B3": 1}[self.preset]
        b = np.zeros((self.n, self.m))
        for i in range(max(k, 0)):
            b[i, i] = 1.0
        return b


def gen_lattice(width, height) -> Graph:
    """4-neighbor grid graph with row-major node ordering."""
    if width < 1 or height < 1:
        raise ValueError("lattice dimensions must be >= 1")
    edges = []
    for r in range(height):
        for c in range(width):
            i = r * width + c
            if c + 1 < width:
                edges.append((i, i + 1))
            if r + 1 < height:
                edges.append((i, i + width))
    return Graph(width * height, tuple(edges))


def gen_path(length) -> Graph:
    """Path graph 0-1-...-(length-1)."""
    return Graph(length, tuple((i, i + 1) for i in range(length - 1)))


def giant_component(node_count, edges, coordinates=None) -> Graph:
    """Largest connected component, nodes relabeled in increasing old order."""
    adj = [[] for _ in range(node_count)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    comp = np.full(node_count, -1, dtype=int)
    ncomp = 0
    for s in range(node_count):
        if comp[s] >= 0:
            continue
        comp[s] = ncomp
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if comp[v] < 0:
                    comp[v] = ncomp
                    queue.append(v)
        ncomp += 1
    sizes = np.bincount(comp)
    big = int(np.argmax(sizes))
    if sizes[big] == 0:
        raise ValueError("empty giant component")
    keep = np.flatnonzero(comp == big)
    relabel = {int(old): new for new, old in enumerate(keep)}
    new_edges = tuple(
        (relabel[u], relabel[v]) for u, v in edges if comp[u] == big and comp[v] == big
    )
    coords = coordinates[keep] if coordinates is not None else None
    return Graph(len(keep), new_edges, coords)


def gen_ern(node_count, avg_degree, seed) -> Graph:
    """Erdos-Renyi G(N, p) with p = avg_degree/(N-1); giant component kept.

    The returned node count may be below the requested one because only the
    giant component is returned.
    """
    if avg_degree <= 0:
        raise ValueError("average degree must be positive")
    rng = np.random.default_rng(seed)
    p = min(avg_degree / (node_count - 1), 1.0) if node_count > 1 else 0.0
    iu, ju = np.triu_indices(node_count, k=1)
    mask = rng.random(len(iu)) < p
    edges = list(zip(iu[mask].tolist(), ju[mask].tolist()))
    g = giant_component(node_count, edges)
    if g.node_count < 2 and node_count >= 2:
        raise ValueError(
            f"giant component has {g.node_count} node(s); "
            "increase avg_degree or node_count"
        )
    return g


def rgn_radius_for_degree(node_count, mean_degree) -> float:
    """Connection radius giving the requested mean degree in the unit square."""
    return float(np.sqrt(mean_degree / (np.pi * (node_count - 1))))


def gen_rgn(node_count, radius, seed) -> Graph:
    """Random geometric graph in the unit square; giant component kept,
    coordinates retained."""
    if not 0 < radius < np.sqrt(2):
        raise ValueError("radius must lie in (0, sqrt(2))")
    rng = np.random.default_rng(seed)
    pts = rng.random((node_count, 2))
    tree = scipy.spatial.cKDTree(pts)
    pairs = sorted(tree.query_pairs(radius))
    g = giant_component(node_count, pairs, coordinates=pts)
    if g.node_count < 2 and node_count >= 2:
        raise ValueError(
            f"giant component has {g.node_count} node(s); increase the radius"
        )
    return g


def bfs_distances(g: Graph, source) -> np.ndarray:
    """Unweighted shortest-path distances from source (-1 if unreachable)."""
    if not 0 <= source < g.node_count:
        raise ValueError(f"source {source} not in graph")
    adj = g.neighbor_lists()
    dist = np.full(g.node_count, -1, dtype=int)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _spectral_radius(a: sp.csr_matrix) -> float:
    n = a.shape[0]
    if n <= 2000:
        return float(np.max(np.abs(np.linalg.eigvals(a.toarray()))))
    vals = scipy.sparse.linalg.eigs(a.astype(float), k=1, which="LM", return_eigenvectors=False)
    return float(np.abs(vals[0]))


def build_coupling(g: Graph, spec: CouplingSpec) -> sp.csr_matrix:
    """Block coupling matrix: dense n-by-n blocks on every edge (both
    orientations drawn independently) and on the diagonal, rescaled to the
    target spectral radius."""
    n = spec.n
    rng = np.random.default_rng(spec.weight_seed)
    rows, cols, vals = [], [], []

    def add_block(i, j):
        block = rng.uniform(-1.0, 1.0, size=(n, n))
        r, c = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        rows.append(i * n + r.ravel())
        cols.append(j * n + c.ravel())
        vals.append(block.ravel())

    for i in range(g.node_count):
        add_block(i, i)
    for u, v in g.edges:
        add_block(u, v)
        add_block(v, u)

    a = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(g.node_count * n, g.node_count * n),
    )
    rho = _spectral_radius(a)
    if rho == 0.0:
        raise ValueError("drawn coupling matrix has zero spectral radius")
    a = a * (spec.spectral_radius_target / rho)
    a.sort_indices()
    return a


def build_input_matrix(g: Graph, spec: InputSpec) -> sp.csr_matrix:
    """Block-diagonal input matrix; uncontrolled nodes get zero blocks."""
    controlled = (
        set(range(g.node_count))
        if spec.controlled_nodes is None
        else set(spec.controlled_nodes)
    )
    if not controlled <= set(range(g.node_count)):
        raise ValueError("controlled_nodes outside the graph")
    block = spec.block()
    br, bc = np.nonzero(block)
    rows, cols, vals = [], [], []
    for i in sorted(controlled):
        rows.append(i * spec.n + br)
        cols.append(i * spec.m + bc)
        vals.append(block[br, bc])
    shape = (g.node_count * spec.n, g.node_count * spec.m)
    if not rows:
        return sp.csr_matrix(shape)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=shape,
    )


def write_edgelist(path, g: Graph):
    """Edge-list text format: header "nodes <N>", optional "x y" coordinate
    lines (one per node), then one "u v" line per edge."""
    with open(path, "w") as fh:
        fh.write(f"nodes {g.node_count}\n")
        if g.coordinates is not None:
            fh.write("coordinates\n")
            for x, y in g.coordinates:
                fh.write(f"{x!r} {y!r}\n")
        fh.write("edges\n")
        for u, v in g.edges:
            fh.write(f"{u} {v}\n")


def read_edgelist(path) -> Graph:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("nodes "):
        raise ValueError("missing 'nodes <N>' header")
    count = int(lines[0].split()[1])
    pos = 1
    coords = None
    if pos < len(lines) and lines[pos] == "coordinates":
        pos += 1
        coords = np.array(
            [[float(t) for t in lines[pos + i].split()] for i in range(count)]
        )
        pos += count
    if pos < len(lines) and lines[pos] == "edges":
        pos += 1
    edges = tuple(tuple(int(t) for t in ln.split()) for ln in lines[pos:])
    return Graph(count, edges, coords)
