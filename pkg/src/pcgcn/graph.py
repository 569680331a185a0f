"""Undirected graphs in CSR form, symmetric normalization and homophily metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

UNLABELED = -1
UNREACHABLE = -1


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected, unweighted adjacency stored as CSR without self-loops.

    Every edge ``(i, j)`` is stored twice (row ``i`` and row ``j``) and the
    column indices of each row are sorted ascending.
    """

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    dropped_self_loops: int = 0

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.col_indices) // 2

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[i]:self.row_offsets[i + 1]]

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry (COO row array)."""
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    def edge_pairs(self) -> np.ndarray:
        """Each undirected edge once, as an ``(m, 2)`` array with ``u < v``."""
        rows = self.row_ids()
        keep = rows < self.col_indices
        return np.stack([rows[keep], self.col_indices[keep]], axis=1)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        dense[self.row_ids(), self.col_indices] = True
        return dense


@dataclass(frozen=True)
class NormalizedAdjacency:
    """CSR of D̃^{-1/2}(A + I)D̃^{-1/2}; every row holds its diagonal entry."""

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    csr: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.num_nodes
        mat = sp.csr_matrix((self.values, self.col_indices, self.row_offsets), shape=(n, n))
        mat.has_sorted_indices = True
        object.__setattr__(self, "csr", mat)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.num_nodes, self.num_nodes))
        rows = np.repeat(np.arange(self.num_nodes), np.diff(self.row_offsets))
        dense[rows, self.col_indices] = self.values
        return dense


@dataclass(frozen=True)
class LabelSet:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.num_classes < 2:
            raise GraphError(f"need at least 2 classes, got {self.num_classes}")
        if labels.size and (labels.max() >= self.num_classes or labels.min() < UNLABELED):
            raise GraphError("label ids must lie in [0, num_classes) or be -1 (unlabeled)")

    @classmethod
    def from_labels(cls, labels, num_classes: int | None = None) -> "LabelSet":
        labels = np.asarray(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        return cls(labels, num_classes)

    @property
    def labeled(self) -> np.ndarray:
        return self.labels != UNLABELED

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class HomophilyReport:
    edge_ratio: float
    node_ratios: np.ndarray  # NaN where undefined
    graph_mean: float
    excluded_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def build_graph(edges, num_nodes: int, strict: bool = False) -> Graph:
    """Symmetrize and deduplicate an edge list into CSR.

    Self-loops raise under ``strict``; otherwise they are dropped and
    counted in ``Graph.dropped_self_loops``.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if num_nodes < 0:
        raise GraphError("num_nodes must be nonnegative")
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        bad = edges[(edges < 0).any(1) | (edges >= num_nodes).any(1)][0]
        raise GraphError(f"edge {tuple(int(v) for v in bad)} has a node id outside [0, {num_nodes})")

    loops = edges[:, 0] == edges[:, 1]
    n_loops = int(loops.sum())
    if n_loops:
        if strict:
            raise GraphError(f"{n_loops} self-loop(s) in edge list")
        log.warning("dropping %d self-loop(s)", n_loops)
        edges = edges[~loops]

    both = np.concatenate([edges, edges[:, ::-1]])
    # unique on the flattened key sorts by (row, col)
    keys = np.unique(both[:, 0] * num_nodes + both[:, 1]) if both.size else np.zeros(0, np.int64)
    rows, cols = np.divmod(keys, max(num_nodes, 1))
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=num_nodes), out=offsets[1:])
    return Graph(num_nodes, offsets, cols.astype(np.int64), n_loops)


def normalize_adjacency(g: Graph) -> NormalizedAdjacency:
    n = g.num_nodes
    deg = g.degrees
    rows = np.concatenate([g.row_ids(), np.arange(n)])
    cols = np.concatenate([g.col_indices, np.arange(n)])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(deg + 1, out=offsets[1:])
    # integer product first: exact and symmetric in (i, j)
    prod = (deg[rows] + 1) * (deg[cols] + 1)
    values = 1.0 / np.sqrt(prod.astype(np.float64))
    return NormalizedAdjacency(n, offsets, cols, values)


def _labeled_entries(g: Graph, ls: LabelSet):
    rows = g.row_ids()
    cols = g.col_indices
    y = ls.labels
    ok = (y[rows] != UNLABELED) & (y[cols] != UNLABELED)
    return rows[ok], cols[ok], y[rows[ok]] == y[cols[ok]]


def edge_homophily(g: Graph, ls: LabelSet) -> float:
    """Fraction of undirected edges joining two nodes of the same class."""
    rows, cols, same = _labeled_entries(g, ls)
    once = rows < cols
    total = int(once.sum())
    if total == 0:
        raise GraphError("no edge with two labeled endpoints; edge homophily undefined")
    return float(same[once].sum()) / total


def node_homophily(g: Graph, ls: LabelSet) -> HomophilyReport:
    n = g.num_nodes
    rows, cols, same = _labeled_entries(g, ls)
    denom = np.bincount(rows, minlength=n)
    numer = np.bincount(rows, weights=same.astype(np.float64), minlength=n)
    valid = (denom > 0) & ls.labeled
    ratios = np.full(n, np.nan)
    ratios[valid] = numer[valid] / denom[valid]
    excluded = np.flatnonzero(~valid)
    if not valid.any():
        raise GraphError("no labeled node with labeled neighbors; node homophily undefined")
    edge = edge_homophily(g, ls)
    return HomophilyReport(edge, ratios, float(ratios[valid].mean()), excluded)


def multi_source_bfs(g: Graph, sources) -> np.ndarray:
    """Hop distance from the nearest source; ``UNREACHABLE`` where none."""
    dist = np.full(g.num_nodes, UNREACHABLE, dtype=np.int64)
    frontier = np.unique(np.asarray(sources, dtype=np.int64))
    dist[frontier] = 0
    level = 0
    offsets, cols = g.row_offsets, g.col_indices
    while frontier.size:
        level += 1
        starts = offsets[frontier]
        counts = offsets[frontier + 1] - starts
        total = int(counts.sum())
        if total == 0:
            break
        # gather all neighbors of the frontier in one shot
        shift = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        nbrs = cols[np.arange(total) + shift]
        nbrs = np.unique(nbrs[dist[nbrs] == UNREACHABLE])
        dist[nbrs] = level
        frontier = nbrs
    return dist


def shortest_label_distance(g: Graph, ls: LabelSet, train_mask) -> np.ndarray:
    """Per node, hops to the closest training node of its own class.

    Training nodes get 0. Unlabeled nodes and nodes whose class has no
    reachable training node get ``UNREACHABLE``.
    """
    train_mask = np.asarray(train_mask, dtype=bool)
    y = ls.labels
    out = np.full(g.num_nodes, UNREACHABLE, dtype=np.int64)
    for c in range(ls.num_classes):
        members = y == c
        sources = np.flatnonzero(members & train_mask)
        if sources.size == 0:
            continue
        dist = multi_source_bfs(g, sources)
        out[members] = dist[members]
    return out
