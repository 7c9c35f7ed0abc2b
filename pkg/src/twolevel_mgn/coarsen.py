"""Fine-to-coarse node partitions and the induced coarse graph.

All algorithms are pure functions of ``(graph, parameters, seed)``; ties are
broken towards the lowest node index or community id.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .mesh import MeshGraph


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    num_groups: int

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.int64, copy=True).reshape(-1)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        if a.size and (a.min() < 0 or a.max() >= self.num_groups):
            raise ValueError("group id out of range")
        if a.size and np.unique(a).size != self.num_groups:
            raise ValueError("every group id must be used at least once")

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        """Relabel arbitrary labels densely in order of first appearance."""
        labels = np.asarray(labels).reshape(-1)
        mapping: dict = {}
        out = np.empty(len(labels), dtype=np.int64)
        for i, lab in enumerate(labels.tolist()):
            out[i] = mapping.setdefault(lab, len(mapping))
        return cls(out, len(mapping))

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_groups)

    def __len__(self):
        return len(self.assignment)

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return self.num_groups == other.num_groups and np.array_equal(self.assignment, other.assignment)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CoarseGraph:
    num_nodes: int
    edges: np.ndarray  # directed pairs, both directions, lexicographic order
    group_sizes: np.ndarray


def _undirected_pairs(graph: MeshGraph) -> np.ndarray:
    e = graph.edges
    pairs = np.sort(e, axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return np.unique(pairs, axis=0) if len(pairs) else pairs.reshape(0, 2)


def _adjacency(n: int, pairs: np.ndarray) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, j in pairs.tolist():
        adj[i].append(j)
        adj[j].append(i)
    for nb in adj:
        nb.sort()
    return adj


# ------------------------------------------------------------------ modularity

def modularity(graph: MeshGraph, partition: Partition) -> float:
    """Newman modularity with unit weight per undirected edge."""
    pairs = _undirected_pairs(graph)
    m = len(pairs)
    if m == 0:
        raise ValueError("modularity undefined for a graph with no edges")
    a = partition.assignment
    k = partition.num_groups
    intra = np.bincount(a[pairs[:, 0]][a[pairs[:, 0]] == a[pairs[:, 1]]], minlength=k)
    deg = np.bincount(pairs.ravel(), minlength=graph.num_nodes).astype(np.float64)
    tot = np.bincount(a, weights=deg, minlength=k)
    return float(np.sum(intra / m - (tot / (2.0 * m)) ** 2))


# --------------------------------------------------------------------- louvain

def _one_level(n, nbrs, self_w, degree, m2):
    """Local-moving phase on a weighted graph. Returns community labels and whether anything moved."""
    comm = list(range(n))
    tot = list(degree)
    moved_any = False
    while True:
        moved = False
        for i in range(n):
            ci = comm[i]
            ki = degree[i]
            links: dict[int, float] = {}
            for j, w in nbrs[i]:
                if j != i:
                    links[comm[j]] = links.get(comm[j], 0.0) + w
            tot[ci] -= ki
            # gain of inserting i into community c, up to a constant shared by all c
            best_c = ci
            best_gain = links.get(ci, 0.0) - tot[ci] * ki / m2
            for c in sorted(links):
                gain = links[c] - tot[c] * ki / m2
                if gain > best_gain + 1e-12 or (abs(gain - best_gain) <= 1e-12 and c < best_c and best_c != ci):
                    best_c, best_gain = c, gain
            tot[best_c] += ki
            if best_c != ci:
                comm[i] = best_c
                moved = True
                moved_any = True
        if not moved:
            break
    return comm, moved_any


def louvain(graph: MeshGraph, seed: int | None = None) -> Partition:
    """Deterministic two-phase Louvain (ascending node order, resolution 1).

    ``seed`` is accepted for interface symmetry with the other algorithms and
    does not influence the result.
    """
    n = graph.num_nodes
    if n == 0:
        raise ValueError("louvain needs a non-empty graph")
    pairs = _undirected_pairs(graph)
    if len(pairs) == 0:
        return Partition(np.arange(n), n)

    # weighted adjacency at the current level: nbrs[i] = [(j, w)], self loops in self_w
    nbrs = [[] for _ in range(n)]
    for i, j in pairs.tolist():
        nbrs[i].append((j, 1.0))
        nbrs[j].append((i, 1.0))
    self_w = [0.0] * n
    degree = [float(len(nb)) for nb in nbrs]
    m2 = 2.0 * len(pairs)
    membership = np.arange(n)

    while True:
        comm, moved = _one_level(len(nbrs), nbrs, self_w, degree, m2)
        if not moved:
            break
        # dense relabel in order of first appearance by node index
        labels = Partition.from_labels(comm).assignment
        nc = int(labels.max()) + 1
        membership = labels[membership]
        agg: list[dict[int, float]] = [dict() for _ in range(nc)]
        new_self = [0.0] * nc
        for i, nb in enumerate(nbrs):
            ci = labels[i]
            new_self[ci] += self_w[i]
            for j, w in nb:
                cj = labels[j]
                if ci == cj:
                    new_self[ci] += w / 2.0  # each internal edge is seen from both ends
                else:
                    agg[ci][cj] = agg[ci].get(cj, 0.0) + w
        nbrs = [sorted(d.items()) for d in agg]
        self_w = new_self
        degree = [2.0 * self_w[c] + sum(w for _, w in nbrs[c]) for c in range(nc)]
        if nc == 1:
            break
    return Partition.from_labels(membership)


# --------------------------------------------------------------- alternatives

def grid_sampling(graph: MeshGraph, cell_size: float) -> Partition:
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    x = graph.node_coords
    cells = np.floor(x / cell_size).astype(np.int64)
    cells -= cells.min(axis=0)
    extent = cells.max(axis=0) + 1
    flat = np.ravel_multi_index(tuple(cells.T), tuple(extent))
    # dense ids in ascending flattened-cell order, empty cells skipped
    _, dense = np.unique(flat, return_inverse=True)
    return Partition(dense, int(dense.max()) + 1)


def _check_k(k: int, n: int):
    if k <= 0 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = np.sum((x - x[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k: take unused indices in order
            idx = next(i for i in range(n) if i not in centers)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(idx)
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return x[centers].copy()


def _sqdist(x, c):
    return np.sum((x[:, None, :] - c[None, :, :]) ** 2, axis=2)


def _fill_empty(x, labels, centers):
    """Reassign the farthest point to any empty cluster."""
    k = len(centers)
    for c in range(k):
        if not np.any(labels == c):
            d = np.min(_sqdist(x, centers), axis=1)
            sizes = np.bincount(labels, minlength=k)
            d[sizes[labels] <= 1] = -1.0
            i = int(np.argmax(d))
            labels[i] = c
            centers[c] = x[i]
    return labels


def kmeans(graph: MeshGraph, k: int, seed: int = 0, max_iter: int = 100) -> Partition:
    x = graph.node_coords
    _check_k(k, len(x))
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    labels = None
    for _ in range(max_iter):
        new = np.argmin(_sqdist(x, centers), axis=1)
        new = _fill_empty(x, new, centers)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            centers[c] = x[labels == c].mean(axis=0)
    return Partition.from_labels(labels)


def _rebalance(x, labels, centers, cap):
    """Move farthest members of oversized clusters to the nearest cluster with room."""
    k = len(centers)
    d = _sqdist(x, centers)
    sizes = np.bincount(labels, minlength=k)
    for c in range(k):
        while sizes[c] > cap:
            members = np.flatnonzero(labels == c)
            far = members[np.argmax(d[members, c])]
            room = np.flatnonzero(sizes < cap)
            target = room[np.argmin(d[far, room])]
            labels[far] = target
            sizes[c] -= 1
            sizes[target] += 1
    return labels


def same_size_kmeans(graph: MeshGraph, k: int, seed: int = 0, max_iter: int = 100) -> Partition:
    """k-means with cluster sizes capped at ceil(N/k), then levelled to differ by at most one."""
    x = graph.node_coords
    n = len(x)
    _check_k(k, n)
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    cap = math.ceil(n / k)
    labels = None
    for _ in range(max_iter):
        new = np.argmin(_sqdist(x, centers), axis=1)
        new = _rebalance(x, new, centers, cap)
        new = _level(x, new, centers, n, k)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            centers[c] = x[labels == c].mean(axis=0)
    return Partition.from_labels(labels)


def _level(x, labels, centers, n, k):
    """Fill undersized clusters (size < floor(N/k)) from the nearest clusters that can spare points."""
    lo = n // k
    hi = math.ceil(n / k)
    d = _sqdist(x, centers)
    sizes = np.bincount(labels, minlength=k)
    # the number of clusters allowed at size `hi`
    for c in range(k):
        while sizes[c] < lo:
            donors = np.flatnonzero(sizes > lo)
            cand = np.flatnonzero(np.isin(labels, donors))
            pick = cand[np.argmin(d[cand, c] - d[cand, labels[cand]])]
            sizes[labels[pick]] -= 1
            labels[pick] = c
            sizes[c] += 1
    assert sizes.max() <= hi and sizes.min() >= lo
    return labels


def heuristic_khop(graph: MeshGraph, hops: int, seed: int | None = None) -> Partition:
    """Grow clusters by BFS of depth ``hops`` over still-unclustered nodes."""
    if hops < 1:
        raise ValueError("hops must be >= 1")
    n = graph.num_nodes
    adj = _adjacency(n, _undirected_pairs(graph))
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    labels = -np.ones(n, dtype=np.int64)
    group = 0
    for s in order.tolist():
        if labels[s] >= 0:
            continue
        labels[s] = group
        frontier = deque([(s, 0)])
        while frontier:
            u, depth = frontier.popleft()
            if depth == hops:
                continue
            for v in adj[u]:
                if labels[v] < 0:
                    labels[v] = group
                    frontier.append((v, depth + 1))
        group += 1
    return Partition(labels, group)


def fps_centers(graph: MeshGraph, k: int, seed: int | None = None) -> list[int]:
    """Indices of ``k`` farthest-point-sampled centres (first = node 0 unless seeded)."""
    x = graph.node_coords
    _check_k(k, len(x))
    start = 0 if seed is None else int(np.random.default_rng(seed).integers(len(x)))
    centers = [start]
    mind = np.linalg.norm(x - x[start], axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(mind))  # argmax returns the lowest index on ties
        centers.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(x - x[nxt], axis=1))
    return centers


def fps(graph: MeshGraph, k: int, seed: int | None = None) -> Partition:
    """Farthest point sampling; every node joins its nearest centre."""
    x = graph.node_coords
    centers = fps_centers(graph, k, seed)
    dist = np.linalg.norm(x[:, None, :] - x[centers][None, :, :], axis=2)
    return Partition(np.argmin(dist, axis=1), k)


# ------------------------------------------------------------- coarse graph

def build_coarse_graph(graph: MeshGraph, partition: Partition) -> CoarseGraph:
    if len(partition) != graph.num_nodes:
        raise ValueError(f"partition covers {len(partition)} nodes, graph has {graph.num_nodes}")
    a = partition.assignment
    ce = np.stack([a[graph.edges[:, 0]], a[graph.edges[:, 1]]], axis=1)
    ce = ce[ce[:, 0] != ce[:, 1]]
    ce = np.concatenate([ce, ce[:, ::-1]]) if len(ce) else ce.reshape(0, 2)
    ce = np.unique(ce, axis=0) if len(ce) else ce
    return CoarseGraph(partition.num_groups, ce.astype(np.int64), partition.group_sizes)


# ------------------------------------------------------------------ dispatch

ALGORITHMS = ("louvain", "grid", "kmeans", "same-size", "khop", "fps")


def _closest_count(make, candidates, k, decreasing: bool):
    """Scan ``candidates`` for the group count nearest ``k``, stopping early when counts only fall."""
    best = None
    for c in candidates:
        p = make(c)
        key = (abs(p.num_groups - k), p.num_groups > k)
        if best is None or key < best[0]:
            best = (key, p)
        if decreasing and p.num_groups <= k:
            break
    return best[1]


def partition_graph(graph: MeshGraph, algorithm: str, *, k: int | None = None, cell: float | None = None,
                    hops: int | None = None, seed: int = 0) -> Partition:
    """Run one of the six coarsening algorithms.

    When ``k`` is given for grid or k-hop, their native parameter (cell size,
    hop count) is searched for the group count closest to ``k``.
    """
    if algorithm == "louvain":
        return louvain(graph, seed)
    if algorithm in ("kmeans", "same-size", "fps"):
        if k is None:
            k = louvain(graph).num_groups
        fn = {"kmeans": kmeans, "same-size": same_size_kmeans, "fps": fps}[algorithm]
        return fn(graph, k, seed)
    if algorithm == "grid":
        if cell is not None:
            return grid_sampling(graph, cell)
        if k is None:
            k = louvain(graph).num_groups
        x = graph.node_coords
        span = float(np.max(x.max(axis=0) - x.min(axis=0))) or 1.0
        cells = span / np.geomspace(1.0, 4.0 * max(k, 1), 200)
        return _closest_count(lambda c: grid_sampling(graph, c), cells, k, decreasing=False)
    if algorithm == "khop":
        if hops is not None:
            return heuristic_khop(graph, hops, seed)
        if k is None:
            k = louvain(graph).num_groups
        return _closest_count(lambda h: heuristic_khop(graph, h, seed), range(1, graph.num_nodes + 1), k,
                              decreasing=True)
    raise ValueError(f"unknown coarsening algorithm {algorithm!r}; choose from {ALGORITHMS}")
