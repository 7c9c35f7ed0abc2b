"""Mesh-graph data model, load distribution, edge features and sample I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1

INTERIOR, LOADED, FIXED = 0, 1, 2
NODE_TYPES = (INTERIOR, LOADED, FIXED)


class SampleFormatError(ValueError):
    """Raised when a sample file cannot be parsed."""


class SampleVersionError(SampleFormatError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _sorted_edges(edges: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return edges.reshape(0, 2)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


@dataclass(frozen=True, eq=False)
class MeshGraph:
    """Fine mesh graph.

    ``edges`` holds directed pairs and is kept in lexicographic order so that
    two graphs with the same edge set compare equal. ``triangles`` is optional
    element connectivity, needed only by the FEM oracle.
    """

    node_coords: np.ndarray
    edges: np.ndarray
    node_type: np.ndarray
    loads: np.ndarray
    response: np.ndarray | None = None
    triangles: np.ndarray | None = None

    def __post_init__(self):
        coords = np.asarray(self.node_coords, dtype=np.float64)
        if coords.ndim != 2:
            raise ValueError(f"node_coords must be 2-D, got shape {coords.shape}")
        n, d = coords.shape
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "node_coords", _frozen(coords, np.float64))
        object.__setattr__(self, "edges", _frozen(_sorted_edges(edges), np.int64))
        object.__setattr__(self, "node_type", _frozen(np.asarray(self.node_type).reshape(n), np.int64))
        object.__setattr__(self, "loads", _frozen(np.asarray(self.loads, dtype=np.float64).reshape(n, d), np.float64))
        if self.response is not None:
            resp = np.asarray(self.response, dtype=np.float64)
            if resp.ndim == 1:
                resp = resp[:, None]
            object.__setattr__(self, "response", _frozen(resp, np.float64))
        if self.triangles is not None:
            tri = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
            object.__setattr__(self, "triangles", _frozen(tri, np.int64))

    @property
    def num_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def dim(self) -> int:
        return self.node_coords.shape[1]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @classmethod
    def from_undirected(cls, node_coords, pairs, node_type=None, loads=None, **kw) -> "MeshGraph":
        """Build a graph from undirected pairs, storing both directions."""
        coords = np.asarray(node_coords, dtype=np.float64)
        n, d = coords.shape
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        edges = np.concatenate([pairs, pairs[:, ::-1]]) if len(pairs) else pairs
        if node_type is None:
            node_type = np.zeros(n, dtype=np.int64)
        if loads is None:
            loads = np.zeros((n, d))
        return cls(coords, edges, node_type, loads, **kw)

    def replace(self, **changes) -> "MeshGraph":
        fields = dict(
            node_coords=self.node_coords,
            edges=self.edges,
            node_type=self.node_type,
            loads=self.loads,
            response=self.response,
            triangles=self.triangles,
        )
        fields.update(changes)
        return MeshGraph(**fields)

    def undirected_pairs(self) -> np.ndarray:
        """Edges with ``i < j`` in stored order."""
        return self.edges[self.edges[:, 0] < self.edges[:, 1]]

    def __eq__(self, other):
        if not isinstance(other, MeshGraph):
            return NotImplemented
        return all(
            _array_equal(getattr(self, name), getattr(other, name))
            for name in ("node_coords", "edges", "node_type", "loads", "response", "triangles")
        )

    __hash__ = None


def _array_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.dtype == b.dtype and bool(np.array_equal(a, b))


@dataclass(frozen=True, eq=False)
class Sample:
    graph: MeshGraph
    partition: np.ndarray | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.partition is not None:
            object.__setattr__(self, "partition", _frozen(np.asarray(self.partition).reshape(-1), np.int64))

    def with_partition(self, partition) -> "Sample":
        return Sample(self.graph, partition, dict(self.metadata))

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.graph == other.graph
            and _array_equal(self.partition, other.partition)
            and self.metadata == other.metadata
        )

    __hash__ = None


def validate(graph: MeshGraph) -> list[str]:
    """Return a list of invariant violations; empty means the graph is well formed."""
    problems: list[str] = []
    n = graph.num_nodes
    if graph.dim not in (2, 3):
        problems.append(f"dimension: d={graph.dim} not in {{2, 3}}")
    edges = graph.edges
    for k, (i, j) in enumerate(edges):
        if i < 0 or j < 0 or i >= n or j >= n:
            problems.append(f"edge index out of range: edge {k} = ({i}, {j}) with {n} nodes")
        elif i == j:
            problems.append(f"self-loop: edge {k} = ({i}, {j})")
    present = {(int(i), int(j)) for i, j in edges}
    for i, j in sorted(present):
        if i != j and (j, i) not in present:
            problems.append(f"missing reverse edge: ({j}, {i}) for edge ({i}, {j})")
    for k, (i, j) in enumerate(edges):
        if 0 <= i < n and 0 <= j < n and i != j:
            if np.array_equal(graph.node_coords[i], graph.node_coords[j]):
                problems.append(f"coincident endpoints: edge {k} = ({i}, {j}) has zero length")
    for i, t in enumerate(graph.node_type):
        if t not in NODE_TYPES:
            problems.append(f"node type: node {i} has unknown type {t}")
            continue
        nonzero = bool(np.any(graph.loads[i] != 0.0))
        if t != LOADED and nonzero:
            problems.append(f"load on unloaded node: node {i} (type {t}) carries a nonzero load")
        # A loaded node may legitimately carry a zero share of a zero total force.
    if graph.response is not None and graph.response.shape[0] != n:
        problems.append(f"response length: {graph.response.shape[0]} rows for {n} nodes")
    if graph.triangles is not None and graph.triangles.size:
        bad = np.flatnonzero((graph.triangles < 0).any(1) | (graph.triangles >= n).any(1))
        for k in bad:
            problems.append(f"triangle index out of range: triangle {k}")
    return problems


def distribute_load(total_force, loaded_nodes, graph: MeshGraph) -> MeshGraph:
    """Spread ``total_force`` evenly over ``loaded_nodes``.

    Nodes previously marked as loaded but not in ``loaded_nodes`` revert to
    interior; fixed nodes stay fixed unless they are loaded here.
    """
    nodes = sorted({int(i) for i in loaded_nodes})
    if not nodes:
        raise ValueError("no load application region")
    n = graph.num_nodes
    if nodes[0] < 0 or nodes[-1] >= n:
        raise IndexError(f"loaded node index out of range for {n} nodes")
    force = np.asarray(total_force, dtype=np.float64).reshape(graph.dim)
    loads = np.zeros((n, graph.dim))
    loads[nodes] = force / len(nodes)
    node_type = graph.node_type.copy()
    node_type[node_type == LOADED] = INTERIOR
    node_type[nodes] = LOADED
    return graph.replace(loads=loads, node_type=node_type)


def edge_features(graph: MeshGraph) -> np.ndarray:
    """Per directed edge: ``x_i - x_j`` followed by its Euclidean length."""
    x = graph.node_coords
    disp = x[graph.edges[:, 0]] - x[graph.edges[:, 1]]
    length = np.linalg.norm(disp, axis=1, keepdims=True)
    return np.concatenate([disp, length], axis=1)


# ---------------------------------------------------------------- serialization

def sample_to_dict(sample: Sample) -> dict:
    g = sample.graph
    out = {
        "format_version": FORMAT_VERSION,
        "d": g.dim,
        "node_coords": g.node_coords.tolist(),
        "edges": g.undirected_pairs().tolist(),
        "node_type": g.node_type.tolist(),
        "loads": g.loads.tolist(),
        "response": None if g.response is None else g.response.tolist(),
        "partition": None if sample.partition is None else sample.partition.tolist(),
        "metadata": sample.metadata,
    }
    if g.triangles is not None:
        out["triangles"] = g.triangles.tolist()
    return out


def _field(doc: dict, name: str):
    if name not in doc:
        raise SampleFormatError(f"missing field {name!r}")
    return doc[name]


def sample_from_dict(doc: dict) -> Sample:
    if not isinstance(doc, dict):
        raise SampleFormatError("sample document must be a JSON object")
    version = _field(doc, "format_version")
    if version != FORMAT_VERSION:
        raise SampleVersionError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    d = int(_field(doc, "d"))
    try:
        coords = np.array(_field(doc, "node_coords"), dtype=np.float64).reshape(-1, d)
    except (TypeError, ValueError) as exc:
        raise SampleFormatError(f"field 'node_coords': {exc}") from None
    n = coords.shape[0]
    try:
        pairs = np.array(_field(doc, "edges"), dtype=np.int64).reshape(-1, 2)
        node_type = np.array(_field(doc, "node_type"), dtype=np.int64).reshape(n)
        loads = np.array(_field(doc, "loads"), dtype=np.float64).reshape(n, d)
    except (TypeError, ValueError) as exc:
        raise SampleFormatError(f"malformed edges/node_type/loads: {exc}") from None
    response = doc.get("response")
    partition = doc.get("partition")
    triangles = doc.get("triangles")
    graph = MeshGraph.from_undirected(
        coords,
        pairs,
        node_type=node_type,
        loads=loads,
        response=None if response is None else np.array(response, dtype=np.float64).reshape(n, -1),
        triangles=None if triangles is None else np.array(triangles, dtype=np.int64),
    )
    if partition is not None and len(partition) != n:
        raise SampleFormatError(f"field 'partition': {len(partition)} entries for {n} nodes")
    return Sample(graph, partition, dict(doc.get("metadata") or {}))


def save_sample(sample: Sample, path) -> None:
    # json writes floats via repr(), which round-trips float64 exactly.
    Path(path).write_text(json.dumps(sample_to_dict(sample)))


def load_sample(path) -> Sample:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SampleFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return sample_from_dict(doc)
    except SampleFormatError as exc:
        raise type(exc)(f"{path}: {exc}") from None
