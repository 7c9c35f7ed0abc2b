"""Cantilever-beam meshes and a constant-strain-triangle plane-stress solver.

This is the ground-truth generator for training data: it meshes a 2D beam
(optionally with a circular hole), clamps the left edge, loads the right
edge and returns nodal von Mises stress.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import FIXED, INTERIOR, MeshGraph, Sample, distribute_load, save_sample, validate


class MeshError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Material:
    youngs_modulus: float = 200000.0  # MPa
    poisson_ratio: float = 0.3
    thickness: float = 1.0  # mm

    def __post_init__(self):
        if not self.youngs_modulus > 0:
            raise ValueError("youngs_modulus must be positive")
        if not 0 < self.poisson_ratio < 0.5:
            raise ValueError("poisson_ratio must lie in (0, 0.5)")
        if not self.thickness > 0:
            raise ValueError("thickness must be positive")

    def plane_stress_matrix(self) -> np.ndarray:
        E, nu = self.youngs_modulus, self.poisson_ratio
        c = E / (1.0 - nu * nu)
        return c * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, (1.0 - nu) / 2.0]])


@dataclass(frozen=True)
class Hole:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class BeamSpec:
    length: float = 100.0
    height: float = 15.0
    divisions: tuple[int, int] = (50, 8)
    hole: Hole | None = None
    force_magnitude: float = 300.0
    force_angle: float = 0.0  # radians, measured from the -y axis
    material: Material = Material()

    def __post_init__(self):
        nx, ny = self.divisions
        if nx < 2 or ny < 2:
            raise ValueError(f"divisions must be >= 2 in each direction, got {self.divisions}")
        if not (self.length > 0 and self.height > 0):
            raise ValueError("beam dimensions must be positive")
        if self.hole is not None:
            (cx, cy), r = self.hole.center, self.hole.radius
            if r <= 0:
                raise ValueError("hole radius must be positive")
            # the gap between hole and every beam edge must be at least one radius
            gaps = (cx - r, self.length - cx - r, cy - r, self.height - cy - r)
            if min(gaps) < r - 1e-12:
                raise ValueError(f"hole at {self.hole.center} with radius {r} is too close to the beam boundary")

    @property
    def force(self) -> np.ndarray:
        return self.force_magnitude * np.array([math.sin(self.force_angle), -math.cos(self.force_angle)])


def _triangle_pairs(triangles: np.ndarray) -> np.ndarray:
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _is_connected(n: int, pairs: np.ndarray) -> bool:
    if n == 0:
        return True
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, j in pairs:
        adj[i].append(j)
        adj[j].append(i)
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                queue.append(v)
    return bool(seen.all())


def generate_beam_mesh(spec: BeamSpec) -> MeshGraph:
    """Structured triangulation of the beam with fixed left edge and loaded right edge."""
    nx, ny = spec.divisions
    xs = np.linspace(0.0, spec.length, nx + 1)
    ys = np.linspace(0.0, spec.height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    coords = np.stack([X.ravel(), Y.ravel()], axis=1)

    def node(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    tris = np.array(tris, dtype=np.int64)

    if spec.hole is not None:
        centroids = coords[tris].mean(axis=1)
        inside = np.linalg.norm(centroids - np.asarray(spec.hole.center), axis=1) < spec.hole.radius
        tris = tris[~inside]
        used = np.unique(tris)
        remap = -np.ones(len(coords), dtype=np.int64)
        remap[used] = np.arange(len(used))
        coords = coords[used]
        tris = remap[tris]

    pairs = _triangle_pairs(tris)
    if not _is_connected(len(coords), pairs):
        raise MeshError("mesh disconnected")

    tol = 1e-9 * spec.length
    node_type = np.full(len(coords), INTERIOR, dtype=np.int64)
    node_type[coords[:, 0] <= tol] = FIXED
    right = np.flatnonzero(coords[:, 0] >= spec.length - tol)
    graph = MeshGraph.from_undirected(coords, pairs, node_type=node_type, triangles=tris)
    return distribute_load(spec.force, right, graph)


def _element_matrices(coords: np.ndarray, tris: np.ndarray):
    """Strain-displacement matrices (T x 3 x 6) and element areas for CSTs."""
    p = coords[tris]  # T x 3 x 2
    x1, y1 = p[:, 0, 0], p[:, 0, 1]
    x2, y2 = p[:, 1, 0], p[:, 1, 1]
    x3, y3 = p[:, 2, 0], p[:, 2, 1]
    det = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1)
    area = 0.5 * det
    if np.any(np.abs(area) <= 1e-14 * np.max(np.abs(coords)) ** 2):
        raise MeshError("degenerate triangle in mesh")
    b = np.stack([y2 - y3, y3 - y1, y1 - y2], axis=1)
    c = np.stack([x3 - x2, x1 - x3, x2 - x1], axis=1)
    B = np.zeros((len(tris), 3, 6))
    B[:, 0, 0::2] = b
    B[:, 1, 1::2] = c
    B[:, 2, 0::2] = c
    B[:, 2, 1::2] = b
    B /= det[:, None, None]
    return B, np.abs(area)


def _dofs(tris: np.ndarray) -> np.ndarray:
    return np.stack([2 * tris, 2 * tris + 1], axis=2).reshape(len(tris), 6)


def assemble_stiffness(mesh: MeshGraph, material: Material) -> sp.csr_matrix:
    if mesh.triangles is None:
        raise MeshError("mesh has no triangle connectivity")
    B, area = _element_matrices(mesh.node_coords, mesh.triangles)
    D = material.plane_stress_matrix()
    ke = material.thickness * area[:, None, None] * np.einsum("tki,kl,tlj->tij", B, D, B)
    dofs = _dofs(mesh.triangles)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n = 2 * mesh.num_nodes
    return sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()


@dataclass
class StaticSolution:
    displacement: np.ndarray  # N x 2, mm
    stress: np.ndarray  # N, von Mises, MPa
    element_stress: np.ndarray  # T x 3 (sxx, syy, sxy)
    reactions: np.ndarray  # N x 2, nonzero only at fixed nodes


def von_mises(s: np.ndarray) -> np.ndarray:
    sxx, syy, sxy = s[..., 0], s[..., 1], s[..., 2]
    return np.sqrt(np.maximum(sxx * sxx - sxx * syy + syy * syy + 3.0 * sxy * sxy, 0.0))


def solve_static(mesh: MeshGraph, material: Material = Material(), method: str = "direct",
                 rtol: float = 1e-10, maxiter: int | None = None) -> StaticSolution:
    """Linear static solve with all DOFs of fixed nodes clamped."""
    if mesh.dim != 2:
        raise MeshError("solve_static supports 2D meshes only")
    K = assemble_stiffness(mesh, material)
    n = mesh.num_nodes
    fixed_nodes = np.flatnonzero(mesh.node_type == FIXED)
    fixed = np.sort(np.concatenate([2 * fixed_nodes, 2 * fixed_nodes + 1]))
    if len(fixed) < 3:
        raise SolverError(f"singular system: only {len(fixed)} constrained DOFs, need at least 3")
    free = np.setdiff1d(np.arange(2 * n), fixed)
    f = mesh.loads.reshape(-1)
    Kff = K[free][:, free].tocsc()
    u = np.zeros(2 * n)
    if not np.any(f[free]):
        u_free = np.zeros(len(free))
    elif method == "direct":
        try:
            lu = spla.splu(Kff)
        except RuntimeError as exc:
            raise SolverError(f"singular system: {exc}") from None
        u_free = lu.solve(f[free])
        if not np.all(np.isfinite(u_free)):
            raise SolverError("singular system: non-finite solution")
    elif method == "cg":
        maxiter = maxiter or 10 * len(free)
        u_free, info = spla.cg(Kff, f[free], rtol=rtol, maxiter=maxiter)
        res = np.linalg.norm(Kff @ u_free - f[free]) / np.linalg.norm(f[free])
        if info != 0 or res > rtol:
            raise SolverError(f"CG did not converge in {maxiter} iterations (relative residual {res:.3e})")
    else:
        raise ValueError(f"unknown method {method!r}")
    u[free] = u_free
    # rigid modes left unconstrained show up as a residual mismatch
    res = np.linalg.norm(Kff @ u_free - f[free])
    if res > 1e-6 * max(np.linalg.norm(f[free]), 1e-300) and np.any(f[free]):
        raise SolverError(f"singular system: residual {res:.3e} after solve")

    reactions = (K @ u - f).reshape(n, 2)
    reactions[mesh.node_type != FIXED] = 0.0

    B, _ = _element_matrices(mesh.node_coords, mesh.triangles)
    D = material.plane_stress_matrix()
    ue = u[_dofs(mesh.triangles)]
    strain = np.einsum("tij,tj->ti", B, ue)
    elem_stress = strain @ D.T
    elem_vm = von_mises(elem_stress)
    total = np.zeros(n)
    count = np.zeros(n)
    for k in range(3):
        np.add.at(total, mesh.triangles[:, k], elem_vm)
        np.add.at(count, mesh.triangles[:, k], 1.0)
    nodal = total / np.maximum(count, 1.0)
    return StaticSolution(u.reshape(n, 2), nodal, elem_stress, reactions)


# --------------------------------------------------------------------- datasets

DEFAULT_ANGLES_DEG = (-20.0, -10.0, 0.0, 10.0, 20.0)


def default_hole_grid(ni: int = 3, nj: int = 37, radius: float = 2.5) -> list[Hole]:
    """The 3 x 37 grid of hole centres, 2.5 mm apart starting 5 mm from the corner.

    ``j`` runs along the beam length and ``i`` across its height; the other
    orientation would put most holes outside a 100 x 15 beam.
    """
    return [Hole((5.0 + 2.5 * j, 5.0 + 2.5 * i), radius) for j in range(nj) for i in range(ni)]


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> tuple[list[int], list[int], list[int]]:
    """Seeded shuffle followed by an 80/10/10 cut (rounded, train absorbs remainder)."""
    rng = np.random.default_rng([seed, 0x5B17])
    order = rng.permutation(n).tolist()
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def make_sample(spec: BeamSpec, name: str = "") -> Sample:
    mesh = generate_beam_mesh(spec)
    sol = solve_static(mesh, spec.material)
    graph = mesh.replace(response=sol.stress[:, None])
    problems = validate(graph)
    if problems:
        raise MeshError(f"{name}: generated mesh invalid: {problems[:3]}")
    meta = {
        "name": name,
        "generator": "cantilever-beam CST plane stress",
        "length": spec.length,
        "height": spec.height,
        "divisions": list(spec.divisions),
        "hole": None if spec.hole is None else {"center": list(spec.hole.center), "radius": spec.hole.radius},
        "force_magnitude": spec.force_magnitude,
        "force_angle_deg": math.degrees(spec.force_angle),
        "material": asdict(spec.material),
    }
    return Sample(graph, None, meta)


def generate_dataset(holes, angles_deg, out_dir, divisions=(50, 8), seed: int = 0,
                     material: Material = Material(), force_magnitude: float = 300.0) -> dict:
    """Solve every (hole, angle) combination and write samples plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for h_idx, hole in enumerate(holes):
        for a_idx, ang in enumerate(angles_deg):
            name = f"beam_h{h_idx:03d}_a{a_idx}"
            try:
                spec = BeamSpec(divisions=tuple(divisions), hole=hole, force_magnitude=force_magnitude,
                                force_angle=math.radians(ang), material=material)
                sample = make_sample(spec, name)
            except (MeshError, SolverError, ValueError) as exc:
                raise type(exc)(f"sample {name} (hole={hole}, angle={ang} deg): {exc}") from None
            fname = f"{name}.json"
            save_sample(sample, out / fname)
            files.append(fname)
    train, val, test = split_indices(len(files), seed)
    manifest = {
        "seed": seed,
        "files": files,
        "train": [files[i] for i in train],
        "val": [files[i] for i in val],
        "test": [files[i] for i in test],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
