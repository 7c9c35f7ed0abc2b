"""Generate one holed cantilever, solve it, and look at its coarse graph.

Run: python3 demos/beam_and_coarsening.py
"""

import math

import numpy as np

from twolevel_mgn.coarsen import ALGORITHMS, build_coarse_graph, louvain, modularity, partition_graph
from twolevel_mgn.fem import BeamSpec, generate_beam_mesh, make_sample, default_hole_grid, solve_static
from twolevel_mgn.mesh import LOADED
from twolevel_mgn.spectral import laplacian_pe

# a slender beam without a hole against the Euler-Bernoulli tip deflection
spec = BeamSpec(divisions=(200, 30))
mesh = generate_beam_mesh(spec)
tip = -solve_static(mesh).displacement[mesh.node_type == LOADED, 1].mean()
analytic = 300 * 100**3 / (3 * 200000 * 15**3 / 12)
print(f"tip deflection {tip:.4f} mm, beam theory {analytic:.4f} mm ({100 * (tip / analytic - 1):+.1f}%)")

# one training-style sample: hole from the standard grid, load tilted by 10 degrees
sample = make_sample(BeamSpec(hole=default_hole_grid()[40], force_angle=math.radians(10)))
g = sample.graph
print(f"\nholed sample: {g.num_nodes} nodes, {g.num_edges // 2} edges, "
      f"peak von Mises {g.response.max():.1f} MPa")

part = louvain(g)
coarse = build_coarse_graph(g, part)
print(f"louvain: {part.num_groups} groups, modularity {modularity(g, part):.3f}, "
      f"group sizes {sorted(part.group_sizes.tolist())}")
pe = laplacian_pe(coarse, 8).matrix
print(f"positional encoding {pe.shape}, column norms {np.round(np.linalg.norm(pe, axis=0), 6).tolist()}")

print("\nalternatives with the same group budget:")
for algo in ALGORITHMS[1:]:
    p = partition_graph(g, algo, k=part.num_groups, seed=0)
    print(f"  {algo:9s} {p.num_groups:3d} groups, modularity {modularity(g, p):.3f}")
