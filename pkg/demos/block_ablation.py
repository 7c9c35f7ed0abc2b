"""Compare the four block orderings at a matched parameter budget.

Run: python3 demos/block_ablation.py   (about ten minutes on one core)
"""

import math

import numpy as np

from twolevel_mgn.experiments import block_ablation
from twolevel_mgn.fem import DEFAULT_ANGLES_DEG, BeamSpec, make_sample, default_hole_grid, split_indices
from twolevel_mgn.model import ModelConfig, prepare
from twolevel_mgn.training import TrainConfig

holes = default_hole_grid()
idx = np.unique(np.linspace(0, len(holes) - 1, 20).round().astype(int))
data = [prepare(make_sample(BeamSpec(divisions=(25, 4), hole=holes[i], force_angle=math.radians(a))), 8)
        for i in idx for a in DEFAULT_ANGLES_DEG]
tr, va, te = ([data[i] for i in part] for part in split_indices(len(data), 0))

rows = block_ablation(tr, va, te, ModelConfig(M=3, hidden=32, heads=2, k_pe=8),
                      TrainConfig(learning_rate=1e-3, max_steps=3000, eval_every=1000, seed=0))
print(f"{'ordering':9s} {'M':>2s} {'params':>7s} {'test MSE':>10s}")
for r in rows:
    print(f"{r['block_order']:9s} {r['M']:2d} {r['params']:7d} {r['test_mse']:10.2f}")
