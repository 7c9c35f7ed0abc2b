"""Train a small two-level model on a few beams, then probe translation and receptive field.

Run: python3 demos/train_and_probe.py   (under a minute on one core)
"""

import math

import numpy as np

from twolevel_mgn.experiments import shift_test
from twolevel_mgn.fem import DEFAULT_ANGLES_DEG, BeamSpec, make_sample, default_hole_grid, split_indices
from twolevel_mgn.model import ModelConfig, TwoLevelMGN, prepare
from twolevel_mgn.training import TrainConfig, evaluate_mse, sensitivity_map, train

holes = default_hole_grid()[::10]
data = [prepare(make_sample(BeamSpec(divisions=(25, 4), hole=h, force_angle=math.radians(a))), 8)
        for h in holes for a in DEFAULT_ANGLES_DEG]
tr, va, te = ([data[i] for i in idx] for idx in split_indices(len(data), 0))
print(f"{len(data)} samples: train {len(tr)}, val {len(va)}, test {len(te)}; {data[0].num_nodes} nodes each")

model = TwoLevelMGN(ModelConfig(M=3, hidden=32, heads=2, k_pe=8), seed=0)
result = train(model, tr, va, TrainConfig(learning_rate=1e-3, max_steps=1500, eval_every=300, seed=0))
for row in result.metrics:
    print(f"  step {row['step']:5d}  train loss {row['train_loss']:.4f}  val MSE {row['val_mse']:.2f}")
print(f"test MSE {evaluate_mse(model, te, result.normalizer)['mean']:.2f} MPa^2")

shift = shift_test(model, te, result.normalizer, dx=20.0)
print(f"shift by 20 mm: MSE {shift['mse_before']:.4f} -> {shift['mse_after']:.4f} "
      f"(relative change {shift['relative_change']:.1e})")

# lower-left corner node: how far does its output look?
inp = te[0]
corner = int(np.argmin(inp.coords[:, 0] + inp.coords[:, 1]))
g = sensitivity_map(model, inp, result.normalizer, corner)
far = inp.coords[:, 0] > 50
print(f"sensitivity of node {corner}: {np.count_nonzero(g[far])}/{far.sum()} nodes in the right half are nonzero")
