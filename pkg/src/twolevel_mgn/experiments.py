"""Dataset loading and the ablation protocols (block order, coarsening, coordinate shift)."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .coarsen import ALGORITHMS, louvain, partition_graph
from .mesh import Sample, load_sample
from .model import BLOCK_ORDERS, GraphInputs, ModelConfig, TwoLevelMGN, parameter_shapes, prepare, prepare_with_partition
from .training import Normalizer, TrainConfig, evaluate_mse, fit_normalizer, stream_seed, train


class DataError(ValueError):
    pass


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {data_dir}")
    return json.loads(path.read_text())


def load_split(data_dir, split: str) -> list[Sample]:
    manifest = read_manifest(data_dir)
    if split not in ("train", "val", "test", "files"):
        raise DataError(f"unknown split {split!r}")
    return [load_sample(Path(data_dir) / f) for f in manifest[split]]


def prepare_all(samples: Sequence[Sample], k_pe: int, require_partition: bool = True) -> list[GraphInputs]:
    out = []
    for s in samples:
        if require_partition and s.partition is None:
            raise DataError(f"sample {s.metadata.get('name', '?')!r} has no cached partition; run preprocess first")
        out.append(prepare(s, k_pe))
    return out


def count_parameters(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in parameter_shapes(cfg))


def matched_config(base: ModelConfig, order: str) -> ModelConfig:
    """Config with ``block_order=order`` whose layer count best matches the parameter budget of ``base``."""
    target = count_parameters(base)
    best = None
    for M in range(1, 4 * base.M + 1):
        cfg = replace(base, block_order=order, M=M)
        gap = abs(count_parameters(cfg) - target)
        if best is None or gap < best[0]:
            best = (gap, cfg)
    return best[1]


def fit_and_score(cfg: ModelConfig, train_set, val_set, test_set, tcfg: TrainConfig,
                  normalizer: Normalizer | None = None) -> dict:
    model = TwoLevelMGN(cfg, seed=int(np.random.default_rng(stream_seed(tcfg.seed, "init")).integers(2**31)))
    normalizer = normalizer or fit_normalizer(train_set)
    result = train(model, train_set, val_set, tcfg, normalizer)
    test = evaluate_mse(result.model, test_set, normalizer)
    return {"params": model.num_parameters(), "best_val": result.best_val, "test_mse": test["mean"],
            "model": result.model, "normalizer": normalizer}


def block_ablation(train_set, val_set, test_set, base: ModelConfig, tcfg: TrainConfig,
                   orders: Sequence[str] = BLOCK_ORDERS, match_params: bool = True) -> list[dict]:
    """Train each block ordering with the same seed and normalizer; report test MSE."""
    normalizer = fit_normalizer(train_set)
    rows = []
    for order in orders:
        cfg = replace(base, block_order=order)
        if match_params and order in ("GBK_only", "ABK_only"):
            cfg = matched_config(base, order)
        res = fit_and_score(cfg, train_set, val_set, test_set, tcfg, normalizer)
        rows.append({"block_order": order, "M": cfg.M, "params": res["params"],
                     "best_val_mse": res["best_val"], "test_mse": res["test_mse"]})
    return rows


def repartition(samples: Sequence[Sample], algorithm: str, seed: int = 0) -> tuple[list[Sample], list[int]]:
    """Recompute partitions; alternatives to Louvain get the Louvain group count of the same sample."""
    out, counts = [], []
    for s in samples:
        k = louvain(s.graph).num_groups
        part = partition_graph(s.graph, algorithm, k=k, seed=seed)
        out.append(s.with_partition(part.assignment))
        counts.append(part.num_groups)
    return out, counts


def coarsen_ablation(train_s, val_s, test_s, cfg: ModelConfig, tcfg: TrainConfig,
                     algorithms: Sequence[str] = ALGORITHMS, seed: int = 0) -> list[dict]:
    rows = []
    for algo in algorithms:
        tr, c_tr = repartition(train_s, algo, seed)
        va, _ = repartition(val_s, algo, seed)
        te, _ = repartition(test_s, algo, seed)
        res = fit_and_score(cfg, prepare_all(tr, cfg.k_pe), prepare_all(va, cfg.k_pe),
                            prepare_all(te, cfg.k_pe), tcfg)
        rows.append({"algorithm": algo, "mean_groups": float(np.mean(c_tr)), "params": res["params"],
                     "best_val_mse": res["best_val"], "test_mse": res["test_mse"]})
    return rows


def shifted(inp: GraphInputs, dx: float, axis: int = 0) -> GraphInputs:
    """The same sample with coordinates translated; partition and PE are carried over."""
    coords = inp.coords.copy()
    coords[:, axis] += dx
    disp = coords[inp.edges[:, 0]] - coords[inp.edges[:, 1]]
    edge_raw = np.concatenate([disp, np.linalg.norm(disp, axis=1, keepdims=True)], axis=1)
    return replace(inp, coords=coords, edge_raw=edge_raw)


def shift_test(model: TwoLevelMGN, samples: Sequence[GraphInputs], normalizer: Normalizer, dx: float) -> dict:
    before = evaluate_mse(model, samples, normalizer)["mean"]
    after = evaluate_mse(model, [shifted(s, dx) for s in samples], normalizer)["mean"]
    rel = abs(after - before) / max(abs(before), 1e-300)
    return {"dx": dx, "mse_before": before, "mse_after": after, "relative_change": rel}


__all__ = [
    "DataError", "read_manifest", "load_split", "prepare_all", "count_parameters", "matched_config",
    "block_ablation", "repartition", "coarsen_ablation", "shifted", "shift_test", "prepare_with_partition",
]
