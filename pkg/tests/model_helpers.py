"""Shared fixtures for model, training and acceptance tests."""

import math
from dataclasses import replace

import numpy as np

from twolevel_mgn.coarsen import Partition
from twolevel_mgn.fem import BeamSpec, Hole, make_sample
from twolevel_mgn.mesh import FIXED, LOADED, MeshGraph
from twolevel_mgn.model import GraphInputs, ModelConfig, TwoLevelMGN, prepare, prepare_with_partition
from twolevel_mgn.training import Normalizer, fit_normalizer


def beam_inputs(divisions=(6, 3), k_pe=4, angle_deg=10.0, hole=None) -> GraphInputs:
    spec = BeamSpec(divisions=divisions, hole=hole, force_angle=math.radians(angle_deg))
    return prepare(make_sample(spec), k_pe)


def holed_beam_inputs(k_pe=4) -> GraphInputs:
    return beam_inputs((20, 6), k_pe, hole=Hole((40.0, 7.5), 3.0))


def unit_normalizer(dim=2, out_dim=1) -> Normalizer:
    z = np.zeros
    return Normalizer(z(dim), np.ones(dim), z(dim + 1), np.ones(dim + 1), z(out_dim), np.ones(out_dim))


def path_inputs(n=20, k_pe=4, group=5, load_at=0, load=(0.0, -1.0)) -> GraphInputs:
    """A straight chain of ``n`` nodes, clamped at node n-1, chunked into groups of ``group``."""
    xy = np.stack([np.arange(n, dtype=float), np.zeros(n)], 1)
    node_type = np.zeros(n, dtype=np.int64)
    node_type[-1] = FIXED
    node_type[load_at] = LOADED
    loads = np.zeros((n, 2))
    loads[load_at] = load
    g = MeshGraph.from_undirected(xy, [[i, i + 1] for i in range(n - 1)], node_type=node_type, loads=loads,
                                  response=np.linspace(0, 1, n)[:, None])
    return prepare_with_partition(g, Partition(np.arange(n) // group, -(-n // group)), k_pe)


def with_loads(inp: GraphInputs, loads: np.ndarray) -> GraphInputs:
    return replace(inp, loads=loads)


def zero_residual_branches(model: TwoLevelMGN) -> None:
    """Zero every MLP final layer inside the processor and all attention/projection weights."""
    L = model.config.mlp_hidden_layers
    for name, p in model.params.items():
        head = name.split(".")[0]
        if not head.startswith(("gbk", "abk")):
            continue
        if f".{L}." in name or ".qkv." in name or ".proj." in name:
            p.data[...] = 0.0


def permute_inputs(inp: GraphInputs, order: np.ndarray) -> GraphInputs:
    """New node j is old node order[j]; edges, loads and partition follow."""
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    erows = np.random.default_rng(1).permutation(len(inp.edges))
    part = Partition(inp.partition.assignment[order], inp.partition.num_groups)
    resp = None if inp.response is None else inp.response[order]
    return GraphInputs(inp.name, inp.coords[order], inp.loads[order], inp.node_type[order],
                       inv[inp.edges[erows]], inp.edge_raw[erows], part, inp.coarse, inp.pe, resp)


def shifted_inputs(inp: GraphInputs, shift, k_pe: int) -> GraphInputs:
    """Rebuild the inputs from translated coordinates, keeping the partition."""
    g = MeshGraph(inp.coords + np.asarray(shift, dtype=float), inp.edges, inp.node_type, inp.loads,
                  response=inp.response)
    return prepare_with_partition(g, inp.partition, k_pe)


def tiny_config(**kw) -> ModelConfig:
    base = dict(M=2, hidden=8, heads=2, k_pe=2, mlp_hidden_layers=2)
    base.update(kw)
    return ModelConfig(**base)


def fitted(inp: GraphInputs) -> Normalizer:
    return fit_normalizer([inp])
