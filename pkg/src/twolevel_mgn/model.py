"""Two-level mesh graph network: encoder, interleaved graph/attention blocks, decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .coarsen import CoarseGraph, Partition, build_coarse_graph, partition_graph
from .mesh import MeshGraph, Sample, edge_features
from .spectral import laplacian_pe

if TYPE_CHECKING:
    from .training import Normalizer

BLOCK_ORDERS = ("GBK_ABK", "ABK_GBK", "GBK_only", "ABK_only")
NUM_NODE_TYPES = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    M: int = 7
    hidden: int = 128
    heads: int = 4
    k_pe: int = 8
    mlp_hidden_layers: int = 2
    output_dim: int = 1
    dim: int = 2
    block_order: str = "GBK_ABK"

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} must be divisible by heads={self.heads}")
        if self.k_pe < 1:
            raise ConfigError("k_pe must be >= 1")
        if self.mlp_hidden_layers < 1:
            raise ConfigError("mlp_hidden_layers must be >= 1")
        if self.block_order not in BLOCK_ORDERS:
            raise ConfigError(f"block_order must be one of {BLOCK_ORDERS}")

    @property
    def node_feature_dim(self) -> int:
        return self.dim + NUM_NODE_TYPES

    @property
    def edge_feature_dim(self) -> int:
        return self.dim + 1

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def blocks(self) -> list[tuple[str, int]]:
        """Processor schedule as (block kind, layer index) pairs."""
        r = range(self.M)
        if self.block_order == "GBK_ABK":
            return [b for l in r for b in (("gbk", l), ("abk", l))]
        if self.block_order == "ABK_GBK":
            return [b for l in r for b in (("abk", l), ("gbk", l))]
        if self.block_order == "GBK_only":
            return [("gbk", l) for l in r]
        return [("abk", l) for l in r]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class GraphInputs:
    """A sample with its coarse topology and positional encoding precomputed."""

    name: str
    coords: np.ndarray
    loads: np.ndarray
    node_type: np.ndarray
    edges: np.ndarray
    edge_raw: np.ndarray
    partition: Partition
    coarse: CoarseGraph
    pe: np.ndarray
    response: np.ndarray | None

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[0]


def prepare(sample: Sample, k_pe: int, algorithm: str = "louvain", seed: int = 0) -> GraphInputs:
    """Attach partition, coarse graph and PE. Uses the cached partition when present."""
    g = sample.graph
    if sample.partition is not None:
        part = Partition.from_labels(sample.partition)
    else:
        part = partition_graph(g, algorithm, seed=seed)
    return prepare_with_partition(g, part, k_pe, name=str(sample.metadata.get("name", "")))


def prepare_with_partition(g: MeshGraph, part: Partition, k_pe: int, name: str = "") -> GraphInputs:
    if len(part) != g.num_nodes:
        raise ValueError(f"partition covers {len(part)} nodes, graph has {g.num_nodes}")
    coarse = build_coarse_graph(g, part)
    pe = laplacian_pe(coarse, k_pe).matrix
    return GraphInputs(name, g.node_coords, g.loads, g.node_type, g.edges, edge_features(g),
                       part, coarse, pe, g.response)


# ------------------------------------------------------------------- params

def _mlp_shapes(prefix: str, d_in: int, hidden: int, d_out: int, layers: int) -> list[tuple[str, tuple]]:
    dims = [d_in] + [hidden] * layers + [d_out]
    out = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        out += [(f"{prefix}.{i}.W", (a, b)), (f"{prefix}.{i}.b", (b,))]
    return out


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    h, L = cfg.hidden, cfg.mlp_hidden_layers
    shapes = _mlp_shapes("enc_v", cfg.node_feature_dim, h, h, L)
    shapes += _mlp_shapes("enc_e", cfg.edge_feature_dim, h, h, L)
    for kind, l in cfg.blocks():
        if kind == "gbk":
            shapes += _mlp_shapes(f"gbk{l}.fe", 3 * h, h, h, L)
            shapes += _mlp_shapes(f"gbk{l}.fv", 2 * h, h, h, L)
        else:
            shapes += [(f"abk{l}.ln1.g", (h,)), (f"abk{l}.ln1.b", (h,)),
                       (f"abk{l}.qkv.W", (h + cfg.k_pe, 3 * h)), (f"abk{l}.qkv.b", (3 * h,)),
                       (f"abk{l}.proj.W", (h, h)), (f"abk{l}.proj.b", (h,)),
                       (f"abk{l}.ln2.g", (h,)), (f"abk{l}.ln2.b", (h,))]
            shapes += _mlp_shapes(f"abk{l}.mlp", h, h, h, L)
    shapes += _mlp_shapes("dec", h, h, cfg.output_dim, L)
    return shapes


def init_parameters(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Uniform in +-sqrt(1/fan_in) for linear layers; layer norms start at gain 1, bias 0."""
    params = {}
    fan_in = {}
    for name, shape in parameter_shapes(cfg):
        if name.endswith(".W"):
            fan_in[name[:-2]] = shape[0]
    for name, shape in parameter_shapes(cfg):
        if ".ln" in name:
            data = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        else:
            bound = math.sqrt(1.0 / fan_in[name[:-2]])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# -------------------------------------------------------------------- model

class TwoLevelMGN:
    """Encoder, processor of graph/attention blocks, decoder.

    ``forward`` returns predictions in normalised output units; ``predict``
    de-normalises to physical units.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        if params is None:
            params = init_parameters(config, np.random.default_rng(seed))
        expected = dict(parameter_shapes(config))
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter names do not match config (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"parameter {name}: shape {params[name].shape}, config expects {shape}")
        self.params = {name: params[name] for name in expected}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        n = self.config.mlp_hidden_layers + 1
        for i in range(n):
            x = ad.linear(x, self.params[f"{prefix}.{i}.W"], self.params[f"{prefix}.{i}.b"])
            if i < n - 1:
                x = ad.relu(x)
        return x

    # -- stages ------------------------------------------------------------

    def encode(self, inp: GraphInputs, normalizer: "Normalizer", loads: Tensor | None = None):
        cfg = self.config
        if inp.loads.shape[1] != cfg.dim:
            raise ConfigError(f"sample dimension {inp.loads.shape[1]} does not match config dim {cfg.dim}")
        if loads is None:
            loads = Tensor(inp.loads)
        f_norm = ad.mul(ad.sub(loads, normalizer.load_mean), 1.0 / normalizer.load_std)
        onehot = np.zeros((inp.num_nodes, NUM_NODE_TYPES))
        onehot[np.arange(inp.num_nodes), inp.node_type] = 1.0
        node_in = ad.concat([f_norm, Tensor(onehot)], axis=1)
        edge_in = Tensor((inp.edge_raw - normalizer.edge_mean) / normalizer.edge_std)
        return self._mlp("enc_v", node_in), self._mlp("enc_e", edge_in)

    def graph_block(self, l: int, V: Tensor, E: Tensor, edges: np.ndarray):
        recv, send = edges[:, 0], edges[:, 1]
        e_in = ad.concat([E, ad.gather_rows(V, recv), ad.gather_rows(V, send)], axis=1)
        E = ad.add(E, self._mlp(f"gbk{l}.fe", e_in))
        agg = ad.segment_sum_edges(E, recv, V.shape[0])
        V = ad.add(V, self._mlp(f"gbk{l}.fv", ad.concat([V, agg], axis=1)))
        return V, E

    def attention_block(self, l: int, V: Tensor, partition: Partition, pe: np.ndarray) -> Tensor:
        cfg = self.config
        p = self.params
        if len(partition) != V.shape[0]:
            raise ValueError(f"partition covers {len(partition)} nodes, embeddings have {V.shape[0]}")
        if pe.shape != (partition.num_groups, cfg.k_pe):
            raise ValueError(f"PE shape {pe.shape} does not match ({partition.num_groups}, {cfg.k_pe})")
        Vc = ad.segment_mean(V, partition.assignment, partition.num_groups)
        Z = ad.concat([ad.layer_norm(Vc, p[f"abk{l}.ln1.g"], p[f"abk{l}.ln1.b"]), Tensor(pe)], axis=1)
        qkv = ad.linear(Z, p[f"abk{l}.qkv.W"], p[f"abk{l}.qkv.b"])
        h, dn = cfg.hidden, cfg.head_dim
        scale = 1.0 / math.sqrt(dn)
        heads = []
        for k in range(cfg.heads):
            q = qkv[:, k * dn:(k + 1) * dn]
            key = qkv[:, h + k * dn:h + (k + 1) * dn]
            val = qkv[:, 2 * h + k * dn:2 * h + (k + 1) * dn]
            att = ad.softmax_rows(ad.mul(ad.matmul(q, ad.transpose(key)), scale))
            heads.append(ad.matmul(att, val))
        attn = ad.linear(ad.concat(heads, axis=1), p[f"abk{l}.proj.W"], p[f"abk{l}.proj.b"])
        # coarse update relative to the aggregated input; the residual stream stays on the fine nodes
        mixed = ad.add(attn, Vc)
        delta = ad.add(self._mlp(f"abk{l}.mlp", ad.layer_norm(mixed, p[f"abk{l}.ln2.g"], p[f"abk{l}.ln2.b"])), attn)
        return ad.add(V, ad.gather_rows(delta, partition.assignment))

    def processor(self, V: Tensor, E: Tensor, inp: GraphInputs) -> Tensor:
        for kind, l in self.config.blocks():
            if kind == "gbk":
                V, E = self.graph_block(l, V, E, inp.edges)
            else:
                V = self.attention_block(l, V, inp.partition, inp.pe)
        return V

    def decode(self, V: Tensor) -> Tensor:
        return self._mlp("dec", V)

    def forward(self, inp: GraphInputs, normalizer: "Normalizer", loads: Tensor | None = None) -> Tensor:
        V, E = self.encode(inp, normalizer, loads)
        return self.decode(self.processor(V, E, inp))

    def predict(self, inp: GraphInputs, normalizer: "Normalizer") -> np.ndarray:
        """Per-node prediction in physical units."""
        return normalizer.denormalize_output(self.forward(inp, normalizer).data)

    __call__ = forward
