"""Two-level mesh graph network for stress prediction on 2D beam meshes.

Modules:
    mesh        graph containers, validation, JSON sample files
    fem         plane-stress CST solver and beam dataset generator
    coarsen     Louvain and five alternative node groupings
    spectral    Lanczos Laplacian eigenpairs and positional encodings
    autodiff    small reverse-mode tape over numpy arrays
    model       encoder, graph/attention blocks, decoder
    training    normalizer, Adam, checkpoints, evaluation
    experiments block-order, coarsening and shift ablations
    cli         ``twolevel-mgn`` command line
"""

from .coarsen import Partition, louvain, modularity, partition_graph
from .fem import BeamSpec, Material, generate_beam_mesh, make_sample, solve_static
from .mesh import MeshGraph, Sample, load_sample, save_sample, validate
from .model import ModelConfig, TwoLevelMGN, prepare
from .spectral import laplacian_pe, smallest_nonzero_eigenpairs
from .training import Normalizer, TrainConfig, fit_normalizer, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Partition", "louvain", "modularity", "partition_graph",
    "BeamSpec", "Material", "generate_beam_mesh", "make_sample", "solve_static",
    "MeshGraph", "Sample", "load_sample", "save_sample", "validate",
    "ModelConfig", "TwoLevelMGN", "prepare",
    "laplacian_pe", "smallest_nonzero_eigenpairs",
    "Normalizer", "TrainConfig", "fit_normalizer", "load_checkpoint", "save_checkpoint", "train",
]
