"""Mesh autoencoders whose pooling/unpooling matrices are learned with
key/query attention and blended with QEM-derived matrices."""

from .aggregation import (AttentionAggregator, MappingMatrix, compatibility_scores, export_fixed,
                          fuse, normalize_masked, topk_mask)
from .autograd import Tape, Tensor, backward
from .data import MeshSequenceDataset, generate_synthetic_dataset
from .decimation import MeshHierarchy, build_hierarchy, qem_decimate
from .mesh import TriMesh, icosphere, load_mesh, save_mesh
from .model import Autoencoder, ModelConfig, build
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Autoencoder", "AttentionAggregator", "MappingMatrix", "MeshHierarchy", "MeshSequenceDataset",
    "ModelConfig", "Tape", "Tensor", "TrainConfig", "TriMesh", "backward", "build", "build_hierarchy",
    "compatibility_scores", "evaluate", "export_fixed", "fuse", "generate_synthetic_dataset",
    "icosphere", "load_mesh", "normalize_masked", "qem_decimate", "save_mesh", "topk_mask", "train",
]
