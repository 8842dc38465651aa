"""Pose Refinement Graph Convolutional Network for skeleton-based action recognition."""

from .graph import Skeleton, PartitionedAdjacency, build_skeleton, normalized_adjacency, partition_neighbors
from .model import ModelConfig, PrGcnModel, count_flops, count_params, load_checkpoint, save_checkpoint

__all__ = [
    "ModelConfig", "PartitionedAdjacency", "PrGcnModel", "Skeleton", "build_skeleton", "count_flops",
    "count_params", "load_checkpoint", "normalized_adjacency", "partition_neighbors", "save_checkpoint",
]
