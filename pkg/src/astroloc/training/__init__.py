"""Framework-free training machinery for the retrieval head."""
from .augment import AugmentationParams, AugmentationPlan, AugmentationRanges, yearwise_augment
from .clustering import BatchSpec, ClusterConfig, clustered_batches, kmeans, random_batches
from .gradcheck import grad_check
from .losses import LossParams, chain_grad_to_embeddings, ms_loss, na_ms_loss, similarity_matrix
from .trainer import (
    AblationConfig,
    OptimizerConfig,
    QuadrupletDataset,
    ReplayConfig,
    TrainingDivergedError,
    TrainResult,
    train_linear_head,
)

__all__ = [
    "AblationConfig", "AugmentationParams", "AugmentationPlan", "AugmentationRanges", "BatchSpec",
    "ClusterConfig", "LossParams", "OptimizerConfig", "QuadrupletDataset", "ReplayConfig", "TrainResult",
    "TrainingDivergedError", "chain_grad_to_embeddings", "clustered_batches", "grad_check", "kmeans",
    "ms_loss", "na_ms_loss", "random_batches", "similarity_matrix", "train_linear_head", "yearwise_augment",
]
