"""Desk-scale super-resolution lab: segmentation-prior self-attention,
prunable residual dense blocks, and a tiny GAN training pipeline."""

from .attention import (
    CATEGORIES,
    AttentionState,
    SegProbMap,
    SpsaParams,
    export_attention_map,
    spsa_forward,
)
from .autodiff import (
    Graph,
    GraphError,
    ShapeError,
    Tensor,
    bicubic_resize,
    finite_diff_check,
)
from .blocks import BlockMask, PruneStats, kmeans_two, prune_decision, prune_network
from .data import DatasetManifest, psnr, read_segmap, rgb_to_y, ssim, write_segmap
from .training import (
    Discriminator,
    Generator,
    GeneratorConfig,
    TrainSchedule,
    build_generator,
    infer,
    load_checkpoint,
    save_checkpoint,
    train,
)

__all__ = [
    "AttentionState", "BlockMask", "CATEGORIES", "DatasetManifest",
    "Discriminator", "Generator", "GeneratorConfig", "Graph", "GraphError",
    "PruneStats", "SegProbMap", "ShapeError", "SpsaParams", "Tensor",
    "TrainSchedule", "bicubic_resize", "build_generator",
    "export_attention_map", "finite_diff_check", "infer", "kmeans_two",
    "load_checkpoint", "prune_decision", "prune_network", "psnr",
    "read_segmap", "rgb_to_y", "save_checkpoint", "spsa_forward", "ssim",
    "train", "write_segmap",
]
__version__ = "0.1.0"
