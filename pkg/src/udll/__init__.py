"""Deep subspace clustering with a locality-preserving prior graph, in plain numpy."""

__version__ = "0.1.0"

from .datasets import ImageDataset, downsample, load_binary, load_image_dir, save_binary, synth_blobs
from .estimator import UDLL, ConvAutoencoder
from .exceptions import ConvergenceError, DataFormatError, DivergenceError, ShapeError, UDLLError
from .metrics import clustering_accuracy, confusion_matrix, hungarian
from .model import (
    BENCHMARK_CONFIGS,
    HyperParams,
    LossTerms,
    ModelState,
    NetworkConfig,
    finetune,
    load_checkpoint,
    parameter_count,
    pretrain,
    save_checkpoint,
)
from .priorgraph import PriorGraph, build_prior_graph, check_prior_graph, load_graph, save_graph, solve_column
from .spectral import SpectralClustering, spectral_cluster

__all__ = [
    "ImageDataset", "downsample", "load_binary", "load_image_dir", "save_binary", "synth_blobs",
    "UDLL", "ConvAutoencoder",
    "ConvergenceError", "DataFormatError", "DivergenceError", "ShapeError", "UDLLError",
    "clustering_accuracy", "confusion_matrix", "hungarian",
    "BENCHMARK_CONFIGS", "HyperParams", "LossTerms", "ModelState", "NetworkConfig",
    "finetune", "load_checkpoint", "parameter_count", "pretrain", "save_checkpoint",
    "PriorGraph", "build_prior_graph", "check_prior_graph", "load_graph", "save_graph", "solve_column",
    "SpectralClustering", "spectral_cluster",
]
