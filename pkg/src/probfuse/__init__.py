"""Multi-view panoptic label fusion with diagonal-Gaussian instance embeddings."""

__version__ = "0.1.0"

from .core import EmbeddingTable, GaussianEmbedding, log_pp_kernel, pp_kernel, pp_kernel_grad, rbf_kernel
from .metrics import PanopticMask, pq_scene
from .mvoa import run_mvoa, select_prototypes
from .synth import apply_noise, generate_scene
from .trainer import TrainConfig, train

__all__ = [
    "EmbeddingTable",
    "GaussianEmbedding",
    "PanopticMask",
    "TrainConfig",
    "apply_noise",
    "generate_scene",
    "log_pp_kernel",
    "pp_kernel",
    "pp_kernel_grad",
    "pq_scene",
    "rbf_kernel",
    "run_mvoa",
    "select_prototypes",
    "train",
]
