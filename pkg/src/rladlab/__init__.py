"""Layout-conditioned latent diffusion lab with a full evaluation stack.

Subpackage map: procedural data (`toydata`), diffusion math (`diffusion`),
frozen autoencoder (`codec`), layout conditioning (`conditioning`),
transformer denoiser (`denoiser`), the training loop (`training`), guided
sampling and paired generation (`sampling`), segmentation and augmentation
(`segmentation`), metrics (`metrics`), skeleton morphometry
(`vasculometry`), and the pinned end-to-end pipeline (`repro`, `cli`).
"""

from .diffusion import NoiseSchedule, make_linear_schedule, q_sample, reverse_step
from .metrics import cldice, dice, feature_encode, frechet_distance, iou, pearson
from .sampling import SamplerConfig, cfg_combine, generate_paired_dataset, sample
from .skeleton import thin_mask
from .toydata import (
    BranchingConfig,
    LayoutBundle,
    RenderStyle,
    make_dataset,
    make_layout,
    oracle_extract,
    render,
)
from .vasculometry import build_graph, correlation_report, measure

__version__ = "0.1.0"

__all__ = [
    "BranchingConfig",
    "LayoutBundle",
    "NoiseSchedule",
    "RenderStyle",
    "SamplerConfig",
    "build_graph",
    "cfg_combine",
    "cldice",
    "correlation_report",
    "dice",
    "feature_encode",
    "frechet_distance",
    "generate_paired_dataset",
    "iou",
    "make_dataset",
    "make_layout",
    "make_linear_schedule",
    "measure",
    "oracle_extract",
    "pearson",
    "q_sample",
    "render",
    "reverse_step",
    "sample",
    "thin_mask",
    "__version__",
]
