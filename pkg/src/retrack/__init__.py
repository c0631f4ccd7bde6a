"""retrack: temporal proposal reranking with attention heatmap evaluation.

A desk-scale tracking-by-detection stack: decayed-Gaussian attention
heatmaps with a five-metric evaluation suite, a cross-attention candidate
reranker with polar box refinement trained by hand-derived gradients, a
synthetic benchmark with a controllable detector, and a CLI harness.
"""

from .geometry import (
    BBox,
    FrameDims,
    PolarCorrection,
    ProposalSet,
    center_error,
    iou,
    motion_descriptor,
    polar_update,
    rescale_box,
    select_box,
)
from .heatmap import HeatmapConfig, HeatmapGenerator, generate_sequence, render_step
from .losses import LossBundle, LossConfig, loss_total
from .metrics import MetricReport, cc, evaluate_sequence, mae, mse, nss, sim
from .model import TrackerParams, init_params, load_params, save_params
from .synth import SceneConfig, SyntheticSequence, generate, recall_at_k
from .tracker import (
    GapDistribution,
    RerankTracker,
    TrackResult,
    TrainConfig,
    track,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "FrameDims",
    "PolarCorrection",
    "ProposalSet",
    "center_error",
    "iou",
    "motion_descriptor",
    "polar_update",
    "rescale_box",
    "select_box",
    "HeatmapConfig",
    "HeatmapGenerator",
    "generate_sequence",
    "render_step",
    "LossBundle",
    "LossConfig",
    "loss_total",
    "MetricReport",
    "cc",
    "evaluate_sequence",
    "mae",
    "mse",
    "nss",
    "sim",
    "TrackerParams",
    "init_params",
    "load_params",
    "save_params",
    "SceneConfig",
    "SyntheticSequence",
    "generate",
    "recall_at_k",
    "GapDistribution",
    "RerankTracker",
    "TrackResult",
    "TrainConfig",
    "track",
    "train",
    "__version__",
]
