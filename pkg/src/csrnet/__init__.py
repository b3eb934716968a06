"""Cross-scale residual network for super-resolution, denoising and JPEG deblocking."""
from . import degrade, io, metrics, network, tensor, train
from .degrade import DegradationSpec, degrade as apply_degradation
from .metrics import QualityReport, evaluate, psnr, ssim
from .network import NetConfig, Network, build_network, forward, make_variant, manifest, predict
from .tensor import ConvWeights, ShapeError, Tape, Tensor, backward, verification_mode
from .train import (
    Checkpoint,
    CheckpointError,
    NumericalError,
    TrainConfig,
    TrainLog,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .train import train as train_network

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConvWeights",
    "DegradationSpec",
    "NetConfig",
    "Network",
    "NumericalError",
    "QualityReport",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainLog",
    "apply_degradation",
    "backward",
    "build_network",
    "degrade",
    "evaluate",
    "forward",
    "io",
    "load_checkpoint",
    "make_variant",
    "manifest",
    "metrics",
    "network",
    "predict",
    "psnr",
    "save_checkpoint",
    "sgd_step",
    "ssim",
    "tensor",
    "train",
    "train_network",
    "verification_mode",
]
