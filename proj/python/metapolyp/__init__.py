"""Python bindings for the Meta-Polyp segmentation engine.

Images are float32 arrays of shape (H, W, 3) scaled to [-1, 1]; masks and
probability maps are (H, W, 1).
"""

from ._core import (
    CheckpointError,
    ConfigError,
    DimensionError,
    Error,
    Model,
    ModelConfig,
    NumericError,
    PairingError,
    ParseError,
    UsageError,
    binarize,
    cosine_lr,
    dice,
    flip_h,
    flip_v,
    gradient_suite,
    iou,
    jaccard_loss,
    load_dataset,
    mae,
    run_cli,
    synth_polyp,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
