"""Unsupervised low-light video enhancement with Retinex decomposition,
temporal feedback, and zero-shot denoising losses."""

from .data_io import (
    Frame,
    FrameSequence,
    RunConfig,
    load_config,
    load_sequence,
    save_sequence,
    synth_sequence,
    to_array,
    to_tensor,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    DomainError,
    EstimatorUnavailableError,
    IoError,
    NoFramesError,
    NumericalError,
    ShapeError,
    ShapeMismatchError,
    TempRetinexError,
)
from .flow import make_estimator
from .metrics import EvalReport, evaluate
from .networks import EnhancementNets, load_checkpoint, save_checkpoint
from .pipeline import (
    FrameResult,
    TemporalState,
    enhance_frame,
    enhance_sequence,
    reverse_inference,
    train,
)
from .preprocessing import apply_aba, histogram_match, pair_downsample

__version__ = "0.1.0"

__all__ = [
    "Frame",
    "FrameSequence",
    "RunConfig",
    "load_config",
    "load_sequence",
    "save_sequence",
    "synth_sequence",
    "to_array",
    "to_tensor",
    "TempRetinexError",
    "NoFramesError",
    "ShapeMismatchError",
    "ShapeError",
    "DomainError",
    "ConfigError",
    "IoError",
    "CheckpointError",
    "EstimatorUnavailableError",
    "NumericalError",
    "DivergenceError",
    "make_estimator",
    "EvalReport",
    "evaluate",
    "EnhancementNets",
    "load_checkpoint",
    "save_checkpoint",
    "FrameResult",
    "TemporalState",
    "enhance_frame",
    "enhance_sequence",
    "reverse_inference",
    "train",
    "apply_aba",
    "histogram_match",
    "pair_downsample",
    "__version__",
]
