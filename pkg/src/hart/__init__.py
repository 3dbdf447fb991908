"""Hierarchical attentive recurrent tracking on a small numpy autodiff core."""
from .attention import AttentionParams, BoundingBox, SigmaPolynomial, extract_glimpse
from .losses import LossConfig, LossMode
from .tracker import HART, ModelConfig
from .train import EvalReport, TrainConfig, evaluate, train

__all__ = ["AttentionParams", "BoundingBox", "SigmaPolynomial", "extract_glimpse", "LossConfig", "LossMode",
           "HART", "ModelConfig", "EvalReport", "TrainConfig", "evaluate", "train"]
__version__ = "0.1.0"
