"""Drum sound matching with perceptual-neural-physical (PNP) losses."""

from .exceptions import (
    ContractError,
    FormatError,
    InfeasibleParameterError,
    MissingMetricError,
    PNPError,
    RangeError,
    SynthesisError,
)
from .estimators import CQTFeatures, LMMatcher, PNPEncoder
from .ftm import AudioBuffer, NormalizedTheta, ShapeParams, denormalize, normalize, synthesize
from .losses import LossValue, p_loss, pnp_grad_factor, pnp_loss, pnp_loss_eig, spectral_loss
from .matcher import MatchOptions, MatchResult, match
from .metric import MetricRecord, cache_read, cache_write, compute_metric, jacobian_fd

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "CQTFeatures", "ContractError", "FormatError", "InfeasibleParameterError", "LMMatcher", "LossValue", "MatchOptions",
    "MatchResult", "MetricRecord",
    "MissingMetricError", "NormalizedTheta", "PNPEncoder", "PNPError", "RangeError", "ShapeParams", "SynthesisError",
    "cache_read", "cache_write", "compute_metric", "denormalize", "jacobian_fd", "match", "normalize", "p_loss",
    "pnp_grad_factor", "pnp_loss", "pnp_loss_eig", "spectral_loss", "synthesize",
]
