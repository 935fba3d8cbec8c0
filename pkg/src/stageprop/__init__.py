"""Temporal action proposals from six-stage sequence labeling."""

from .core import (
    FeatureSequence,
    GroundTruthInstance,
    Proposal,
    ScoredProposal,
    Stage,
    StageSequence,
    TimeInterval,
    VideoAnnotation,
    iou,
)
from .classifier import StageClassifier
from .evaluator import IoURegressor
from .labeling import StageLabeler
from .losses import MarginTable

__version__ = "0.1.0"

__all__ = [
    "FeatureSequence",
    "GroundTruthInstance",
    "IoURegressor",
    "MarginTable",
    "Proposal",
    "ScoredProposal",
    "Stage",
    "StageClassifier",
    "StageLabeler",
    "StageSequence",
    "TimeInterval",
    "VideoAnnotation",
    "iou",
]
