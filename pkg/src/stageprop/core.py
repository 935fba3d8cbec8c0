"""Shared domain types, interval arithmetic and on-disk formats."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

__all__ = [
    "StagePropError",
    "InstanceTooShort",
    "DegenerateBatch",
    "ZeroNormInput",
    "ShapeMismatch",
    "EmptyDataset",
    "IntervalOutOfRange",
    "NoGroundTruth",
    "InfeasiblePlacement",
    "Stage",
    "NUM_STAGES",
    "TimeInterval",
    "StageSequence",
    "FeatureSequence",
    "GroundTruthInstance",
    "VideoAnnotation",
    "Proposal",
    "ScoredProposal",
    "iou",
    "iou_matrix",
    "load_annotations",
    "save_annotations",
    "read_fseq",
    "write_fseq",
]


class StagePropError(ValueError):
    """Base class for input/validation errors raised by this package."""


class InstanceTooShort(StagePropError):
    pass


class DegenerateBatch(StagePropError):
    pass


class ZeroNormInput(StagePropError):
    pass


class ShapeMismatch(StagePropError):
    pass


class EmptyDataset(StagePropError):
    pass


class IntervalOutOfRange(StagePropError):
    pass


class NoGroundTruth(StagePropError):
    pass


class InfeasiblePlacement(StagePropError):
    pass


class Stage(enum.IntEnum):
    BACKGROUND = 0
    READY = 1
    START = 2
    CONFIRM = 3
    END = 4
    FOLLOW = 5


NUM_STAGES = len(Stage)


@dataclass(frozen=True, slots=True, order=True)
class TimeInterval:
    """Half-open integer interval ``[start, end)``."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if int(self.start) != self.start or int(self.end) != self.end:
            raise StagePropError(f"interval bounds must be integers, got [{self.start}, {self.end})")
        object.__setattr__(self, "start", int(self.start))
        object.__setattr__(self, "end", int(self.end))
        if self.start < 0 or self.start >= self.end:
            raise StagePropError(f"invalid interval [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start

    def contains(self, other: "TimeInterval") -> bool:
        return self.start <= other.start and other.end <= self.end

    def scaled(self, factor: int) -> "TimeInterval":
        return TimeInterval(self.start * factor, self.end * factor)


def iou(a: TimeInterval, b: TimeInterval) -> float:
    """Temporal intersection-over-union of two intervals."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between rows of two ``(n, 2)`` arrays of ``[start, end)`` pairs."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0])
    inter = np.clip(inter, 0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    return inter / union


@dataclass(frozen=True, slots=True)
class StageSequence:
    labels: np.ndarray
    scale: int = 1

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.size < 1:
            raise StagePropError("a stage sequence needs at least one label")
        if labels.size and (labels.min() < 0 or labels.max() >= NUM_STAGES):
            raise StagePropError("stage labels must lie in 0..5")
        if int(self.scale) < 1:
            raise StagePropError(f"scale must be >= 1, got {self.scale}")
        labels = labels.astype(np.int64, copy=True)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "scale", int(self.scale))

    def __len__(self) -> int:
        return int(self.labels.size)


@dataclass(frozen=True, slots=True)
class FeatureSequence:
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeMismatch(f"features must be a non-empty (timesteps, dim) matrix, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise StagePropError("features contain non-finite values")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def feature_dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return int(self.data.shape[0])


@dataclass(frozen=True, slots=True)
class GroundTruthInstance:
    interval: TimeInterval

    @property
    def start(self) -> int:
        return self.interval.start

    @property
    def end(self) -> int:
        return self.interval.end


@dataclass(frozen=True, slots=True)
class VideoAnnotation:
    video_id: str
    n_frames: int
    instances: tuple[GroundTruthInstance, ...] = ()

    def __post_init__(self) -> None:
        if int(self.n_frames) < 1:
            raise StagePropError(f"{self.video_id}: n_frames must be positive")
        object.__setattr__(self, "instances", tuple(self.instances))
        for inst in self.instances:
            if inst.end > self.n_frames:
                raise StagePropError(
                    f"{self.video_id}: instance [{inst.start}, {inst.end}) exceeds {self.n_frames} frames"
                )

    @classmethod
    def from_dict(cls, doc: dict) -> "VideoAnnotation":
        instances = tuple(GroundTruthInstance(TimeInterval(i["start"], i["end"])) for i in doc.get("instances", []))
        return cls(str(doc["video_id"]), int(doc["n_frames"]), instances)

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "n_frames": self.n_frames,
            "instances": [{"start": g.start, "end": g.end} for g in self.instances],
        }

    @property
    def intervals(self) -> list[TimeInterval]:
        return [g.interval for g in self.instances]


@dataclass(frozen=True, slots=True)
class Proposal:
    interval: TimeInterval
    source_video: str = ""


@dataclass(frozen=True, slots=True)
class ScoredProposal:
    proposal: Proposal
    pre_score: float
    eval_score: Optional[float] = None
    final_score: Optional[float] = field(default=None)
    nms_decay: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.pre_score <= 1.0:
            raise StagePropError(f"pre_score must lie in [0, 1], got {self.pre_score}")
        if self.eval_score is not None and self.final_score is None:
            object.__setattr__(self, "final_score", self.pre_score * self.eval_score)

    @property
    def interval(self) -> TimeInterval:
        return self.proposal.interval

    @property
    def score(self) -> float:
        """Ranking score: fused score (pre-score if not yet fused) times any
        Soft-NMS decay."""
        base = self.pre_score if self.final_score is None else self.final_score
        return base * self.nms_decay

    def decayed(self, factor: float) -> "ScoredProposal":
        return replace(self, nms_decay=self.nms_decay * float(factor))


# -- serialization --------------------------------------------------------


def load_annotations(path: str | Path) -> list[VideoAnnotation]:
    """Read one annotation document or a JSON array of them."""
    with open(path) as fh:
        doc = json.load(fh)
    if isinstance(doc, dict):
        doc = [doc]
    return [VideoAnnotation.from_dict(d) for d in doc]


def save_annotations(annotations: Iterable[VideoAnnotation], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump([a.to_dict() for a in annotations], fh, indent=1)
        fh.write("\n")


_FSEQ_MAGIC = b"FSEQ"
_FSEQ_HEADER = struct.Struct("<4sII4x")


def write_fseq(features: FeatureSequence | np.ndarray, path: str | Path) -> None:
    data = features.data if isinstance(features, FeatureSequence) else np.asarray(features)
    data = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FSEQ_HEADER.pack(_FSEQ_MAGIC, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def read_fseq(path: str | Path) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _FSEQ_HEADER.size:
        raise StagePropError(f"{path}: truncated FSEQ header")
    magic, steps, dim = _FSEQ_HEADER.unpack_from(raw)
    if magic != _FSEQ_MAGIC:
        raise StagePropError(f"{path}: bad magic {magic!r}")
    expected = _FSEQ_HEADER.size + 4 * steps * dim
    if len(raw) != expected:
        raise StagePropError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_FSEQ_HEADER.size).reshape(steps, dim)
    return FeatureSequence(data.astype(np.float64))
