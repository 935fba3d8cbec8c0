"""Ground-truth instances to per-timestep six-stage labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import (
    NUM_STAGES,
    GroundTruthInstance,
    InstanceTooShort,
    Stage,
    StagePropError,
    StageSequence,
    TimeInterval,
    VideoAnnotation,
)

__all__ = [
    "ExpandedInstance",
    "STAGE_PRIORITY",
    "expand_instance",
    "label_frames",
    "downsample_labels",
    "StageLabeler",
]

# Tie-break order for majority downsampling, strongest first.
STAGE_PRIORITY = (Stage.CONFIRM, Stage.START, Stage.END, Stage.READY, Stage.FOLLOW, Stage.BACKGROUND)
_PRIORITY_RANK = np.empty(NUM_STAGES, dtype=np.int64)
_PRIORITY_RANK[list(STAGE_PRIORITY)] = np.arange(NUM_STAGES)[::-1]


@dataclass(frozen=True, slots=True)
class ExpandedInstance:
    """The five stage segments of one instance, in frame units.

    ``ready`` and ``follow`` are ``None`` when clipping at the sequence
    edges leaves them empty.
    """

    ready: Optional[TimeInterval]
    start: TimeInterval
    confirm: TimeInterval
    end: TimeInterval
    follow: Optional[TimeInterval]

    def segments(self) -> list[tuple[Stage, TimeInterval]]:
        pairs = [
            (Stage.READY, self.ready),
            (Stage.START, self.start),
            (Stage.CONFIRM, self.confirm),
            (Stage.END, self.end),
            (Stage.FOLLOW, self.follow),
        ]
        return [(stage, seg) for stage, seg in pairs if seg is not None]

    @property
    def span(self) -> TimeInterval:
        first = self.ready if self.ready is not None else self.start
        last = self.follow if self.follow is not None else self.end
        return TimeInterval(first.start, last.end)


def _clipped(lo: int, hi: int, n_frames: int) -> Optional[TimeInterval]:
    lo, hi = max(lo, 0), min(hi, n_frames)
    return TimeInterval(lo, hi) if lo < hi else None


def expand_instance(g: GroundTruthInstance | TimeInterval, n_frames: int) -> ExpandedInstance:
    """Split an instance into Start/Confirm/End thirds and pad it with
    half-duration Ready and Follow context.

    Fractional boundaries are floored; the Confirm segment absorbs the
    remainder so that Start, Confirm and End tile the instance exactly.
    """
    interval = g.interval if isinstance(g, GroundTruthInstance) else g
    s, e = interval.start, interval.end
    d = e - s
    if d < 3:
        raise InstanceTooShort(f"instance [{s}, {e}) lasts {d} frames; at least 3 are required")
    if e > n_frames:
        raise StagePropError(f"instance [{s}, {e}) exceeds {n_frames} frames")
    half, third = d // 2, d // 3
    return ExpandedInstance(
        ready=_clipped(s - half, s, n_frames),
        start=TimeInterval(s, s + third),
        confirm=TimeInterval(s + third, e - third),
        end=TimeInterval(e - third, e),
        follow=_clipped(e, e + half, n_frames),
    )


def label_frames(ann: VideoAnnotation) -> StageSequence:
    """Frame-level stage labels for one annotated video.

    A frame covered by several expanded instances is labeled by the
    instance whose unexpanded interval is nearest to it (distance 0
    inside); ties go to the earlier instance.
    """
    n = ann.n_frames
    labels = np.full(n, int(Stage.BACKGROUND), dtype=np.int64)
    best = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    for inst in ann.instances:
        expanded = expand_instance(inst, n)
        span = expanded.span
        t = np.arange(span.start, span.end)
        dist = np.maximum(np.maximum(inst.start - t, t - (inst.end - 1)), 0)
        own = np.empty(span.length, dtype=np.int64)
        for stage, seg in expanded.segments():
            own[seg.start - span.start : seg.end - span.start] = int(stage)
        win = dist < best[span.start : span.end]
        labels[span.start : span.end][win] = own[win]
        best[span.start : span.end][win] = dist[win]
    return StageSequence(labels, scale=1)


def downsample_labels(seq: StageSequence, s_c: int) -> StageSequence:
    """Majority vote over blocks of ``s_c`` frames; trailing partial block dropped.

    Ties are broken by ``STAGE_PRIORITY``.
    """
    s_c = int(s_c)
    if s_c < 1:
        raise StagePropError(f"scale must be >= 1, got {s_c}")
    if s_c == 1:
        return StageSequence(seq.labels, scale=seq.scale)
    n_out = len(seq) // s_c
    if n_out < 1:
        raise StagePropError(f"sequence of {len(seq)} frames is shorter than one block of {s_c}")
    blocks = seq.labels[: n_out * s_c].reshape(n_out, s_c)
    counts = np.zeros((n_out, NUM_STAGES), dtype=np.int64)
    for k in range(NUM_STAGES):
        counts[:, k] = (blocks == k).sum(axis=1)
    # counts dominate; priority rank only separates equal counts
    key = counts * (NUM_STAGES + 1) + _PRIORITY_RANK[None, :]
    return StageSequence(np.argmax(key, axis=1), scale=seq.scale * s_c)


class StageLabeler(TransformerMixin, BaseEstimator):
    """Transformer mapping annotations to per-timestep stage label arrays.

    Parameters
    ----------
    scale : int
        Frames per output timestep.
    """

    def __init__(self, scale: int = 1):
        self.scale = scale

    def fit(self, X: Sequence[VideoAnnotation], y=None):
        if int(self.scale) < 1:
            raise StagePropError(f"scale must be >= 1, got {self.scale}")
        return self

    def transform(self, X: Sequence[VideoAnnotation]) -> list[np.ndarray]:
        return [downsample_labels(label_frames(ann), self.scale).labels for ann in X]
