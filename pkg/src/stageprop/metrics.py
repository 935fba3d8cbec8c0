"""Recall at tIoU thresholds, AR@AN and AR-AN curves."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import NoGroundTruth, ScoredProposal, StagePropError, TimeInterval, VideoAnnotation, iou_matrix
from .nms import ranking_order

__all__ = [
    "EvalProtocol",
    "recall_at",
    "recall_grid",
    "average_recall",
    "ar_an_curve",
    "recall_vs_iou",
    "summarize",
    "gts_from_annotations",
    "check_monotone",
]

# IoU comparisons tolerate float noise in the threshold grid
_IOU_EPS = 1e-9


def _grid(lo: float, hi: float, step: float) -> tuple[float, ...]:
    n = int(round((hi - lo) / step)) + 1
    return tuple(round(lo + k * step, 10) for k in range(n))


@dataclass(frozen=True)
class EvalProtocol:
    iou_grid: tuple[float, ...] = field(default_factory=lambda: _grid(0.5, 1.0, 0.05))
    an_values: tuple[int, ...] = (50, 100, 200)
    max_an: int = 200

    def __post_init__(self) -> None:
        grid = tuple(float(t) for t in self.iou_grid)
        if not grid or any(not 0.0 < t <= 1.0 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise StagePropError("iou_grid must be strictly increasing within (0, 1]")
        if self.max_an < 1:
            raise StagePropError("max_an must be >= 1")
        object.__setattr__(self, "iou_grid", grid)
        object.__setattr__(self, "an_values", tuple(int(a) for a in self.an_values))

    @classmethod
    def from_range(cls, lo: float, hi: float, step: float, **kw) -> "EvalProtocol":
        return cls(iou_grid=_grid(lo, hi, step), **kw)


def gts_from_annotations(annotations: Sequence[VideoAnnotation]) -> dict[str, list[TimeInterval]]:
    return {a.video_id: a.intervals for a in annotations}


def _match_ranks(ious: np.ndarray, tiou: float) -> np.ndarray:
    """Greedy one-to-one matching in proposal order.

    Each proposal claims the unclaimed ground truth with the highest IoU
    at or above ``tiou``. Returns, per ground truth, the rank of the
    proposal that claimed it (``inf`` if none).
    """
    n_prop, n_gt = ious.shape
    ranks = np.full(n_gt, np.inf)
    ok = ious >= tiou - _IOU_EPS
    for r in range(n_prop):
        cand = np.flatnonzero(ok[r] & np.isinf(ranks))
        if len(cand):
            ranks[cand[np.argmax(ious[r, cand])]] = r
    return ranks


def _ranked_ious(props: Sequence[ScoredProposal], truth: Sequence[TimeInterval], limit: int) -> np.ndarray:
    if not props or not truth:
        return np.zeros((0, len(truth)))
    scores = np.array([p.score for p in props])
    iv = np.array([[p.interval.start, p.interval.end] for p in props])
    order = ranking_order(scores, iv[:, 0], iv[:, 1])[:limit]
    return iou_matrix(iv[order], np.array([[g.start, g.end] for g in truth]))


def recall_grid(
    props_per_video: Mapping[str, Sequence[ScoredProposal]],
    gts_per_video: Mapping[str, Sequence[TimeInterval]],
    tious: Sequence[float],
    max_an: int,
) -> np.ndarray:
    """Recall table of shape ``(len(tious), max_an + 1)``; column ``a`` is
    the recall with a budget of ``a`` proposals per video.

    Matching in score order makes the state after ``a`` proposals
    independent of later ones, so one pass per threshold fills a row.
    """
    total = sum(len(g) for g in gts_per_video.values())
    if total == 0:
        raise NoGroundTruth("no ground-truth instances to recall")
    hits = np.zeros((len(tious), max_an + 1))
    for vid, truth in gts_per_video.items():
        if not truth:
            continue
        ious = _ranked_ious(props_per_video.get(vid, ()), truth, max_an)
        for k, t in enumerate(tious):
            ranks = _match_ranks(ious, t)
            found = ranks[np.isfinite(ranks)].astype(np.int64)
            # matched at rank r -> counted for budgets a >= r + 1
            hits[k] += np.cumsum(np.bincount(found + 1, minlength=max_an + 1)[: max_an + 1])
    return hits / total


def recall_at(props_per_video, gts_per_video, tiou: float, an: int) -> float:
    """Fraction of ground-truth instances matched by the top ``an``
    proposals of their video at IoU >= ``tiou``."""
    if an < 0:
        raise StagePropError("an must be non-negative")
    return float(recall_grid(props_per_video, gts_per_video, [tiou], an)[0, an])


def average_recall(props_per_video, gts_per_video, protocol: EvalProtocol, an: int) -> float:
    return float(recall_grid(props_per_video, gts_per_video, protocol.iou_grid, an)[:, an].mean())


def ar_an_curve(props_per_video, gts_per_video, protocol: EvalProtocol) -> list[tuple[int, float]]:
    table = recall_grid(props_per_video, gts_per_video, protocol.iou_grid, protocol.max_an)
    ar = table.mean(axis=0)
    return [(a, float(ar[a])) for a in range(1, protocol.max_an + 1)]


def recall_vs_iou(props_per_video, gts_per_video, protocol: EvalProtocol, an: int = 100) -> list[tuple[float, float]]:
    table = recall_grid(props_per_video, gts_per_video, protocol.iou_grid, an)
    return [(t, float(r)) for t, r in zip(protocol.iou_grid, table[:, an])]


def summarize(props_per_video, gts_per_video, protocol: EvalProtocol, recall_an: int = 100) -> dict:
    """AR at each of ``protocol.an_values`` plus the curves, from one
    recall table."""
    max_an = max([protocol.max_an, recall_an, *protocol.an_values])
    table = recall_grid(props_per_video, gts_per_video, protocol.iou_grid, max_an)
    ar = table.mean(axis=0)
    return {
        "summary": {f"AR@{a}": float(ar[a]) for a in protocol.an_values},
        "recall_vs_iou": [(t, float(r)) for t, r in zip(protocol.iou_grid, table[:, recall_an])],
        "ar_an": [(a, float(ar[a])) for a in range(1, protocol.max_an + 1)],
        "table": table,
    }


def check_monotone(ar_an: Sequence[tuple[int, float]], recall_iou: Sequence[tuple[float, float]]) -> None:
    """Raise ``AssertionError`` if AR decreases with AN or recall increases with tIoU."""
    ar = np.array([v for _, v in ar_an])
    rec = np.array([v for _, v in recall_iou])
    if np.any(np.diff(ar) < -1e-12):
        raise AssertionError("AR decreases as AN grows")
    if np.any(np.diff(rec) > 1e-12):
        raise AssertionError("recall increases as tIoU grows")
