"""Greedy and Soft non-maximum suppression over temporal proposals."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ScoredProposal, StagePropError, iou_matrix

__all__ = ["NmsMethod", "NmsConfig", "greedy_nms", "soft_nms", "apply_nms", "ranking_order"]


class NmsMethod(str, enum.Enum):
    GREEDY = "greedy"
    SOFT_LINEAR = "soft_linear"
    SOFT_GAUSSIAN = "soft_gaussian"

    @classmethod
    def parse(cls, value) -> "NmsMethod":
        if isinstance(value, cls):
            return value
        return cls(str(value).replace("-", "_"))


@dataclass(frozen=True)
class NmsConfig:
    method: NmsMethod = NmsMethod.SOFT_GAUSSIAN
    iou_threshold: float = 0.5
    sigma: float = 0.5
    score_floor: float = 1e-4

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", NmsMethod.parse(self.method))
        if self.method is not NmsMethod.SOFT_GAUSSIAN and not 0.0 < self.iou_threshold < 1.0:
            raise StagePropError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")
        if self.sigma <= 0:
            raise StagePropError("sigma must be positive")
        if self.score_floor < 0:
            raise StagePropError("score_floor must be non-negative")


def ranking_order(scores, starts, ends) -> np.ndarray:
    """Indices by score desc, then start asc, then duration asc."""
    scores, starts, ends = (np.asarray(a) for a in (scores, starts, ends))
    return np.lexsort((ends - starts, starts, -scores))


def _arrays(props: Sequence[ScoredProposal]):
    scores = np.array([p.score for p in props], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise StagePropError("proposal scores must be finite")
    iv = np.array([[p.interval.start, p.interval.end] for p in props], dtype=np.int64).reshape(-1, 2)
    return scores, iv


def greedy_nms(props: Sequence[ScoredProposal], cfg: NmsConfig = NmsConfig(NmsMethod.GREEDY)) -> list[ScoredProposal]:
    """Keep the best proposal, drop everything overlapping it by IoU >=
    ``cfg.iou_threshold``, repeat."""
    if not props:
        return []
    scores, iv = _arrays(props)
    order = ranking_order(scores, iv[:, 0], iv[:, 1])
    ious = iou_matrix(iv[order], iv[order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        keep.append(order[pos])
        alive[pos + 1 :] &= ious[pos, pos + 1 :] < cfg.iou_threshold
    return [props[i] for i in keep]


def soft_nms(props: Sequence[ScoredProposal], cfg: NmsConfig = NmsConfig()) -> list[ScoredProposal]:
    """Decay the scores of proposals overlapping each selected one.

    Gaussian: ``s *= exp(-iou**2 / sigma)``. Linear: ``s *= 1 - iou`` when
    ``iou > iou_threshold``. Proposals whose score falls below
    ``score_floor`` are dropped. Returned proposals carry the decay in
    ``nms_decay`` and are sorted by their rescored value.
    """
    if cfg.method is NmsMethod.GREEDY:
        raise StagePropError("soft_nms needs a soft method")
    if not props:
        return []
    base, iv = _arrays(props)
    decay = np.ones(len(props))
    remaining = np.ones(len(props), dtype=bool)
    starts, durs = iv[:, 0], iv[:, 1] - iv[:, 0]
    selected = []
    gaussian = cfg.method is NmsMethod.SOFT_GAUSSIAN
    while remaining.any():
        cand = np.flatnonzero(remaining)
        best = cand[np.lexsort((durs[cand], starts[cand], -(base[cand] * decay[cand])))[0]]
        remaining[best] = False
        if base[best] * decay[best] < cfg.score_floor:
            break
        selected.append(best)
        rest = np.flatnonzero(remaining)
        if len(rest) == 0:
            break
        ov = iou_matrix(iv[best], iv[rest])[0]
        if gaussian:
            decay[rest] *= np.exp(-(ov * ov) / cfg.sigma)
        else:
            decay[rest] *= np.where(ov > cfg.iou_threshold, 1.0 - ov, 1.0)
    sel = np.array(selected, dtype=np.int64)
    sel = sel[ranking_order(base[sel] * decay[sel], starts[sel], iv[sel, 1])]
    return [props[i].decayed(decay[i]) for i in sel]


def apply_nms(props: Sequence[ScoredProposal], cfg: NmsConfig) -> list[ScoredProposal]:
    if cfg.method is NmsMethod.GREEDY:
        return greedy_nms(props, cfg)
    return soft_nms(props, cfg)
