"""Proposal evaluation: 1-D RoI pooling and an IoU regressor."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import (
    EmptyDataset,
    FeatureSequence,
    IntervalOutOfRange,
    Proposal,
    ScoredProposal,
    ShapeMismatch,
    StagePropError,
    TimeInterval,
    iou_matrix,
)
from .validation import as_feature_matrix

__all__ = [
    "RoiSpec",
    "roi_pool_1d",
    "roi_pool_batch",
    "LabeledProposal",
    "select_training_samples",
    "smooth_l1",
    "IoURegressor",
    "train_pes",
    "final_score",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoiSpec:
    bins: int = 8

    def __post_init__(self) -> None:
        if int(self.bins) < 1:
            raise StagePropError("bins must be >= 1")


@lru_cache(maxsize=None)
def _bin_bounds(length: int, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Offsets ``[lo, hi)`` of each bin inside an interval of ``length``.

    Edges sit at ``ceil(k * length / bins)``; an empty bin borrows the
    extent of the nearest non-empty bin (lower index on ties).
    """
    edges = -(-np.arange(bins + 1) * length // bins)
    lo, hi = edges[:-1].copy(), edges[1:].copy()
    full = np.flatnonzero(hi > lo)
    for k in np.flatnonzero(hi == lo):
        src = full[np.argmin(np.abs(full - k))]
        lo[k], hi[k] = lo[src], hi[src]
    lo.setflags(write=False)
    hi.setflags(write=False)
    return lo, hi


def roi_pool_1d(features: FeatureSequence | np.ndarray, interval: TimeInterval, spec: RoiSpec = RoiSpec()) -> np.ndarray:
    """Max-pool ``interval`` of a feature sequence into ``spec.bins`` bins.

    Returns a flat vector of length ``bins * feature_dim`` (bin-major).
    """
    x = as_feature_matrix(features)
    if interval.end > len(x):
        raise IntervalOutOfRange(f"[{interval.start}, {interval.end}) outside a sequence of {len(x)} timesteps")
    lo, hi = _bin_bounds(interval.length, spec.bins)
    rows = [x[interval.start + a : interval.start + b].max(axis=0) for a, b in zip(lo, hi)]
    return np.concatenate(rows)


class _RangeMax:
    """Sparse table answering max over ``[lo, hi)`` row ranges in O(1)."""

    def __init__(self, x: np.ndarray):
        self.levels = [x]
        width = 1
        while 2 * width <= len(x):
            prev = self.levels[-1]
            self.levels.append(np.maximum(prev[:-width], prev[width:]))
            width *= 2

    def query(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        span = hi - lo
        level = np.floor(np.log2(span)).astype(np.int64)
        out = np.empty((len(lo), self.levels[0].shape[1]))
        for j in np.unique(level):
            sel = level == j
            tab = self.levels[j]
            out[sel] = np.maximum(tab[lo[sel]], tab[hi[sel] - (1 << j)])
        return out


def roi_pool_batch(features, starts, ends, spec: RoiSpec = RoiSpec()) -> np.ndarray:
    """:func:`roi_pool_1d` for many intervals of one sequence at once.

    Returns ``(n_intervals, bins * feature_dim)``.
    """
    x = as_feature_matrix(features)
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    if len(starts) == 0:
        return np.zeros((0, spec.bins * x.shape[1]))
    if starts.min() < 0 or ends.max() > len(x) or np.any(ends <= starts):
        raise IntervalOutOfRange(f"intervals outside a sequence of {len(x)} timesteps")
    lengths = ends - starts
    lo = np.empty((len(starts), spec.bins), dtype=np.int64)
    hi = np.empty_like(lo)
    for length in np.unique(lengths):
        sel = lengths == length
        blo, bhi = _bin_bounds(int(length), spec.bins)
        lo[sel] = starts[sel, None] + blo
        hi[sel] = starts[sel, None] + bhi
    pooled = _RangeMax(x).query(lo.ravel(), hi.ravel())
    return pooled.reshape(len(starts), -1)


class LabeledProposal(NamedTuple):
    proposal: Proposal
    iou: float


def select_training_samples(
    proposals: Sequence[Proposal],
    gts: Mapping[str, Sequence[TimeInterval]],
    seed: int = 0,
) -> tuple[list[LabeledProposal], list[LabeledProposal], list[LabeledProposal]]:
    """Stratify proposals by best IoU with their video's ground truth.

    Big: IoU > 0.6, all kept. Middle (0.2 < IoU <= 0.6) and small
    (IoU <= 0.2) are each subsampled uniformly to the size of big.
    """
    ious = np.zeros(len(proposals))
    by_video: dict[str, list[int]] = {}
    for idx, p in enumerate(proposals):
        by_video.setdefault(p.source_video, []).append(idx)
    for vid, idxs in by_video.items():
        truth = gts.get(vid, ())
        if not truth:
            continue
        a = np.array([[proposals[i].interval.start, proposals[i].interval.end] for i in idxs])
        b = np.array([[g.start, g.end] for g in truth])
        ious[idxs] = iou_matrix(a, b).max(axis=1)

    big = np.flatnonzero(ious > 0.6)
    n_b = len(big)
    if n_b == 0:
        return [], [], []
    rng = np.random.default_rng(seed)

    def draw(mask):
        pool = np.flatnonzero(mask)
        if len(pool) <= n_b:
            return pool
        return np.sort(rng.choice(pool, size=n_b, replace=False))

    middle = draw((ious > 0.2) & (ious <= 0.6))
    small = draw(ious <= 0.2)
    pack = lambda idx: [LabeledProposal(proposals[i], float(ious[i])) for i in idx]
    return pack(big), pack(middle), pack(small)


def smooth_l1(pred, target):
    """Elementwise Smooth L1 and its derivative with respect to ``pred``."""
    e = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    small = np.abs(e) < 1.0
    loss = np.where(small, 0.5 * e * e, np.abs(e) - 0.5)
    grad = np.where(small, e, np.sign(e))
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


class IoURegressor(RegressorMixin, BaseEstimator):
    """Two dense layers mapping a pooled proposal vector to an IoU in [0, 1].

    ``relu(x W1 + b1) W2 + b2`` squashed by a logistic map, trained with
    Smooth L1 by seeded mini-batch gradient descent. Inputs are
    standardized with statistics taken at fit time.
    """

    def __init__(
        self,
        hidden: int = 256,
        learning_rate: float = 0.1,
        weight_decay: float = 5e-4,
        epochs: int = 20,
        batch_size: int = 64,
        seed: int = 0,
    ):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _init(self, n_features: int, rng: np.random.Generator) -> None:
        h = int(self.hidden)
        lim1 = np.sqrt(6.0 / (n_features + h))
        lim2 = np.sqrt(6.0 / (h + 1))
        self.coefs_ = [rng.uniform(-lim1, lim1, (n_features, h)), rng.uniform(-lim2, lim2, (h, 1))]
        self.intercepts_ = [np.zeros(h), np.zeros(1)]

    @staticmethod
    def loss_and_grads(params: Sequence[np.ndarray], X: np.ndarray, y: np.ndarray):
        """Mean Smooth L1 of ``params = (W1, b1, W2, b2)`` on standardized ``X``."""
        w1, b1, w2, b2 = params
        a = X @ w1 + b1
        h = np.maximum(a, 0.0)
        out = _sigmoid(h @ w2 + b2)[:, 0]
        loss, dout = smooth_l1(out, y)
        n = len(y)
        dz = (dout * out * (1.0 - out) / n)[:, None]
        g_w2 = h.T @ dz
        g_b2 = dz.sum(axis=0)
        da = (dz @ w2.T) * (a > 0)
        g_w1 = X.T @ da
        g_b1 = da.sum(axis=0)
        return float(np.mean(loss)), [g_w1, g_b1, g_w2, g_b2]

    def _standardize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean_) / self.scale_

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(X) == 0:
            raise EmptyDataset("no training samples")
        if len(y) != len(X):
            raise ShapeMismatch(f"{len(X)} samples but {len(y)} targets")
        init_ss, train_ss = np.random.SeedSequence(self.seed).spawn(2)
        self._init(X.shape[1], np.random.default_rng(init_ss))
        rng = np.random.default_rng(train_ss)
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 1e-12, std, 1.0)
        Xs = self._standardize(X)
        self.loss_curve_ = []
        params = [self.coefs_[0], self.intercepts_[0], self.coefs_[1], self.intercepts_[1]]
        for _ in range(int(self.epochs)):
            order = rng.permutation(len(Xs))
            total = 0.0
            for lo in range(0, len(order), int(self.batch_size)):
                idx = order[lo : lo + int(self.batch_size)]
                loss, grads = self.loss_and_grads(params, Xs[idx], y[idx])
                for p, g in zip(params, grads):
                    if p.ndim == 2:
                        p -= self.learning_rate * self.weight_decay * p
                    p -= self.learning_rate * g
                total += loss * len(idx)
            self.loss_curve_.append(total / len(Xs))
        logger.info("IoU regressor trained: final loss %s", self.loss_curve_[-1] if self.loss_curve_ else None)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "coefs_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeMismatch(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        h = np.maximum(self._standardize(X) @ self.coefs_[0] + self.intercepts_[0], 0.0)
        return np.clip(_sigmoid(h @ self.coefs_[1] + self.intercepts_[1])[:, 0], 0.0, 1.0)


def train_pes(
    samples: Sequence[LabeledProposal],
    features: Mapping[str, FeatureSequence | np.ndarray],
    spec: RoiSpec = RoiSpec(),
    regressor: Optional[IoURegressor] = None,
) -> IoURegressor:
    """Fit an :class:`IoURegressor` on pooled features of labeled proposals."""
    if len(samples) == 0:
        raise EmptyDataset("no proposal samples to train on")
    regressor = IoURegressor() if regressor is None else regressor
    X, y = pooled_samples(samples, features, spec)
    return regressor.fit(X, y)


def pooled_samples(samples, features, spec: RoiSpec) -> tuple[np.ndarray, np.ndarray]:
    by_video: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_video.setdefault(s.proposal.source_video, []).append(i)
    rows: list[Optional[np.ndarray]] = [None] * len(samples)
    for vid in sorted(by_video):
        idx = by_video[vid]
        if vid not in features:
            raise StagePropError(f"no features for video {vid!r}")
        starts = [samples[i].proposal.interval.start for i in idx]
        ends = [samples[i].proposal.interval.end for i in idx]
        pooled = roi_pool_batch(features[vid], starts, ends, spec)
        for i, row in zip(idx, pooled):
            rows[i] = row
    return np.vstack(rows), np.array([s.iou for s in samples])


def final_score(p: ScoredProposal, eval_score: Optional[float] = None) -> ScoredProposal:
    """Fuse pre-score and evaluator score by multiplication."""
    ev = p.eval_score if eval_score is None else float(eval_score)
    if ev is None:
        raise StagePropError("eval_score is not set")
    return replace(p, eval_score=ev, final_score=p.pre_score * ev)
