"""Softmax and margin-based cosine losses with analytic gradients.

All losses share one bias-free head ``W`` of shape ``(num_classes, dim)``.
Each returns a :class:`LossValue` holding the mean loss over the batch and
its gradients with respect to the embeddings and the (unnormalized) head
weights.
"""

from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Optional

import numpy as np

from .core import NUM_STAGES, DegenerateBatch, ShapeMismatch, Stage, StagePropError, ZeroNormInput

__all__ = [
    "NORM_EPS",
    "ARC_COS_CLIP",
    "DEFAULT_SCALE",
    "DEFAULT_STAGE_VALUES",
    "MarginTable",
    "ClassifierHead",
    "LossValue",
    "margin",
    "softmax_loss",
    "lmcl_loss",
    "vmcl_loss",
    "vmcl_arc_loss",
    "LOSS_KINDS",
    "compute_loss",
]

NORM_EPS = 1e-12
ARC_COS_CLIP = 1.0 - 1e-7
DEFAULT_SCALE = 30.0

DEFAULT_STAGE_VALUES: dict[int, tuple[int, ...]] = {
    Stage.BACKGROUND: (2, 8),
    Stage.READY: (2,),
    Stage.START: (3,),
    Stage.CONFIRM: (4,),
    Stage.END: (5,),
    Stage.FOLLOW: (1,),
}


@dataclass(frozen=True)
class MarginTable:
    """Preset integer values per class and the pairwise margin they induce.

    ``f(j, i) = min |v(j) - v(i)| * m + n`` for ``j != i`` and 0 on the
    diagonal.
    """

    values: Mapping[int, tuple[int, ...]] = field(default_factory=lambda: dict(DEFAULT_STAGE_VALUES))
    m: float = 0.1
    n: float = 0.15

    def __post_init__(self) -> None:
        vals = {int(k): tuple(int(v) for v in vs) for k, vs in self.values.items()}
        if any(len(v) == 0 for v in vals.values()):
            raise StagePropError("every class needs at least one preset value")
        if sorted(vals) != list(range(len(vals))):
            raise StagePropError(f"class keys must be 0..K-1, got {sorted(vals)}")
        if self.m < 0 or self.n < 0:
            raise StagePropError("m and n must be non-negative")
        object.__setattr__(self, "values", vals)

    @property
    def num_classes(self) -> int:
        return len(self.values)

    @classmethod
    def constant(cls, c: float, num_classes: int = NUM_STAGES) -> "MarginTable":
        """A table whose off-diagonal margins all equal ``c``."""
        return cls({k: (0,) for k in range(num_classes)}, m=0.0, n=c)

    def matrix(self) -> np.ndarray:
        """``M[i, j] = f(j, i)``: row is the target class."""
        # evaluated on the decimal values of m and n and rounded once, so
        # that e.g. 2 * 0.1 + 0.15 gives 0.35 rather than 0.35000000000000003
        m, n = Fraction(repr(float(self.m))), Fraction(repr(float(self.n)))
        k = self.num_classes
        out = np.zeros((k, k))
        for i in range(k):
            for j in range(k):
                if i != j:
                    gap = min(abs(a - b) for a in self.values[j] for b in self.values[i])
                    out[i, j] = float(gap * m + n)
        return out

    @classmethod
    def from_json(cls, path: str | Path) -> "MarginTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def from_dict(cls, doc: dict) -> "MarginTable":
        values = doc.get("values")
        values = DEFAULT_STAGE_VALUES if values is None else {int(k): tuple(v) for k, v in values.items()}
        return cls(values, m=float(doc.get("m", 0.1)), n=float(doc.get("n", 0.15)))

    def to_dict(self) -> dict:
        return {"values": {str(k): list(v) for k, v in self.values.items()}, "m": self.m, "n": self.n}


def margin(table: MarginTable, j: int, i: int) -> float:
    return float(table.matrix()[int(i), int(j)])


@dataclass
class ClassifierHead:
    weights: np.ndarray
    scale: float = DEFAULT_SCALE

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeMismatch(f"head weights must be 2-D, got {self.weights.shape}")
        if self.scale <= 0:
            raise StagePropError(f"scale must be positive, got {self.scale}")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


class LossValue(NamedTuple):
    loss: float
    grad_embeddings: np.ndarray
    grad_weights: np.ndarray


def _check_batch(x, y, w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DegenerateBatch(f"need a non-empty (batch, dim) embedding matrix, got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise ShapeMismatch(f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} embeddings")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"head of shape {w.shape} does not match embedding dim {x.shape[1]}")
    if y.min() < 0 or y.max() >= w.shape[0]:
        raise StagePropError("label outside the head's class range")
    return x, y, w


def _cross_entropy(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of logits ``z`` and its gradient."""
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    total = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    gap = zmax[:, 0] - z[rows, y]
    # when the target is the largest logit, log1p of the other classes'
    # mass keeps full relative precision for near-zero losses
    others = np.where(np.arange(z.shape[1]) == y[:, None], 0.0, ez).sum(axis=1)
    per_row = np.where(gap == 0.0, np.log1p(others), gap + np.log(total[:, 0]))
    loss = per_row.mean()
    dz = ez / total
    dz[rows, y] -= 1.0
    return float(loss), dz / n


def _normalize(a: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms < NORM_EPS):
        raise ZeroNormInput(f"{what} row with norm below {NORM_EPS}")
    return a / norms, norms


def _cosine_loss(x, y, w, scale: float, logits_fn: Callable) -> LossValue:
    x, y, w = _check_batch(x, y, w)
    xn, xnorm = _normalize(x, "embedding")
    wn, wnorm = _normalize(w, "weight")
    cos = xn @ wn.T
    z, dz_dcos = logits_fn(cos, y)
    loss, dz = _cross_entropy(scale * z, y)
    dcos = scale * dz * dz_dcos
    dxn = dcos @ wn
    dwn = dcos.T @ xn
    # d(a/|a|) = (I - â âᵀ) da / |a|
    dx = (dxn - xn * np.sum(xn * dxn, axis=1, keepdims=True)) / xnorm
    dw = (dwn - wn * np.sum(wn * dwn, axis=1, keepdims=True)) / wnorm
    return LossValue(loss, dx, dw)


def softmax_loss(embeddings, labels, weights) -> LossValue:
    """Cross-entropy over raw bias-free logits ``W x``."""
    x, y, w = _check_batch(embeddings, labels, weights)
    loss, dz = _cross_entropy(x @ w.T, y)
    return LossValue(loss, dz @ w, dz.T @ x)


def lmcl_loss(embeddings, labels, weights, m_const: float, scale: float = DEFAULT_SCALE) -> LossValue:
    """Large-margin cosine loss: the target cosine is reduced by ``m_const``."""

    def logits(cos, y):
        z = cos.copy()
        z[np.arange(len(y)), y] -= m_const
        return z, 1.0

    return _cosine_loss(embeddings, labels, weights, scale, logits)


def vmcl_loss(embeddings, labels, weights, table: MarginTable, scale: float = DEFAULT_SCALE) -> LossValue:
    """Variable-margin cosine loss: non-target cosines are raised by ``f(j, y)``."""
    fmat = table.matrix()

    def logits(cos, y):
        _check_classes(fmat, cos)
        return cos + fmat[y], 1.0

    return _cosine_loss(embeddings, labels, weights, scale, logits)


def vmcl_arc_loss(embeddings, labels, weights, table: MarginTable, scale: float = DEFAULT_SCALE) -> LossValue:
    """Angular variant: non-target logits are ``s * cos(theta_j - f(j, y))``."""
    fmat = table.matrix()

    def logits(cos, y):
        _check_classes(fmat, cos)
        rows = np.arange(len(y))
        c = np.clip(cos, -ARC_COS_CLIP, ARC_COS_CLIP)
        theta = np.arccos(c)
        shift = fmat[y]
        z = np.cos(theta - shift)
        # d cos(theta - f) / d cos = sin(theta - f) / sin(theta); zero where clipped
        grad = np.sin(theta - shift) / np.sin(theta)
        grad[np.abs(cos) > ARC_COS_CLIP] = 0.0
        z[rows, y] = cos[rows, y]
        grad[rows, y] = 1.0
        return z, grad

    return _cosine_loss(embeddings, labels, weights, scale, logits)


def _check_classes(fmat: np.ndarray, cos: np.ndarray) -> None:
    if fmat.shape[0] != cos.shape[1]:
        raise ShapeMismatch(f"margin table has {fmat.shape[0]} classes, head has {cos.shape[1]}")


LOSS_KINDS = ("softmax", "lmcl", "vmcl", "vmcl_arc")


def compute_loss(
    kind: str,
    embeddings,
    labels,
    head: ClassifierHead,
    table: Optional[MarginTable] = None,
    m_const: float = 0.35,
) -> LossValue:
    """Dispatch to one of :data:`LOSS_KINDS`."""
    if kind == "softmax":
        return softmax_loss(embeddings, labels, head.weights)
    if kind == "lmcl":
        return lmcl_loss(embeddings, labels, head.weights, m_const, head.scale)
    table = MarginTable() if table is None else table
    if kind == "vmcl":
        return vmcl_loss(embeddings, labels, head.weights, table, head.scale)
    if kind == "vmcl_arc":
        return vmcl_arc_loss(embeddings, labels, head.weights, table, head.scale)
    raise StagePropError(f"unknown loss {kind!r}; expected one of {LOSS_KINDS}")
