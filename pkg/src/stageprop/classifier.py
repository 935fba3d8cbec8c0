"""Per-timestep stage classifier: stacked temporal convolutions + cosine head."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import NUM_STAGES, EmptyDataset, FeatureSequence, ShapeMismatch, StagePropError, StageSequence
from .losses import DEFAULT_SCALE, LOSS_KINDS, ClassifierHead, MarginTable, compute_loss
from .validation import as_feature_matrix, as_label_vector, check_aligned

__all__ = [
    "ClassifierConfig",
    "Checkpoint",
    "init_checkpoint",
    "forward",
    "train_ass",
    "predict_stages",
    "export_embeddings",
    "StageClassifier",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierConfig:
    layers: tuple[tuple[int, int], ...] = ((3, 32), (3, 32))
    embed_dim: int = 16
    dropout: float = 0.5
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    epochs: int = 3
    seed: int = 0
    batch_size: int = 8
    scale: float = DEFAULT_SCALE
    lmcl_margin: float = 0.35

    def __post_init__(self) -> None:
        layers = tuple((int(k), int(c)) for k, c in self.layers)
        for k, c in layers:
            if k < 1 or k % 2 == 0:
                raise StagePropError(f"kernel sizes must be odd and positive, got {k}")
            if c < 1:
                raise StagePropError(f"channel counts must be positive, got {c}")
        if self.embed_dim < 2:
            raise StagePropError("embed_dim must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise StagePropError("dropout must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise StagePropError("epochs must be >= 0 and batch_size >= 1")
        object.__setattr__(self, "layers", layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [list(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        d = dict(d)
        d["layers"] = tuple(tuple(l) for l in d.get("layers", cls.layers))
        return cls(**d)


@dataclass
class Checkpoint:
    """Trained state: conv kernels, embedding projection and head.

    ``conv`` holds ``(W, b)`` per layer with ``W`` of shape
    ``(kernel * in_channels, out_channels)``; the embedding projection is
    a width-1 convolution stored the same way.
    """

    config: ClassifierConfig
    input_dim: int
    conv: list[tuple[np.ndarray, np.ndarray]]
    embed: tuple[np.ndarray, np.ndarray]
    head: ClassifierHead
    loss_kind: str = "vmcl"
    table: MarginTable = field(default_factory=MarginTable)
    training_log: list[tuple[int, float]] = field(default_factory=list)

    def params(self) -> list[np.ndarray]:
        out = [a for wb in self.conv for a in wb]
        out.extend(self.embed)
        out.append(self.head.weights)
        return out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_checkpoint(
    cfg: ClassifierConfig,
    input_dim: int,
    loss_kind: str = "vmcl",
    table: Optional[MarginTable] = None,
    rng: Optional[np.random.Generator] = None,
) -> Checkpoint:
    if loss_kind not in LOSS_KINDS:
        raise StagePropError(f"unknown loss {loss_kind!r}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    conv = []
    c_in = input_dim
    for k, c_out in cfg.layers:
        conv.append((_glorot(rng, k * c_in, c_out, (k * c_in, c_out)), np.zeros(c_out)))
        c_in = c_out
    embed = (_glorot(rng, c_in, cfg.embed_dim, (c_in, cfg.embed_dim)), np.zeros(cfg.embed_dim))
    head = ClassifierHead(_glorot(rng, cfg.embed_dim, NUM_STAGES, (NUM_STAGES, cfg.embed_dim)), cfg.scale)
    return Checkpoint(cfg, int(input_dim), conv, embed, head, loss_kind, table or MarginTable())


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """``(T, C)`` -> ``(T, k*C)`` zero-padded temporal neighbourhoods."""
    if k == 1:
        return x
    pad = k // 2
    xp = np.pad(x, ((pad, pad), (0, 0)))
    win = sliding_window_view(xp, k, axis=0)  # (T, C, k)
    return win.transpose(0, 2, 1).reshape(x.shape[0], -1)


def _unpatch(dp: np.ndarray, k: int, c: int) -> np.ndarray:
    if k == 1:
        return dp
    t = dp.shape[0]
    pad = k // 2
    dp = dp.reshape(t, k, c)
    dxp = np.zeros((t + 2 * pad, c))
    for j in range(k):
        dxp[j : j + t] += dp[:, j, :]
    return dxp[pad : pad + t]


def _forward(x: np.ndarray, ckpt: Checkpoint, rng: Optional[np.random.Generator] = None):
    """Forward pass; with ``rng`` given, applies inverted dropout and
    returns the cache needed for backprop."""
    cache = []
    h = x
    p_drop = ckpt.config.dropout
    for (w, b), (k, _) in zip(ckpt.conv, ckpt.config.layers):
        p = _patches(h, k)
        a = p @ w + b
        h = np.maximum(a, 0.0)
        mask = None
        if rng is not None and p_drop > 0:
            mask = (rng.random(h.shape) >= p_drop) / (1.0 - p_drop)
            h = h * mask
        cache.append((p, a, mask))
    we, be = ckpt.embed
    emb = h @ we + be
    return emb, (cache, h)


def _backward(demb: np.ndarray, ckpt: Checkpoint, state) -> list[np.ndarray]:
    cache, h_last = state
    we, _ = ckpt.embed
    g_we = h_last.T @ demb
    g_be = demb.sum(axis=0)
    dh = demb @ we.T
    grads = []
    for idx in range(len(ckpt.conv) - 1, -1, -1):
        p, a, mask = cache[idx]
        w, _ = ckpt.conv[idx]
        k = ckpt.config.layers[idx][0]
        if mask is not None:
            dh = dh * mask
        da = dh * (a > 0)
        grads.append((da.sum(axis=0), p.T @ da))
        if idx > 0:
            dh = _unpatch(da @ w.T, k, w.shape[0] // k)
    out = []
    for gb, gw in reversed(grads):
        out.extend([gw, gb])
    out.extend([g_we, g_be])
    return out


def forward(features: FeatureSequence | np.ndarray, ckpt: Checkpoint) -> np.ndarray:
    """Per-timestep embeddings, shape ``(timesteps, embed_dim)``."""
    x = as_feature_matrix(features)
    if x.shape[1] != ckpt.input_dim:
        raise ShapeMismatch(f"feature_dim {x.shape[1]} does not match checkpoint input_dim {ckpt.input_dim}")
    emb, _ = _forward(x, ckpt)
    return emb


def _safe_unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return np.divide(a, norms, out=np.zeros_like(a), where=norms > 0)


def cosine_scores(emb: np.ndarray, head: ClassifierHead) -> np.ndarray:
    return _safe_unit_rows(emb) @ _safe_unit_rows(head.weights).T


def predict_stages(features, ckpt: Checkpoint) -> tuple[StageSequence, np.ndarray]:
    """Argmax-cosine stage per timestep and the ``(timesteps, 6)`` cosine matrix."""
    scores = cosine_scores(forward(features, ckpt), ckpt.head)
    # np.argmax returns the first maximum, i.e. the lower class index on ties
    return StageSequence(np.argmax(scores, axis=1)), scores


def train_ass(
    dataset: Sequence[tuple[FeatureSequence | np.ndarray, StageSequence | np.ndarray]],
    cfg: ClassifierConfig,
    loss_kind: str = "vmcl",
    table: Optional[MarginTable] = None,
) -> Checkpoint:
    """Mini-batch gradient descent with decoupled weight decay.

    Each step concatenates the timesteps of ``cfg.batch_size`` sequences
    and minimizes the chosen loss averaged over them.
    """
    if len(dataset) == 0:
        raise EmptyDataset("no training sequences")
    xs, ys = [], []
    for feats, labels in dataset:
        x = as_feature_matrix(feats)
        y = as_label_vector(labels)
        check_aligned(x, y)
        xs.append(x)
        ys.append(y)
    dims = {x.shape[1] for x in xs}
    if len(dims) != 1:
        raise ShapeMismatch(f"sequences disagree on feature_dim: {sorted(dims)}")

    init_ss, train_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    ckpt = init_checkpoint(cfg, dims.pop(), loss_kind, table, np.random.default_rng(init_ss))
    rng = np.random.default_rng(train_ss)
    params = ckpt.params()
    decayed = [p.ndim == 2 for p in params]
    lr, wd = cfg.learning_rate, cfg.weight_decay

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(xs))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            embs, states = [], []
            for i in batch:
                emb, state = _forward(xs[i], ckpt, rng)
                embs.append(emb)
                states.append(state)
            lv = compute_loss(
                loss_kind, np.concatenate(embs), np.concatenate([ys[i] for i in batch]),
                ckpt.head, ckpt.table, cfg.lmcl_margin,
            )
            grads = [np.zeros_like(p) for p in params[:-1]]
            offset = 0
            for emb, state in zip(embs, states):
                demb = lv.grad_embeddings[offset : offset + len(emb)]
                offset += len(emb)
                for g, gi in zip(grads, _backward(demb, ckpt, state)):
                    g += gi
            grads.append(lv.grad_weights)
            for p, g, dec in zip(params, grads, decayed):
                if dec:
                    p -= lr * wd * p
                p -= lr * g
            losses.append(lv.loss)
        ckpt.training_log.append((epoch, float(np.mean(losses))))
        logger.info("epoch %d loss %.5f", epoch, ckpt.training_log[-1][1])
    return ckpt


def export_embeddings(
    dataset: Sequence[tuple[str, FeatureSequence | np.ndarray, StageSequence | np.ndarray]],
    ckpt: Checkpoint,
) -> list[tuple[str, int, int, float, float, float]]:
    """Project unit-normalized embeddings onto their top two principal
    directions (uncentered) and back onto the unit circle.

    Returns rows ``(video_id, timestep, label, x, y, angle)``.
    """
    ids, steps, labels, embs = [], [], [], []
    for vid, feats, lab in dataset:
        emb = _safe_unit_rows(forward(feats, ckpt))
        lab = as_label_vector(lab)
        check_aligned(emb, lab)
        embs.append(emb)
        ids.extend([vid] * len(emb))
        steps.extend(range(len(emb)))
        labels.extend(lab.tolist())
    if not embs:
        return []
    e = np.concatenate(embs)
    _, _, vt = np.linalg.svd(e, full_matrices=False)
    basis = vt[:2].T
    if e.shape[1] == 2 and np.linalg.det(basis) < 0:
        basis[:, 1] *= -1
    proj = e @ basis
    norms = np.linalg.norm(proj, axis=1, keepdims=True)
    proj = np.where(norms > 0, proj / np.where(norms > 0, norms, 1.0), np.array([1.0, 0.0]))
    angles = np.arctan2(proj[:, 1], proj[:, 0])
    return [
        (v, int(t), int(l), float(px), float(py), float(a))
        for v, t, l, (px, py), a in zip(ids, steps, labels, proj, angles)
    ]


class StageClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`train_ass`.

    ``X`` is a list of ``(timesteps, feature_dim)`` arrays and ``y`` a list
    of matching stage-label vectors. ``transform`` yields embeddings,
    ``decision_function`` the cosine scores.
    """

    def __init__(
        self,
        layers=((3, 32), (3, 32)),
        embed_dim: int = 16,
        loss: str = "vmcl",
        margin_m: float = 0.1,
        margin_n: float = 0.15,
        stage_values=None,
        lmcl_margin: float = 0.35,
        scale: float = DEFAULT_SCALE,
        learning_rate: float = 1e-4,
        weight_decay: float = 5e-4,
        dropout: float = 0.5,
        epochs: int = 3,
        batch_size: int = 8,
        seed: int = 0,
    ):
        self.layers = layers
        self.embed_dim = embed_dim
        self.loss = loss
        self.margin_m = margin_m
        self.margin_n = margin_n
        self.stage_values = stage_values
        self.lmcl_margin = lmcl_margin
        self.scale = scale
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _config(self) -> ClassifierConfig:
        return ClassifierConfig(
            layers=tuple(tuple(l) for l in self.layers),
            embed_dim=self.embed_dim,
            dropout=self.dropout,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            seed=self.seed,
            batch_size=self.batch_size,
            scale=self.scale,
            lmcl_margin=self.lmcl_margin,
        )

    def _table(self) -> MarginTable:
        if self.stage_values is None:
            return MarginTable(m=self.margin_m, n=self.margin_n)
        return MarginTable(self.stage_values, m=self.margin_m, n=self.margin_n)

    def fit(self, X, y):
        if len(X) != len(y):
            raise ShapeMismatch(f"{len(X)} feature sequences but {len(y)} label sequences")
        self.checkpoint_ = train_ass(list(zip(X, y)), self._config(), self.loss, self._table())
        self.classes_ = np.arange(NUM_STAGES)
        self.n_features_in_ = self.checkpoint_.input_dim
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "StageClassifier":
        cfg = ckpt.config
        est = cls(
            layers=cfg.layers, embed_dim=cfg.embed_dim, loss=ckpt.loss_kind,
            margin_m=ckpt.table.m, margin_n=ckpt.table.n, stage_values=dict(ckpt.table.values),
            lmcl_margin=cfg.lmcl_margin, scale=cfg.scale, learning_rate=cfg.learning_rate,
            weight_decay=cfg.weight_decay, dropout=cfg.dropout, epochs=cfg.epochs,
            batch_size=cfg.batch_size, seed=cfg.seed,
        )
        est.checkpoint_ = ckpt
        est.classes_ = np.arange(NUM_STAGES)
        est.n_features_in_ = ckpt.input_dim
        return est

    def transform(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "checkpoint_")
        return [forward(x, self.checkpoint_) for x in X]

    def decision_function(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "checkpoint_")
        return [predict_stages(x, self.checkpoint_)[1] for x in X]

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "checkpoint_")
        return [predict_stages(x, self.checkpoint_)[0].labels for x in X]

    def score(self, X, y, sample_weight=None) -> float:
        """Per-timestep accuracy pooled over all sequences."""
        pred = np.concatenate(self.predict(X))
        true = np.concatenate([as_label_vector(l) for l in y])
        if pred.shape != true.shape:
            raise ShapeMismatch("predictions and labels differ in length")
        return float(np.mean(pred == true))
