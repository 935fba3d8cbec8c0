"""Seeded synthetic videos whose per-frame features encode the stage label."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import (
    NUM_STAGES,
    FeatureSequence,
    GroundTruthInstance,
    InfeasiblePlacement,
    StagePropError,
    TimeInterval,
    VideoAnnotation,
)
from .labeling import label_frames

__all__ = ["SynthConfig", "prototypes", "generate", "nearest_prototype"]

MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 10
    frames_per_video: int = 256
    instances_per_video: tuple[int, int] = (1, 3)
    duration_range: tuple[int, int] = (12, 32)
    feature_dim: int = 16
    noise_sigma: float = 0.3
    class_separation: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances_per_video", tuple(int(v) for v in self.instances_per_video))
        object.__setattr__(self, "duration_range", tuple(int(v) for v in self.duration_range))
        lo_i, hi_i = self.instances_per_video
        lo_d, hi_d = self.duration_range
        if self.n_videos < 0 or self.frames_per_video < 1:
            raise StagePropError("n_videos must be >= 0 and frames_per_video >= 1")
        if not 0 <= lo_i <= hi_i:
            raise StagePropError(f"bad instances_per_video {self.instances_per_video}")
        if not 3 <= lo_d <= hi_d:
            raise StagePropError(f"duration_range must satisfy 3 <= min <= max, got {self.duration_range}")
        if self.feature_dim < NUM_STAGES:
            raise StagePropError(f"feature_dim must be >= {NUM_STAGES} for orthogonal prototypes")
        if self.noise_sigma < 0 or self.class_separation <= 0:
            raise StagePropError("noise_sigma must be >= 0 and class_separation > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instances_per_video"] = list(self.instances_per_video)
        d["duration_range"] = list(self.duration_range)
        return d


def prototypes(feature_dim: int, seed: int) -> np.ndarray:
    """Six mutually orthogonal unit vectors, one row per stage."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    q, _ = np.linalg.qr(rng.standard_normal((feature_dim, NUM_STAGES)))
    return q.T.copy()


def _place(rng: np.random.Generator, cfg: SynthConfig) -> list[TimeInterval]:
    lo_i, hi_i = cfg.instances_per_video
    target = int(rng.integers(lo_i, hi_i + 1))
    lo_d, hi_d = cfg.duration_range
    if target and lo_d > cfg.frames_per_video:
        raise InfeasiblePlacement(f"duration {lo_d} exceeds {cfg.frames_per_video} frames")
    placed: list[TimeInterval] = []
    attempts = 0
    while len(placed) < target:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise InfeasiblePlacement(
                f"placed {len(placed)} of {target} instances after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        d = int(rng.integers(lo_d, min(hi_d, cfg.frames_per_video) + 1))
        s = int(rng.integers(0, cfg.frames_per_video - d + 1))
        cand = TimeInterval(s, s + d)
        if all(cand.end <= p.start or p.end <= cand.start for p in placed):
            placed.append(cand)
    return sorted(placed)


def generate(cfg: SynthConfig) -> list[tuple[VideoAnnotation, FeatureSequence]]:
    """Annotated videos with features ``separation * prototype[label] + noise``.

    Each video draws from its own child seed, so a video's content does
    not depend on how many videos are generated after it.
    """
    protos = prototypes(cfg.feature_dim, cfg.seed)
    out = []
    for idx, child in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.n_videos)):
        rng = np.random.default_rng(child)
        instances = tuple(GroundTruthInstance(iv) for iv in _place(rng, cfg))
        ann = VideoAnnotation(f"synth_{cfg.seed}_{idx:04d}", cfg.frames_per_video, instances)
        labels = label_frames(ann).labels
        noise = rng.standard_normal((cfg.frames_per_video, cfg.feature_dim)) * cfg.noise_sigma
        out.append((ann, FeatureSequence(cfg.class_separation * protos[labels] + noise)))
    return out


def nearest_prototype(features, cfg: SynthConfig) -> np.ndarray:
    """Label of the closest scaled prototype for every row."""
    x = features.data if isinstance(features, FeatureSequence) else np.asarray(features)
    protos = cfg.class_separation * prototypes(cfg.feature_dim, cfg.seed)
    d2 = ((x[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)
