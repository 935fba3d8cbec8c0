"""End-to-end orchestration: sliding-window prediction, merging, scoring."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .classifier import StageClassifier, _safe_unit_rows, forward, predict_stages
from .core import (
    FeatureSequence,
    Proposal,
    ScoredProposal,
    ShapeMismatch,
    StagePropError,
    TimeInterval,
    VideoAnnotation,
    load_annotations,
    read_fseq,
    save_annotations,
    write_fseq,
)
from .decoder import DEFAULT_DECAY, Containment, decode_groups
from .evaluator import IoURegressor, RoiSpec, pooled_samples, roi_pool_batch, select_training_samples
from .labeling import StageLabeler
from .metrics import EvalProtocol, check_monotone, gts_from_annotations, summarize
from .nms import NmsConfig, NmsMethod, apply_nms, ranking_order
from .validation import as_feature_matrix

__all__ = [
    "WindowPlan",
    "plan_windows",
    "merge_windows",
    "downsample_features",
    "ProposalPipeline",
    "worker_count",
    "write_proposals_csv",
    "read_proposals_csv",
    "run_pipeline",
    "QUICKSTART_CONFIG",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowPlan:
    window_len: int
    stride: int
    offsets: tuple[int, ...]


def plan_windows(n_timesteps: int, window_len: int) -> WindowPlan:
    """Half-overlapping windows; the last one is right-aligned to the tail."""
    if window_len < 2:
        raise StagePropError("window_len must be >= 2")
    if n_timesteps < 1:
        raise StagePropError("n_timesteps must be >= 1")
    stride = window_len // 2
    if n_timesteps <= window_len:
        return WindowPlan(window_len, stride, (0,))
    offsets = list(range(0, n_timesteps - window_len, stride))
    offsets.append(n_timesteps - window_len)
    return WindowPlan(window_len, stride, tuple(offsets))


def merge_windows(per_window: Iterable[Sequence[ScoredProposal]]) -> list[ScoredProposal]:
    """Collapse exact (video, start, end) duplicates, keeping the best score."""
    best: dict[tuple[str, int, int], ScoredProposal] = {}
    for props in per_window:
        for p in props:
            key = (p.proposal.source_video, p.interval.start, p.interval.end)
            if key not in best or p.score > best[key].score:
                best[key] = p
    return [best[k] for k in sorted(best)]


def downsample_features(x: np.ndarray, scale: int) -> np.ndarray:
    """Block means over ``scale`` frames; a trailing partial block is dropped."""
    if scale == 1:
        return x
    n = len(x) // scale
    if n < 1:
        raise StagePropError(f"sequence of {len(x)} frames is shorter than one block of {scale}")
    return x[: n * scale].reshape(n, scale, -1).mean(axis=1)


def worker_count() -> int:
    env = os.environ.get("STAGEPROP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise StagePropError(f"STAGEPROP_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


class ProposalPipeline(BaseEstimator):
    """Stage classifier + decoder + IoU regressor + NMS as one estimator.

    ``fit(X, annotations)`` takes frame-level feature matrices and their
    annotations; ``predict(X, video_ids)`` returns, per video, proposals in
    frame units after NMS.

    Parameters
    ----------
    classifier, regressor : estimators
        Cloned at fit time.
    scale : int
        Frames per timestep.
    window_len : int
        Prediction window, in timesteps.
    drop_truncated : bool
        Discard groups that touch an interior window edge; the
        half-overlapping neighbour window sees them whole.
    split_episodes : bool
        Decode each Ready-to-Follow episode of a group separately.
    """

    def __init__(
        self,
        classifier: Optional[StageClassifier] = None,
        regressor: Optional[IoURegressor] = None,
        scale: int = 1,
        window_len: int = 128,
        decay: float = DEFAULT_DECAY,
        containment: str = "any_core",
        roi_bins: int = 8,
        nms_method: str = "soft_gaussian",
        nms_threshold: float = 0.5,
        nms_sigma: float = 0.5,
        nms_score_floor: float = 1e-4,
        drop_truncated: bool = True,
        split_episodes: bool = True,
        sample_seed: int = 0,
        n_jobs: Optional[int] = None,
    ):
        self.classifier = classifier
        self.regressor = regressor
        self.scale = scale
        self.window_len = window_len
        self.decay = decay
        self.containment = containment
        self.roi_bins = roi_bins
        self.nms_method = nms_method
        self.nms_threshold = nms_threshold
        self.nms_sigma = nms_sigma
        self.nms_score_floor = nms_score_floor
        self.drop_truncated = drop_truncated
        self.split_episodes = split_episodes
        self.sample_seed = sample_seed
        self.n_jobs = n_jobs

    # -- helpers -----------------------------------------------------------

    def nms_config(self, method=None) -> NmsConfig:
        return NmsConfig(
            NmsMethod.parse(method or self.nms_method), self.nms_threshold, self.nms_sigma, self.nms_score_floor
        )

    def _map(self, fn, items):
        jobs = self.n_jobs or worker_count()
        if jobs <= 1 or len(items) <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))

    def _timesteps(self, x) -> np.ndarray:
        return downsample_features(as_feature_matrix(x), int(self.scale))

    def _pool_features(self, emb: np.ndarray) -> np.ndarray:
        return _safe_unit_rows(emb)

    # -- fit ---------------------------------------------------------------

    def _prepare(self, X, annotations):
        if len(X) != len(annotations):
            raise ShapeMismatch(f"{len(X)} feature sequences but {len(annotations)} annotations")
        feats = [self._timesteps(x) for x in X]
        labels = StageLabeler(int(self.scale)).fit(annotations).transform(annotations)
        for ann, f, l in zip(annotations, feats, labels):
            if len(f) != len(l):
                raise ShapeMismatch(f"{ann.video_id}: {len(f)} feature timesteps vs {len(l)} labels")
        return feats, labels

    def fit(self, X: Sequence, annotations: Sequence[VideoAnnotation]):
        """Train the stage classifier, then the IoU evaluator on its proposals."""
        return self.fit_classifier(X, annotations).fit_evaluator(X, annotations)

    def fit_classifier(self, X: Sequence, annotations: Sequence[VideoAnnotation]):
        feats, labels = self._prepare(X, annotations)
        self.classifier_ = clone(self.classifier) if self.classifier is not None else StageClassifier()
        self.classifier_.fit(feats, labels)
        self.n_features_in_ = self.classifier_.checkpoint_.input_dim
        logger.info("stage classifier trained; log %s", self.classifier_.checkpoint_.training_log)
        return self

    def fit_evaluator(self, X: Sequence, annotations: Sequence[VideoAnnotation]):
        """Fit the IoU regressor on stratified proposals decoded from the
        trained classifier's predictions on ``X``."""
        check_is_fitted(self, "classifier_")
        feats, _ = self._prepare(X, annotations)
        ckpt = self.classifier_.checkpoint_
        scale = int(self.scale)
        rule = Containment(self.containment)
        proposals, pooled_feats = [], {}
        for ann, f in zip(annotations, feats):
            emb = forward(f, ckpt)
            stages = predict_stages(f, ckpt)[0]
            pooled_feats[ann.video_id] = self._pool_features(emb)
            for _, lo, hi, _ in decode_groups(stages, self.decay, rule, split=self.split_episodes):
                proposals.extend(
                    Proposal(TimeInterval(int(a), int(b)), ann.video_id) for a, b in zip(lo, hi)
                )
        gts = {
            a.video_id: [TimeInterval(g.start // scale, max(g.end // scale, g.start // scale + 1)) for g in a.instances]
            for a in annotations
        }
        big, middle, small = select_training_samples(proposals, gts, self.sample_seed)
        samples = big + middle + small
        logger.info("PES samples: big=%d middle=%d small=%d", len(big), len(middle), len(small))
        self.regressor_ = clone(self.regressor) if self.regressor is not None else IoURegressor()
        if samples:
            Xp, yp = pooled_samples(samples, pooled_feats, RoiSpec(self.roi_bins))
            self.regressor_.fit(Xp, yp)
        else:
            logger.warning("no proposal overlaps ground truth above 0.6; evaluator left untrained")
            self.regressor_ = None
        return self

    @classmethod
    def from_models(cls, checkpoint, regressor: Optional[IoURegressor] = None, **params) -> "ProposalPipeline":
        """A fitted pipeline from a stage-classifier checkpoint and an
        optional trained regressor (eval score 1 when absent)."""
        pipe = cls(**params)
        pipe.classifier_ = StageClassifier.from_checkpoint(checkpoint)
        pipe.regressor_ = regressor
        pipe.n_features_in_ = checkpoint.input_dim
        return pipe

    # -- predict -----------------------------------------------------------

    def score_window(self, x: np.ndarray, video_id: str, offset: int, n_total: int) -> list[ScoredProposal]:
        """Decode and score one window; intervals are returned in global timesteps."""
        ckpt = self.classifier_.checkpoint_
        emb = forward(x, ckpt)
        stages = predict_stages(x, ckpt)[0]
        pooled = self._pool_features(emb)
        rule = Containment(self.containment)
        interior_lo = offset > 0
        interior_hi = offset + len(x) < n_total
        out = []
        for group, lo, hi, pre in decode_groups(stages, self.decay, rule, split=self.split_episodes):
            span = group.span
            if self.drop_truncated and (
                (interior_lo and span.start == 0) or (interior_hi and span.end == len(x))
            ):
                continue
            if len(lo) == 0:
                continue
            if self.regressor_ is not None:
                ev = self.regressor_.predict(roi_pool_batch(pooled, lo, hi, RoiSpec(self.roi_bins)))
            else:
                ev = np.ones(len(lo))
            for a, b, p, e in zip(lo, hi, pre, ev):
                out.append(
                    ScoredProposal(
                        Proposal(TimeInterval(int(a) + offset, int(b) + offset), video_id), float(p), float(e)
                    )
                )
        return out

    def predict_video(self, x, video_id: str, nms: Optional[Sequence[str]] = None) -> dict[str, list[ScoredProposal]]:
        """Proposals for one video in frame units, one list per NMS method."""
        feats = self._timesteps(x)
        plan = plan_windows(len(feats), int(self.window_len))
        windows = [
            self.score_window(feats[o : o + plan.window_len], video_id, o, len(feats)) for o in plan.offsets
        ]
        merged = merge_windows(windows)
        scale = int(self.scale)
        if scale != 1:
            merged = [
                ScoredProposal(
                    Proposal(p.interval.scaled(scale), video_id), p.pre_score, p.eval_score, p.final_score
                )
                for p in merged
            ]
        methods = list(nms) if nms else [self.nms_method]
        return {m: apply_nms(merged, self.nms_config(m)) for m in methods}

    def predict(self, X, video_ids: Sequence[str], nms: Optional[str] = None) -> dict[str, list[ScoredProposal]]:
        check_is_fitted(self, "classifier_")
        if len(X) != len(video_ids):
            raise ShapeMismatch("one video id per feature sequence is required")
        method = nms or self.nms_method
        results = self._map(lambda item: self.predict_video(item[0], item[1], [method])[method], list(zip(X, video_ids)))
        return dict(zip(video_ids, results))


# -- CSV ---------------------------------------------------------------------

PROPOSAL_FIELDS = ["video_id", "start", "end", "pre_score", "eval_score", "final_score", "score"]


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def write_proposals_csv(props_per_video: Mapping[str, Sequence[ScoredProposal]], path) -> None:
    """One row per proposal, videos in sorted order, each ranked by score."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROPOSAL_FIELDS)
        for vid in sorted(props_per_video):
            props = list(props_per_video[vid])
            if not props:
                continue
            order = ranking_order(
                [p.score for p in props], [p.interval.start for p in props], [p.interval.end for p in props]
            )
            for i in order:
                p = props[i]
                w.writerow([vid, p.interval.start, p.interval.end, _fmt(p.pre_score),
                            _fmt(p.eval_score), _fmt(p.final_score), _fmt(p.score)])


def read_proposals_csv(path) -> dict[str, list[ScoredProposal]]:
    """Inverse of :func:`write_proposals_csv`; extra score columns are optional."""
    out: dict[str, list[ScoredProposal]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"video_id", "start", "end", "pre_score"} - set(reader.fieldnames or [])
        if missing:
            raise StagePropError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            num = lambda k: float(row[k]) if row.get(k) not in (None, "") else None
            pre, ev, fin, sc = num("pre_score"), num("eval_score"), num("final_score"), num("score")
            base = fin if fin is not None else pre
            decay = sc / base if sc is not None and base else 1.0
            p = ScoredProposal(
                Proposal(TimeInterval(int(row["start"]), int(row["end"])), row["video_id"]), pre, ev, fin, decay
            )
            out.setdefault(row["video_id"], []).append(p)
    return out


# -- full pipeline ----------------------------------------------------------

QUICKSTART_CONFIG: dict = {
    "seed": 7,
    "data": {
        "synth": {
            "n_videos": 250,
            "frames_per_video": 256,
            "instances_per_video": [1, 3],
            "duration_range": [12, 32],
            "feature_dim": 16,
            "noise_sigma": 0.3,
            "class_separation": 1.0,
        },
        "n_train": 200,
    },
    "scale": 1,
    "window_len": 160,
    "classifier": {
        "layers": [[5, 32], [5, 32]],
        "embed_dim": 16,
        "loss": "vmcl",
        "learning_rate": 0.05,
        "weight_decay": 5e-4,
        "dropout": 0.1,
        "epochs": 15,
        "batch_size": 8,
    },
    "margin_table": {"m": 0.1, "n": 0.15},
    "regressor": {"hidden": 256, "learning_rate": 0.1, "epochs": 10, "batch_size": 64},
    "decoder": {"decay": 0.09, "containment": "any_core", "split_episodes": True},
    "roi_bins": 8,
    "nms": {"method": "soft_gaussian", "threshold": 0.5, "sigma": 0.5, "score_floor": 1e-4, "compare": ["greedy"]},
    "eval": {"iou_grid": [0.5, 0.95, 0.05], "an_values": [10, 50, 100, 200], "max_an": 200, "recall_an": 100},
}


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_split(spec: Mapping, base: Path) -> tuple[list[VideoAnnotation], list[np.ndarray]]:
    ann_path = (base / spec["annotations"]).resolve()
    feat_dir = (base / spec["features_dir"]).resolve()
    if not ann_path.is_file():
        raise StagePropError(f"annotation file not found: {ann_path}")
    anns = load_annotations(ann_path)
    paths = [feat_dir / f"{a.video_id}.fseq" for a in anns]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise StagePropError(f"feature file not found: {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    return anns, [read_fseq(p).data for p in paths]


def load_data(config: Mapping, base: Path = Path(".")):
    """Resolve the ``data`` section into train and test (annotations, features)."""
    from .synth import SynthConfig, generate

    data = config.get("data", {})
    # explicit files win over a synthetic section inherited from defaults
    if "train" in data and "test" in data:
        return _load_split(data["train"], base), _load_split(data["test"], base)
    if "synth" in data:
        cfg = SynthConfig(**dict(data["synth"], seed=config.get("seed", data["synth"].get("seed", 0))))
        videos = generate(cfg)
        n_train = int(data.get("n_train", int(0.8 * len(videos))))
        anns = [a for a, _ in videos]
        feats = [f.data for _, f in videos]
        return (anns[:n_train], feats[:n_train]), (anns[n_train:], feats[n_train:])
    raise StagePropError("config 'data' needs either 'synth' or both 'train' and 'test'")


def build_pipeline(config: Mapping) -> ProposalPipeline:
    seed = int(config.get("seed", 0))
    c = dict(config.get("classifier", {}))
    table = config.get("margin_table", {})
    classifier = StageClassifier(
        layers=tuple(tuple(l) for l in c.pop("layers", ((3, 32), (3, 32)))),
        margin_m=table.get("m", 0.1),
        margin_n=table.get("n", 0.15),
        stage_values={int(k): tuple(v) for k, v in table["values"].items()} if "values" in table else None,
        seed=c.pop("seed", seed),
        **c,
    )
    r = dict(config.get("regressor", {}))
    regressor = IoURegressor(seed=r.pop("seed", seed), **r)
    dec = config.get("decoder", {})
    nms = config.get("nms", {})
    return ProposalPipeline(
        classifier=classifier,
        regressor=regressor,
        scale=int(config.get("scale", 1)),
        window_len=int(config.get("window_len", 128)),
        decay=float(dec.get("decay", DEFAULT_DECAY)),
        split_episodes=bool(dec.get("split_episodes", True)),
        containment=dec.get("containment", "any_core"),
        roi_bins=int(config.get("roi_bins", 8)),
        nms_method=NmsMethod.parse(nms.get("method", "soft_gaussian")).value,
        nms_threshold=float(nms.get("threshold", 0.5)),
        nms_sigma=float(nms.get("sigma", 0.5)),
        nms_score_floor=float(nms.get("score_floor", 1e-4)),
        sample_seed=seed,
    )


def eval_protocol(config: Mapping) -> EvalProtocol:
    ev = config.get("eval", {})
    lo, hi, step = ev.get("iou_grid", [0.5, 1.0, 0.05])
    return EvalProtocol.from_range(
        lo, hi, step, an_values=tuple(ev.get("an_values", (50, 100, 200))), max_an=int(ev.get("max_an", 200))
    )


def write_evaluation(props, annotations, protocol: EvalProtocol, out_dir: Path, prefix: str = "", recall_an: int = 100) -> dict:
    """Write summary JSON, recall-vs-IoU CSV and AR-AN CSV; return the summary."""
    result = summarize(props, gts_from_annotations(annotations), protocol, recall_an)
    check_monotone(result["ar_an"], result["recall_vs_iou"])
    with open(out_dir / f"{prefix}summary.json", "w") as fh:
        json.dump(result["summary"], fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(out_dir / f"{prefix}recall_iou.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tiou", f"recall@{recall_an}"])
        w.writerows((repr(t), repr(r)) for t, r in result["recall_vs_iou"])
    with open(out_dir / f"{prefix}ar_an.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["an", "ar"])
        w.writerows((a, repr(v)) for a, v in result["ar_an"])
    return result["summary"]


def run_pipeline(config: Mapping, out_dir: str | Path, base_dir: str | Path = ".") -> dict:
    """label -> train stage classifier -> train evaluator -> windowed predict
    -> decode -> score -> NMS -> evaluate, writing every artifact to ``out_dir``.

    Returns the manifest dict (also written as ``manifest.json``).
    """
    from .persist import save_checkpoint, save_regressor

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (train_ann, train_x), (test_ann, test_x) = load_data(config, Path(base_dir))
    if not train_ann:
        raise StagePropError("training split is empty")
    if not test_ann:
        raise StagePropError("test split is empty")

    pipe = build_pipeline(config)
    pipe.fit(train_x, train_ann)
    save_checkpoint(pipe.classifier_.checkpoint_, out / "ass.ckpt")
    if pipe.regressor_ is not None:
        save_regressor(pipe.regressor_, out / "pes.ckpt", {"roi_bins": pipe.roi_bins})

    nms_cfg = config.get("nms", {})
    primary = NmsMethod.parse(nms_cfg.get("method", "soft_gaussian")).value
    methods = [primary] + [NmsMethod.parse(m).value for m in nms_cfg.get("compare", []) if NmsMethod.parse(m).value != primary]
    per_video = pipe._map(lambda item: pipe.predict_video(item[0], item[1].video_id, methods), list(zip(test_x, test_ann)))

    protocol = eval_protocol(config)
    recall_an = int(config.get("eval", {}).get("recall_an", 100))
    summaries = {}
    for m in methods:
        props = {a.video_id: r[m] for a, r in zip(test_ann, per_video)}
        prefix = "" if m == primary else f"{m}_"
        write_proposals_csv(props, out / f"{prefix}proposals.csv")
        summaries[m] = write_evaluation(props, test_ann, protocol, out, prefix, recall_an)

    files = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "config_sha256": hashlib.sha256(_canonical(config)).hexdigest(),
        "seed": int(config.get("seed", 0)),
        "nms_primary": primary,
        "summaries": summaries,
        "training_log": pipe.classifier_.checkpoint_.training_log,
        "outputs": {name: _sha256(out / name) for name in files},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def write_synth(videos, out_dir: str | Path) -> None:
    """Annotations JSON plus one FSEQ file per video under ``features/``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    save_annotations([a for a, _ in videos], out / "annotations.json")
    for ann, feats in videos:
        write_fseq(feats, out / "features" / f"{ann.video_id}.fseq")
