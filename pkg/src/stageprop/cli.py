"""Command-line entry point.

Exit codes: 0 on success, 2 on validation errors, 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .core import StagePropError, load_annotations, read_fseq
from .labeling import downsample_labels, label_frames

logger = logging.getLogger("stageprop")


def _load_config(path: Optional[str]) -> dict:
    from .pipeline import QUICKSTART_CONFIG

    config = copy.deepcopy(QUICKSTART_CONFIG)
    if path:
        p = Path(path)
        if not p.is_file():
            raise StagePropError(f"config file not found: {p}")
        with open(p) as fh:
            _merge(config, json.load(fh))
    return config


def _merge(base: dict, override: dict) -> dict:
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def _set(config: dict, dotted: str, value) -> None:
    if value is None:
        return
    node = config
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def _features(annotations, features_dir: str):
    base = Path(features_dir)
    paths = [base / f"{a.video_id}.fseq" for a in annotations]
    for p in paths:
        if not p.is_file():
            raise StagePropError(f"feature file not found: {p}")
    return [read_fseq(p).data for p in paths]


def _require(path: str, what: str) -> str:
    if not Path(path).is_file():
        raise StagePropError(f"{what} not found: {path}")
    return path


def _annotations(path: str):
    if not Path(path).is_file():
        raise StagePropError(f"annotation file not found: {path}")
    return load_annotations(path)


# -- subcommands --------------------------------------------------------------


def cmd_gen_synth(args) -> None:
    from .pipeline import write_synth
    from .synth import SynthConfig, generate

    config = _load_config(args.config)
    synth = dict(config["data"].get("synth", {}))
    synth["seed"] = config.get("seed", 0)
    overrides = {
        "n_videos": args.n_videos,
        "frames_per_video": args.frames,
        "feature_dim": args.feature_dim,
        "noise_sigma": args.noise_sigma,
        "class_separation": args.separation,
        "seed": args.seed,
    }
    synth.update({k: v for k, v in overrides.items() if v is not None})
    videos = generate(SynthConfig(**synth))
    write_synth(videos, args.out)
    print(f"wrote {len(videos)} videos to {args.out}")


def cmd_label(args) -> None:
    anns = _annotations(args.annotations)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["video_id", "labels"])
        for ann in anns:
            seq = downsample_labels(label_frames(ann), args.scale)
            w.writerow([ann.video_id, ",".join(str(int(v)) for v in seq.labels)])
    finally:
        if out is not sys.stdout:
            out.close()


def _pipeline_from(config: dict):
    from .pipeline import build_pipeline

    return build_pipeline(config)


def cmd_train_ass(args) -> None:
    from .persist import save_checkpoint

    config = _load_config(args.config)
    _set(config, "classifier.loss", args.loss)
    _set(config, "classifier.epochs", args.epochs)
    _set(config, "classifier.learning_rate", args.learning_rate)
    _set(config, "seed", args.seed)
    _set(config, "scale", args.scale)
    if args.margin_table:
        with open(args.margin_table) as fh:
            config["margin_table"] = json.load(fh)
    anns = _annotations(args.annotations)
    feats = _features(anns, args.features_dir)
    pipe = _pipeline_from(config).fit_classifier(feats, anns)
    save_checkpoint(pipe.classifier_.checkpoint_, args.out)
    print(json.dumps({"checkpoint": args.out, "training_log": pipe.classifier_.checkpoint_.training_log}))


def cmd_train_pes(args) -> None:
    from .persist import load_checkpoint, save_regressor
    from .pipeline import ProposalPipeline

    config = _load_config(args.config)
    _set(config, "roi_bins", args.bins)
    _set(config, "regressor.epochs", args.epochs)
    _set(config, "seed", args.seed)
    _set(config, "scale", args.scale)
    anns = _annotations(args.annotations)
    feats = _features(anns, args.features_dir)
    template = _pipeline_from(config)
    pipe = ProposalPipeline.from_models(load_checkpoint(_require(args.ass, "checkpoint")), **template.get_params(deep=False))
    pipe.fit_evaluator(feats, anns)
    if pipe.regressor_ is None:
        raise StagePropError("no proposal reached IoU > 0.6; nothing to train the evaluator on")
    save_regressor(pipe.regressor_, args.out, {"roi_bins": pipe.roi_bins})
    print(json.dumps({"regressor": args.out, "final_loss": pipe.regressor_.loss_curve_[-1] if pipe.regressor_.loss_curve_ else None}))


def _nms_overrides(config: dict, args) -> None:
    if args.nms:
        _set(config, "nms.method", args.nms.replace("-", "_"))
    _set(config, "nms.threshold", args.nms_thresh)
    _set(config, "nms.sigma", args.nms_sigma)


def cmd_predict(args) -> None:
    from .persist import load_checkpoint, load_regressor
    from .pipeline import ProposalPipeline, write_proposals_csv

    config = _load_config(args.config)
    _nms_overrides(config, args)
    _set(config, "window_len", args.window_len)
    _set(config, "scale", args.scale)
    _set(config, "decoder.decay", args.decay)
    regressor = None
    if args.pes:
        regressor, extra = load_regressor(_require(args.pes, "regressor file"))
        config["roi_bins"] = extra.get("roi_bins", config.get("roi_bins", 8))
    anns = _annotations(args.annotations)
    feats = _features(anns, args.features_dir)
    params = _pipeline_from(config).get_params(deep=False)
    params.pop("regressor")
    pipe = ProposalPipeline.from_models(load_checkpoint(_require(args.ass, "checkpoint")), regressor, **params)
    props = pipe.predict(feats, [a.video_id for a in anns])
    write_proposals_csv(props, args.out)
    print(f"wrote {sum(len(v) for v in props.values())} proposals to {args.out}")


def cmd_evaluate(args) -> None:
    from .pipeline import eval_protocol, read_proposals_csv, write_evaluation

    if not Path(args.proposals).is_file():
        raise StagePropError(f"proposals file not found: {args.proposals}")
    config = _load_config(args.config)
    _set(config, "eval.iou_grid", args.iou_grid)
    _set(config, "eval.an_values", args.an)
    _set(config, "eval.max_an", args.max_an)
    _set(config, "eval.recall_an", args.recall_an)
    anns = _annotations(args.annotations)
    props = read_proposals_csv(args.proposals)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = write_evaluation(props, anns, eval_protocol(config), out, recall_an=int(config["eval"]["recall_an"]))
    print(json.dumps(summary, sort_keys=True))


def cmd_run(args) -> None:
    from .pipeline import run_pipeline

    config = _load_config(args.config)
    _set(config, "seed", args.seed)
    _nms_overrides(config, args)
    base = Path(args.config).parent if args.config else Path(".")
    manifest = run_pipeline(config, args.out, base)
    print(json.dumps(manifest["summaries"], indent=1, sort_keys=True))


def cmd_export_embeddings(args) -> None:
    from .classifier import export_embeddings
    from .persist import load_checkpoint
    from .pipeline import downsample_features

    anns = _annotations(args.annotations)
    feats = _features(anns, args.features_dir)
    ckpt = load_checkpoint(_require(args.ass, "checkpoint"))
    dataset = [
        (a.video_id, downsample_features(f, args.scale), downsample_labels(label_frames(a), args.scale))
        for a, f in zip(anns, feats)
    ]
    rows = export_embeddings(dataset, ckpt)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "timestep", "label", "x", "y", "angle"])
        w.writerows((v, t, l, repr(x), repr(y), repr(a)) for v, t, l, x, y, a in rows)
    print(f"wrote {len(rows)} rows to {args.out}")


# -- parser -------------------------------------------------------------------


def _nms_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nms", choices=["greedy", "soft-linear", "soft-gaussian"])
    p.add_argument("--nms-thresh", type=float)
    p.add_argument("--nms-sigma", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stageprop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-videos", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--separation", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("label", help="stage labels per video as CSV")
    p.add_argument("--annotations", required=True)
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train-ass", help="train the stage classifier")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--loss", choices=["softmax", "lmcl", "vmcl", "vmcl_arc"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--margin-table")
    p.add_argument("--scale", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_ass)

    p = sub.add_parser("train-pes", help="train the IoU evaluator")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--ass", required=True, help="stage classifier checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--bins", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--scale", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_pes)

    p = sub.add_parser("predict", help="windowed proposal generation")
    p.add_argument("--annotations", required=True, help="video list (n_frames, ids)")
    p.add_argument("--features-dir", required=True)
    p.add_argument("--ass", required=True)
    p.add_argument("--pes")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--window-len", type=int)
    p.add_argument("--scale", type=int)
    p.add_argument("--decay", type=float)
    _nms_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="AR@AN and recall curves")
    p.add_argument("--proposals", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--iou-grid", type=float, nargs=3, metavar=("LO", "HI", "STEP"))
    p.add_argument("--an", type=int, nargs="+")
    p.add_argument("--max-an", type=int)
    p.add_argument("--recall-an", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full pipeline from one JSON config")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _nms_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("export-embeddings", help="2-D angular projection of embeddings")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--ass", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=1)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StagePropError as exc:
        print(f"error: {type(exc).__module__.rsplit('.', 1)[-1]}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
