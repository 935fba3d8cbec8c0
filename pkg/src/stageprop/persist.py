"""Binary model files: a JSON header followed by little-endian float32 tensors.

Layout::

    b"SPCK" | u32 header_len | header JSON (utf-8) | tensor bytes ...

The header lists tensor names and shapes in file order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .classifier import Checkpoint, ClassifierConfig
from .core import StagePropError
from .evaluator import IoURegressor
from .losses import ClassifierHead, MarginTable

__all__ = ["save_checkpoint", "load_checkpoint", "save_regressor", "load_regressor"]

_MAGIC = b"SPCK"
_PREFIX = struct.Struct("<4sI")


def _write(path, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header, tensors=[{"name": n, "shape": list(t.shape)} for n, t in tensors])
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(_MAGIC, len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def _read(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise StagePropError(f"{path}: not a model file")
    magic, hlen = _PREFIX.unpack_from(raw)
    if magic != _MAGIC:
        raise StagePropError(f"{path}: bad magic {magic!r}")
    header = json.loads(raw[_PREFIX.size : _PREFIX.size + hlen])
    offset = _PREFIX.size + hlen
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)
        offset += 4 * count
    if offset != len(raw):
        raise StagePropError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, tensors


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors = []
    for i, (w, b) in enumerate(ckpt.conv):
        tensors += [(f"conv{i}.weight", w), (f"conv{i}.bias", b)]
    tensors += [("embed.weight", ckpt.embed[0]), ("embed.bias", ckpt.embed[1]), ("head.weight", ckpt.head.weights)]
    header = {
        "kind": "stage_classifier",
        "config": ckpt.config.to_dict(),
        "input_dim": ckpt.input_dim,
        "loss_kind": ckpt.loss_kind,
        "margin_table": ckpt.table.to_dict(),
        "training_log": [[e, l] for e, l in ckpt.training_log],
    }
    _write(path, header, tensors)


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, t = _read(path)
    if header.get("kind") != "stage_classifier":
        raise StagePropError(f"{path}: not a stage classifier checkpoint")
    cfg = ClassifierConfig.from_dict(header["config"])
    conv = [(t[f"conv{i}.weight"], t[f"conv{i}.bias"]) for i in range(len(cfg.layers))]
    return Checkpoint(
        config=cfg,
        input_dim=int(header["input_dim"]),
        conv=conv,
        embed=(t["embed.weight"], t["embed.bias"]),
        head=ClassifierHead(t["head.weight"], cfg.scale),
        loss_kind=header["loss_kind"],
        table=MarginTable.from_dict(header["margin_table"]),
        training_log=[(int(e), float(l)) for e, l in header["training_log"]],
    )


def save_regressor(reg: IoURegressor, path: str | Path, extra: dict | None = None) -> None:
    tensors = [
        ("w1", reg.coefs_[0]), ("b1", reg.intercepts_[0]),
        ("w2", reg.coefs_[1]), ("b2", reg.intercepts_[1]),
        ("mean", reg.mean_), ("scale", reg.scale_),
    ]
    _write(path, {"kind": "iou_regressor", "params": reg.get_params(), "extra": extra or {}}, tensors)


def load_regressor(path: str | Path) -> tuple[IoURegressor, dict]:
    header, t = _read(path)
    if header.get("kind") != "iou_regressor":
        raise StagePropError(f"{path}: not an IoU regressor file")
    reg = IoURegressor(**header["params"])
    reg.coefs_ = [t["w1"], t["w2"]]
    reg.intercepts_ = [t["b1"], t["b2"]]
    reg.mean_, reg.scale_ = t["mean"], t["scale"]
    reg.n_features_in_ = reg.coefs_[0].shape[0]
    return reg, header.get("extra", {})
