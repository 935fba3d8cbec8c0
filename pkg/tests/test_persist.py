import numpy as np
import pytest

from stageprop.classifier import ClassifierConfig, forward, init_checkpoint
from stageprop.core import StagePropError
from stageprop.evaluator import IoURegressor
from stageprop.losses import MarginTable
from stageprop.persist import load_checkpoint, load_regressor, save_checkpoint, save_regressor


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def test_checkpoint_round_trip(tmp_path):
    cfg = ClassifierConfig(layers=((3, 6), (5, 4)), embed_dim=5, epochs=2)
    ckpt = init_checkpoint(cfg, 7, "vmcl_arc", MarginTable({0: (1, 9)}, m=0.2, n=0.1))
    ckpt.training_log = [(0, 1.5), (1, 0.75)]
    path = tmp_path / "ass.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert path.read_bytes()[:4] == b"SPCK"
    assert back.config == cfg and back.input_dim == 7 and back.loss_kind == "vmcl_arc"
    assert back.table == ckpt.table and back.training_log == ckpt.training_log
    for p, q in zip(ckpt.params(), back.params()):
        np.testing.assert_array_equal(q, f32(p))
    x = np.random.default_rng(0).standard_normal((12, 7))
    np.testing.assert_allclose(forward(x, back), forward(x, ckpt), rtol=1e-4, atol=1e-5)


def test_regressor_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    X, y = rng.standard_normal((40, 5)), rng.uniform(0, 1, 40)
    reg = IoURegressor(hidden=6, epochs=3, seed=2).fit(X, y)
    save_regressor(reg, tmp_path / "pes.ckpt", {"roi_bins": 4})
    back, extra = load_regressor(tmp_path / "pes.ckpt")
    assert extra == {"roi_bins": 4}
    assert back.get_params() == reg.get_params()
    np.testing.assert_array_equal(back.coefs_[0], f32(reg.coefs_[0]))
    np.testing.assert_allclose(back.predict(X), reg.predict(X), atol=1e-5)


def test_bad_files_are_rejected(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(StagePropError, match="magic"):
        load_checkpoint(bad)
    short = tmp_path / "short.ckpt"
    short.write_bytes(b"SP")
    with pytest.raises(StagePropError):
        load_regressor(short)
    reg = IoURegressor(hidden=2, epochs=1).fit(np.ones((3, 2)) * [[1], [2], [3]], [0.1, 0.5, 0.9])
    save_regressor(reg, tmp_path / "r.ckpt")
    with pytest.raises(StagePropError, match="not a stage classifier"):
        load_checkpoint(tmp_path / "r.ckpt")
    (tmp_path / "trail.ckpt").write_bytes((tmp_path / "r.ckpt").read_bytes() + b"\0")
    with pytest.raises(StagePropError, match="trailing"):
        load_regressor(tmp_path / "trail.ckpt")
