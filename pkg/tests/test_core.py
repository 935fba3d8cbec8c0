import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stageprop.core import (
    FeatureSequence,
    GroundTruthInstance,
    Proposal,
    ScoredProposal,
    StagePropError,
    StageSequence,
    TimeInterval,
    VideoAnnotation,
    iou,
    iou_matrix,
    load_annotations,
    read_fseq,
    save_annotations,
    write_fseq,
)


@st.composite
def intervals(draw, hi=200):
    s = draw(st.integers(0, hi - 1))
    e = draw(st.integers(s + 1, hi))
    return TimeInterval(s, e)


def test_iou_examples():
    assert iou(TimeInterval(10, 20), TimeInterval(15, 25)) == pytest.approx(5 / 15)
    assert iou(TimeInterval(10, 20), TimeInterval(10, 20)) == 1.0
    assert iou(TimeInterval(0, 5), TimeInterval(5, 10)) == 0.0


@given(intervals(), intervals())
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == 1.0


@given(intervals(), st.data())
def test_iou_nested_is_length_ratio(outer, data):
    s = data.draw(st.integers(outer.start, outer.end - 1))
    e = data.draw(st.integers(s + 1, outer.end))
    inner = TimeInterval(s, e)
    assert iou(inner, outer) == inner.length / outer.length


@given(st.lists(intervals(), min_size=1, max_size=6), st.lists(intervals(), min_size=1, max_size=6))
def test_iou_matrix_matches_scalar(a, b):
    m = iou_matrix([[x.start, x.end] for x in a], [[y.start, y.end] for y in b])
    ref = np.array([[iou(x, y) for y in b] for x in a])
    np.testing.assert_allclose(m, ref, rtol=0, atol=1e-15)


@pytest.mark.parametrize("s,e", [(5, 5), (6, 2), (-1, 3), (0.5, 2)])
def test_invalid_intervals_rejected(s, e):
    with pytest.raises(StagePropError):
        TimeInterval(s, e)


def test_scored_proposal_fuses_scores():
    p = ScoredProposal(Proposal(TimeInterval(0, 4), "v"), 0.5986, 0.5)
    assert p.final_score == pytest.approx(0.2993, abs=1e-12)
    assert p.score == p.final_score
    d = p.decayed(0.5)
    assert d.final_score == p.final_score and d.score == pytest.approx(p.score * 0.5)
    with pytest.raises(StagePropError):
        ScoredProposal(Proposal(TimeInterval(0, 4)), 1.5)


def test_stage_sequence_validates_labels():
    with pytest.raises(StagePropError):
        StageSequence(np.array([0, 6]))
    with pytest.raises(StagePropError):
        StageSequence(np.array([], dtype=int))
    seq = StageSequence([0, 1, 2])
    assert not seq.labels.flags.writeable


def test_annotation_rejects_instance_past_end():
    with pytest.raises(StagePropError):
        VideoAnnotation("v", 10, (GroundTruthInstance(TimeInterval(5, 11)),))


def test_annotation_json_round_trip(tmp_path):
    anns = [
        VideoAnnotation("a", 100, (GroundTruthInstance(TimeInterval(3, 20)),)),
        VideoAnnotation("b", 40, ()),
    ]
    path = tmp_path / "ann.json"
    save_annotations(anns, path)
    assert load_annotations(path) == anns
    single = tmp_path / "one.json"
    single.write_text(json.dumps({"video_id": "c", "n_frames": 9, "instances": [{"start": 1, "end": 5}]}))
    (c,) = load_annotations(single)
    assert c.intervals == [TimeInterval(1, 5)]


def test_fseq_round_trip_and_layout(tmp_path):
    data = np.random.default_rng(0).standard_normal((7, 3)).astype(np.float32)
    path = tmp_path / "x.fseq"
    write_fseq(FeatureSequence(data), path)
    raw = path.read_bytes()
    assert len(raw) == 16 + 7 * 3 * 4
    assert raw[:4] == b"FSEQ"
    assert struct.unpack_from("<II", raw, 4) == (7, 3)
    np.testing.assert_array_equal(read_fseq(path).data, data.astype(np.float64))


def test_fseq_rejects_corrupt_files(tmp_path):
    path = tmp_path / "bad.fseq"
    path.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(StagePropError, match="magic"):
        read_fseq(path)
    write_fseq(np.ones((2, 2)), path)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(StagePropError, match="expected"):
        read_fseq(path)


def test_feature_sequence_rejects_nonfinite():
    with pytest.raises(StagePropError):
        FeatureSequence(np.array([[np.nan]]))
