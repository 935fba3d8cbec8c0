import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stageprop.core import GroundTruthInstance, InstanceTooShort, Stage, StageSequence, TimeInterval, VideoAnnotation
from stageprop.labeling import STAGE_PRIORITY, StageLabeler, downsample_labels, expand_instance, label_frames


def brute_force_labels(ann: VideoAnnotation) -> np.ndarray:
    """Per-frame reference: test every segment of every instance, keep the
    instance with the nearest unexpanded core (earlier instance on ties)."""
    out = []
    for t in range(ann.n_frames):
        best, label = None, 0
        for g in ann.instances:
            s, e = g.start, g.end
            d = e - s
            h, th = d // 2, d // 3
            segments = [
                (1, max(s - h, 0), s),
                (2, s, s + th),
                (3, s + th, e - th),
                (4, e - th, e),
                (5, e, min(e + h, ann.n_frames)),
            ]
            own = next((lab for lab, lo, hi in segments if lo <= t < hi), None)
            if own is None:
                continue
            dist = 0 if s <= t < e else (s - t if t < s else t - (e - 1))
            if best is None or dist < best:
                best, label = dist, own
        out.append(label)
    return np.array(out)


def random_annotation(rng, max_instances=5, max_frames=200) -> VideoAnnotation:
    n = int(rng.integers(3, max_frames + 1))
    k = int(rng.integers(0, max_instances + 1))
    inst = []
    for _ in range(k):
        d = int(rng.integers(3, n + 1))
        s = int(rng.integers(0, n - d + 1))
        inst.append(GroundTruthInstance(TimeInterval(s, s + d)))
    return VideoAnnotation("v", n, tuple(inst))


def test_expand_instance_example():
    x = expand_instance(GroundTruthInstance(TimeInterval(12, 24)), 100)
    assert x.ready == TimeInterval(6, 12)
    assert x.start == TimeInterval(12, 16)
    assert x.confirm == TimeInterval(16, 20)
    assert x.end == TimeInterval(20, 24)
    assert x.follow == TimeInterval(24, 30)


def test_expand_instance_clips_ready_at_zero():
    x = expand_instance(TimeInterval(0, 12), 100)
    assert x.ready is None
    assert x.span == TimeInterval(0, 18)


def test_expand_instance_minimum_duration():
    x = expand_instance(TimeInterval(10, 13), 100)
    assert (x.ready, x.start, x.confirm, x.end, x.follow) == (
        TimeInterval(9, 10), TimeInterval(10, 11), TimeInterval(11, 12), TimeInterval(12, 13), TimeInterval(13, 14),
    )
    with pytest.raises(InstanceTooShort):
        expand_instance(TimeInterval(10, 12), 100)


@given(st.integers(0, 300), st.integers(3, 300), st.integers(0, 50))
def test_expansion_tiles_instance(s, d, slack):
    n = s + d + slack
    x = expand_instance(TimeInterval(s, s + d), n)
    assert x.start.start == s and x.end.end == s + d
    assert x.start.end == x.confirm.start and x.confirm.end == x.end.start
    assert x.start.length + x.confirm.length + x.end.length == d
    if s >= d // 2:
        assert x.ready.length == d // 2
    if slack >= d // 2:
        assert x.follow.length == d // 2


def test_label_frames_example():
    ann = VideoAnnotation("v", 40, (GroundTruthInstance(TimeInterval(12, 24)),))
    expected = [0] * 6 + [1] * 6 + [2] * 4 + [3] * 4 + [4] * 4 + [5] * 6 + [0] * 10
    np.testing.assert_array_equal(label_frames(ann).labels, expected)


def test_label_frames_empty_is_background():
    assert not label_frames(VideoAnnotation("v", 17)).labels.any()


def test_overlap_goes_to_nearest_core():
    # follow of the first ([20,30)) overlaps ready of the second ([22,32))
    ann = VideoAnnotation("v", 80, (GroundTruthInstance(TimeInterval(0, 20)), GroundTruthInstance(TimeInterval(32, 52))))
    lab = label_frames(ann).labels
    # frame 25 is 6 from the first core and 7 from the second; frame 26 is 7 and 6
    np.testing.assert_array_equal(lab[20:26], [5] * 6)
    np.testing.assert_array_equal(lab[26:32], [1] * 6)


def test_label_frames_matches_brute_force_oracle():
    rng = np.random.default_rng(1234)
    mismatches = 0
    for _ in range(1000):
        ann = random_annotation(rng)
        mismatches += int(np.sum(label_frames(ann).labels != brute_force_labels(ann)))
    assert mismatches == 0


@given(st.integers(3, 60), st.integers(0, 60))
def test_single_instance_run_order(d, pad):
    s = d // 2 + pad + 1
    n = s + d + d // 2 + pad + 1
    lab = label_frames(VideoAnnotation("v", n, (GroundTruthInstance(TimeInterval(s, s + d)),))).labels
    runs = [k for k, _ in itertools.groupby(lab.tolist())]
    assert runs == [0, 1, 2, 3, 4, 5, 0]
    assert np.isin(lab, [2, 3, 4]).sum() == d


def test_downsample_examples():
    seq = StageSequence([0, 0, 1, 1, 2, 2, 3, 3])
    np.testing.assert_array_equal(downsample_labels(seq, 2).labels, [0, 1, 2, 3])
    assert downsample_labels(seq, 2).scale == 2
    np.testing.assert_array_equal(downsample_labels(seq, 1).labels, seq.labels)
    np.testing.assert_array_equal(downsample_labels(StageSequence([1, 2]), 2).labels, [2])


def test_downsample_two_frame_ties_follow_priority():
    rank = {s: i for i, s in enumerate(STAGE_PRIORITY)}
    for a, b in itertools.permutations(range(6), 2):
        got = downsample_labels(StageSequence([a, b]), 2).labels[0]
        assert got == min((a, b), key=lambda s: rank[Stage(s)])


@given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.integers(1, 7))
def test_downsample_is_majority(labels, s_c):
    if len(labels) < s_c:
        return
    out = downsample_labels(StageSequence(labels), s_c).labels
    assert len(out) == len(labels) // s_c
    for t, lab in enumerate(out):
        block = labels[t * s_c : (t + 1) * s_c]
        assert block.count(lab) == max(block.count(k) for k in range(6))


def test_stage_labeler_transformer():
    anns = [VideoAnnotation("v", 40, (GroundTruthInstance(TimeInterval(12, 24)),))]
    out = StageLabeler(scale=2).fit_transform(anns)
    assert len(out[0]) == 20
    assert StageLabeler().get_params() == {"scale": 1}
