import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import numeric_grad, rel_error
from stageprop.core import DegenerateBatch, ShapeMismatch, Stage, ZeroNormInput
from stageprop.losses import (
    ClassifierHead,
    MarginTable,
    compute_loss,
    lmcl_loss,
    margin,
    softmax_loss,
    vmcl_arc_loss,
    vmcl_loss,
)


def random_batch(rng, k=None, d=None, b=None):
    k = k or int(rng.integers(2, 9))
    d = d or int(rng.integers(2, 17))
    b = b or int(rng.integers(1, 9))
    return rng.standard_normal((b, d)), rng.integers(0, k, b), rng.standard_normal((k, d))


def random_table(rng, k):
    values = {c: tuple(int(v) for v in rng.integers(0, 12, rng.integers(1, 3))) for c in range(k)}
    return MarginTable(values, m=float(rng.uniform(0, 0.2)), n=float(rng.uniform(0, 0.3)))


# -- margin table ----------------------------------------------------------


def test_default_ready_row():
    table = MarginTable(m=0.1, n=0.15)
    row = [margin(table, j, Stage.READY) for j in range(6)]
    assert row == [0.15, 0.0, 0.25, 0.35, 0.45, 0.25]


def test_end_follow_margin_is_wide():
    assert margin(MarginTable(), Stage.FOLLOW, Stage.END) == pytest.approx(0.55)


def test_zero_growth_collapses_to_minimum():
    table = MarginTable(m=0.0, n=0.2)
    m = table.matrix()
    assert np.all(m[~np.eye(6, dtype=bool)] == 0.2) and np.all(np.diag(m) == 0)


def test_multi_value_class_uses_closest_value():
    table = MarginTable({0: (3, 11), 1: (10,)}, m=0.1, n=0.15)
    assert margin(table, 1, 0) == pytest.approx(0.25, abs=1e-15)


@given(st.data())
def test_margin_symmetric_and_floored(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    table = random_table(rng, int(rng.integers(2, 9)))
    m = table.matrix()
    np.testing.assert_array_equal(m, m.T)
    off = ~np.eye(len(m), dtype=bool)
    assert np.all(m[off] >= table.n)


def test_margin_table_dict_round_trip(tmp_path):
    table = MarginTable({0: (2, 8), 1: (1,)}, m=0.3, n=0.05)
    assert MarginTable.from_dict(table.to_dict()) == table
    path = tmp_path / "t.json"
    path.write_text(json.dumps(table.to_dict()))
    assert MarginTable.from_json(path) == table


# -- loss values -----------------------------------------------------------


def test_softmax_uniform_two_class():
    lv = softmax_loss(np.array([[1.0, 0.0]]), np.array([0]), np.array([[0.0, 1.0], [0.0, 1.0]]))
    assert lv.loss == pytest.approx(math.log(2), abs=1e-15)


def test_softmax_saturates():
    lv = softmax_loss(np.array([[1.0]]), np.array([0]), np.array([[800.0], [0.0]]))
    assert lv.loss == pytest.approx(0.0, abs=1e-300)


def test_confident_loss_keeps_relative_precision():
    lv = softmax_loss(np.array([[1.0]]), np.array([0]), np.array([[40.0], [0.0], [1.0]]))
    assert lv.loss == pytest.approx(math.log1p(math.exp(-40.0) + math.exp(-39.0)), rel=1e-12)
    assert lv.loss > 0.0


def test_lmcl_closed_form():
    w = np.eye(6)
    w[1:] = -w[0]  # every non-target weight points away: cos = -1
    x = np.array([[1.0, 0, 0, 0, 0, 0]])
    lv = lmcl_loss(x, np.array([0]), w, m_const=0.35, scale=30.0)
    expected = math.log1p(5 * math.exp(30 * (-1.0) - 30 * (1.0 - 0.35)))
    assert lv.loss == pytest.approx(expected, abs=1e-9)


def test_arc_logit_example():
    # theta_j = pi/2 and f = pi/6 give a non-target logit of s*cos(pi/3) = s/2
    table = MarginTable({0: (0,), 1: (0,)}, m=0.0, n=math.pi / 6)
    lv = vmcl_arc_loss(np.array([[1.0, 0.0]]), np.array([0]), np.eye(2), table, scale=30.0)
    expected = -math.log(math.exp(30 * 1.0) / (math.exp(30 * 1.0) + math.exp(15.0)))
    assert lv.loss == pytest.approx(expected, rel=1e-12)


def test_zero_margin_variants_equal_scaled_softmax():
    rng = np.random.default_rng(5)
    x, y, w = random_batch(rng, k=6)
    zero = MarginTable(m=0.0, n=0.0)
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    wn = w / np.linalg.norm(w, axis=1, keepdims=True)
    ref = softmax_loss(30.0 * xn, y, wn).loss
    assert vmcl_loss(x, y, w, zero).loss == pytest.approx(ref, abs=1e-12)
    assert vmcl_arc_loss(x, y, w, zero).loss == pytest.approx(ref, abs=1e-9)
    assert lmcl_loss(x, y, w, 0.0).loss == pytest.approx(ref, abs=1e-12)


@given(st.data())
def test_constant_table_matches_lmcl(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    x, y, w = random_batch(rng)
    c = float(rng.uniform(0, 0.6))
    v = vmcl_loss(x, y, w, MarginTable.constant(c, len(w))).loss
    assert v == pytest.approx(lmcl_loss(x, y, w, c).loss, abs=1e-12)


@given(st.data())
def test_losses_scale_invariant_and_positive(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    x, y, w = random_batch(rng)
    table = random_table(rng, len(w))
    factors = rng.uniform(0.01, 100.0, (len(x), 1))
    for kind in ("lmcl", "vmcl", "vmcl_arc"):
        head = ClassifierHead(w)
        a = compute_loss(kind, x, y, head, table).loss
        b = compute_loss(kind, x * factors, y, head, table).loss
        assert a == pytest.approx(b, abs=1e-9)
        assert np.isfinite(a) and a > 0


@given(st.data())
def test_vmcl_increases_with_margin(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    x, _, w = random_batch(rng, b=1)
    k = len(w)
    y = np.array([int(rng.integers(k))])
    j = int((y[0] + rng.integers(1, k)) % k)
    table = random_table(rng, k)
    # a moderate scale keeps every class probability representable
    base = vmcl_loss(x, y, w, table, scale=4.0).loss

    # a table identical to ``table`` except one larger f(j, y)
    class Bumped(MarginTable):
        def matrix(self):
            m = table.matrix()
            m[y[0], j] += 0.05
            return m

    bumped = vmcl_loss(x, y, w, Bumped(table.values, table.m, table.n), scale=4.0).loss
    assert bumped > base


# -- gradients -------------------------------------------------------------


@pytest.mark.parametrize("seed,kind", list(enumerate(["softmax", "lmcl", "vmcl", "vmcl_arc"])))
def test_gradients_match_finite_differences(seed, kind):
    rng = np.random.default_rng(seed)
    for _ in range(10):
        x, y, w = random_batch(rng)
        head = ClassifierHead(w)
        table = random_table(rng, len(w))
        lv = compute_loss(kind, x, y, head, table)
        f = lambda: compute_loss(kind, x, y, head, table).loss
        assert rel_error(lv.grad_embeddings, numeric_grad(f, x)) < 1e-4
        assert rel_error(lv.grad_weights, numeric_grad(f, head.weights)) < 1e-4


# -- errors ----------------------------------------------------------------


def test_loss_errors():
    w = np.eye(3)
    with pytest.raises(DegenerateBatch):
        softmax_loss(np.zeros((0, 3)), np.zeros(0, dtype=int), w)
    with pytest.raises(ZeroNormInput):
        lmcl_loss(np.zeros((1, 3)), np.array([0]), w, 0.35)
    with pytest.raises(ZeroNormInput):
        vmcl_loss(np.ones((1, 3)), np.array([0]), np.zeros((3, 3)), MarginTable.constant(0.1, 3))
    with pytest.raises(ShapeMismatch):
        vmcl_loss(np.ones((1, 3)), np.array([0]), w, MarginTable())
    with pytest.raises(ShapeMismatch):
        softmax_loss(np.ones((2, 3)), np.array([0]), w)
