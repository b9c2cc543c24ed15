import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from scdr.discriminate import (DiscConfig, ScoreMatrix, disc_loss, margin_hinge, mine, mine_all, pair_similarity,
                               score_matrix)
from scdr.errors import DegenerateVectorError
from scdr.tensor import Tensor


def table(values, labels):
    """ScoreMatrix with a hand-written table (units unused by mining)."""
    v = np.asarray(values, dtype=np.float64)
    return ScoreMatrix(Tensor(v), np.asarray(labels), None, None)


def test_identical_and_opposite_maps():
    rng = np.random.default_rng(0)
    w = [rng.normal(size=(2, 2, 3)) for _ in range(3)]
    local = [rng.normal(size=(2, 2, 3)), w[0].copy(), -w[2]]
    s = score_matrix([Tensor(x) for x in w], [Tensor(x) for x in local], [0, 1, 2]).values.data
    assert s[0, 1] == pytest.approx(1.0, abs=1e-6)
    assert s[2, 2] == pytest.approx(-1.0, abs=1e-6)


def test_scores_match_two_loop_oracle():
    rng = np.random.default_rng(1)
    w = [rng.normal(size=(2, 3, 4)) for _ in range(4)]
    local = [rng.normal(size=(2, 3, 4)) for _ in range(4)]
    s = score_matrix([Tensor(x) for x in w], [Tensor(x) for x in local], [0, 0, 1, 1])
    np.testing.assert_allclose(s.values.data, oracles.scores(w, local), atol=1e-5)
    assert np.all(np.abs(s.values.data) <= 1 + 1e-12)


def test_zero_feature_names_sample():
    maps = Tensor(np.ones((3, 2, 2, 2)))
    dead = np.ones((3, 2, 2, 2))
    dead[1] = 0
    with pytest.raises(DegenerateVectorError, match="local branch.*sample 1"):
        score_matrix(maps, Tensor(dead), [0, 0, 1])


def test_mine_examples():
    o = mine(table([[1.0, 0.4], [0.4, 1.0]], [0, 1]), 0)
    assert o.hardest_negative == 1 and not o.valid
    o = mine(table([[0.95, 0.2, 0.9], [0, 0, 0], [0, 0, 0]], [0, 0, 1]), 0)
    assert (o.hardest_positive, o.l_pos, o.hardest_negative, o.l_neg) == (1, 0.2, 2, 0.9)
    assert o.valid


def test_mine_ties_go_to_lowest_index():
    o = mine(table([[1.0, 0.5, 0.5, 0.7, 0.7]] * 5, [0, 0, 0, 1, 1]), 0)
    assert o.hardest_positive == 1 and o.hardest_negative == 3


def test_mine_matches_exhaustive_scan():
    rng = np.random.default_rng(2)
    for _ in range(100):
        labels = rng.integers(0, 3, 8)
        vals = np.round(rng.uniform(-1, 1, (8, 8)), 1)  # coarse values force ties
        s = table(vals, labels)
        for a in range(8):
            o = mine(s, a)
            hn, hp = oracles.mine(vals, labels, a)
            assert (o.hardest_negative, o.hardest_positive) == (hn, hp)
            if o.valid:
                assert labels[o.hardest_negative] != labels[a] and labels[o.hardest_positive] == labels[a]
                assert o.l_neg == vals[a, hn] and o.l_pos == vals[a, hp]
            assert o.valid == (hn >= 0 and hp >= 0)


def test_hinge_examples():
    assert margin_hinge(0.1, 0.9, 0.3) == 0
    assert float(margin_hinge(0.9, 0.5, 0.3)) == pytest.approx(0.7)


def unit_table(values, labels):
    """ScoreMatrix whose product sums reproduce ``values`` exactly (identity x table)."""
    v = np.asarray(values, dtype=np.float64)
    return ScoreMatrix(Tensor(v), np.asarray(labels), Tensor(np.eye(len(v))), Tensor(v.T.copy()))


def test_disc_loss_mean_over_valid_anchors():
    # anchors 0..2 are valid with hinge terms 0.7, 0 and 0.2; anchors 3 and 4 lack a positive
    vals = [[1.0, 0.5, 0.8, 0.9, 0.1],
            [0.9, 1.0, 0.95, 0.1, 0.0],
            [0.5, 0.6, 1.0, 0.4, 0.2],
            [0.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0]]
    sm = unit_table(vals, [0, 0, 0, 1, 2])
    outs = mine_all(sm)
    assert [o.valid for o in outs] == [True, True, True, False, False]
    terms = [float(margin_hinge(o.l_neg, o.l_pos, 0.3)) for o in outs if o.valid]
    np.testing.assert_allclose(terms, [0.7, 0.0, 0.2], atol=1e-12)
    assert disc_loss(sm, outs, DiscConfig(0.3)).item() == pytest.approx(0.3, abs=1e-12)


def test_disc_loss_recomputed_terms_three_anchor_example():
    # small batch built from genuine unit vectors
    labels = np.array([0, 0, 1])
    u = np.eye(3)
    local = np.array([[0.0, 0.0, 1.0], [math.cos(1.0), math.sin(1.0), 0.0], [0.9, 0.0, math.sqrt(1 - 0.81)]])
    sm = score_matrix(Tensor(u[:, None, None, :]), Tensor(local[:, None, None, :]), labels)
    outs = mine_all(sm)
    loss = disc_loss(sm, outs, DiscConfig(0.3)).item()
    expect = [max(o.l_neg + 0.3 - o.l_pos, 0) for o in outs if o.valid]
    assert loss == pytest.approx(np.mean(expect), abs=1e-12)


def test_disc_loss_no_valid_anchor_is_zero_and_warns(caplog):
    rng = np.random.default_rng(4)
    sm = score_matrix(Tensor(rng.normal(size=(2, 2, 2, 2))), Tensor(rng.normal(size=(2, 2, 2, 2))), [0, 1])
    with caplog.at_level(logging.WARNING):
        out = disc_loss(sm, mine_all(sm))
    assert out.item() == 0.0
    assert "no valid anchor" in caplog.text


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_product_sums_equal_table(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 7)
    sm = score_matrix(Tensor(rng.normal(size=(7, 2, 2, 3))), Tensor(rng.normal(size=(7, 2, 2, 3))), labels)
    a = np.arange(7)
    b = rng.integers(0, 7, 7)
    np.testing.assert_allclose(pair_similarity(sm, a, b).data, sm.values.data[a, b], atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_scale_invariance_of_scores_and_mining(seed, alpha):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 6)
    w, l = rng.normal(size=(6, 2, 2, 3)), rng.normal(size=(6, 2, 2, 3))
    s1 = score_matrix(Tensor(w), Tensor(l), labels)
    w2 = w.copy()
    w2[seed % 6] *= alpha
    s2 = score_matrix(Tensor(w2), Tensor(l * alpha), labels)
    np.testing.assert_allclose(s1.values.data, s2.values.data, atol=1e-5)
    assert [(o.hardest_negative, o.hardest_positive) for o in mine_all(s1)] == \
        [(o.hardest_negative, o.hardest_positive) for o in mine_all(s2)]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_zero_loss_iff_all_margins_met(seed):
    rng = np.random.default_rng(seed)
    labels = np.array([0, 0, 1, 1, 2, 2])
    protos = rng.normal(size=(3, 12))
    noise = rng.uniform(0, 2)
    w = protos[labels] + noise * rng.normal(size=(6, 12))
    l = protos[labels] + noise * rng.normal(size=(6, 12))
    sm = score_matrix(Tensor(w.reshape(6, 2, 2, 3)), Tensor(l.reshape(6, 2, 2, 3)), labels)
    outs = mine_all(sm)
    loss = disc_loss(sm, outs, DiscConfig(0.3)).item()
    satisfied = all(o.l_pos >= o.l_neg + 0.3 for o in outs if o.valid)
    assert (loss == 0.0) == satisfied
