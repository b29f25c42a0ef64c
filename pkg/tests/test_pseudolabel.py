import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgl import diagnostics
from pgl.pseudolabel import (PseudoLabelState, balanced_select, bank_capacity, class_weights,
                             finalize_predictions, global_rank_select, quotas, rank_ascending,
                             snapshot_lines)


def run_global(conf, pred, alpha, beta, C, steps, ids=None, freeze=False):
    st_ = PseudoLabelState(alpha, beta, C, freeze=freeze)
    for _ in range(steps):
        global_rank_select(conf, pred, st_, ids)
    return st_


def test_first_step_counts():
    rng = np.random.default_rng(0)
    conf = rng.random(1000)
    st_ = run_global(conf, rng.integers(0, 5, 1000), 0.05, 0.6, 5, 1)
    assert len(st_.unknown) == 30 and len(st_.known) == 20
    assert st_.m == 1 and st_.M == 20


def test_final_step_covers_everything():
    rng = np.random.default_rng(1)
    conf = rng.random(1000)
    st_ = run_global(conf, rng.integers(0, 5, 1000), 0.05, 0.6, 5, 20)
    assert len(st_.unknown) == 600 and len(st_.known) == 400
    assert not (set(st_.known) & st_.unknown)
    with pytest.raises(ValueError):
        global_rank_select(conf, np.zeros(1000, int), st_)


def test_five_sample_ranking():
    conf = np.array([0.9, 0.1, 0.8, 0.3, 0.2])
    pred = np.array([2, 0, 1, 0, 0])
    st_ = run_global(conf, pred, 1.0, 0.6, 3, 1)
    assert st_.unknown == {1, 3, 4}
    assert st_.known == {0: 2, 2: 1}


def test_ties_broken_by_id():
    conf = np.full(4, 0.5)
    order = rank_ascending(conf, ["d", "b", "a", "c"])
    assert order.tolist() == [2, 1, 3, 0]


def test_freeze_keeps_earlier_assignments():
    rng = np.random.default_rng(2)
    n = 200
    st_ = PseudoLabelState(0.1, 0.4, 3, freeze=True)
    global_rank_select(rng.random(n), rng.integers(0, 3, n), st_)
    first_k, first_u = dict(st_.known), set(st_.unknown)
    global_rank_select(rng.random(n), rng.integers(0, 3, n), st_)
    assert first_u <= st_.unknown
    assert all(st_.known[i] == c for i, c in first_k.items())
    assert (len(st_.unknown), len(st_.known)) == quotas(st_, 2, n)


@settings(max_examples=60, deadline=None)
@given(beta=st.floats(0.05, 0.95), alpha=st.sampled_from([1.0, 0.5, 0.2, 0.1, 0.05]),
       n_t=st.integers(5, 400), seed=st.integers(0, 1000))
def test_quota_invariants(beta, alpha, n_t, seed):
    rng = np.random.default_rng(seed)
    st_ = PseudoLabelState(alpha, beta, 4)
    prev = -1
    for m in range(1, st_.M + 1):
        global_rank_select(rng.random(n_t), rng.integers(0, 4, n_t), st_)
        f = 1.0 if m == st_.M else alpha * m
        assert abs(len(st_.unknown) - beta * f * n_t) <= 1
        assert abs(len(st_.known) - (1 - beta) * f * n_t) <= 1 + 1e-9
        assert not (set(st_.known) & st_.unknown)
        assert st_.labeled_count() >= prev
        prev = st_.labeled_count()
    assert st_.labeled_count() == n_t


# ---------------------------------------------------------------- balanced banks

def test_bank_capacity_arithmetic():
    assert bank_capacity(0.1, 2, 300, 6) == 10
    assert bank_capacity(0.1, 2, 300, 6, beta=0.4) == 6
    with pytest.raises(ValueError):
        bank_capacity(0.1, 1, 100, 0)


def test_two_class_bank_example():
    conf = np.array([0.9, 0.8, 0.3, 0.7])
    pred = np.array([0, 0, 0, 1])
    st_ = PseudoLabelState(0.5, 0.25, 2)
    balanced_select(conf, pred, st_, capacity=2)
    assert st_.known == {0: 0, 1: 0, 3: 1}
    np.testing.assert_allclose(st_.gamma, [0.8, 0.7])
    assert st_.shortfall.tolist() == [0, 1]
    assert diagnostics.counters["bank_shortfall"] == 1
    # unknown quota round(0.25 * 0.5 * 4) = 0 here
    assert st_.unknown == set()


def test_equal_confidences_give_equal_gamma():
    n = 60
    st_ = PseudoLabelState(0.2, 0.4, 3)
    balanced_select(np.full(n, 0.6), np.arange(n) % 3, st_)
    assert np.all(st_.gamma == 0.6)
    np.testing.assert_allclose(st_.weights, 1 / 3)


def test_balanced_counts_equal_global_skewed():
    rng = np.random.default_rng(5)
    n, C = 600, 3
    pred = rng.choice(C, size=n, p=[0.6, 0.3, 0.1])
    # class 0 is predicted confidently, class 2 hesitantly
    conf = np.clip(np.array([0.9, 0.6, 0.3])[pred] + 0.05 * rng.normal(size=n), 0, 1)
    g = run_global(conf, pred, 0.1, 0.4, C, 2)
    b = PseudoLabelState(0.1, 0.4, C)
    for _ in range(2):
        balanced_select(conf, pred, b)
    assert np.var(g.per_class_counts()) > 0
    assert np.var(b.per_class_counts()) == 0
    assert not (set(b.known) & b.unknown)
    assert len(b.unknown) == round(0.4 * 0.2 * n)


def test_balanced_unknown_excludes_banks():
    conf = np.array([0.1, 0.2, 0.9, 0.95])
    pred = np.array([0, 1, 0, 1])
    st_ = PseudoLabelState(1.0, 0.5, 2)
    balanced_select(conf, pred, st_, capacity=2)   # banks take everything
    assert st_.unknown == set()


def test_class_weights_examples():
    np.testing.assert_allclose(class_weights([0.3, 0.3, 0.3, 0.3]), 0.25)
    w = class_weights([0.9, 0.5])
    e1, e2 = math.exp(0.1), math.exp(0.5)
    np.testing.assert_allclose(w, [e1 / (e1 + e2), e2 / (e1 + e2)], rtol=1e-12)
    np.testing.assert_allclose(w, [0.4013, 0.5987], atol=5e-5)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=8))
def test_class_weights_monotone(gamma):
    w = class_weights(gamma)
    assert abs(w.sum() - 1) < 1e-9
    g = np.array(gamma)
    for a in range(len(g)):
        for b in range(len(g)):
            if g[a] < g[b] - 1e-9:   # below that, exp cannot resolve the difference
                assert w[a] > w[b]
            elif g[a] <= g[b]:
                assert w[a] >= w[b]


# ---------------------------------------------------------------- finalize

def test_finalize_at_final_step_uses_sets():
    rng = np.random.default_rng(3)
    conf, pred = rng.random(50), rng.integers(0, 3, 50)
    st_ = run_global(conf, pred, 0.5, 0.4, 3, 2)
    out = finalize_predictions(st_, conf, pred)
    for i in range(50):
        assert out[i] == (3 if i in st_.unknown else st_.known[i])


def test_finalize_step_zero_is_rank_split():
    conf = np.array([0.5, 0.1, 0.9, 0.3, 0.7])
    pred = np.array([1, 1, 0, 2, 0])
    out = finalize_predictions(PseudoLabelState(0.5, 0.4, 3), conf, pred)
    assert out.tolist() == [1, 3, 0, 3, 0]


def test_finalize_mixed_six_samples():
    conf = np.array([0.95, 0.15, 0.55, 0.35, 0.75, 0.25])
    pred = np.array([0, 1, 1, 0, 2, 2])
    st_ = PseudoLabelState(1 / 3, 0.5, 3, m=1, known={0: 0}, unknown={1})
    # residue in ascending order: 5 (.25), 3 (.35), 2 (.55), 4 (.75); lowest half -> unknown
    assert finalize_predictions(st_, conf, pred).tolist() == [0, 3, 1, 3, 2, 3]


def test_snapshot_lines():
    st_ = PseudoLabelState(0.5, 0.5, 2, known={1: 0}, unknown={0})
    lines = snapshot_lines(st_, np.array([0.25, 0.75, 0.5]), ["b", "a", "c"])
    assert lines == ["a\t0\t0.75", "b\tUNK\t0.25"]


def test_state_validation():
    with pytest.raises(ValueError):
        PseudoLabelState(0.0, 0.5, 3)
    with pytest.raises(ValueError):
        PseudoLabelState(0.1, 1.0, 3)
    with pytest.raises(ValueError, match="final step"):
        global_rank_select(np.ones(3), np.zeros(3, int), PseudoLabelState(0.1, 0.5, 2, m=10))
    with pytest.raises(ValueError, match="final step"):
        balanced_select(np.ones(3), np.zeros(3, int), PseudoLabelState(0.5, 0.5, 2, m=2))
