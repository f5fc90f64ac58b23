import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from msfusion.errors import DataError
from msfusion.eval import MetricsRecord, auc, gmean, mean_std, wilcoxon_signed_rank


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_wilcoxon_p(d):
    """Two-sided p by listing all 2^n sign flips of the midranks."""
    d = [x for x in d if x != 0]
    n = len(d)
    ranks = stats.rankdata(np.abs(d))
    observed = sum(r for r, x in zip(ranks, d) if x > 0)
    total = ranks.sum()
    hits_hi = hits_lo = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        hits_hi += w >= observed - 1e-9
        hits_lo += w <= observed + 1e-9
    return min(1.0, 2 * min(hits_hi, hits_lo) / 2**n), total


# ---------------------------------------------------------------------------
# auc
# ---------------------------------------------------------------------------


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_single_class():
    with pytest.raises(DataError):
        auc([0.1, 0.2], [1, 1])


labelled_scores = st.integers(2, 50).flatmap(
    lambda n: st.tuples(
        st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]) | st.floats(-1e3, 1e3, allow_nan=False), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda ys: 0 < sum(ys) < len(ys)),
    )
)


@settings(max_examples=300, deadline=None)
@given(labelled_scores)
def test_auc_equals_pair_counting(case):
    scores, labels = case
    assert auc(scores, labels) == brute_auc(scores, labels)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-1000, 1000), st.integers(0, 1)), min_size=2, max_size=50))
def test_auc_monotone_invariance(pairs):
    s = np.array([p for p, _ in pairs], dtype=np.float64)
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    # x^3 + 7x is strictly increasing and exact in float64 on this range
    assert auc(s**3 + 7 * s, labels) == auc(s, labels)
    assert auc(np.exp(s / 1000), labels) == auc(s, labels)


# ---------------------------------------------------------------------------
# gmean / records
# ---------------------------------------------------------------------------


def test_gmean_examples():
    y = [1] * 5 + [0] * 4
    assert gmean(y, y) == 1.0
    assert gmean([1] * 9, y) == 0.0
    # sensitivity 4/5, specificity 2/4
    preds = [1, 1, 1, 1, 0] + [0, 0, 1, 1]
    assert gmean(preds, y) == pytest.approx(0.6325, abs=5e-5)
    assert gmean(preds, y) == pytest.approx(math.sqrt(0.4), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=40))
def test_gmean_extremes(pairs):
    preds = [p for p, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    g = gmean(preds, labels)
    pos_all_wrong = all(p == 0 for p, y in pairs if y == 1)
    neg_all_wrong = all(p == 1 for p, y in pairs if y == 0)
    if pos_all_wrong or neg_all_wrong:
        assert g == 0.0
    assert (g == 1.0) == (preds == labels)


def test_metrics_record_invariants():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, 40)
    labels[:2] = [0, 1]
    probs = rng.random(40)
    r = MetricsRecord.from_predictions(probs, labels)
    assert r.tp + r.fp + r.tn + r.fn == r.n == 40
    assert r.accuracy == (r.tp + r.tn) / r.n
    assert r.gmean == pytest.approx(math.sqrt(r.tp / (r.tp + r.fn) * r.tn / (r.tn + r.fp)), rel=1e-12)


# ---------------------------------------------------------------------------
# wilcoxon
# ---------------------------------------------------------------------------


def test_wilcoxon_unanimous_five():
    r = wilcoxon_signed_rank([0.9, 0.8, 0.85, 0.7, 0.95], [0.6, 0.5, 0.55, 0.45, 0.5])
    assert r.p_value == 0.0625
    assert r.statistic == 0


def test_wilcoxon_one_smallest_negative():
    d = np.array([-0.01, 0.2, 0.3, 0.4, 0.5])
    r = wilcoxon_signed_rank(d, np.zeros(5))
    assert r.p_value == 0.125


def test_wilcoxon_identical_degenerate():
    r = wilcoxon_signed_rank([0.5, 0.6, 0.7], [0.5, 0.6, 0.7])
    assert r.degenerate and r.p_value == 1.0


def test_wilcoxon_three_folds_floor():
    assert wilcoxon_signed_rank([0.9, 0.9, 0.9], [0.5, 0.6, 0.55]).p_value == 0.25


def test_wilcoxon_length_mismatch():
    with pytest.raises(DataError):
        wilcoxon_signed_rank([1, 2], [1, 2, 3])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=10))
def test_wilcoxon_matches_enumeration(d):
    r = wilcoxon_signed_rank(np.array(d, dtype=float), np.zeros(len(d)))
    if all(x == 0 for x in d):
        assert r.degenerate
        return
    want, _ = brute_wilcoxon_p(d)
    assert r.p_value == pytest.approx(want, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("n", [6, 12, 20])
def test_wilcoxon_matches_scipy_exact(n):
    rng = np.random.default_rng(n)
    a, b = rng.random(n), rng.random(n)
    ours = wilcoxon_signed_rank(a, b)
    ref = stats.wilcoxon(a, b, method="exact")
    assert ours.statistic == ref.statistic
    assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_wilcoxon_normal_branch():
    rng = np.random.default_rng(3)
    a, b = rng.random(40), rng.random(40) + 0.1
    ours = wilcoxon_signed_rank(a, b)
    ref = stats.wilcoxon(a, b, method="approx", correction=False)
    assert ours.method == "normal"
    assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-9)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def test_mean_std_hand_example():
    m, s = mean_std([0.7, 0.72, 0.74, 0.70, 0.74])
    assert m == pytest.approx(0.72, abs=1e-12)
    assert s == pytest.approx(0.02, abs=1e-12)


def test_mean_std_constant():
    assert mean_std([0.8] * 5) == (pytest.approx(0.8), 0.0)
