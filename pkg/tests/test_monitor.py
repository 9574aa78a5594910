import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amlsynth.model import PAYMENT_FORMATS, AccountRef, TransactionLog
from amlsynth.monitor import (
    FEATURE_NAMES, MetricsError, MonitorHyper, TrainingError, average_precision, best_f1_threshold,
    compute_metrics, dumps_model, extract_edge_features, f1_at, feature_matrix, loads_model, roc_auc,
    score_graph, train_monitor,
)

from conftest import random_log

DEG = slice(8, 12)
PAIR = FEATURE_NAMES.index("repeated_pair")


def naive_features(log: TransactionLog, i: int, window: int = 7 * 86400) -> list:
    """Straight loop over Transaction rows; no numpy tricks."""
    rows = [log[k] for k in range(len(log))]
    me = rows[i]
    s, d, t = me.from_account, me.to_account, me.timestamp
    hour = (t % 86400) / 3600
    fmt = [1.0 if f == me.payment_format else 0.0 for f in PAYMENT_FORMATS]
    prior = [r for r in rows[:i] if r.timestamp >= t - window]
    deg = [sum(r.to_account == s for r in prior), sum(r.from_account == s for r in prior),
           sum(r.to_account == d for r in prior), sum(r.from_account == d for r in prior)]

    def mean_log(who):
        vals = [math.log1p(r.amount_paid) for r in prior if who in (r.from_account, r.to_account)]
        return sum(vals) / len(vals) if vals else 0.0

    pair = sum(r.from_account == s and r.to_account == d for r in prior)
    burst = sum(abs(r.timestamp - t) <= 3600 and s in (r.from_account, r.to_account) for r in rows) - 1
    cents = round(me.amount_paid * 100)
    return [math.log1p(me.amount_paid), math.sin(2 * math.pi * hour / 24), math.cos(2 * math.pi * hour / 24),
            *fmt, *deg, mean_log(s), mean_log(d), pair, burst, float(cents % 10000 == 0)]


def tiny_log(pairs, times, amounts=None):
    accts = [AccountRef("1", c) for c in "ABCDEF"]
    idx = {c: k for k, c in enumerate("ABCDEF")}
    n = len(pairs)
    return TransactionLog(accts, timestamp=np.array(times), src=np.array([idx[p[0]] for p in pairs]),
                          dst=np.array([idx[p[1]] for p in pairs]),
                          amount_paid=np.array(amounts or [10.0] * n, dtype=float),
                          payment_format=np.zeros(n, dtype=np.int64), is_laundering=np.zeros(n, dtype=bool),
                          origin=0, n_days=10)


# ---------------------------------------------------------------------------------
# features


def test_first_transaction_has_no_history():
    f = extract_edge_features(tiny_log(["AB"], [100]), 0)
    assert np.all(f[DEG] == 0) and f[PAIR] == 0 and f[FEATURE_NAMES.index("burst")] == 0


def test_repeated_pair_counts_previous():
    log = tiny_log(["AB", "AB"], [100, 200])
    assert extract_edge_features(log, 1)[PAIR] == 1
    assert extract_edge_features(log, 1)[FEATURE_NAMES.index("sender_out_degree")] == 1


def test_window_excludes_old_edges():
    log = tiny_log(["AB", "AB"], [0, 8 * 86400])
    assert extract_edge_features(log, 1)[PAIR] == 0


def test_round_amount_flag():
    log = tiny_log(["AB", "AC", "AD"], [0, 1, 2], [500.0, 500.01, 1.0])
    assert feature_matrix(log)[:, -1].tolist() == [1.0, 0.0, 0.0]


def test_features_match_naive_scan(rng):
    log = random_log(rng, 400, n_accounts=15, n_days=10)
    rows = rng.choice(len(log), 100, replace=False)
    X = feature_matrix(log, rows=rows)
    expected = np.array([naive_features(log, int(i)) for i in rows])
    np.testing.assert_allclose(X, expected, rtol=0, atol=1e-12)


def test_vectorized_matches_single_row(rng):
    log = random_log(rng, 200, n_days=2)
    X = feature_matrix(log)
    assert X.shape == (200, len(FEATURE_NAMES)) and np.isfinite(X).all()
    for i in (0, 17, 199):
        np.testing.assert_allclose(X[i], extract_edge_features(log, i), atol=1e-12)


def test_index_out_of_range():
    with pytest.raises(IndexError):
        extract_edge_features(tiny_log(["AB"], [0]), 1)


# ---------------------------------------------------------------------------------
# metrics


def brute_auc(s, y):
    pos = [a for a, l in zip(s, y) if l]
    neg = [a for a, l in zip(s, y) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_ap(s, y):
    """Enumerate distinct thresholds from the top; each contributes precision x recall gain."""
    total = sum(y)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(s), reverse=True):
        chosen = [l for a, l in zip(s, y) if a >= thr]
        tp = sum(chosen)
        recall = tp / total
        ap += (recall - prev_recall) * tp / len(chosen)
        prev_recall = recall
    return ap


def test_worked_example():
    s, y = [0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]
    assert roc_auc(s, y) == pytest.approx(0.75)
    assert average_precision(s, y) == pytest.approx(0.5 * (1 + 2 / 3))
    # two predicted positives, one correct: precision 1/2, recall 1/2
    assert f1_at(s, y, 0.5) == pytest.approx(0.5)
    # F1 = 2/3 holds once only the top score is flagged
    assert f1_at(s, y, 0.85) == pytest.approx(2 / 3)
    assert f1_at(s, y, 0.25) == pytest.approx(0.8)


def test_perfect_separation():
    r = compute_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], 0.5)
    assert (r.f1, r.auc, r.ap, r.S) == (1.0, 1.0, 1.0, 1.0)


def test_all_tied_scores():
    assert roc_auc([0.3] * 7, [1, 0, 0, 0, 0, 0, 0]) == 0.5


def test_degenerate_labels_rejected():
    for y in ([0, 0, 0], [1, 1, 1]):
        with pytest.raises(MetricsError):
            compute_metrics([0.1, 0.2, 0.3], y, 0.5)
    with pytest.raises(ValueError):
        compute_metrics([0.1, 0.9], [0, 1], 0.5, weights=(0.5, 0.5, 0.5))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=200))
def test_auc_and_ap_match_brute_force(pairs):
    s = [v / 6 for v, _ in pairs]
    y = [l for _, l in pairs]
    if all(y) or not any(y):
        return
    assert roc_auc(s, y) == pytest.approx(brute_auc(s, y), abs=1e-12)
    assert average_precision(s, y) == pytest.approx(brute_ap(s, y), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-320, 320), st.booleans()), min_size=2, max_size=80),
       st.sampled_from([0.1, 0.5, 1 / 3]))
def test_metric_bounds_and_monotone_invariance(pairs, w):
    # a coarse grid keeps exp strictly increasing in floating point
    s = np.array([v / 64 for v, _ in pairs])
    y = [l for _, l in pairs]
    if all(y) or not any(y):
        return
    r = compute_metrics(s, y, 0.0, (w, w, 1 - 2 * w))
    for v in (r.f1, r.auc, r.ap, r.S):
        assert 0 <= v <= 1
    assert min(r.f1, r.auc, r.ap) - 1e-12 <= r.S <= max(r.f1, r.auc, r.ap) + 1e-12
    assert roc_auc(np.exp(s), y) == pytest.approx(r.auc, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.booleans()), min_size=2, max_size=40))
def test_best_f1_threshold_is_optimal(pairs):
    s = [float(v) for v, _ in pairs]
    y = [l for _, l in pairs]
    if not any(y):
        return
    thr, best = best_f1_threshold(s, y)
    assert f1_at(s, y, thr) == pytest.approx(best)
    exhaustive = max(f1_at(s, y, c) for c in set(s))
    assert best == pytest.approx(exhaustive)


# ---------------------------------------------------------------------------------
# training and scoring


def test_separable_toy_trains_to_accuracy_one():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 3))
    y = X[:, 0] + 0.5 * X[:, 1] > 0.2
    X[y, 0] += 1.0   # margin
    model = train_monitor(X, y, MonitorHyper(iterations=2000, l2=0.0, val_fraction=0.0))
    pred = model.score(X) >= model.threshold
    assert np.array_equal(pred, y)


def test_null_labels_give_chance_auc():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(20_000, 5))
    y = rng.random(20_000) < 0.3
    model = train_monitor(X, y)
    assert abs(model.metrics["val_auc"] - 0.5) < 0.05


def test_training_deterministic_and_single_class_error():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(200, 4))
    y = X[:, 0] > 0.5
    a, b = train_monitor(X, y), train_monitor(X, y)
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias and a.threshold == b.threshold
    with pytest.raises(TrainingError):
        train_monitor(X, np.zeros(200, dtype=bool))


def test_model_text_round_trip():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(100, 4))
    model = train_monitor(X, X[:, 1] > 0)
    back = loads_model(dumps_model(model))
    for name in ("weights", "mean", "std"):
        np.testing.assert_array_equal(getattr(back, name), getattr(model, name))
    assert (back.bias, back.threshold) == (model.bias, model.threshold)
    np.testing.assert_array_equal(back.score(X), model.score(X))
    with pytest.raises(ValueError):
        loads_model(dumps_model(model).replace("dim 4", "dim 5"))


def _labeled_log(rng):
    log = random_log(rng, 300, p_laundering=0.2)
    X = feature_matrix(log)
    return log, train_monitor(X, log.is_laundering)


def test_score_graph_pure_and_compositional(rng):
    log, model = _labeled_log(rng)
    before = dumps_model(model)
    r1, r2 = score_graph(model, log), score_graph(model, log)
    assert r1 == r2 and dumps_model(model) == before
    manual = compute_metrics(model.score(feature_matrix(log)), log.is_laundering, model.threshold)
    assert r1 == manual


def test_score_graph_benign_subset_errors(rng):
    log, model = _labeled_log(rng)
    benign = np.flatnonzero(~log.is_laundering)
    with pytest.raises(MetricsError):
        score_graph(model, log, benign)
    with pytest.raises(MetricsError):
        score_graph(model, log, [])


def test_subset_scores_equal_full_rows(rng):
    log, model = _labeled_log(rng)
    rows = np.sort(rng.choice(len(log), 60, replace=False))
    full = model.score(feature_matrix(log))
    np.testing.assert_allclose(model.score(feature_matrix(log, rows=rows)), full[rows], atol=1e-12)


def test_auc_pair_count_example():
    # every ordering of three distinct scores with one positive
    for perm in itertools.permutations([0.1, 0.2, 0.3]):
        y = [1, 0, 0]
        assert roc_auc(list(perm), y) == brute_auc(list(perm), y)
