"""Tests for ranking metrics, aggregation, cohorts, and cold-start plumbing."""

import math

import numpy as np
import pytest

from helpers import interaction_set_from_pairs

from waveletcf.datasets import synthetic_two_block
from waveletcf.errors import DataError
from waveletcf.evaluate import (
    cold_start_suite,
    evaluate,
    expected_uniform_recall,
    machine_lines,
    ndcg_at_k,
    popularity_scores,
    recall_at_k,
    render_cold_start,
    render_report,
    report_csv,
    topk,
)
from waveletcf.ingest import SplitSpec, split


# ---------------------------------------------------------------------- topk


def test_topk_tie_break_ascending():
    ranked = topk(np.zeros(10), [], 4)
    assert ranked.tolist() == [0, 1, 2, 3]


def test_topk_dominant_first():
    scores = np.array([0.1, 0.9, 0.2, 0.3])
    assert topk(scores, [], 2).tolist() == [1, 3]


def test_topk_masks_train_positives():
    scores = np.array([5.0, 4.0, 3.0, 2.0])
    ranked = topk(scores, [0, 2], 3)
    assert 0 not in ranked and 2 not in ranked
    assert ranked.tolist() == [1, 3]


def test_topk_pool_smaller_than_k():
    ranked = topk(np.arange(4.0), [1, 2], 10)
    assert len(ranked) == 2


# ------------------------------------------------------------------- metrics


def test_recall_values():
    assert recall_at_k(np.array([1, 2, 3]), {1, 2, 3}) == 1.0
    assert recall_at_k(np.array([1, 2, 3]), {7, 8}) == 0.0
    assert recall_at_k(np.array([1, 2, 3]), {1, 7, 8, 9}) == 0.25
    with pytest.raises(DataError):
        recall_at_k(np.array([1]), set())


def test_ndcg_perfect_and_empty():
    assert ndcg_at_k(np.array([4, 5]), {4, 5}, k=2) == pytest.approx(1.0)
    assert ndcg_at_k(np.array([1, 2, 3]), {9}, k=3) == 0.0


def test_ndcg_worked_example():
    # hits at ranks 1 and 3 with two held-out items, k=3
    value = ndcg_at_k(np.array([10, 11, 12]), {10, 12}, k=3)
    exact = (1.0 + 1.0 / math.log2(4)) / (1.0 + 1.0 / math.log2(3))
    assert value == pytest.approx(exact, abs=1e-12)
    assert value == pytest.approx(0.9197, abs=1e-4)


def test_ndcg_permutation_below_last_hit():
    base = ndcg_at_k(np.array([3, 7, 1, 2, 9]), {3, 1}, k=5)
    swap = ndcg_at_k(np.array([3, 7, 1, 9, 2]), {3, 1}, k=5)
    assert base == pytest.approx(swap, abs=1e-15)


def test_metrics_nondecreasing_in_k():
    rng = np.random.default_rng(5)
    scores = rng.normal(size=30)
    test_set = set(rng.choice(30, 6, replace=False).tolist())
    prev_r, prev_n = 0.0, 0.0
    for k in (1, 3, 5, 10, 20, 30):
        ranked = topk(scores, [], k)
        r = recall_at_k(ranked, test_set)
        n = ndcg_at_k(ranked, test_set, k)
        assert r >= prev_r - 1e-15
        assert n >= prev_n - 1e-15
        prev_r, prev_n = r, n


# ------------------------------------------------------------------ evaluate


def split_fixture(seed=0, users=200, items=50):
    data = synthetic_two_block(
        num_users=users, num_items=items, per_user=items // 2 + 2, noise=0.1, seed=seed
    )
    return split(data, SplitSpec(train_fraction=0.8, seed=seed))


def test_random_scores_match_uniform_expectation():
    train, test = split_fixture()
    rng = np.random.default_rng(9)
    rows = rng.normal(size=(train.num_users, train.num_items))
    report = evaluate(lambda u: rows[u], train, test, k_values=(20,))
    expected = expected_uniform_recall(train, test, 20)
    per_user = report.per_user_recall[20]
    se = per_user.std(ddof=1) / math.sqrt(len(per_user))
    assert abs(report.recall[20] - expected) <= 3 * se + 1e-9


def test_cohort_counts_partition_eligible_users():
    train, test = split_fixture(seed=1)
    rows = np.random.default_rng(3).normal(size=(train.num_users, train.num_items))
    report = evaluate(
        lambda u: rows[u], train, test, k_values=(10, 20), cohort_boundaries=(10, 20, 30)
    )
    for k in (10, 20):
        assert sum(c for _, _, c in report.cohorts[k].values()) == report.num_eligible
    assert 0.0 <= report.recall[20] <= 1.0
    assert 0.0 <= report.ndcg[20] <= 1.0


def test_full_catalog_cutoff_gives_perfect_recall():
    train, test = split_fixture(seed=2, users=40, items=30)
    rows = np.random.default_rng(4).normal(size=(40, 30))
    report = evaluate(lambda u: rows[u], train, test, k_values=(30,))
    assert (report.per_user_recall[30] == 1.0).all()


def test_users_without_test_items_excluded():
    train = interaction_set_from_pairs(3, 4, [(0, 0), (1, 1), (2, 2), (2, 3)])
    test = interaction_set_from_pairs(3, 4, [(0, 1), (1, 2)])
    rows = np.eye(3, 4)
    report = evaluate(lambda u: rows[u], train, test, k_values=(2,))
    assert report.num_eligible == 2
    assert set(report.eligible_users.tolist()) == {0, 1}


def test_no_eligible_users_errors():
    train = interaction_set_from_pairs(2, 2, [(0, 0), (1, 1)])
    test = interaction_set_from_pairs(2, 2, [])
    with pytest.raises(DataError):
        evaluate(lambda u: np.zeros(2), train, test, k_values=(1,))


def test_evaluation_is_pure():
    train, test = split_fixture(seed=5, users=30, items=20)
    rows = np.random.default_rng(6).normal(size=(30, 20))
    a = evaluate(lambda u: rows[u], train, test, k_values=(5,))
    b = evaluate(lambda u: rows[u], train, test, k_values=(5,))
    assert a.recall == b.recall and a.ndcg == b.ndcg
    assert np.array_equal(a.per_user_ndcg[5], b.per_user_ndcg[5])


# ----------------------------------------------------------------- rendering


def report_fixture():
    train, test = split_fixture(seed=7, users=30, items=20)
    rows = np.random.default_rng(8).normal(size=(30, 20))
    return evaluate(
        lambda u: rows[u], train, test, k_values=(5, 10), notes=("per-user split",)
    )


def test_machine_lines_format():
    report = report_fixture()
    lines = machine_lines(report)
    assert f"recall 5 all {report.recall[5]:.10f} {report.num_eligible}" in lines
    for line in lines:
        metric, k, cohort, value, count = line.split()
        assert metric in ("recall", "ndcg")
        int(k), float(value), int(count)


def test_render_and_csv():
    report = report_fixture()
    text = render_report(report)
    assert "# per-user split" in text
    assert "eligible test users: " in text
    csv = report_csv(report)
    assert csv.splitlines()[0] == "k,recall,ndcg"
    assert len(csv.splitlines()) == 3


# ---------------------------------------------------------------- cold start


def test_cold_start_suite_resplits_and_collects():
    data = synthetic_two_block(num_users=30, num_items=20, per_user=12, noise=0.1, seed=9)
    seen = []

    def trainer(train, test, cap):
        degs = train.user_degrees()
        seen.append((cap, int(degs.max())))
        return 0.1 * cap, 0.05 * cap

    rows = cold_start_suite(data, [3, 5], SplitSpec(seed=11), trainer)
    assert rows == [(3, pytest.approx(0.3), pytest.approx(0.15)),
                    (5, pytest.approx(0.5), pytest.approx(0.25))]
    # capped splits cannot exceed cap by more than coverage repairs
    assert seen[0][1] <= 4


def test_cold_start_vacuous_cap_matches_unconstrained():
    data = synthetic_two_block(num_users=30, num_items=20, per_user=12, noise=0.1, seed=9)
    spec = SplitSpec(seed=13)
    plain_train, plain_test = split(data, spec)

    captured = {}

    def trainer(train, test, cap):
        captured[cap] = (train, test)
        return 0.0, 0.0

    cold_start_suite(data, [1000], spec, trainer)
    assert captured[1000][0] == plain_train
    assert captured[1000][1] == plain_test


def test_cold_start_single_cap_row_and_render():
    data = synthetic_two_block(num_users=20, num_items=16, per_user=9, noise=0.1, seed=15)
    rows = cold_start_suite(
        data, [3], SplitSpec(seed=17), lambda tr, te, cap: (0.5, 0.25)
    )
    assert len(rows) == 1
    text = render_cold_start(rows)
    assert "cap" in text and "0.5" in text
    with pytest.raises(DataError):
        cold_start_suite(data, [], SplitSpec(seed=1), lambda *a: (0, 0))
