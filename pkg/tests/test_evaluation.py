import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_auc, brute_ndcg, brute_rank, brute_recall, brute_uauc
from solidrec.data import Samples
from solidrec.evaluation import (
    EvalReport,
    auc,
    dominant_semantic,
    evaluate,
    group_ranks,
    make_perturbations,
    ndcg_at_k,
    positive_rank,
    recall_at_k,
    stability_variance,
    uauc,
    variance_summary,
)


def test_auc_closed_forms():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.1, 0.9], [1, 0]) == 0.0
    assert auc([0.5, 0.5, 0.5], [1, 0, 0]) == 0.5


def test_auc_needs_both_classes():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 2])


def test_rank_metrics_closed_forms():
    scores = np.arange(100, dtype=float)[::-1]  # positive at index 0 has the top score
    labels = np.zeros(100, dtype=int)
    labels[0] = 1
    assert positive_rank(scores, labels) == 1
    assert ndcg_at_k(scores, labels, 10) == 1.0
    labels[:] = 0
    labels[11] = 1  # rank 12
    assert ndcg_at_k(scores, labels, 10) == 0.0
    assert recall_at_k(scores, labels, 10) == 0.0
    assert ndcg_at_k(scores, labels, 20) == pytest.approx(1 / math.log2(13))
    assert recall_at_k(scores, labels, 20) == 1.0


def test_ties_rank_the_positive_last():
    assert positive_rank([0.3, 0.3, 0.3], [1, 0, 0]) == 3


scores_st = st.lists(st.integers(0, 6).map(lambda x: x / 6), min_size=2, max_size=40)


@settings(max_examples=200, deadline=None)
@given(scores_st, st.data())
def test_auc_matches_pairwise_oracle(scores, data):
    n = len(scores)
    n_pos = data.draw(st.integers(1, n - 1))
    labels = [1] * n_pos + [0] * (n - n_pos)
    labels = data.draw(st.permutations(labels))
    assert abs(auc(scores, labels) - brute_auc(scores, labels)) <= 1e-10


@settings(max_examples=200, deadline=None)
@given(scores_st, st.data(), st.sampled_from([1, 3, 10, 20]))
def test_rank_metrics_match_sorting_oracle(scores, data, k):
    pos = data.draw(st.integers(0, len(scores) - 1))
    labels = [int(i == pos) for i in range(len(scores))]
    assert positive_rank(scores, labels) == brute_rank(scores, labels)
    assert ndcg_at_k(scores, labels, k) == brute_ndcg(scores, labels, k)
    assert recall_at_k(scores, labels, k) == brute_recall(scores, labels, k)


def _grouped(rng, n_users, groups_per_user, n_neg, ties=False):
    users, labels, groups, targets = [], [], [], []
    g = 0
    for u in range(n_users):
        for _ in range(groups_per_user):
            for j in range(n_neg + 1):
                users.append(u)
                labels.append(int(j == 0))
                groups.append(g)
                targets.append(j)
            g += 1
    n = len(users)
    scores = rng.integers(0, 4, n) / 4 if ties else rng.random(n)
    z = np.zeros((n, 2), dtype=np.int64)
    s = Samples(np.array(users), np.array(targets), np.array(labels), z, z.copy(), np.array(groups), np.zeros(n, dtype=np.int64))
    return scores, s


@pytest.mark.parametrize("ties", [False, True])
def test_evaluate_matches_oracles(ties):
    rng = np.random.default_rng(11)
    scores, s = _grouped(rng, 6, 3, 9, ties)
    rep = evaluate(scores, s, ks=(3, 5))
    assert rep.auc == pytest.approx(brute_auc(scores.tolist(), s.labels.tolist()), abs=1e-10)
    assert rep.uauc == pytest.approx(brute_uauc(scores.tolist(), s.labels.tolist(), s.users.tolist()), abs=1e-10)
    for k in (3, 5):
        per_group = []
        for g in np.unique(s.groups):
            m = s.groups == g
            per_group.append((s.users[m][0], brute_ndcg(scores[m].tolist(), s.labels[m].tolist(), k)))
        by_user = {}
        for u, v in per_group:
            by_user.setdefault(u, []).append(v)
        assert rep.ndcg[k] == pytest.approx(np.mean([np.mean(v) for v in by_user.values()]), abs=1e-12)
    # per-user entries reproduce the aggregates
    assert rep.uauc == pytest.approx(np.mean([m["auc"] for m in rep.per_user.values()]))
    assert rep.recall[5] == pytest.approx(np.mean([m["recall@5"] for m in rep.per_user.values()]))


def test_group_ranks_rejects_double_positive():
    with pytest.raises(ValueError):
        group_ranks([0.1, 0.2], [1, 1], [0, 0])


def test_report_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    scores, s = _grouped(rng, 3, 2, 4)
    rep = evaluate(scores, s, ks=(10,))
    rep.write(tmp_path, "r")
    again = EvalReport.from_dict(__import__("json").loads((tmp_path / "r.json").read_text()))
    assert again.to_dict() == rep.to_dict()
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert lines[0] == "metric\tK\tvalue" and len(lines) == 5


def test_uauc_skips_single_class_users():
    assert uauc([0.9, 0.1, 0.5], [1, 0, 1], [0, 0, 1]) == 1.0


def test_dominant_semantic_lowest_on_ties():
    assert dominant_semantic(np.array([0, 3, 2, 3, 2])) == 2
    assert dominant_semantic(np.array([0, 0])) == 0


def test_perturbations_append_one_behavior():
    hist = [np.array([0, 1, 2, 3, 4, 5])]
    assignment = np.array([1, 1, 1, 2, 2, 2, 1, 1])
    z = np.array([[1, 2, 3], [1, 2, 3]])
    s = Samples(np.array([0, 0]), np.array([3, 7]), np.array([1, 0]), z, np.array([[1, 1, 1]] * 2), np.array([0, 0]), np.array([3, 3]))
    out, skipped = make_perturbations(s, hist, assignment, n_perturb=3, seed=0)
    assert skipped == []
    assert len(out) == 3
    # held-out items 4 and 5 come first, then a fallback from semantic 1 outside history and candidates
    assert [o.seq_v[0, -1] - 1 for o in out][:2] == [4, 5]
    assert out[2].seq_v[0, -1] - 1 == 6
    for o in out:
        assert (o.seq_v[:, :-1] == z[:, 1:]).all()
        assert (o.seq_c[:, -1] == assignment[o.seq_v[:, -1] - 1]).all()


def test_stability_variance_zero_for_constant_scores():
    rng = np.random.default_rng(0)
    _, s = _grouped(rng, 4, 1, 5)
    per, summ = stability_variance(lambda x: x.targets.astype(float), [s, s, s])
    assert all(v == 0 for v in per.values())
    assert summ == {"median": 0.0, "mean": 0.0, "min": 0.0, "max": 0.0}
    with pytest.raises(ValueError):
        variance_summary({})
