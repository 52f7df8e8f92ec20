import json

import numpy as np
import pytest

from amortcd import oracles
from amortcd.graphs import Graph, is_acyclic
from amortcd.metrics import (
    aggregate, auprc_score, auroc_score, break_cycles, cyclic_fraction, evaluate, pr_roc,
    precision_recall_f1, report_lines, shd, sid, sid_with_flag, threshold,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def random_dag(r, d, p=0.4):
    a = np.triu(r.random((d, d)) < p, 1).astype(int)
    perm = r.permutation(d)
    return a[np.ix_(perm, perm)]


# ----------------------------------------------------------------------------
# thresholding


def test_threshold_prior_beliefs_is_empty():
    theta = np.full((4, 4), 1 / (1 + np.exp(3.0)))
    assert threshold(theta).n_edges == 0


def test_threshold_is_strict():
    theta = np.array([[0.0, 0.5], [0.5000001, 0.0]])
    np.testing.assert_array_equal(threshold(theta).adjacency, [[0, 0], [1, 0]])


def test_threshold_matches_elementwise_scan():
    r = rng(1)
    theta = r.random((6, 6))
    tau = 0.37
    g = threshold(theta, tau).adjacency
    for i in range(6):
        for j in range(6):
            assert g[i, j] == (1 if i != j and theta[i, j] > tau else 0)
    with pytest.raises(ValueError):
        threshold(theta, 1.0)


# ----------------------------------------------------------------------------
# SHD


def test_shd_examples():
    g = np.array([[0, 1], [0, 0]])
    assert shd(g, g) == 0
    assert shd(g, g.T) == 1


def test_shd_matches_pair_scan_and_is_symmetric():
    r = rng(2)
    for _ in range(200):
        a = (r.random((5, 5)) < 0.3).astype(int)
        b = (r.random((5, 5)) < 0.3).astype(int)
        np.fill_diagonal(a, 0)
        np.fill_diagonal(b, 0)
        assert shd(a, b) == oracles.shd_pairs(a, b) == shd(b, a)


# ----------------------------------------------------------------------------
# SID


def test_sid_identity_is_zero():
    r = rng(3)
    for _ in range(20):
        a = random_dag(r, 6)
        assert sid(a, a) == 0


def test_sid_empty_truth_complete_prediction_is_zero():
    for d in (2, 4, 7):
        assert sid(np.zeros((d, d)), np.triu(np.ones((d, d)), 1)) == 0


def test_sid_chain_versus_empty():
    chain = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]])
    # pairs (1,0), (2,0), (2,1) adjust with the empty set across an open path
    assert oracles.sid_bruteforce(chain, np.zeros((3, 3))) == 3
    assert sid(chain, np.zeros((3, 3))) == 3


def test_sid_matches_oracle_on_small_dags():
    dags = oracles.all_dags(3)
    assert len(dags) == 25 and len(oracles.all_dags(2)) == 3
    for a in dags:
        for b in dags:
            assert sid(a, b) == oracles.sid_bruteforce(a, b)


def test_sid_matches_oracle_on_random_d6():
    r = rng(4)
    for _ in range(40):
        a, b = random_dag(r, 6, r.uniform(0.1, 0.7)), random_dag(r, 6, r.uniform(0.1, 0.7))
        assert sid(a, b) == oracles.sid_bruteforce(a, b)


def test_sid_cyclic_prediction_falls_back_with_flag():
    truth = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]])
    pred = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    pruned, removed = break_cycles(pred)
    assert removed and is_acyclic(pruned)
    # DFS from node 0 reaches 2 last, so 2 -> 0 is the back edge
    np.testing.assert_array_equal(pruned, truth)
    value, flag = sid_with_flag(truth, pred)
    assert flag and value == sid(truth, pruned) == 0
    with pytest.raises(ValueError):
        sid(pred, truth)


# ----------------------------------------------------------------------------
# ranking metrics


def test_perfect_separation():
    s = np.array([0.9, 0.8, 0.3, 0.1])
    y = np.array([1, 1, 0, 0])
    assert auroc_score(s, y) == 1.0 and auprc_score(s, y) == 1.0


def test_all_tied_scores_give_half_auroc():
    assert auroc_score(np.full(6, 0.3), [1, 0, 1, 0, 1, 0]) == 0.5


def test_six_score_hand_case():
    s = np.array([0.9, 0.7, 0.7, 0.4, 0.2, 0.2])
    y = np.array([1, 0, 1, 1, 0, 0])
    # pairs: 0.9 beats all 3 negatives; 0.7 beats two and ties one; 0.4 beats two
    assert auroc_score(s, y) == pytest.approx((3 + 2.5 + 2) / 9, abs=1e-15)
    # thresholds 0.9: P=1 R=1/3; 0.7: P=2/3 R=2/3; 0.4: P=3/4 R=1
    expected = (1 / 3) * 1 + (1 / 3) * (2 / 3) + (1 / 3) * (3 / 4)
    assert auprc_score(s, y) == pytest.approx(expected, abs=1e-15)
    assert auroc_score(s, y) == pytest.approx(oracles.auroc_pairs(s, y), abs=1e-12)
    assert auprc_score(s, y) == pytest.approx(oracles.auprc_sweep(s, y), abs=1e-12)


def test_ranking_metrics_match_oracles_with_ties():
    r = rng(5)
    for _ in range(100):
        m = int(r.integers(4, 30))
        s = np.round(r.random(m), 1)
        y = r.random(m) < 0.4
        if y.all() or not y.any():
            y[0] = not y[0]
        assert abs(auroc_score(s, y) - oracles.auroc_pairs(s, y)) <= 1e-12
        assert abs(auprc_score(s, y) - oracles.auprc_sweep(s, y)) <= 1e-12


def test_auroc_label_flip():
    r = rng(6)
    for _ in range(50):
        s = np.round(r.random(12), 1)
        y = (r.random(12) < 0.5).astype(int)
        if y.all() or not y.any():
            continue
        assert auroc_score(s, y) + auroc_score(s, 1 - y) == pytest.approx(1.0, abs=1e-12)


def test_degenerate_labels_are_absent():
    assert auroc_score([0.1, 0.2], [1, 1]) is None
    assert auroc_score([0.1, 0.2], [0, 0]) is None
    assert auprc_score([0.1, 0.2], [0, 0]) is None
    auprc, auroc = pr_roc(np.full((3, 3), 0.2), np.zeros((3, 3)))
    assert auprc is None and auroc is None


# ----------------------------------------------------------------------------
# reports


def test_prior_beliefs_against_sparse_truth():
    truth = random_dag(rng(7), 5)
    rep = evaluate(np.full((5, 5), 0.047), truth)
    assert rep.edges_predicted == 0
    assert (rep.precision, rep.recall, rep.f1) == (0.0, 0.0, 0.0)


def test_indicator_beliefs_score_perfectly():
    truth = random_dag(rng(8), 6, 0.5)
    theta = np.clip(truth.astype(float), 1e-7, 1 - 1e-7)
    rep = evaluate(theta, truth)
    assert rep.shd == 0 and rep.sid == 0 and rep.f1 == 1.0 and rep.acyclic


def test_report_fields_match_individual_metrics():
    r = rng(9)
    truth = random_dag(r, 6)
    theta = r.random((6, 6))
    rep = evaluate(theta, truth, tau=0.6)
    pred = threshold(theta, 0.6)
    assert rep.shd == shd(truth, pred)
    assert rep.sid == sid_with_flag(truth, pred)[0]
    assert (rep.precision, rep.recall, rep.f1) == precision_recall_f1(truth, pred)
    assert (rep.auprc, rep.auroc) == pr_roc(theta, truth)
    assert rep.acyclic == is_acyclic(pred) and rep.edges_predicted == pred.n_edges
    assert json.loads(rep.to_json()) == rep.to_dict()


def test_f1_is_harmonic_mean():
    r = rng(10)
    for _ in range(20):
        truth, pred = random_dag(r, 6), random_dag(r, 6)
        p, rc, f1 = precision_recall_f1(truth, pred)
        assert f1 == pytest.approx(0.0 if p + rc == 0 else 2 * p * rc / (p + rc))


def _same(a, b):
    for k, v in a.items():
        assert b[k] == (pytest.approx(v, abs=1e-12) if isinstance(v, float) else v), k


def test_metrics_invariant_to_node_relabeling():
    r = rng(11)
    for _ in range(20):
        truth = random_dag(r, 6)
        # beliefs supported on a random DAG order, so the thresholded graph is acyclic
        theta = r.random((6, 6)) * random_dag(r, 6, 0.8)
        pi = r.permutation(6)
        a = evaluate(theta, truth).to_dict()
        b = evaluate(theta[np.ix_(pi, pi)], Graph(truth).permuted(pi)).to_dict()
        _same(a, b)


def test_cyclic_predictions_invariant_except_sid():
    # the back-edge fallback follows node order, so only SID may move under relabeling
    r = rng(12)
    for _ in range(20):
        truth = random_dag(r, 6)
        theta = r.random((6, 6))
        pi = r.permutation(6)
        a = evaluate(theta, truth).to_dict()
        b = evaluate(theta[np.ix_(pi, pi)], Graph(truth).permuted(pi)).to_dict()
        a.pop("sid")
        b.pop("sid")
        _same(a, b)


def test_aggregate_and_lines():
    r = rng(12)
    reps = [evaluate(r.random((4, 4)), random_dag(r, 4, 0.6)) for _ in range(5)]
    agg = aggregate(reps)
    shds = np.array([x.shd for x in reps], dtype=float)
    assert agg["tasks"] == 5
    assert agg["shd"]["mean"] == pytest.approx(shds.mean())
    assert agg["shd"]["stderr"] == pytest.approx(shds.std(ddof=1) / np.sqrt(5))
    lines = report_lines(reps)
    assert len(lines) == 6 and "aggregate" in json.loads(lines[-1])


def test_cyclic_fraction():
    cyc = np.array([[0, 0.9], [0.9, 0]])
    acyc = np.array([[0, 0.9], [0.1, 0]])
    assert cyclic_fraction([cyc, acyc, acyc, acyc]) == 0.25
