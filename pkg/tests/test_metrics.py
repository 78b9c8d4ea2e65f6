import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svuf.metrics import compute_auc, compute_eer, cosine_score, det_curve_export, score_trials

from oracles import brute_auc, brute_eer, labelled


def test_cosine_examples(rng):
    z = rng.standard_normal(7)
    assert cosine_score(z, z) == pytest.approx(1.0, abs=1e-15)
    assert cosine_score([1, 0], [0, 3]) == 0.0
    assert cosine_score([1, 0], [1, 1]) == pytest.approx(0.70711, abs=5e-6)
    with pytest.raises(ValueError):
        cosine_score([0, 0], [1, 1])


@given(st.lists(st.floats(-1e3, 1e3).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=16))
def test_self_trial_scores_one(values):
    assert abs(cosine_score(values, values) - 1.0) < 1e-12


def test_eer_examples():
    assert compute_eer(*labelled([0.9, 0.8], [0.1, 0.2]))[0] == 0.0
    assert compute_eer(*labelled([0.8, 0.2], [0.7, 0.3]))[0] == pytest.approx(0.5, abs=1e-12)
    r = np.random.default_rng(0)
    same = compute_eer(*labelled(r.standard_normal(20000), r.standard_normal(20000)))[0]
    assert abs(same - 0.5) < 0.01


def test_auc_examples():
    assert compute_auc(*labelled([0.9, 0.8], [0.1, 0.2])) == 1.0
    assert compute_auc(*labelled([0.5, 0.5], [0.5, 0.5])) == 0.5
    assert compute_auc(*labelled([0.8, 0.2], [0.7, 0.3])) == 0.5


def test_eer_and_auc_match_oracles_on_1000_sets():
    r = np.random.default_rng(42)
    for _ in range(1000):
        n_pos, n_neg = r.integers(1, 30, size=2)
        shift = r.uniform(-1, 2)
        # rounding produces ties on some sets
        pos = np.round(r.standard_normal(n_pos) + shift, int(r.integers(1, 4)))
        neg = np.round(r.standard_normal(n_neg), int(r.integers(1, 4)))
        assert abs(compute_eer(*labelled(pos, neg))[0] - brute_eer(pos, neg)) < 1e-9
        assert abs(compute_auc(*labelled(pos, neg)) - brute_auc(pos, neg)) < 1e-9


@given(st.integers(0, 2**16))
def test_auc_invariant_under_monotone_transform(seed):
    r = np.random.default_rng(seed)
    scores, targets = labelled(r.standard_normal(15) + 0.5, r.standard_normal(12))
    base = compute_auc(scores, targets)
    for f in (np.exp, lambda s: 3 * s - 7, lambda s: np.arctan(s) ** 3):
        assert compute_auc(f(scores), targets) == pytest.approx(base, abs=1e-12)


def test_auc_above_half_does_not_bound_eer():
    # a concrete set where the implication AUC >= 0.5 => EER <= 0.5 breaks; the oracle agrees
    r = np.random.default_rng(7768)
    pos = r.standard_normal(r.integers(1, 20)) + r.uniform(0, 2)
    neg = r.standard_normal(r.integers(1, 20))
    scores, targets = labelled(pos, neg)
    assert compute_auc(scores, targets) == pytest.approx(brute_auc(pos, neg)) == pytest.approx(62 / 117)
    assert compute_eer(scores, targets)[0] == pytest.approx(brute_eer(pos, neg)) == pytest.approx(7 / 13)


@given(st.integers(0, 2**16))
def test_eer_at_most_half_under_stochastic_dominance(seed):
    r = np.random.default_rng(seed)
    neg = r.standard_normal(r.integers(1, 20))
    pos = r.choice(neg, r.integers(1, 20)) + r.uniform(0, 2)
    grid = np.concatenate([pos, neg])
    # empirical FRR never exceeds 1 - FAR at any threshold, so the ROC stays on or above the diagonal
    if all(np.mean(pos < t) <= np.mean(neg < t) for t in grid):
        scores, targets = labelled(pos, neg)
        assert compute_auc(scores, targets) >= 0.5 - 1e-12
        assert compute_eer(scores, targets)[0] <= 0.5 + 1e-12


def test_det_export_matches_counts(tmp_path):
    r = np.random.default_rng(3)
    pos, neg = np.round(r.standard_normal(25) + 1, 1), np.round(r.standard_normal(30), 1)
    det_curve_export(*labelled(pos, neg), tmp_path / "det.csv")
    with open(tmp_path / "det.csv") as fh:
        rows = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
    assert (rows[0]["far"], rows[0]["frr"]) == (1.0, 0.0)
    assert (rows[-1]["far"], rows[-1]["frr"]) == (0.0, 1.0)
    for row in rows:
        t = row["threshold"]
        assert row["far"] == np.mean(neg >= t)
        assert row["frr"] == np.mean(pos < t)


def test_score_trials_pairwise_and_averaged(rng):
    emb = {k: rng.standard_normal(4) for k in "abcd"}
    trials = [("a", "b", True), ("c", "d", False)]
    scores, targets = score_trials(trials, emb)
    assert scores[0] == cosine_score(emb["a"], emb["b"]) and list(targets) == [True, False]
    sets = {"a": ["a", "c"]}
    avg, _ = score_trials(trials[:1], emb, sets)
    centre = emb["a"] / np.linalg.norm(emb["a"]) + emb["c"] / np.linalg.norm(emb["c"])
    assert avg[0] == pytest.approx(cosine_score(centre, emb["b"]), abs=1e-15)


def test_degenerate_inputs_rejected():
    with pytest.raises(ValueError):
        compute_eer([0.1, 0.2], [True, True])
    with pytest.raises(ValueError):
        compute_auc([np.nan, 0.2], [True, False])
