"""Rating and ranking metrics against hand values and scalar oracles."""

import numpy as np
import pytest

from inputcf import (
    InteractionMatrix,
    ModelConfig,
    build_model,
    evaluate_implicit,
    evaluate_rating,
    export_hypothesis,
    hit_ratio_at_k,
    ndcg_at_k,
    precision_at_pct,
    rank_with_sampled_negatives,
    retrieved_count,
    rmse,
    split_random,
)
from inputcf.data import SplitBundle, split_leave_one_out
from inputcf.rng import STREAM_INIT, stream

from oracles import (
    hit_ratio_oracle,
    ndcg_oracle,
    precision_oracle,
    retrieved_count_oracle,
    rmse_oracle,
)
from synthetic import random_matrix


# ---------------------------------------------------------------------- rmse


def test_rmse_hand_value():
    # errors 1 and 0 over two samples: sqrt(1/2)
    assert rmse([4.0, 3.0], [5.0, 3.0]) == pytest.approx(np.sqrt(0.5), rel=1e-15)


def test_rmse_constant_offset():
    actual = np.arange(10, dtype=np.float64)
    assert rmse(actual, actual + 2.0) == pytest.approx(2.0, rel=1e-15)


def test_rmse_empty_rejected():
    with pytest.raises(ValueError):
        rmse([], [])


def test_rmse_matches_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        a, p = rng.normal(size=n) * 4, rng.normal(size=n) * 4
        assert rmse(a, p) == pytest.approx(rmse_oracle(a, p), rel=1e-13)


# ------------------------------------------------------------ precision@p%


def test_retrieved_count_rounds_half_up_with_floor_one():
    assert retrieved_count(4, 50.0) == 2
    assert retrieved_count(5, 50.0) == 3   # 2.5 rounds up
    assert retrieved_count(1, 25.0) == 1   # never below one
    assert retrieved_count(9, 25.0) == 2
    assert retrieved_count_oracle(4, 50.0) == 2


def test_precision_perfect_top_half():
    # Ratings 5,4,3,2; top-50% retrieval of the two best-rated items.
    actual = [np.array([5.0, 4.0, 3.0, 2.0])]
    predicted = [np.array([3.0, 4.0, 1.0, 0.0])]  # ranks: item1, item0
    assert precision_at_pct(actual, predicted, 50.0) == 1.0


def test_precision_worst_top_half():
    actual = [np.array([5.0, 4.0, 3.0, 2.0])]
    predicted = [np.array([0.0, 1.0, 4.0, 3.0])]  # ranks: item2, item3
    assert precision_at_pct(actual, predicted, 50.0) == 0.0


def test_precision_boundary_ties_all_count_as_relevant():
    # Cutoff rating is 4 and two items carry it; retrieving either of them
    # (plus the 5) scores full marks.
    actual = [np.array([5.0, 4.0, 4.0, 3.0])]
    hit_second_four = [np.array([9.0, 0.0, 8.0, 1.0])]  # retrieves items 0, 2
    assert precision_at_pct(actual, hit_second_four, 50.0) == 1.0
    hit_first_four = [np.array([9.0, 8.0, 0.0, 1.0])]   # retrieves items 0, 1
    assert precision_at_pct(actual, hit_first_four, 50.0) == 1.0


def test_precision_constant_scores_retrieve_first_positions():
    # All-equal predictions: ties break by candidate position, so the
    # retrieved set is the first r candidates.
    actual = [np.array([1.0, 2.0, 5.0, 4.0])]
    predicted = [np.zeros(4)]
    # retrieved = {0, 1}; relevant = {2, 3} (cutoff 4)
    assert precision_at_pct(actual, predicted, 50.0) == 0.0


def test_precision_users_mean_and_empty_skip():
    actual = [np.array([5.0, 1.0]), np.array([]), np.array([3.0, 4.0])]
    predicted = [np.array([2.0, 1.0]), np.array([]), np.array([5.0, 1.0])]
    mean, per = precision_at_pct(actual, predicted, 50.0, return_per_user=True)
    assert per == [1.0, None, 0.0]
    assert mean == pytest.approx(0.5)


def test_precision_all_empty_rejected():
    with pytest.raises(ValueError, match="no users"):
        precision_at_pct([np.array([])], [np.array([])], 25.0)


def test_precision_length_mismatch_rejected():
    with pytest.raises(ValueError, match="lengths differ"):
        precision_at_pct([np.array([1.0, 2.0])], [np.array([1.0])], 50.0)


def test_precision_p_range_validated():
    good = [np.array([1.0])], [np.array([1.0])]
    assert precision_at_pct(*good, 100.0) == 1.0
    for bad_p in (0.0, -5.0, 101.0):
        with pytest.raises(ValueError, match="p_pct"):
            precision_at_pct(*good, bad_p)


def test_precision_matches_oracle_thousand_instances():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        # integer ratings force heavy ties, the regime that matters
        actual = rng.integers(1, 6, size=n).astype(np.float64)
        predicted = np.round(rng.normal(size=n) * 2, 1)
        p = float(rng.choice([10.0, 25.0, 50.0, 100.0]))
        ours = precision_at_pct([actual], [predicted], p)
        ref = precision_oracle([actual.tolist()], [predicted.tolist()], p)
        assert abs(ours - ref) <= 1e-12


def test_precision_batch_of_users_matches_oracle_mean():
    rng = np.random.default_rng(3)
    actual, predicted, refs = [], [], []
    for _ in range(200):
        n = int(rng.integers(1, 25))
        a = rng.integers(1, 6, size=n).astype(np.float64)
        s = rng.normal(size=n)
        actual.append(a)
        predicted.append(s)
        refs.append(precision_oracle([a.tolist()], [s.tolist()], 25.0))
    ours = precision_at_pct(actual, predicted, 25.0)
    assert ours == pytest.approx(float(np.mean(refs)), rel=1e-12)


def test_precision_invariant_under_positive_scaling():
    rng = np.random.default_rng(7)
    actual = [rng.integers(1, 6, size=12).astype(np.float64) for _ in range(20)]
    predicted = [rng.normal(size=12) for _ in range(20)]
    base = precision_at_pct(actual, predicted, 25.0)
    scaled = [3.0 * p for p in predicted]
    assert precision_at_pct(actual, scaled, 25.0) == base


# ------------------------------------------------------------------ hr/ndcg


def test_hit_ratio_hand_values():
    ranked = [np.arange(100), np.roll(np.arange(100), 5)]
    # item 0 sits at rank 1 in the first list and rank 6 in the second
    assert hit_ratio_at_k(ranked, [0, 0], k=10) == 1.0
    # item 10 sits at rank 11 in the first list: a miss at k=10
    assert hit_ratio_at_k([np.arange(100)], [10], k=10) == 0.0


def test_ndcg_hand_values():
    ranked = np.arange(100)
    assert ndcg_at_k([ranked], [0], k=10) == 1.0                 # rank 1
    assert ndcg_at_k([ranked], [2], k=10) == pytest.approx(0.5)  # 1/log2(4)
    assert ndcg_at_k([ranked], [10], k=10) == 0.0                # rank 11


def test_ranking_metrics_match_oracle():
    rng = np.random.default_rng(4)
    ranked, relevant = [], []
    for _ in range(300):
        perm = rng.permutation(50)
        ranked.append(perm)
        relevant.append(int(rng.integers(0, 50)))
    assert hit_ratio_at_k(ranked, relevant, 10) == pytest.approx(
        hit_ratio_oracle([r.tolist() for r in ranked], relevant, 10), rel=1e-12)
    assert ndcg_at_k(ranked, relevant, 10) == pytest.approx(
        ndcg_oracle([r.tolist() for r in ranked], relevant, 10), rel=1e-12)


def test_short_ranked_list_rejected():
    with pytest.raises(ValueError, match="shorter"):
        hit_ratio_at_k([np.arange(5)], [0], k=10)
    with pytest.raises(ValueError, match="shorter"):
        ndcg_at_k([np.arange(5)], [0], k=10)


def test_random_ranker_hits_at_base_rate():
    # A uniform random permutation of 100 candidates puts the relevant item
    # in the top 10 with probability 0.10; 10,000 trials stay within five
    # binomial standard deviations.
    rng = np.random.default_rng(123)
    trials = 10_000
    ranked = [rng.permutation(100) for _ in range(trials)]
    relevant = [0] * trials
    hr = hit_ratio_at_k(ranked, relevant, k=10)
    sigma = np.sqrt(0.1 * 0.9 / trials)
    assert abs(hr - 0.10) < 5 * sigma


# ------------------------------------------------- ranking with negatives


def build_hypothesis(m=6, n=40, seed=0, variant="mf"):
    mat = random_matrix(m, n, density=0.3, seed=seed, min_per_user=2)
    cfg = ModelConfig(variant=variant, user_layers=(4,), item_layers=(4,),
                      fusion_layers=(4, 1), embed_dim=4)
    model = build_model(cfg, mat, stream(seed, STREAM_INIT))
    return model, mat


def test_rank_with_sampled_negatives_contract():
    model, mat = build_hypothesis()
    hyp = export_hypothesis(model)
    j = 0
    train_items = set(mat.items[mat.csr_indptr[j]:mat.csr_indptr[j + 1]].tolist())
    test_item = next(k for k in range(mat.n) if k not in train_items)
    ranked = rank_with_sampled_negatives(hyp, mat, j, test_item,
                                         stream(0, 99), num_negatives=20)
    assert ranked.size == 21
    assert len(set(ranked.tolist())) == 21
    assert test_item in ranked
    others = set(ranked.tolist()) - {test_item}
    assert not others & train_items


def test_rank_is_invariant_under_positive_score_scaling():
    model, mat = build_hypothesis()
    hyp = export_hypothesis(model)
    j, test_item = 1, int(mat.items[mat.csr_indptr[1]])
    # the held-out item may not be in the train row; pick one outside it
    row = set(mat.items[mat.csr_indptr[1]:mat.csr_indptr[2]].tolist())
    test_item = next(k for k in range(mat.n) if k not in row)
    base = rank_with_sampled_negatives(hyp, mat, j, test_item,
                                       stream(5, 7), num_negatives=15)
    hyp.z_user = hyp.z_user * 4.0  # dot-fusion scores scale by 4
    again = rank_with_sampled_negatives(hyp, mat, j, test_item,
                                        stream(5, 7), num_negatives=15)
    assert np.array_equal(base, again)


def test_rank_requires_enough_negatives():
    model, mat = build_hypothesis(m=3, n=6)
    hyp = export_hypothesis(model)
    with pytest.raises(ValueError):
        rank_with_sampled_negatives(hyp, mat, 0, 0, stream(0, 1),
                                    num_negatives=50)


# ------------------------------------------------------------- evaluation


def rating_eval_fixtureless(seed=0):
    mat = random_matrix(20, 30, density=0.4, seed=seed, min_per_user=4)
    split = split_random(mat, ratios=(0.6, 0.2, 0.2), seed=0)
    cfg = ModelConfig(variant="inp-ncf", user_layers=(4,), item_layers=(4,),
                      fusion_layers=(4, 1))
    model = build_model(cfg, split.train, stream(0, STREAM_INIT))
    return export_hypothesis(model), split


def test_evaluate_rating_report_shape():
    hyp, split = rating_eval_fixtureless()
    rep = evaluate_rating(hyp, split, p_pct=25.0, include_per_user=True)
    assert set(rep.scores) == {"rmse", "precision_at_25pct"}
    assert rep.protocol["task"] == "rating"
    assert len(rep.per_user["precision"]) == split.train.m
    # rmse agrees with a direct recomputation on the test part
    from inputcf import score_hypothesis_pairs
    preds = score_hypothesis_pairs(hyp, split.test.users, split.test.items)
    assert rep.scores["rmse"] == pytest.approx(
        rmse_oracle(split.test.values, preds), rel=1e-12)


def test_evaluate_rating_candidates_are_validation_plus_test():
    hyp, split = rating_eval_fixtureless()
    rep = evaluate_rating(hyp, split, p_pct=50.0, include_per_user=True)
    per = rep.per_user["precision"]
    counts = np.zeros(split.train.m, dtype=int)
    for part in (split.validation, split.test):
        np.add.at(counts, part.users, 1)
    for u, val in enumerate(per):
        assert (val is None) == (counts[u] == 0)


def test_evaluate_twice_is_identical():
    hyp, split = rating_eval_fixtureless()
    a = evaluate_rating(hyp, split, p_pct=25.0)
    b = evaluate_rating(hyp, split, p_pct=25.0)
    assert a.scores == b.scores


def test_evaluate_implicit_deterministic_and_model_fair():
    mat = random_matrix(15, 60, density=0.25, seed=2, with_timestamps=True,
                        min_per_user=3)
    split = split_leave_one_out(mat)
    cfg = ModelConfig(variant="inp-cfnet", user_layers=(4,), item_layers=(4,),
                      fusion_layers=(4, 1), output_activation="sigmoid",
                      input_init="implicit", cfnet_embed_dim=3,
                      cfnet_h_layers=(4,))
    model = build_model(cfg, split.train, stream(0, STREAM_INIT))
    hyp = export_hypothesis(model)
    a = evaluate_implicit(hyp, split, k=5, num_negatives=20, seed=3)
    b = evaluate_implicit(hyp, split, k=5, num_negatives=20, seed=3)
    assert a.scores == b.scores
    assert set(a.scores) == {"hr_at_5", "ndcg_at_5"}
    c = evaluate_implicit(hyp, split, k=5, num_negatives=20, seed=4)
    assert a.protocol["seed"] != c.protocol["seed"]


def test_report_json_and_csv_round_trip(tmp_path):
    import csv as csv_mod
    import json
    hyp, split = rating_eval_fixtureless()
    rep = evaluate_rating(hyp, split, p_pct=25.0, include_per_user=True)
    jpath = tmp_path / "report.json"
    rep.write_json(jpath)
    doc = json.loads(jpath.read_text())
    assert doc["scores"]["rmse"] == rep.scores["rmse"]
    cpath = tmp_path / "scores.csv"
    rep.write_csv(cpath)
    with open(cpath) as fh:
        rows = list(csv_mod.reader(fh))
    assert rows[0] == ["metric", "value"]
    assert {r[0] for r in rows[1:]} == set(rep.scores)
    upath = tmp_path / "per_user.csv"
    rep.write_per_user_csv(upath)
    with open(upath) as fh:
        urows = list(csv_mod.reader(fh))
    assert urows[0] == ["user", "precision"]
    assert len(urows) == 1 + split.train.m
