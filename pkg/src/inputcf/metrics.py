"""Evaluation measures and the protocols that feed them.

Pure metric functions sit at the bottom: they see only arrays and are
deterministic functions of (scores, data), with every ranking tie broken by
ascending item index. Protocol drivers sit on top: they assemble per-user
candidate sets from a split, score them through an exported hypothesis, and
aggregate into an EvalReport that can be emitted as JSON or CSV.

The rating protocol reports RMSE over the test interactions plus top-percent
precision over each user's non-train rated items. The implicit protocol is
leave-one-out ranking: every held-out item competes against sampled
negatives and hit ratio / NDCG are averaged over users.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionMatrix, SplitBundle, sample_negatives
from .model import Hypothesis, score_hypothesis_pairs
from .rng import STREAM_NEGATIVES, stream


def rmse(actual, predicted) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if actual.shape != predicted.shape or actual.ndim != 1:
        raise ValueError("actual and predicted must be equal-length 1-D arrays")
    if actual.size == 0:
        raise ValueError("rmse of an empty set is undefined")
    diff = actual - predicted
    return float(np.sqrt(np.mean(diff * diff)))


def retrieved_count(candidate_count: int, p_pct: float) -> int:
    """Top-percent list size: round half up, never below one."""
    return max(1, int(math.floor(p_pct * candidate_count / 100.0 + 0.5)))


def precision_at_pct(actual_by_user, predicted_by_user, p_pct: float = 25.0,
                     return_per_user: bool = False):
    """Mean per-user overlap between top-rated and top-predicted items.

    Each user contributes |relevant ∩ retrieved| / |retrieved|.
    ``retrieved`` holds the top ``retrieved_count(|S_j|, p_pct)`` candidates
    by predicted score, ties broken by ascending candidate position
    (candidates are item-ascending). ``relevant`` holds every candidate whose
    actual rating reaches the rating of the |retrieved|-th best-rated item:
    discrete rating scales tie heavily at that boundary, and an item rated
    equal to the cutoff is no less relevant than the cutoff item itself.
    Users with no candidates are skipped entirely, not counted as zero.
    """
    if not 0.0 < p_pct <= 100.0:
        raise ValueError("p_pct must be in (0, 100]")
    per_user = []
    for actual, predicted in zip(actual_by_user, predicted_by_user):
        actual = np.asarray(actual, dtype=np.float64)
        predicted = np.asarray(predicted, dtype=np.float64)
        if actual.shape != predicted.shape:
            raise ValueError("per-user actual and predicted lengths differ")
        if actual.size == 0:
            per_user.append(None)
            continue
        size = retrieved_count(actual.size, p_pct)
        positions = np.arange(actual.size)
        cutoff = actual[np.lexsort((positions, -actual))[size - 1]]
        relevant = np.flatnonzero(actual >= cutoff)
        retrieved = np.lexsort((positions, -predicted))[:size]
        overlap = np.intersect1d(relevant, retrieved).size
        per_user.append(overlap / size)
    kept = [v for v in per_user if v is not None]
    if not kept:
        raise ValueError("no users with a non-empty candidate set")
    mean = float(np.mean(kept))
    return (mean, per_user) if return_per_user else mean


def hit_ratio_at_k(ranked_lists, relevant_items, k: int = 10) -> float:
    """Fraction of users whose relevant item appears in their top-k."""
    hits = []
    for ranked, relevant in zip(ranked_lists, relevant_items):
        ranked = np.asarray(ranked)
        if ranked.size < k:
            raise ValueError(f"ranked list shorter than k={k}")
        hits.append(1.0 if relevant in ranked[:k] else 0.0)
    if not hits:
        return 0.0
    return float(np.mean(hits))


def ndcg_at_k(ranked_lists, relevant_items, k: int = 10) -> float:
    """Mean log-discounted gain of the relevant item's rank, zero on a miss."""
    gains = []
    for ranked, relevant in zip(ranked_lists, relevant_items):
        ranked = np.asarray(ranked)
        if ranked.size < k:
            raise ValueError(f"ranked list shorter than k={k}")
        where = np.nonzero(ranked[:k] == relevant)[0]
        if where.size:
            rank = int(where[0]) + 1
            gains.append(1.0 / math.log2(rank + 1))
        else:
            gains.append(0.0)
    if not gains:
        return 0.0
    return float(np.mean(gains))


def rank_with_sampled_negatives(hyp: Hypothesis, train: InteractionMatrix,
                                j: int, test_item: int, gen,
                                num_negatives: int = 99) -> np.ndarray:
    """Rank the held-out item among sampled negatives for one user.

    Negatives are distinct, disjoint from the user's training items and from
    the test item. Returns all candidate items sorted by descending score,
    ties by ascending item index.
    """
    negatives = sample_negatives(train, j, num_negatives, gen, exclude=[test_item])
    candidates = np.concatenate([[test_item], negatives]).astype(np.int64)
    users = np.full(candidates.size, j, dtype=np.int64)
    scores = score_hypothesis_pairs(hyp, users, candidates)
    order = np.lexsort((candidates, -scores))
    return candidates[order]


@dataclass
class EvalReport:
    """Aggregated metric scores plus the protocol that produced them."""

    protocol: dict
    scores: dict[str, float]
    per_user: dict[str, list] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"protocol": self.protocol, "scores": self.scores}
        if self.per_user:
            doc["per_user"] = {k: list(v) for k, v in self.per_user.items()}
        return json.dumps(doc, indent=2, sort_keys=True)

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for name in sorted(self.scores):
                writer.writerow([name, f"{self.scores[name]:.10g}"])

    def write_per_user_csv(self, path) -> None:
        names = sorted(self.per_user)
        columns = [self.per_user[n] for n in names]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["user"] + names)
            for row_idx in range(len(columns[0]) if columns else 0):
                row = [row_idx]
                for col in columns:
                    v = col[row_idx]
                    row.append("" if v is None else f"{v:.10g}")
                writer.writerow(row)


def _candidate_sets(split: SplitBundle):
    """Per-user non-train rated items, item-ascending, with their ratings."""
    m = split.train.m
    items_by_user = [[] for _ in range(m)]
    ratings_by_user = [[] for _ in range(m)]
    for part in (split.validation, split.test):
        for u, i, v in zip(part.users, part.items, part.values):
            items_by_user[u].append(int(i))
            ratings_by_user[u].append(float(v))
    out = []
    for u in range(m):
        items = np.asarray(items_by_user[u], dtype=np.int64)
        ratings = np.asarray(ratings_by_user[u], dtype=np.float64)
        order = np.argsort(items, kind="stable")
        out.append((items[order], ratings[order]))
    return out


def evaluate_rating(hyp: Hypothesis, split: SplitBundle, p_pct: float = 25.0,
                    include_per_user: bool = False) -> EvalReport:
    """Test RMSE plus top-percent precision over non-train rated items."""
    scores: dict[str, float] = {}
    per_user: dict[str, list] = {}
    if split.test.nnz:
        preds = score_hypothesis_pairs(hyp, split.test.users, split.test.items)
        scores["rmse"] = rmse(split.test.values, preds)
    candidates = _candidate_sets(split)
    actual_by_user, predicted_by_user = [], []
    for u, (items, ratings) in enumerate(candidates):
        actual_by_user.append(ratings)
        if items.size:
            users = np.full(items.size, u, dtype=np.int64)
            predicted_by_user.append(score_hypothesis_pairs(hyp, users, items))
        else:
            predicted_by_user.append(np.array([], dtype=np.float64))
    mean, per = precision_at_pct(actual_by_user, predicted_by_user, p_pct,
                                 return_per_user=True)
    scores[f"precision_at_{p_pct:g}pct"] = mean
    if include_per_user:
        per_user["precision"] = per
    return EvalReport(
        protocol={"task": "rating", "split": split.protocol, "p_pct": p_pct},
        scores=scores, per_user=per_user)


def evaluate_implicit(hyp: Hypothesis, split: SplitBundle, k: int = 10,
                      num_negatives: int = 99, seed: int = 0,
                      include_per_user: bool = False) -> EvalReport:
    """Leave-one-out ranking: HR@k and NDCG@k against sampled negatives.

    Users are visited in ascending index order with one sampling stream, so
    two models evaluated under the same seed face identical negative sets.
    """
    gen = stream(seed, STREAM_NEGATIVES)
    ranked_lists, relevant = [], []
    test = split.test
    order = np.argsort(test.users, kind="stable")
    for idx in order:
        j = int(test.users[idx])
        t = int(test.items[idx])
        ranked_lists.append(rank_with_sampled_negatives(
            hyp, split.train, j, t, gen, num_negatives))
        relevant.append(t)
    scores = {f"hr_at_{k}": hit_ratio_at_k(ranked_lists, relevant, k),
              f"ndcg_at_{k}": ndcg_at_k(ranked_lists, relevant, k)}
    per_user: dict[str, list] = {}
    if include_per_user:
        hits, gains = [], []
        for ranked, t in zip(ranked_lists, relevant):
            where = np.nonzero(np.asarray(ranked)[:k] == t)[0]
            hits.append(1.0 if where.size else 0.0)
            gains.append(1.0 / math.log2(int(where[0]) + 2) if where.size else 0.0)
        per_user["hr"] = hits
        per_user["ndcg"] = gains
    return EvalReport(
        protocol={"task": "implicit", "split": split.protocol, "k": k,
                  "num_negatives": num_negatives, "seed": seed},
        scores=scores, per_user=per_user)
