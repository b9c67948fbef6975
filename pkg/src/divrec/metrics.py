"""Ranking evaluation: accuracy, diversity, trade-off, and diversity fit.

For every user with test interactions the evaluator ranks all items outside
the user's train set (score ties broken by ascending item id), then averages
Recall@K, NDCG@K, intra-list distance, category coverage, and their harmonic
trade-off over users. The predicted per-user diversity (distinct categories
in the top list over its length) is compared against the interaction-derived
diversity scores via mean squared error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import DiversityProfile, InteractionCorpus

METRIC_NAMES = ("recall", "ndcg", "ild", "cc", "f1")


@dataclass(frozen=True)
class RankedList:
    """Top-K items for one user, best first."""

    user: int
    items: np.ndarray
    scores: np.ndarray


@dataclass
class MetricReport:
    cutoffs: tuple[int, ...]
    means: dict[int, dict[str, float]]  # cutoff -> metric -> mean over users
    diversity_mse: float
    per_user: list[dict]  # user, diversity, predicted, recall, ndcg, ild, cc
    num_users: int


def recall_at_k(ranked: np.ndarray, ground_truth: set[int], k: int) -> float:
    """Fraction of the ground truth present in the top k."""
    if not ground_truth:
        raise ValueError("ground truth is empty")
    hits = sum(1 for v in ranked[:k] if int(v) in ground_truth)
    return hits / len(ground_truth)


def ndcg_at_k(ranked: np.ndarray, ground_truth: set[int], k: int) -> float:
    """Binary-relevance DCG over the top k, normalized by the ideal ordering."""
    if not ground_truth:
        raise ValueError("ground truth is empty")
    dcg = 0.0
    for i, v in enumerate(ranked[:k]):
        if int(v) in ground_truth:
            dcg += 1.0 / math.log2(i + 2)
    ideal_hits = min(k, len(ground_truth))
    idcg = sum(1.0 / math.log2(i + 2) for i in range(ideal_hits))
    return dcg / idcg


def ild_at_k(ranked: np.ndarray, category_of_item: np.ndarray, k: int) -> float:
    """Mean pairwise categorical disagreement within the top k."""
    if k < 2:
        raise ValueError("ild needs k >= 2")
    top = ranked[:k]
    cats = category_of_item[top]
    n = len(top)
    if n < 2:
        raise ValueError("ild needs at least 2 ranked items")
    diff_pairs = 0
    for i in range(n):
        for j in range(i + 1, n):
            if cats[i] != cats[j]:
                diff_pairs += 1
    return diff_pairs / (n * (n - 1) / 2)


def cc_at_k(
    ranked: np.ndarray,
    category_of_item: np.ndarray,
    user_train_categories: set[int],
    k: int,
) -> float:
    """Covered fraction of the user's interacted categories, capped by k."""
    if not user_train_categories:
        raise ValueError("user has no train categories")
    top_cats = {int(c) for c in category_of_item[ranked[:k]]}
    covered = len(top_cats & user_train_categories)
    return covered / min(k, len(user_train_categories))


def f_score(accuracy: float, diversity: float) -> float:
    """Harmonic mean of an accuracy and a diversity value (0 when both are 0)."""
    if accuracy + diversity == 0:
        return 0.0
    return 2.0 * accuracy * diversity / (accuracy + diversity)


def predicted_diversity(ranked: np.ndarray, category_of_item: np.ndarray, k: int) -> float:
    """Distinct categories among the top k divided by k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    top = ranked[:k]
    return len({int(c) for c in category_of_item[top]}) / k


def diversity_mse(predicted: dict[int, float], original: dict[int, float]) -> float:
    """Mean squared error between predicted and interaction-derived diversity."""
    if set(predicted) != set(original):
        raise ValueError("predicted and original diversity cover different user sets")
    if not predicted:
        raise ValueError("empty user set")
    return float(np.mean([(predicted[u] - original[u]) ** 2 for u in predicted]))


def rank_items(
    scores: np.ndarray, train_items: np.ndarray, top_k: int
) -> np.ndarray:
    """Indices of the best ``top_k`` items outside the train set.

    Ties break toward the lower item id (stable sort on negated scores).
    """
    masked = scores.astype(np.float64, copy=True)
    masked[train_items] = -np.inf
    order = np.argsort(-masked, kind="stable")
    n_candidates = len(scores) - len(train_items)
    return order[: min(top_k, n_candidates)]


def evaluate(
    score_fn,
    corpus: InteractionCorpus,
    profile: DiversityProfile,
    cutoffs: tuple[int, ...] = (5, 10),
    rerank_fn=None,
) -> MetricReport:
    """Full evaluation over all users with nonempty test sets.

    ``score_fn(user)`` returns a score vector over all items; higher is
    better. ``rerank_fn(user, scores, train_items, top_k)``, when given,
    replaces the plain top-K selection (used for re-ranking baselines).
    Per-user rows and the diversity MSE use the largest cutoff.
    """
    if not cutoffs:
        raise ValueError("cutoffs must be nonempty")
    cutoffs = tuple(sorted(int(k) for k in cutoffs))
    k_max = cutoffs[-1]

    test_of_user: dict[int, set[int]] = {}
    for u, v in corpus.test_pairs:
        test_of_user.setdefault(int(u), set()).add(int(v))

    sums = {k: {m: 0.0 for m in METRIC_NAMES} for k in cutoffs}
    per_user: list[dict] = []
    predicted: dict[int, float] = {}
    original: dict[int, float] = {}
    n_users = 0

    for u in sorted(test_of_user):
        truth = test_of_user[u]
        train_items = corpus.items_of_user[u]
        scores = score_fn(u)
        if rerank_fn is not None:
            top = rerank_fn(u, scores, train_items, k_max)
        else:
            top = rank_items(scores, train_items, k_max)
        user_cats = {int(c) for c in corpus.categories_of_user(u)}

        row = {"user": u, "diversity": float(profile.diversity_of_user[u])}
        for k in cutoffs:
            r = recall_at_k(top, truth, k)
            n = ndcg_at_k(top, truth, k)
            i = ild_at_k(top, corpus.category_of_item, k) if k >= 2 else 0.0
            c = cc_at_k(top, corpus.category_of_item, user_cats, k)
            sums[k]["recall"] += r
            sums[k]["ndcg"] += n
            sums[k]["ild"] += i
            sums[k]["cc"] += c
            sums[k]["f1"] += f_score(r, i)
            if k == k_max:
                row.update(recall=r, ndcg=n, ild=i, cc=c)
        pred = predicted_diversity(top, corpus.category_of_item, k_max)
        row["predicted"] = pred
        predicted[u] = pred
        original[u] = float(profile.diversity_of_user[u])
        per_user.append(row)
        n_users += 1

    if n_users == 0:
        raise ValueError("no user has test interactions")

    means = {
        k: {m: sums[k][m] / n_users for m in METRIC_NAMES} for k in cutoffs
    }
    return MetricReport(
        cutoffs=cutoffs,
        means=means,
        diversity_mse=diversity_mse(predicted, original),
        per_user=per_user,
        num_users=n_users,
    )


# ---------------------------------------------------------------------------
# report serialization


def write_report_csv(report: MetricReport, path: Path | str) -> None:
    """One row per cutoff: means of every metric plus the diversity MSE."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cutoff", *METRIC_NAMES, "diversity_mse", "num_users"])
        for k in report.cutoffs:
            writer.writerow(
                [k]
                + [f"{report.means[k][m]:.6f}" for m in METRIC_NAMES]
                + [f"{report.diversity_mse:.6f}", report.num_users]
            )


def write_per_user_tsv(report: MetricReport, path: Path | str) -> None:
    """Per-user metrics at the largest cutoff (histogram-ready)."""
    cols = ["user", "diversity", "predicted", "recall", "ndcg", "ild", "cc"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(cols)
        for row in report.per_user:
            writer.writerow([row["user"]] + [f"{row[c]:.6f}" for c in cols[1:]])
