"""Comparison methods: plain metric learning (CML) and MMR re-ranking.

CML trains user/item embeddings with the forward-direction hinge only and no
relation vectors (the degenerate case of the branch kernel with attention,
diversity, and the backward direction all switched off). MMR greedily
re-ranks any relevance scores against a categorical similarity penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import InteractionCorpus
from .gradients import BatchNoise, loss_and_gradients
from .metrics import RankedList
from .model import AspectProfiles, BranchParameters, HistoryIndex
from .objective import AblationFlags
from .sampling import UniformSampler
from .training import AdamOptimizer, TrainConfig, TrainingDivergedError, clip_embedding_rows


@dataclass
class CmlParameters:
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray


@dataclass
class CmlTrainResult:
    params: CmlParameters
    history: list[float]  # epoch-mean hinge loss


_CML_FLAGS = AblationFlags(
    disable_adaptive_branch=True,
    drop_attention=True,
    drop_diversity_relation=True,
    drop_backward_direction=True,
)


def train_cml(corpus: InteractionCorpus, config: TrainConfig) -> CmlTrainResult:
    """Pairwise hinge training over uniform batches, deterministic under seed."""
    config.validate()
    if corpus.num_train == 0:
        raise ValueError("corpus has no train interactions")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    rng_init = np.random.default_rng(seeds[0])
    rng_sampler = np.random.default_rng(seeds[1])

    dim = config.embedding_dim
    branch = BranchParameters(
        user_embeddings=rng_init.normal(0.0, config.init_std, size=(corpus.num_users, dim)),
        item_embeddings=rng_init.normal(0.0, config.init_std, size=(corpus.num_items, dim)),
        attention_matrix=np.zeros((dim, dim)),
        aspect_mean_matrix=np.zeros((1, dim)),
        aspect_std_matrix=np.zeros((1, dim)),
    )
    profiles = AspectProfiles(
        user_aspect_weights=np.ones((corpus.num_users, 1)),
        item_aspect_weights=np.ones((corpus.num_items, 1)),
    )
    hist = HistoryIndex(corpus, config.max_history)
    adam = AdamOptimizer(branch, config.learning_rate)
    sampler = UniformSampler(corpus, config.negatives, rng_sampler)
    steps_per_epoch = math.ceil(corpus.num_train / config.batch_size)

    history: list[float] = []
    for epoch in range(1, config.max_epochs + 1):
        epoch_sum = 0.0
        for step_idx in range(steps_per_epoch):
            batch = sampler.sample(config.batch_size)
            try:
                breakdown, (grads, _) = loss_and_gradients(
                    branch, None, profiles, hist, batch, None,
                    (1.0, 0.0), config.margin,
                    noise_conv=BatchNoise.zeros(len(batch), batch.num_negatives, dim),
                    flags=_CML_FLAGS,
                )
            except FloatingPointError as exc:
                raise TrainingDivergedError(epoch, step_idx, exc) from exc
            adam.step(branch, grads)
            if config.clip_embeddings:
                clip_embedding_rows(branch,
                                    np.flatnonzero(grads.touched_users),
                                    np.flatnonzero(grads.touched_items))
            epoch_sum += breakdown.margin_conv
        history.append(epoch_sum / steps_per_epoch)

    return CmlTrainResult(
        params=CmlParameters(branch.user_embeddings, branch.item_embeddings),
        history=history,
    )


def cml_scorer(params: CmlParameters):
    """Score function over all items: negated squared Euclidean distance."""

    def score(user: int) -> np.ndarray:
        diff = params.user_embeddings[user][None, :] - params.item_embeddings
        return -np.einsum("ij,ij->i", diff, diff)

    return score


# ---------------------------------------------------------------------------
# MMR


def mmr_rerank(
    base_scores: np.ndarray,
    category_of_item: np.ndarray,
    lam: float,
    k: int,
    user: int = -1,
    candidates: np.ndarray | None = None,
) -> RankedList:
    """Greedy maximal-marginal-relevance selection.

    Relevance is the min-max normalized base score over the candidate set;
    similarity is the same-category indicator; each step picks
    argmax lam * rel - (1 - lam) * max_sim_to_selected, ties toward the lower
    item id. Returns fewer than ``k`` items when candidates run short.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    if candidates is None:
        candidates = np.arange(len(base_scores))
    candidates = np.asarray(candidates, dtype=np.int64)
    raw = np.asarray(base_scores, dtype=np.float64)[candidates]
    span = raw.max() - raw.min() if len(raw) else 0.0
    rel = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)

    n = len(candidates)
    take = min(k, n)
    picked_items = np.empty(take, dtype=np.int64)
    picked_scores = np.empty(take)
    max_sim = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    for t in range(take):
        objective = lam * rel - (1.0 - lam) * max_sim
        best = -1
        best_val = -np.inf
        for j in range(n):
            if not alive[j]:
                continue
            if objective[j] > best_val or (
                objective[j] == best_val and best >= 0 and candidates[j] < candidates[best]
            ):
                best, best_val = j, objective[j]
        alive[best] = False
        picked_items[t] = candidates[best]
        picked_scores[t] = best_val
        same = category_of_item[candidates] == category_of_item[candidates[best]]
        max_sim[same & alive] = 1.0
    return RankedList(user=user, items=picked_items, scores=picked_scores)


def mmr_rerank_fn(category_of_item: np.ndarray, lam: float):
    """Adapter for :func:`divrec.metrics.evaluate`'s rerank hook."""

    def rerank(user: int, scores: np.ndarray, train_items: np.ndarray, top_k: int) -> np.ndarray:
        mask = np.ones(len(scores), dtype=bool)
        mask[train_items] = False
        candidates = np.flatnonzero(mask)
        ranked = mmr_rerank(scores, category_of_item, lam, top_k, user=user,
                            candidates=candidates)
        return ranked.items

    return rerank
