"""Branch parameter space and the two-way translation forward computation.

Each branch owns user/item embeddings, an attention matrix for the relevance
relation, and a pair of aspect matrices that map frozen per-entity aspect
distributions to the mean/std of a Gaussian diversity relation. A pair (u, v)
is scored by translating in both directions:

    d(u, v) = ||p_u + h_u + h'_u - q_v||^2      (user-to-item)
    d(v, u) = ||q_v + h_v + h'_v - p_u||^2      (item-to-user)

where h is an attention-weighted aggregate of the entity's history and h' is
the (reparameterized) diversity relation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .corpus import DiversityProfile, InteractionCorpus
from .objective import AblationFlags, branch_weights, softmax

CHECKPOINT_VERSION = 1
DEFAULT_MAX_HISTORY = 500


@dataclass
class BranchParameters:
    """All trainable tensors of one branch."""

    user_embeddings: np.ndarray  # (M, D)
    item_embeddings: np.ndarray  # (N, D)
    attention_matrix: np.ndarray  # (D, D)
    aspect_mean_matrix: np.ndarray  # (K, D)
    aspect_std_matrix: np.ndarray  # (K, D)

    @property
    def dim(self) -> int:
        return self.user_embeddings.shape[1]

    @property
    def num_aspects(self) -> int:
        return self.aspect_mean_matrix.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "user_embeddings": self.user_embeddings,
            "item_embeddings": self.item_embeddings,
            "attention_matrix": self.attention_matrix,
            "aspect_mean_matrix": self.aspect_mean_matrix,
            "aspect_std_matrix": self.aspect_std_matrix,
        }

    def copy(self) -> "BranchParameters":
        return BranchParameters(**{k: v.copy() for k, v in self.tensors().items()})


def init_branch(
    num_users: int,
    num_items: int,
    dim: int,
    num_aspects: int,
    rng: np.random.Generator,
    init_std: float = 0.01,
) -> BranchParameters:
    """Zero-mean Gaussian initialization of one branch's parameter space."""
    return BranchParameters(
        user_embeddings=rng.normal(0.0, init_std, size=(num_users, dim)),
        item_embeddings=rng.normal(0.0, init_std, size=(num_items, dim)),
        attention_matrix=rng.normal(0.0, init_std, size=(dim, dim)),
        aspect_mean_matrix=rng.normal(0.0, init_std, size=(num_aspects, dim)),
        aspect_std_matrix=rng.normal(0.0, init_std, size=(num_aspects, dim)),
    )


@dataclass(frozen=True)
class AspectProfiles:
    """Frozen per-entity attention distributions over K aspects (rows sum to 1)."""

    user_aspect_weights: np.ndarray  # (M, K)
    item_aspect_weights: np.ndarray  # (N, K)


def build_aspect_profiles(corpus: InteractionCorpus, num_aspects: int) -> AspectProfiles:
    """Aspect distributions from category frequencies.

    User rows are train-interaction counts per category; item rows aggregate
    the category counts of the item's audience. Both are projected onto the
    top-K right-singular basis of the user matrix (identity when K equals the
    category count) and softmax-normalized per row.
    """
    n_cats = corpus.num_categories
    if num_aspects > n_cats:
        raise ValueError(f"num_aspects ({num_aspects}) exceeds category count ({n_cats})")

    user_freq = np.zeros((corpus.num_users, n_cats))
    for u in range(corpus.num_users):
        items = corpus.items_of_user[u]
        if len(items) > 0:
            np.add.at(user_freq[u], corpus.category_of_item[items], 1.0)

    if corpus.num_train > 0:
        rows = corpus.train_pairs[:, 0]
        cols = corpus.train_pairs[:, 1]
        interact = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(corpus.num_users, corpus.num_items)
        )
        item_freq = np.asarray(interact.T @ user_freq)
    else:
        item_freq = np.zeros((corpus.num_items, n_cats))

    if num_aspects == n_cats:
        user_red, item_red = user_freq, item_freq
    else:
        _, _, vt = np.linalg.svd(user_freq, full_matrices=False)
        basis = vt[:num_aspects]  # (K, |C|)
        user_red = user_freq @ basis.T
        item_red = item_freq @ basis.T

    return AspectProfiles(
        user_aspect_weights=softmax(user_red),
        item_aspect_weights=softmax(item_red),
    )


class HistoryIndex:
    """Flat (concatenated) history/audience lists for fast batch access.

    Lists longer than ``max_history`` keep only their most recent entries.
    """

    def __init__(self, corpus: InteractionCorpus, max_history: int = DEFAULT_MAX_HISTORY):
        self.max_history = max_history
        self.user_hist, self.user_ptr = self._flatten(corpus.items_of_user, max_history)
        self.item_aud, self.item_ptr = self._flatten(corpus.users_of_item, max_history)

    @staticmethod
    def _flatten(lists: list[np.ndarray], limit: int) -> tuple[np.ndarray, np.ndarray]:
        trimmed = [x[-limit:] if len(x) > limit else x for x in lists]
        ptr = np.zeros(len(lists) + 1, dtype=np.int64)
        np.cumsum([len(x) for x in trimmed], out=ptr[1:])
        flat = np.concatenate(trimmed) if ptr[-1] > 0 else np.empty(0, dtype=np.int64)
        return flat.astype(np.int64), ptr

    def user_history(self, user: int) -> np.ndarray:
        return self.user_hist[self.user_ptr[user] : self.user_ptr[user + 1]]

    def item_audience(self, item: int) -> np.ndarray:
        return self.item_aud[self.item_ptr[item] : self.item_ptr[item + 1]]


# ---------------------------------------------------------------------------
# single-pair forward ops


def _attend(context: np.ndarray, attention: np.ndarray, members: np.ndarray):
    """Softmax attention of a context vector over member embeddings.

    Logits are bilinear forms context^T W member; returns the weighted sum
    and the weights.
    """
    logits = members @ (attention.T @ context)
    weights = softmax(logits)
    return weights @ members, weights


def relevance_relation(
    params: BranchParameters,
    corpus: InteractionCorpus,
    user: int,
    item: int,
    direction: str,
    max_history: int = DEFAULT_MAX_HISTORY,
) -> tuple[np.ndarray, np.ndarray]:
    """Attention-aggregated history relation for one pair and direction.

    ``fw`` aggregates the user's item history against p_u; ``bw`` aggregates
    the item's audience against q_v. Both directions share the branch's
    attention matrix.
    """
    if direction == "fw":
        hist = corpus.items_of_user[user]
        if len(hist) == 0:
            raise ValueError(f"user {user} has an empty history")
        hist = hist[-max_history:]
        return _attend(params.user_embeddings[user], params.attention_matrix,
                       params.item_embeddings[hist])
    if direction == "bw":
        aud = corpus.users_of_item[item]
        if len(aud) == 0:
            raise ValueError(f"item {item} has an empty audience")
        aud = aud[-max_history:]
        return _attend(params.item_embeddings[item], params.attention_matrix,
                       params.user_embeddings[aud])
    raise ValueError(f"direction must be 'fw' or 'bw', got {direction!r}")


def diversity_relation(
    params: BranchParameters,
    profiles: AspectProfiles,
    kind: str,
    index: int,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Gaussian diversity relation for one entity.

    mean = T_mu^T w, std = |T_sigma^T w|; with ``noise`` given returns the
    reparameterized sample mean + noise * std, otherwise (evaluation mode)
    the mean.
    """
    if kind == "user":
        w = profiles.user_aspect_weights[index]
    elif kind == "item":
        w = profiles.item_aspect_weights[index]
    else:
        raise ValueError(f"kind must be 'user' or 'item', got {kind!r}")
    mu = params.aspect_mean_matrix.T @ w
    if noise is None:
        return mu
    sigma = np.abs(params.aspect_std_matrix.T @ w)
    return mu + np.asarray(noise) * sigma


@dataclass
class RelationOutput:
    """Both translation directions for one (user, item) pair."""

    forward_relation: np.ndarray
    backward_relation: np.ndarray
    forward_distance: float
    backward_distance: float
    attention_weights_fw: np.ndarray
    attention_weights_bw: np.ndarray


def two_way_distance(
    params: BranchParameters,
    profiles: AspectProfiles,
    corpus: InteractionCorpus,
    user: int,
    item: int,
    noise_user: np.ndarray | None = None,
    noise_item: np.ndarray | None = None,
    max_history: int = DEFAULT_MAX_HISTORY,
) -> RelationOutput:
    """Full two-way translation for one pair (evaluation mode when no noise)."""
    h_fw, a_fw = relevance_relation(params, corpus, user, item, "fw", max_history)
    h_bw, a_bw = relevance_relation(params, corpus, user, item, "bw", max_history)
    r_fw = h_fw + diversity_relation(params, profiles, "user", user, noise_user)
    r_bw = h_bw + diversity_relation(params, profiles, "item", item, noise_item)
    p_u = params.user_embeddings[user]
    q_v = params.item_embeddings[item]
    d_fw = float(np.sum((p_u + r_fw - q_v) ** 2))
    d_bw = float(np.sum((q_v + r_bw - p_u) ** 2))
    return RelationOutput(r_fw, r_bw, d_fw, d_bw, a_fw, a_bw)


def score_for_ranking(
    branch1: BranchParameters,
    branch2: BranchParameters | None,
    profiles: AspectProfiles,
    corpus: InteractionCorpus,
    profile: DiversityProfile,
    user: int,
    item: int,
    reverse_order: bool = False,
    max_history: int = DEFAULT_MAX_HISTORY,
) -> float:
    """Negated weighted two-way distance for one pair (higher is better).

    Branch weights come from the end-of-training schedule (alpha equals the
    user's diversity score). A cold item (empty audience) is scored from the
    forward direction alone.
    """
    if branch2 is None:
        weights = [(branch1, 1.0)]
    else:
        d_u = float(np.clip(profile.diversity_of_user[user], 0.0, 1.0))
        w1, w2 = branch_weights(d_u, profile.skewed_domain, reverse_order)
        weights = [(branch1, w1), (branch2, w2)]

    cold = len(corpus.users_of_item[item]) == 0
    score = 0.0
    for params, w in weights:
        if cold:
            h_fw, _ = relevance_relation(params, corpus, user, item, "fw", max_history)
            r_fw = h_fw + diversity_relation(params, profiles, "user", user, None)
            d_fw = float(
                np.sum((params.user_embeddings[user] + r_fw - params.item_embeddings[item]) ** 2)
            )
            score -= w * d_fw
        else:
            out = two_way_distance(params, profiles, corpus, user, item, None, None, max_history)
            score -= w * (out.forward_distance + out.backward_distance) / 2.0
    return score


# ---------------------------------------------------------------------------
# batch evaluation scorer


def _segment_attention_table(
    context_emb: np.ndarray,
    attention: np.ndarray,
    value_emb: np.ndarray,
    idx: np.ndarray,
    ptr: np.ndarray,
) -> np.ndarray:
    """Attention aggregate per row over flat segments; empty rows give zeros."""
    n_rows = len(ptr) - 1
    out = np.zeros((n_rows, context_emb.shape[1]))
    if len(idx) == 0:
        return out
    lengths = np.diff(ptr)
    nonempty = lengths > 0
    starts = ptr[:-1][nonempty]
    owner = np.repeat(np.nonzero(nonempty)[0], lengths[nonempty])
    rank = np.repeat(np.arange(nonempty.sum()), lengths[nonempty])

    y = context_emb @ attention  # logit_j = y[row] . value[idx_j]
    values = value_emb[idx]
    logits = np.einsum("ij,ij->i", values, y[owner])
    seg_max = np.maximum.reduceat(logits, starts)
    e = np.exp(logits - seg_max[rank])
    norm = np.add.reduceat(e, starts)
    a = e / norm[rank]
    h = np.add.reduceat(a[:, None] * values, starts, axis=0)
    out[nonempty] = h
    return out


class RankingScorer:
    """Evaluation-mode scorer producing per-user score vectors over all items.

    Precomputes, per branch, the translated user points p_u + h_u + mu_u and
    the translated item points q_v + h_v + mu_v; a user's score vector then
    needs only row-wise squared distances. Deterministic (no sampling).
    """

    def __init__(
        self,
        branch_conv: BranchParameters | None,
        branch_adp: BranchParameters | None,
        profiles: AspectProfiles,
        corpus: InteractionCorpus,
        profile: DiversityProfile,
        flags: AblationFlags | None = None,
        max_history: int = DEFAULT_MAX_HISTORY,
    ):
        if branch_conv is None and branch_adp is None:
            raise ValueError("at least one branch is required")
        self.flags = flags or AblationFlags()
        self.corpus = corpus
        self.profile = profile
        hist = HistoryIndex(corpus, max_history)
        self.warm = np.diff(hist.item_ptr) > 0
        self._branches = []
        for params in (branch_conv, branch_adp):
            if params is None:
                self._branches.append(None)
                continue
            self._branches.append(self._prepare(params, profiles, hist))
        self.single = (branch_conv is None) or (branch_adp is None)

    def _prepare(self, params: BranchParameters, profiles: AspectProfiles, hist: HistoryIndex):
        mu_u = profiles.user_aspect_weights @ params.aspect_mean_matrix
        mu_v = profiles.item_aspect_weights @ params.aspect_mean_matrix
        if not self.flags.use_diversity:
            mu_u = np.zeros_like(mu_u)
            mu_v = np.zeros_like(mu_v)
        if self.flags.use_attention:
            h_u = _segment_attention_table(
                params.user_embeddings, params.attention_matrix,
                params.item_embeddings, hist.user_hist, hist.user_ptr,
            )
            h_v = _segment_attention_table(
                params.item_embeddings, params.attention_matrix,
                params.user_embeddings, hist.item_aud, hist.item_ptr,
            )
        else:
            h_u = np.zeros_like(mu_u)
            h_v = np.zeros_like(mu_v)
        t_user = params.user_embeddings + h_u + mu_u
        t_item = params.item_embeddings + h_v + mu_v
        return params, t_user, t_item

    def _user_weights(self, user: int) -> tuple[float, float]:
        if self._branches[0] is None:
            return 0.0, 1.0
        if self._branches[1] is None:
            return 1.0, 0.0
        d_u = float(np.clip(self.profile.diversity_of_user[user], 0.0, 1.0))
        return branch_weights(d_u, self.profile.skewed_domain, self.flags.reverse_order)

    def scores_for_user(self, user: int) -> np.ndarray:
        """Score vector over all items (higher is better)."""
        w = self._user_weights(user)
        scores = np.zeros(self.corpus.num_items)
        for weight, prepared in zip(w, self._branches):
            if prepared is None or weight == 0.0:
                continue
            params, t_user, t_item = prepared
            diff_fw = t_user[user][None, :] - params.item_embeddings
            d_fw = np.einsum("ij,ij->i", diff_fw, diff_fw)
            if self.flags.use_backward:
                diff_bw = t_item - params.user_embeddings[user][None, :]
                d_bw = np.einsum("ij,ij->i", diff_bw, diff_bw)
                d = np.where(self.warm, 0.5 * (d_fw + d_bw), d_fw)
            else:
                d = d_fw
            scores -= weight * d
        return scores

    def __call__(self, user: int) -> np.ndarray:
        return self.scores_for_user(user)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    params: BranchParameters, path: Path | str, branch_tag: str, seed: int
) -> None:
    np.savez_compressed(
        path,
        version=np.int64(CHECKPOINT_VERSION),
        num_users=np.int64(params.user_embeddings.shape[0]),
        num_items=np.int64(params.item_embeddings.shape[0]),
        dim=np.int64(params.dim),
        num_aspects=np.int64(params.num_aspects),
        branch_tag=np.str_(branch_tag),
        seed=np.int64(seed),
        **{k: np.ascontiguousarray(v) for k, v in params.tensors().items()},
    )


def load_checkpoint(path: Path | str) -> tuple[BranchParameters, dict]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        params = BranchParameters(
            user_embeddings=data["user_embeddings"],
            item_embeddings=data["item_embeddings"],
            attention_matrix=data["attention_matrix"],
            aspect_mean_matrix=data["aspect_mean_matrix"],
            aspect_std_matrix=data["aspect_std_matrix"],
        )
        header = {
            "num_users": int(data["num_users"]),
            "num_items": int(data["num_items"]),
            "dim": int(data["dim"]),
            "num_aspects": int(data["num_aspects"]),
            "branch_tag": str(data["branch_tag"]),
            "seed": int(data["seed"]),
        }
    return params, header
