"""Training batch construction: uniform sampler, reversed sampler, negatives.

The uniform sampler preserves the observed interaction distribution (feeds
the conventional branch). The reversed sampler draws, per positive, a
category from a per-user mixture of inverse-frequency and original category
probabilities gated by the user's diversity score, then an item uniformly
within that category (feeds the adaptive branch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import DiversityProfile, InteractionCorpus

CONVENTIONAL = "conventional"
ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class TrainingBatch:
    """Positive pairs with fixed-size negative lists.

    ``users``/``positives`` are (B,) int arrays, ``negatives`` is (B, P).
    """

    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    branch_tag: str

    def __len__(self) -> int:
        return len(self.users)

    @property
    def num_negatives(self) -> int:
        return self.negatives.shape[1]


def reversed_category_probs(
    corpus: InteractionCorpus, user: int
) -> tuple[dict[int, float], dict[int, float]]:
    """Per-category (reversed, original) sampling probabilities for one user.

    Original probabilities are proportional to the user's per-category item
    counts; reversed probabilities are proportional to their reciprocals.
    Both are normalized over the user's interacted categories.
    """
    items = corpus.items_of_user[user]
    if len(items) == 0:
        raise ValueError(f"user {user} has no train interactions")
    cats, counts = np.unique(corpus.category_of_item[items], return_counts=True)
    total = counts.sum()
    w = total / counts
    rev = w / w.sum()
    orig = counts / total
    return (
        {int(c): float(p) for c, p in zip(cats, rev)},
        {int(c): float(p) for c, p in zip(cats, orig)},
    )


def draw_negatives(
    corpus: InteractionCorpus, user: int, count_p: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform draw of ``count_p`` items the user has not interacted with.

    Draws are distinct when the non-interacted pool is large enough;
    otherwise a smaller pool is reused with replacement.
    """
    if count_p < 1:
        raise ValueError("count_p must be >= 1")
    interacted = corpus.train_items_set(user)
    pool_size = corpus.num_items - len(interacted)
    if pool_size == 0:
        raise ValueError(f"user {user} interacted with every item; no negatives exist")
    if pool_size < count_p:
        pool = np.array(
            [v for v in range(corpus.num_items) if v not in interacted], dtype=np.int64
        )
        return rng.choice(pool, size=count_p, replace=True)
    out = np.empty(count_p, dtype=np.int64)
    filled = 0
    taken: set[int] = set()
    while filled < count_p:
        cand = rng.integers(0, corpus.num_items, size=2 * (count_p - filled))
        for v in cand:
            v = int(v)
            if v in interacted or v in taken:
                continue
            out[filled] = v
            taken.add(v)
            filled += 1
            if filled == count_p:
                break
    return out


class _NegativeDrawer:
    """Vectorized uniform negative drawing for whole batches.

    Keeps a dense user-by-item interaction mask when it fits in memory and
    redraws conflicting slots (interacted items or intra-row duplicates)
    until the batch is clean; falls back to the per-triple path for huge
    corpora or users whose non-interacted pool is smaller than the request.
    """

    _MASK_BUDGET = 250_000_000  # bool cells

    def __init__(self, corpus: InteractionCorpus):
        self.corpus = corpus
        self.pool_size = np.array(
            [corpus.num_items - len(corpus.items_of_user[u]) for u in range(corpus.num_users)]
        )
        self.mask = None
        if corpus.num_users * corpus.num_items <= self._MASK_BUDGET:
            self.mask = np.zeros((corpus.num_users, corpus.num_items), dtype=bool)
            if corpus.num_train:
                self.mask[corpus.train_pairs[:, 0], corpus.train_pairs[:, 1]] = True

    def draw(self, users: np.ndarray, count_p: int, rng: np.random.Generator) -> np.ndarray:
        if self.mask is None:
            return np.stack(
                [draw_negatives(self.corpus, int(u), count_p, rng) for u in users]
            )
        out = np.empty((len(users), count_p), dtype=np.int64)
        small = self.pool_size[users] < count_p
        for row in np.flatnonzero(small):
            out[row] = draw_negatives(self.corpus, int(users[row]), count_p, rng)
        rows = np.flatnonzero(~small)
        if len(rows) == 0:
            return out
        n_items = self.corpus.num_items
        cand = rng.integers(0, n_items, size=(len(rows), count_p))
        for _ in range(200):
            bad = self.mask[users[rows][:, None], cand]
            if count_p > 1:
                order = np.argsort(cand, axis=1, kind="stable")
                sorted_vals = np.take_along_axis(cand, order, axis=1)
                dup_sorted = np.zeros_like(bad)
                dup_sorted[:, 1:] = sorted_vals[:, 1:] == sorted_vals[:, :-1]
                dup = np.zeros_like(bad)
                np.put_along_axis(dup, order, dup_sorted, axis=1)
                bad |= dup
            n_bad = int(bad.sum())
            if n_bad == 0:
                break
            cand[bad] = rng.integers(0, n_items, size=n_bad)
        else:  # pragma: no cover - overload safety net
            for j, row in enumerate(rows):
                cand[j] = draw_negatives(self.corpus, int(users[row]), count_p, rng)
        out[rows] = cand
        return out


class UniformSampler:
    """Equal-probability sampling over all observed train pairs, with replacement."""

    def __init__(self, corpus: InteractionCorpus, num_negatives: int, rng: np.random.Generator):
        if corpus.num_train == 0:
            raise ValueError("corpus has no train interactions")
        self.corpus = corpus
        self.num_negatives = num_negatives
        self.rng = rng
        self._drawer = _NegativeDrawer(corpus)

    def sample(self, batch_size: int) -> TrainingBatch:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        idx = self.rng.integers(0, self.corpus.num_train, size=batch_size)
        pairs = self.corpus.train_pairs[idx]
        users = pairs[:, 0].copy()
        positives = pairs[:, 1].copy()
        negatives = self._drawer.draw(users, self.num_negatives, self.rng)
        return TrainingBatch(users, positives, negatives, CONVENTIONAL)


class ReversedSampler:
    """Diversity-gated category sampling for the adaptive branch.

    Per draw: a user uniformly among users with train history; a noise
    z ~ U(0,1) compared against the user's diversity score picks between the
    reversed and the original category distribution; then an item uniformly
    within the user's items of the drawn category.
    """

    def __init__(
        self,
        corpus: InteractionCorpus,
        profile: DiversityProfile,
        num_negatives: int,
        rng: np.random.Generator,
    ):
        if corpus.num_train == 0:
            raise ValueError("corpus has no train interactions")
        self.corpus = corpus
        self.profile = profile
        self.num_negatives = num_negatives
        self.rng = rng
        self.active_users = np.array(
            [u for u in range(corpus.num_users) if len(corpus.items_of_user[u]) > 0],
            dtype=np.int64,
        )
        self._drawer = _NegativeDrawer(corpus)
        # per-user: category list, cumulative reversed/original probs, items per category
        self._tables: list[tuple | None] = [None] * corpus.num_users

    def _user_table(self, user: int):
        tab = self._tables[user]
        if tab is None:
            items = self.corpus.items_of_user[user]
            item_cats = self.corpus.category_of_item[items]
            cats, counts = np.unique(item_cats, return_counts=True)
            w = counts.sum() / counts
            cum_rev = np.cumsum(w / w.sum())
            cum_orig = np.cumsum(counts / counts.sum())
            items_by_cat = [items[item_cats == c] for c in cats]
            tab = (cats, cum_rev, cum_orig, items_by_cat)
            self._tables[user] = tab
        return tab

    def sample(self, batch_size: int) -> TrainingBatch:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        users = self.active_users[self.rng.integers(0, len(self.active_users), size=batch_size)]
        positives = np.empty(batch_size, dtype=np.int64)
        for i, u in enumerate(users):
            u = int(u)
            cats, cum_rev, cum_orig, items_by_cat = self._user_table(u)
            z = self.rng.random()
            cum = cum_rev if z < self.profile.diversity_of_user[u] else cum_orig
            c_idx = int(np.searchsorted(cum, self.rng.random(), side="right"))
            c_idx = min(c_idx, len(cats) - 1)
            bucket = items_by_cat[c_idx]
            positives[i] = bucket[self.rng.integers(0, len(bucket))]
        negatives = self._drawer.draw(users, self.num_negatives, self.rng)
        return TrainingBatch(users.copy(), positives, negatives, ADAPTIVE)
