"""Interaction corpus: ingestion, k-core filtering, train/test split, diversity stats.

The corpus is the immutable backbone shared by samplers, the model, and the
evaluator. It holds the binarized implicit-feedback interactions, dense
user/item/category indices, per-entity interaction lists (in time order), and
the train/test partition.
"""

from __future__ import annotations

import ast
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DATASET_FORMATS = ("movielens-1m", "amazon-5core-json", "canonical-tsv")

SNAPSHOT_VERSION = 1


class MissingCategoryError(ValueError):
    """Items appear in the interaction log but not in the category map."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        shown = ", ".join(self.tokens[:10])
        more = "" if len(self.tokens) <= 10 else f" (+{len(self.tokens) - 10} more)"
        super().__init__(f"items without category: {shown}{more}")


@dataclass(frozen=True)
class InteractionCorpus:
    """Binarized implicit-feedback matrix with index structures.

    ``train_pairs`` / ``test_pairs`` are (E, 2) int arrays of (user, item)
    rows. ``items_of_user`` and ``users_of_item`` cover train interactions
    only and keep per-entity time order (timestamp, then input order).
    """

    num_users: int
    num_items: int
    num_categories: int
    train_pairs: np.ndarray
    test_pairs: np.ndarray
    items_of_user: list[np.ndarray]
    users_of_item: list[np.ndarray]
    category_of_item: np.ndarray
    user_tokens: list[str] = field(default_factory=list)
    item_tokens: list[str] = field(default_factory=list)
    category_tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        object.__setattr__(self, "_train_set", None)
        object.__setattr__(self, "_user_item_sets", None)

    @property
    def num_train(self) -> int:
        return len(self.train_pairs)

    @property
    def num_test(self) -> int:
        return len(self.test_pairs)

    def train_pair_set(self) -> frozenset[tuple[int, int]]:
        cached = getattr(self, "_train_set")
        if cached is None:
            cached = frozenset((int(u), int(v)) for u, v in self.train_pairs)
            object.__setattr__(self, "_train_set", cached)
        return cached

    def train_items_set(self, user: int) -> frozenset[int]:
        """Set view of the user's train items (cached, used by negative sampling)."""
        cached = getattr(self, "_user_item_sets")
        if cached is None:
            cached = [None] * self.num_users
            object.__setattr__(self, "_user_item_sets", cached)
        s = cached[user]
        if s is None:
            s = frozenset(int(v) for v in self.items_of_user[user])
            cached[user] = s
        return s

    def categories_of_user(self, user: int) -> np.ndarray:
        """Distinct category ids of the user's train items, ascending."""
        items = self.items_of_user[user]
        if len(items) == 0:
            return np.empty(0, dtype=np.int64)
        return np.unique(self.category_of_item[items])

    def test_items_of_user(self, user: int) -> np.ndarray:
        mask = self.test_pairs[:, 0] == user
        return self.test_pairs[mask, 1]


@dataclass(frozen=True)
class DiversityProfile:
    """Per-user diversity scores plus the domain-level skew decision.

    ``diversity_of_user[u]`` is |C_u|/|V_u| over train interactions (NaN for a
    user without train interactions). ``skewed_domain`` flags whether the
    distribution's skewness reaches the threshold that flips the branch order.
    """

    diversity_of_user: np.ndarray
    skewness: float
    skewed_domain: bool
    skew_threshold: float = 0.2


# ---------------------------------------------------------------------------
# core statistics


def user_diversity(corpus: InteractionCorpus, user: int) -> float:
    """Distinct interacted categories divided by interacted items (train only)."""
    items = corpus.items_of_user[user]
    if len(items) == 0:
        raise ValueError(f"user {user} has no train interactions")
    n_cats = len(np.unique(corpus.category_of_item[items]))
    return n_cats / len(items)


def skewness(values: Sequence[float]) -> float:
    """Third standardized moment with population (divide-by-n) statistics."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise ValueError("skewness needs at least 2 values")
    mu = x.mean()
    sigma = math.sqrt(np.mean((x - mu) ** 2))
    if sigma == 0.0:
        raise ValueError("skewness undefined for a degenerate (zero variance) distribution")
    return float(np.mean(((x - mu) / sigma) ** 3))


def build_diversity_profile(
    corpus: InteractionCorpus, skew_threshold: float = 0.2
) -> DiversityProfile:
    """Compute d_u for every user with train history and the domain skew flag."""
    d = np.full(corpus.num_users, np.nan)
    for u in range(corpus.num_users):
        if len(corpus.items_of_user[u]) > 0:
            d[u] = user_diversity(corpus, u)
    valid = d[~np.isnan(d)]
    skew = skewness(valid)
    return DiversityProfile(
        diversity_of_user=d,
        skewness=skew,
        skewed_domain=bool(skew >= skew_threshold),
        skew_threshold=skew_threshold,
    )


# ---------------------------------------------------------------------------
# ingestion


def _kcore_filter(pairs: list[tuple[str, str, float]], min_core: int):
    """Iteratively drop users/items with < min_core unique interactions."""
    keep = pairs
    while True:
        users: dict[str, int] = {}
        items: dict[str, int] = {}
        for u, v, _ in keep:
            users[u] = users.get(u, 0) + 1
            items[v] = items.get(v, 0) + 1
        bad_u = {u for u, c in users.items() if c < min_core}
        bad_v = {v for v, c in items.items() if c < min_core}
        if not bad_u and not bad_v:
            return keep
        keep = [p for p in keep if p[0] not in bad_u and p[1] not in bad_v]
        if not keep:
            return keep


def ingest(
    raw_log: Iterable[tuple[str, str, float, float | None]],
    category_map: Iterable[tuple[str, str]],
    min_core: int = 1,
) -> InteractionCorpus:
    """Build a corpus from an interaction record stream and a category stream.

    Ratings are binarized (any observed row is an interaction), duplicate
    (user, item) rows collapse to the earliest occurrence, and k-core
    filtering runs to a fixed point when ``min_core > 1``. Users, items and
    categories get dense ids in first-appearance order. The produced corpus
    has everything in the train partition; apply :func:`split` afterwards.
    """
    cat_of_token: dict[str, str] = {}
    for item_tok, cat_tok in category_map:
        cat_of_token.setdefault(str(item_tok), str(cat_tok))

    seen: set[tuple[str, str]] = set()
    records: list[tuple[str, str, float]] = []  # (user, item, sort_key)
    for pos, row in enumerate(raw_log):
        u_tok, v_tok = str(row[0]), str(row[1])
        ts = row[3] if len(row) > 3 else None
        key = (u_tok, v_tok)
        if key in seen:
            continue
        seen.add(key)
        sort_key = float(ts) if ts is not None else float(pos)
        records.append((u_tok, v_tok, sort_key))
    if not records:
        raise ValueError("empty interaction stream")

    missing = sorted({v for _, v, _ in records if v not in cat_of_token})
    if missing:
        raise MissingCategoryError(missing)

    if min_core > 1:
        records = _kcore_filter(records, min_core)
        if not records:
            raise ValueError(f"no interactions survive {min_core}-core filtering")

    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    for u_tok, v_tok, _ in records:
        if u_tok not in user_ids:
            user_ids[u_tok] = len(user_ids)
        if v_tok not in item_ids:
            item_ids[v_tok] = len(item_ids)

    cat_ids: dict[str, int] = {}
    category_of_item = np.zeros(len(item_ids), dtype=np.int64)
    for v_tok, v in item_ids.items():
        c_tok = cat_of_token[v_tok]
        if c_tok not in cat_ids:
            cat_ids[c_tok] = len(cat_ids)
        category_of_item[v] = cat_ids[c_tok]

    # time order within each user/item list
    order = sorted(range(len(records)), key=lambda i: (records[i][2], i))
    pairs = np.array(
        [(user_ids[records[i][0]], item_ids[records[i][1]]) for i in order],
        dtype=np.int64,
    )

    return _assemble(
        num_users=len(user_ids),
        num_items=len(item_ids),
        num_categories=len(cat_ids),
        train_pairs=pairs,
        test_pairs=np.empty((0, 2), dtype=np.int64),
        category_of_item=category_of_item,
        user_tokens=list(user_ids),
        item_tokens=list(item_ids),
        category_tokens=list(cat_ids),
    )


def _assemble(
    num_users: int,
    num_items: int,
    num_categories: int,
    train_pairs: np.ndarray,
    test_pairs: np.ndarray,
    category_of_item: np.ndarray,
    user_tokens: list[str],
    item_tokens: list[str],
    category_tokens: list[str],
) -> InteractionCorpus:
    items_of_user: list[list[int]] = [[] for _ in range(num_users)]
    users_of_item: list[list[int]] = [[] for _ in range(num_items)]
    for u, v in train_pairs:
        items_of_user[u].append(int(v))
        users_of_item[v].append(int(u))
    return InteractionCorpus(
        num_users=num_users,
        num_items=num_items,
        num_categories=num_categories,
        train_pairs=np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2),
        test_pairs=np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2),
        items_of_user=[np.array(x, dtype=np.int64) for x in items_of_user],
        users_of_item=[np.array(x, dtype=np.int64) for x in users_of_item],
        category_of_item=np.asarray(category_of_item, dtype=np.int64),
        user_tokens=user_tokens,
        item_tokens=item_tokens,
        category_tokens=category_tokens,
    )


def split(corpus: InteractionCorpus, train_fraction: float, seed: int) -> InteractionCorpus:
    """Random per-user holdout split.

    Each user keeps ceil(train_fraction * n) interactions for training; the
    remainder goes to test. A user whose test share would round to empty
    keeps one test interaction when it has at least two interactions overall.
    Deterministic under a fixed seed.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    all_pairs = np.concatenate([corpus.train_pairs, corpus.test_pairs], axis=0)

    per_user: list[list[int]] = [[] for _ in range(corpus.num_users)]
    for idx, (u, _) in enumerate(all_pairs):
        per_user[u].append(idx)

    train_rows: list[int] = []
    test_rows: list[int] = []
    for u in range(corpus.num_users):
        rows = per_user[u]
        n = len(rows)
        if n == 0:
            continue
        # epsilon guards against float noise in e.g. 0.8 * 5
        n_train = math.ceil(train_fraction * n - 1e-9)
        n_train = min(max(n_train, 1), n)
        if n_train == n and n >= 2:
            n_train = n - 1
        perm = rng.permutation(n)
        chosen = set(perm[:n_train].tolist())
        for j, row in enumerate(rows):
            (train_rows if j in chosen else test_rows).append(row)

    train = all_pairs[np.array(sorted(train_rows), dtype=np.int64)] if train_rows else np.empty((0, 2), dtype=np.int64)
    test = all_pairs[np.array(sorted(test_rows), dtype=np.int64)] if test_rows else np.empty((0, 2), dtype=np.int64)
    return _assemble(
        num_users=corpus.num_users,
        num_items=corpus.num_items,
        num_categories=corpus.num_categories,
        train_pairs=train,
        test_pairs=test,
        category_of_item=corpus.category_of_item,
        user_tokens=corpus.user_tokens,
        item_tokens=corpus.item_tokens,
        category_tokens=corpus.category_tokens,
    )


def subsample_users(corpus: InteractionCorpus, num_users: int, seed: int) -> InteractionCorpus:
    """Corpus restricted to a random user subset (items/categories re-indexed)."""
    if num_users >= corpus.num_users:
        return corpus
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(corpus.num_users, size=num_users, replace=False))
    chosen_set = set(chosen.tolist())
    all_pairs = np.concatenate([corpus.train_pairs, corpus.test_pairs], axis=0)
    keep = np.array([u in chosen_set for u in all_pairs[:, 0]])
    pairs = all_pairs[keep]

    u_map = {int(old): new for new, old in enumerate(chosen)}
    old_items = sorted({int(v) for v in pairs[:, 1]})
    v_map = {old: new for new, old in enumerate(old_items)}
    remapped = np.array([(u_map[int(u)], v_map[int(v)]) for u, v in pairs], dtype=np.int64)

    old_cats = sorted({int(corpus.category_of_item[v]) for v in old_items})
    c_map = {old: new for new, old in enumerate(old_cats)}
    category_of_item = np.array(
        [c_map[int(corpus.category_of_item[v])] for v in old_items], dtype=np.int64
    )
    return _assemble(
        num_users=len(chosen),
        num_items=len(old_items),
        num_categories=len(old_cats),
        train_pairs=remapped,
        test_pairs=np.empty((0, 2), dtype=np.int64),
        category_of_item=category_of_item,
        user_tokens=[corpus.user_tokens[u] for u in chosen] if corpus.user_tokens else [],
        item_tokens=[corpus.item_tokens[v] for v in old_items] if corpus.item_tokens else [],
        category_tokens=[corpus.category_tokens[c] for c in old_cats] if corpus.category_tokens else [],
    )


# ---------------------------------------------------------------------------
# dataset adapters


def _movielens_interactions(path: Path) -> Iterator[tuple[str, str, float, float]]:
    with open(path, encoding="latin-1") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            user, item, rating, ts = line.split("::")
            yield user, item, float(rating), float(ts)


def _movielens_categories(path: Path) -> Iterator[tuple[str, str]]:
    # multi-genre items keep only the first listed genre
    with open(path, encoding="latin-1") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            item, _title, genres = line.split("::")
            yield item, genres.split("|")[0]


def _amazon_interactions(path: Path) -> Iterator[tuple[str, str, float, float | None]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            yield (
                rec["reviewerID"],
                rec["asin"],
                float(rec.get("overall", 1.0)),
                float(rec["unixReviewTime"]) if "unixReviewTime" in rec else None,
            )


def _amazon_categories(path: Path) -> Iterator[tuple[str, str]]:
    """Metadata lines -> (asin, category).

    Accepts either a plain ``category`` string, a flat ``category`` list, or
    the nested ``categories`` list-of-paths form; list forms use the first
    entry under the root of the first path (falling back to the root).
    """
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                rec = ast.literal_eval(line)  # classic metadata dumps are python literals
            cat = rec.get("category", rec.get("categories"))
            if cat is None:
                continue
            if isinstance(cat, str):
                label = cat
            else:
                path0 = cat[0] if cat and isinstance(cat[0], list) else cat
                if not path0:
                    continue
                label = path0[1] if len(path0) > 1 else path0[0]
            yield rec["asin"], str(label)


def _canonical_interactions(path: Path) -> Iterator[tuple[str, str, float, float | None]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            user, item = parts[0], parts[1]
            value = float(parts[2]) if len(parts) > 2 and parts[2] != "" else 1.0
            ts = float(parts[3]) if len(parts) > 3 and parts[3] != "" else None
            yield user, item, value, ts


def _canonical_categories(path: Path) -> Iterator[tuple[str, str]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            item, cat = line.split("\t")[:2]
            yield item, cat


def dataset_files(root: Path, fmt: str) -> tuple[Path, Path]:
    """Resolve the (interactions, categories) file pair for a dataset directory."""
    root = Path(root)
    if fmt == "movielens-1m":
        return root / "ratings.dat", root / "movies.dat"
    if fmt == "amazon-5core-json":
        return root / "reviews.json", root / "meta.json"
    if fmt == "canonical-tsv":
        return root / "interactions.tsv", root / "categories.tsv"
    raise ValueError(f"unknown dataset format {fmt!r}; expected one of {DATASET_FORMATS}")


def load_dataset(root: Path | str, fmt: str, min_core: int = 1) -> InteractionCorpus:
    """Ingest a dataset directory in one of the supported on-disk formats."""
    inter_path, cat_path = dataset_files(Path(root), fmt)
    for p in (inter_path, cat_path):
        if not p.exists():
            raise FileNotFoundError(f"dataset file not found: {p}")
    readers = {
        "movielens-1m": (_movielens_interactions, _movielens_categories),
        "amazon-5core-json": (_amazon_interactions, _amazon_categories),
        "canonical-tsv": (_canonical_interactions, _canonical_categories),
    }
    read_inter, read_cats = readers[fmt]
    return ingest(read_inter(inter_path), read_cats(cat_path), min_core=min_core)


# ---------------------------------------------------------------------------
# snapshots


def save_snapshot(corpus: InteractionCorpus, path: Path | str) -> None:
    np.savez_compressed(
        path,
        version=np.int64(SNAPSHOT_VERSION),
        num_users=np.int64(corpus.num_users),
        num_items=np.int64(corpus.num_items),
        num_categories=np.int64(corpus.num_categories),
        train_pairs=corpus.train_pairs,
        test_pairs=corpus.test_pairs,
        category_of_item=corpus.category_of_item,
        user_tokens=np.array(corpus.user_tokens, dtype=object),
        item_tokens=np.array(corpus.item_tokens, dtype=object),
        category_tokens=np.array(corpus.category_tokens, dtype=object),
    )


def load_snapshot(path: Path | str) -> InteractionCorpus:
    with np.load(path, allow_pickle=True) as data:
        version = int(data["version"])
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported corpus snapshot version {version}")
        return _assemble(
            num_users=int(data["num_users"]),
            num_items=int(data["num_items"]),
            num_categories=int(data["num_categories"]),
            train_pairs=data["train_pairs"],
            test_pairs=data["test_pairs"],
            category_of_item=data["category_of_item"],
            user_tokens=list(data["user_tokens"]),
            item_tokens=list(data["item_tokens"]),
            category_tokens=list(data["category_tokens"]),
        )
