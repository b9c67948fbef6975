"""Deterministic synthetic datasets for smoke tests and CLI demos.

Users get a home category and a concentration level, so diversity scores
spread over (0, 1] and the domain skew is nontrivial. Usable either as an
in-memory corpus or as canonical-TSV files on disk.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .corpus import InteractionCorpus, ingest


def _generate(num_users, num_items, num_categories, min_interactions, max_interactions, seed):
    rng = np.random.default_rng(seed)
    category_of_item = np.arange(num_items) % num_categories
    items_by_cat = [np.flatnonzero(category_of_item == c) for c in range(num_categories)]

    interactions: list[tuple[str, str, float, float]] = []
    t = 0.0
    for u in range(num_users):
        home = int(rng.integers(num_categories))
        concentration = float(rng.uniform(0.3, 0.95))
        n = int(rng.integers(min_interactions, max_interactions + 1))
        chosen: set[int] = set()
        while len(chosen) < n:
            if rng.random() < concentration:
                v = int(rng.choice(items_by_cat[home]))
            else:
                v = int(rng.integers(num_items))
            if v not in chosen:
                chosen.add(v)
                interactions.append((f"u{u}", f"i{v}", 1.0, t))
                t += 1.0
    categories = [(f"i{v}", f"c{category_of_item[v]}") for v in range(num_items)]
    return interactions, categories


def synthetic_corpus(
    num_users: int = 30,
    num_items: int = 40,
    num_categories: int = 5,
    min_interactions: int = 8,
    max_interactions: int = 16,
    seed: int = 7,
) -> InteractionCorpus:
    """In-memory corpus (everything in the train partition)."""
    interactions, categories = _generate(
        num_users, num_items, num_categories, min_interactions, max_interactions, seed
    )
    return ingest(interactions, categories, min_core=1)


def write_toy_dataset(
    out_dir: Path | str,
    num_users: int = 30,
    num_items: int = 40,
    num_categories: int = 5,
    min_interactions: int = 8,
    max_interactions: int = 16,
    seed: int = 7,
) -> Path:
    """Write the synthetic dataset as canonical-TSV files; returns the directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    interactions, categories = _generate(
        num_users, num_items, num_categories, min_interactions, max_interactions, seed
    )
    with open(out / "interactions.tsv", "w") as fh:
        for u, v, val, ts in interactions:
            fh.write(f"{u}\t{v}\t{val:g}\t{ts:g}\n")
    with open(out / "categories.tsv", "w") as fh:
        for v, c in categories:
            fh.write(f"{v}\t{c}\n")
    return out


if __name__ == "__main__":
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else "toy-dataset"
    path = write_toy_dataset(target)
    print(f"wrote toy dataset to {path}")
