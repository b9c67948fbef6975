import os
from pathlib import Path

import numpy as np
import pytest

from divrec.corpus import InteractionCorpus, ingest

# real datasets live outside the repo; point DIVREC_DATA_DIR at a directory
# containing ml-1m/ (ratings.dat, movies.dat) and amazon-music/ (reviews.json,
# meta.json) to enable the dataset-dependent tests
DATA_DIR = Path(os.environ.get("DIVREC_DATA_DIR", "data"))


def dataset_path(name: str) -> Path:
    return DATA_DIR / name


def require_dataset(name: str, files: tuple[str, ...]) -> Path:
    root = dataset_path(name)
    missing = [f for f in files if not (root / f).exists()]
    if missing:
        pytest.skip(f"dataset {name} not available under {root} (missing {missing})")
    return root


def corpus_from_pairs(
    pairs: list[tuple[str, str]],
    categories: dict[str, str],
    min_core: int = 1,
) -> InteractionCorpus:
    """Small-corpus helper: pairs in stream order, one category per item."""
    log = [(u, v, 1.0, float(i)) for i, (u, v) in enumerate(pairs)]
    return ingest(log, list(categories.items()), min_core=min_core)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
