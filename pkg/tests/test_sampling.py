from collections import Counter

import numpy as np
import pytest

from divrec.corpus import build_diversity_profile
from divrec.sampling import (
    ADAPTIVE,
    CONVENTIONAL,
    ReversedSampler,
    UniformSampler,
    draw_negatives,
    reversed_category_probs,
)
from divrec.toydata import synthetic_corpus

from conftest import corpus_from_pairs


def mixed_user_corpus():
    """Single user: 3 items of category a, 1 of b, plus 4 spare items for negatives."""
    pairs = [("u0", "a1"), ("u0", "a2"), ("u0", "a3"), ("u0", "b1")]
    cats = {"a1": "a", "a2": "a", "a3": "a", "b1": "b"}
    for j in range(4):
        cats[f"spare{j}"] = "a"
    log = [(u, v, 1.0, float(i)) for i, (u, v) in enumerate(pairs)]
    log += [("ghost", f"spare{j}", 1.0, float(10 + j)) for j in range(4)]
    from divrec.corpus import ingest

    return ingest(log, list(cats.items()))


class TestUniformSampler:
    def test_singleton_support(self):
        pairs = [("u0", "i0")]
        cats = {"i0": "c", "i1": "c"}
        from divrec.corpus import ingest

        corpus = ingest(
            [("u0", "i0", 1.0, 0.0), ("ghost", "i1", 1.0, 1.0)], list(cats.items())
        )
        sampler = UniformSampler(corpus, num_negatives=1, rng=np.random.default_rng(0))
        batch = sampler.sample(16)
        assert np.all(batch.users == 0) or set(batch.users.tolist()) <= {0, 1}
        for u, v in zip(batch.users, batch.positives):
            assert (int(u), int(v)) in corpus.train_pair_set()

    def test_batch_size_contract(self):
        corpus = synthetic_corpus(seed=0)
        sampler = UniformSampler(corpus, 3, np.random.default_rng(0))
        batch = sampler.sample(128)
        assert len(batch) == 128
        assert batch.negatives.shape == (128, 3)
        assert batch.branch_tag == CONVENTIONAL

    def test_pair_frequencies_uniform(self):
        # 2 users x 2 interacted items plus 2 ghost pairs -> 6 equally likely pairs
        from divrec.corpus import ingest

        log = [
            ("u0", "i0", 1.0, 0.0), ("u0", "i1", 1.0, 1.0),
            ("u1", "i0", 1.0, 2.0), ("u1", "i1", 1.0, 3.0),
            ("ghost", "i2", 1.0, 4.0), ("ghost", "i3", 1.0, 5.0),
        ]
        cats = {f"i{v}": "c" for v in range(4)}
        corpus = ingest(log, list(cats.items()))
        sampler = UniformSampler(corpus, 1, np.random.default_rng(42))
        counts = Counter()
        draws = 100_000
        done = 0
        while done < draws:
            batch = sampler.sample(min(5000, draws - done))
            for u, v in zip(batch.users, batch.positives):
                counts[(int(u), int(v))] += 1
            done += len(batch)
        four_pairs = [(0, 0), (0, 1), (1, 0), (1, 1)]
        ghost_pairs = draws - sum(counts[p] for p in four_pairs)
        for p in four_pairs:
            assert abs(counts[p] / draws - 1 / 6) < 0.01  # 6 observed pairs total
        assert abs(ghost_pairs / draws - 2 / 6) < 0.01

    def test_no_negative_is_observed(self):
        corpus = synthetic_corpus(seed=1)
        sampler = UniformSampler(corpus, 5, np.random.default_rng(3))
        batch = sampler.sample(200)
        for i in range(len(batch)):
            interacted = corpus.train_items_set(int(batch.users[i]))
            assert not any(int(n) in interacted for n in batch.negatives[i])

    def test_deterministic(self):
        corpus = synthetic_corpus(seed=2)
        a = UniformSampler(corpus, 4, np.random.default_rng(9)).sample(64)
        b = UniformSampler(corpus, 4, np.random.default_rng(9)).sample(64)
        assert np.array_equal(a.users, b.users)
        assert np.array_equal(a.positives, b.positives)
        assert np.array_equal(a.negatives, b.negatives)


class TestReversedProbs:
    def test_three_one_counts(self):
        corpus = mixed_user_corpus()
        rev, orig = reversed_category_probs(corpus, 0)
        cat_a = corpus.category_tokens.index("a")
        cat_b = corpus.category_tokens.index("b")
        assert rev[cat_a] == pytest.approx(0.25)
        assert rev[cat_b] == pytest.approx(0.75)
        assert orig[cat_a] == pytest.approx(0.75)
        assert orig[cat_b] == pytest.approx(0.25)
        assert sum(rev.values()) == pytest.approx(1.0, abs=1e-9)
        assert sum(orig.values()) == pytest.approx(1.0, abs=1e-9)

    def test_single_category_degenerate(self):
        corpus = corpus_from_pairs(
            [("u0", "i0"), ("u0", "i1")], {"i0": "only", "i1": "only"}
        )
        rev, orig = reversed_category_probs(corpus, 0)
        assert rev == {0: 1.0}
        assert orig == {0: 1.0}

    def test_balanced_counts_symmetric(self):
        corpus = corpus_from_pairs(
            [("u0", "i0"), ("u0", "i1"), ("u0", "i2"), ("u0", "i3")],
            {"i0": "a", "i1": "a", "i2": "b", "i3": "b"},
        )
        rev, orig = reversed_category_probs(corpus, 0)
        assert rev == pytest.approx({0: 0.5, 1: 0.5})
        assert orig == pytest.approx({0: 0.5, 1: 0.5})


class TestReversedSampler:
    def test_mixture_law_monte_carlo(self):
        # counts {a: 3, b: 1} gives d_u = 0.5; marginal P(a) = .5*.25 + .5*.75 = .5
        corpus = mixed_user_corpus()
        profile = build_diversity_profile(corpus)
        assert profile.diversity_of_user[0] == pytest.approx(0.5)
        sampler = ReversedSampler(corpus, profile, 1, np.random.default_rng(7))
        cat_a = corpus.category_tokens.index("a")
        count_a = total_mine = 0
        while total_mine < 100_000:
            batch = sampler.sample(5000)
            mine = batch.users == 0  # the ghost user's draws are off-topic
            cats = corpus.category_of_item[batch.positives[mine]]
            count_a += int((cats == cat_a).sum())
            total_mine += int(mine.sum())
        assert abs(count_a / total_mine - 0.5) < 0.01

    def test_single_category_user(self):
        corpus = corpus_from_pairs(
            [("u0", "i0"), ("u0", "i1"), ("u1", "i2")],
            {"i0": "only", "i1": "only", "i2": "other"},
        )
        profile = build_diversity_profile(corpus)
        sampler = ReversedSampler(corpus, profile, 1, np.random.default_rng(1))
        batch = sampler.sample(100)
        for u, v in zip(batch.users, batch.positives):
            if int(u) == 0:
                assert corpus.category_tokens[corpus.category_of_item[v]] == "only"

    def test_positive_comes_from_user_history(self):
        corpus = synthetic_corpus(seed=5)
        profile = build_diversity_profile(corpus)
        sampler = ReversedSampler(corpus, profile, 2, np.random.default_rng(2))
        batch = sampler.sample(256)
        assert batch.branch_tag == ADAPTIVE
        pair_set = corpus.train_pair_set()
        for u, v in zip(batch.users, batch.positives):
            assert (int(u), int(v)) in pair_set

    def test_deterministic(self):
        corpus = synthetic_corpus(seed=5)
        profile = build_diversity_profile(corpus)
        a = ReversedSampler(corpus, profile, 3, np.random.default_rng(4)).sample(64)
        b = ReversedSampler(corpus, profile, 3, np.random.default_rng(4)).sample(64)
        assert np.array_equal(a.users, b.users)
        assert np.array_equal(a.positives, b.positives)
        assert np.array_equal(a.negatives, b.negatives)


class TestDrawNegatives:
    def test_support_restriction(self):
        from divrec.corpus import ingest

        log = [("u0", f"i{v}", 1.0, float(v)) for v in range(3)]
        log += [("ghost", "i3", 1.0, 10.0), ("ghost", "i4", 1.0, 11.0)]
        corpus = ingest(log, [(f"i{v}", "c") for v in range(5)])
        negs = draw_negatives(corpus, 0, 2, np.random.default_rng(0))
        assert set(negs.tolist()) <= {3, 4}
        assert len(set(negs.tolist())) == 2

    def test_uniform_over_pool(self):
        from divrec.corpus import ingest

        log = [("u0", "i0", 1.0, 0.0)]
        log += [("ghost", f"i{v}", 1.0, float(v)) for v in range(1, 5)]
        corpus = ingest(log, [(f"i{v}", "c") for v in range(5)])
        rng = np.random.default_rng(11)
        counts = Counter()
        for _ in range(100_000):
            counts[int(draw_negatives(corpus, 0, 1, rng)[0])] += 1
        for v in range(1, 5):
            assert abs(counts[v] / 100_000 - 0.25) < 0.01

    def test_size_contract_large_pool(self):
        corpus = synthetic_corpus(num_users=5, num_items=3000, num_categories=5,
                                  min_interactions=8, max_interactions=10, seed=3)
        negs = draw_negatives(corpus, 0, 20, np.random.default_rng(0))
        assert len(negs) == 20
        assert len(set(negs.tolist())) == 20

    def test_small_pool_allows_duplicates(self):
        from divrec.corpus import ingest

        log = [("u0", "i0", 1.0, 0.0), ("ghost", "i1", 1.0, 1.0)]
        corpus = ingest(log, [("i0", "c"), ("i1", "c")])
        negs = draw_negatives(corpus, 0, 4, np.random.default_rng(0))
        assert set(negs.tolist()) == {1}

    def test_saturated_user_rejected(self):
        corpus = corpus_from_pairs([("u0", "i0")], {"i0": "c"})
        with pytest.raises(ValueError):
            draw_negatives(corpus, 0, 1, np.random.default_rng(0))
