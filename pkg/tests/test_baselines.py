import numpy as np
import pytest

from divrec.baselines import cml_scorer, mmr_rerank, mmr_rerank_fn, train_cml
from divrec.corpus import build_diversity_profile, split
from divrec.metrics import evaluate
from divrec.toydata import synthetic_corpus
from divrec.training import TrainConfig


def cml_config(**kwargs):
    base = dict(batch_size=32, max_epochs=200, learning_rate=0.01,
                embedding_dim=8, num_aspects=1, negatives=5, seed=321)
    base.update(kwargs)
    return TrainConfig(**base)


class TestCml:
    def test_toy_convergence(self):
        corpus = split(synthetic_corpus(num_users=5, num_items=8, num_categories=3,
                                        min_interactions=4, max_interactions=6, seed=0),
                       0.8, 0)
        result = train_cml(corpus, cml_config())
        assert result.history[-1] <= 0.5 * result.history[0]

    def test_deterministic(self):
        corpus = split(synthetic_corpus(seed=1), 0.8, 1)
        cfg = cml_config(max_epochs=8)
        a = train_cml(corpus, cfg)
        b = train_cml(corpus, cfg)
        np.testing.assert_array_equal(a.params.user_embeddings, b.params.user_embeddings)
        np.testing.assert_array_equal(a.params.item_embeddings, b.params.item_embeddings)
        assert a.history == b.history

    def test_embeddings_stay_in_unit_ball(self):
        corpus = split(synthetic_corpus(seed=2), 0.8, 2)
        result = train_cml(corpus, cml_config(max_epochs=30, learning_rate=0.05))
        for table in (result.params.user_embeddings, result.params.item_embeddings):
            assert np.linalg.norm(table, axis=1).max() <= 1.0 + 1e-9

    def test_scorer_distance_properties(self, rng):
        corpus = split(synthetic_corpus(seed=3), 0.8, 3)
        result = train_cml(corpus, cml_config(max_epochs=3))
        score = cml_scorer(result.params)
        scores = score(0)
        assert scores.shape == (corpus.num_items,)
        assert np.all(scores <= 0.0)  # negated squared distances
        # distance zero iff embeddings coincide
        result.params.item_embeddings[5] = result.params.user_embeddings[0]
        assert score(0)[5] == pytest.approx(0.0, abs=1e-15)

    def test_evaluates_end_to_end(self):
        corpus = split(synthetic_corpus(seed=4), 0.8, 4)
        profile = build_diversity_profile(corpus)
        result = train_cml(corpus, cml_config(max_epochs=5))
        report = evaluate(cml_scorer(result.params), corpus, profile, (5,))
        assert 0.0 <= report.means[5]["recall"] <= 1.0


def brute_force_mmr(scores, cats, lam, k):
    """Greedy trace with explicit max-similarity bookkeeping."""
    n = len(scores)
    lo, hi = min(scores), max(scores)
    rel = [(s - lo) / (hi - lo) if hi > lo else 0.0 for s in scores]
    chosen = []
    remaining = list(range(n))
    while remaining and len(chosen) < k:
        best, best_val = None, None
        for v in remaining:
            sim = max((1.0 if cats[v] == cats[s] else 0.0 for s in chosen), default=0.0)
            val = lam * rel[v] - (1 - lam) * sim
            if best is None or val > best_val or (val == best_val and v < best):
                best, best_val = v, val
        chosen.append(best)
        remaining.remove(best)
    return chosen


class TestMmr:
    def test_lambda_one_is_pure_relevance(self, rng):
        scores = rng.normal(size=30)
        cats = rng.integers(0, 4, size=30)
        ranked = mmr_rerank(scores, cats, lam=1.0, k=10)
        expected = sorted(range(30), key=lambda v: (-scores[v], v))[:10]
        assert ranked.items.tolist() == expected

    def test_lambda_zero_maximizes_distinct_categories(self, rng):
        scores = rng.normal(size=24)
        cats = np.repeat(np.arange(6), 4)
        ranked = mmr_rerank(scores, cats, lam=0.0, k=6)
        assert len({int(c) for c in cats[ranked.items]}) == 6

    def test_six_item_hand_instance(self):
        scores = np.array([5.0, 4.0, 3.5, 3.0, 2.0, 1.0])
        cats = np.array([0, 0, 1, 0, 1, 2])
        ranked = mmr_rerank(scores, cats, lam=0.8, k=4)
        expected = brute_force_mmr(scores.tolist(), cats.tolist(), 0.8, 4)
        assert ranked.items.tolist() == expected

    def test_matches_bruteforce_on_random_instances(self, rng):
        for _ in range(25):
            n = int(rng.integers(5, 40))
            scores = rng.normal(size=n)
            cats = rng.integers(0, 5, size=n)
            lam = float(rng.uniform())
            k = int(rng.integers(1, n + 1))
            ranked = mmr_rerank(scores, cats, lam=lam, k=k)
            expected = brute_force_mmr(scores.tolist(), cats.tolist(), lam, k)
            assert ranked.items.tolist() == expected

    def test_no_duplicates_and_caps_at_k(self, rng):
        scores = rng.normal(size=12)
        cats = rng.integers(0, 3, size=12)
        ranked = mmr_rerank(scores, cats, lam=0.5, k=7)
        assert len(ranked.items) == 7
        assert len(set(ranked.items.tolist())) == 7

    def test_shorter_list_when_candidates_run_out(self, rng):
        scores = rng.normal(size=10)
        cats = rng.integers(0, 3, size=10)
        ranked = mmr_rerank(scores, cats, lam=0.5, k=8, candidates=np.arange(4))
        assert len(ranked.items) == 4

    def test_lambda_validated(self):
        with pytest.raises(ValueError):
            mmr_rerank(np.ones(3), np.zeros(3, dtype=int), lam=1.5, k=2)

    def test_constant_scores_fall_back_to_id_order(self):
        scores = np.ones(5)
        cats = np.array([0, 0, 1, 1, 2])
        ranked = mmr_rerank(scores, cats, lam=1.0, k=3)
        assert ranked.items.tolist() == [0, 1, 2]

    def test_rerank_fn_skips_train_items(self, rng):
        corpus = split(synthetic_corpus(seed=5), 0.8, 5)
        fn = mmr_rerank_fn(corpus.category_of_item, lam=0.8)
        scores = rng.normal(size=corpus.num_items)
        train_items = corpus.items_of_user[0]
        top = fn(0, scores, train_items, 10)
        assert not set(top.tolist()) & set(train_items.tolist())
