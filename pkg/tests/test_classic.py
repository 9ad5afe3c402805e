"""Query-expansion and k-reciprocal re-ranking against brute-force oracles."""

import numpy as np
import pytest

from acprank.classic import (KRConfig, QEConfig, alpha_qe, aqe,
                             estimate_kr_bytes, k_reciprocal_jaccard,
                             k_reciprocal_rerank, reciprocal_neighbor_sets)
from acprank.errors import ConfigError, ResourceBudgetError
from acprank.ranking import full_ranking, pairwise_distance, topk_neighbors

from oracles import brute_force_jaccard, naive_alpha_qe, naive_aqe


def _minmax_rows(d):
    lo = d.min(axis=1, keepdims=True)
    span = d.max(axis=1, keepdims=True) - lo
    span[span < 1e-12] = 1.0
    return (d - lo) / span


def assert_rankings_equal(rank_a, rank_b, dist_a, tie_tol=1e-9):
    """Rankings must agree except where the reference distances are tied
    within floating-point noise."""
    for q in range(rank_a.shape[0]):
        for p in np.flatnonzero(rank_a[q] != rank_b[q]):
            gap = abs(dist_a[q, rank_a[q, p]] - dist_a[q, rank_b[q, p]])
            assert gap < tie_tol, (
                f"query {q} rank {p}: {rank_a[q, p]} vs {rank_b[q, p]} "
                f"differ by distance gap {gap}")


class TestAQE:
    def test_k1_is_identity(self):
        emb = np.random.default_rng(0).normal(size=(8, 5))
        out = aqe(emb, QEConfig(k=1))
        np.testing.assert_allclose(out, emb, rtol=1e-12)

    def test_two_identical_vectors_unchanged(self):
        emb = np.tile(np.array([[1.0, 2.0, 2.0]]), (2, 1))
        out = aqe(emb, QEConfig(k=2))
        np.testing.assert_allclose(out, emb, rtol=1e-12)

    def test_matches_naive_oracle(self):
        emb = np.random.default_rng(1).normal(size=(10, 6))
        out = aqe(emb, QEConfig(k=3))
        np.testing.assert_allclose(out, naive_aqe(emb, 3), atol=1e-6)

    def test_k_out_of_range(self):
        emb = np.ones((4, 3))
        with pytest.raises(ConfigError):
            aqe(emb, QEConfig(k=5))

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(2)
        emb = rng.normal(size=(12, 4))
        perm = rng.permutation(12)
        out = aqe(emb, QEConfig(k=4))
        out_perm = aqe(emb[perm], QEConfig(k=4))
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-10)


class TestAlphaQE:
    def test_alpha0_ranking_equals_aqe(self):
        # Equal-norm rows, as the pipeline always feeds QE (cosine retrieval
        # embeddings); under that contract uniform power weights reduce the
        # weighted sum to a scaled mean.
        rng = np.random.default_rng(3)
        pool = rng.normal(size=(26, 8))
        pool /= np.linalg.norm(pool, axis=1, keepdims=True)
        a = aqe(pool, QEConfig(k=4))
        b = alpha_qe(pool, QEConfig(k=4, alpha=0.0))
        dist_a = pairwise_distance(a[:6], a[6:], "cosine")
        rank_a = full_ranking(dist_a)[0]
        rank_b = full_ranking(pairwise_distance(b[:6], b[6:], "cosine"))[0]
        assert_rankings_equal(rank_a, rank_b, dist_a)

    def test_large_alpha_dominated_by_self(self):
        rng = np.random.default_rng(4)
        emb = rng.normal(size=(10, 6))
        out = alpha_qe(emb, QEConfig(k=5, alpha=64.0))
        unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        sims = np.einsum("nd,nd->n", out, unit)
        assert np.all(sims > 0.99)

    def test_matches_naive_oracle(self):
        emb = np.random.default_rng(5).normal(size=(20, 7))
        out = alpha_qe(emb, QEConfig(k=5, alpha=3.0))
        np.testing.assert_allclose(out, naive_alpha_qe(emb, 5, 3.0), atol=1e-6)

    def test_weights_nonincreasing_in_rank(self):
        rng = np.random.default_rng(6)
        emb = rng.normal(size=(15, 5))
        unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        dist = pairwise_distance(unit, unit, "cosine")
        idx, _ = topk_neighbors(dist, 6)
        sims = np.clip(np.einsum("nd,nkd->nk", unit, unit[idx]), 0.0, 1.0)
        weights = sims ** 3.0
        assert np.all(np.diff(weights, axis=1) <= 1e-12)

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(7)
        emb = rng.normal(size=(12, 4))
        perm = rng.permutation(12)
        out = alpha_qe(emb, QEConfig(k=4, alpha=2.0))
        out_perm = alpha_qe(emb[perm], QEConfig(k=4, alpha=2.0))
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-10)


class TestKReciprocal:
    def test_lambda1_preserves_original_argsort(self):
        rng = np.random.default_rng(8)
        q, g = rng.normal(size=(5, 6)), rng.normal(size=(30, 6))
        final = k_reciprocal_rerank(q, g, KRConfig(k1=6, k2=2, lam=1.0))
        base = pairwise_distance(q, g, "euclidean")
        np.testing.assert_array_equal(full_ranking(final)[0], full_ranking(base)[0])

    def test_two_tight_clusters_separate(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=6) + np.array([10.0, 0, 0, 0, 0, 0])
        b = rng.normal(size=6) - np.array([10.0, 0, 0, 0, 0, 0])
        gallery = np.concatenate([
            a + 0.05 * rng.normal(size=(8, 6)),
            b + 0.05 * rng.normal(size=(8, 6)),
        ])
        probe = (a + 0.05 * rng.normal(size=6))[None, :]
        final = k_reciprocal_rerank(probe, gallery, KRConfig(k1=5, k2=2, lam=0.3))
        order = full_ranking(final)[0][0]
        assert set(order[:8].tolist()) == set(range(8))

    def test_jaccard_matches_brute_force_8pt(self):
        rng = np.random.default_rng(10)
        pts = rng.normal(size=(8, 4))
        dist = pairwise_distance(pts, pts, "euclidean")
        ours = k_reciprocal_jaccard(_minmax_rows(dist), k1=3, k2=2)
        oracle = brute_force_jaccard(dist, k1=3, k2=2)
        assert np.abs(ours - oracle).max() < 1e-6

    @pytest.mark.parametrize("n,k1,k2,seed", [(12, 4, 2, 11), (20, 6, 3, 12),
                                              (15, 5, 5, 13), (20, 7, 1, 14)])
    def test_jaccard_matches_brute_force_various(self, n, k1, k2, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(n, 5))
        dist = pairwise_distance(pts, pts, "euclidean")
        ours = k_reciprocal_jaccard(_minmax_rows(dist), k1=k1, k2=k2)
        oracle = brute_force_jaccard(dist, k1=k1, k2=k2)
        assert np.abs(ours - oracle).max() < 1e-6

    def test_stage_one_sets_are_symmetric(self):
        rng = np.random.default_rng(15)
        pts = rng.normal(size=(25, 4))
        dist = pairwise_distance(pts, pts, "euclidean")
        rank, _ = topk_neighbors(dist, 25)
        sets = reciprocal_neighbor_sets(rank, 6)
        for i, members in enumerate(sets):
            for j in members:
                assert i in sets[j], f"{j} in R({i}) but {i} not in R({j})"

    def test_memory_budget_fails_fast(self):
        rng = np.random.default_rng(16)
        q, g = rng.normal(size=(10, 4)), rng.normal(size=(40, 4))
        needed = estimate_kr_bytes(50, 10)
        with pytest.raises(ResourceBudgetError):
            k_reciprocal_rerank(q, g, KRConfig(k1=5, k2=2, max_bytes=needed - 1))
        # At exactly the estimate it must run.
        k_reciprocal_rerank(q, g, KRConfig(k1=5, k2=2, max_bytes=needed))

    def test_k1_must_be_below_gallery_size(self):
        rng = np.random.default_rng(17)
        with pytest.raises(ConfigError):
            k_reciprocal_rerank(rng.normal(size=(2, 3)), rng.normal(size=(5, 3)),
                                KRConfig(k1=5, k2=2))

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            KRConfig(k1=4, k2=5)
        with pytest.raises(ConfigError):
            KRConfig(k1=4, k2=2, lam=1.5)
        with pytest.raises(ConfigError):
            QEConfig(k=0)
        with pytest.raises(ConfigError):
            QEConfig(k=3, alpha=-1.0)
