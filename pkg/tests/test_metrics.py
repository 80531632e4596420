"""Similarity metrics and re-identification protocols.

AUC and retrieval are checked against brute-force oracles implemented
inline (quadratic pair counting, linear gallery scans).
"""

import numpy as np
import pytest

from knt.keying import MasterKey, gaussian_stream, key_permutation
from knt.metrics import (
    DegenerateSimilarityWarning,
    MetricsReport,
    auc_from_scores,
    cosine,
    feature_vectors,
    pearson,
    sample_verification_pairs,
    top1_retrieval,
    verification_auc,
)
from knt.transform import TransformConfig, gen_params, spatial_permute


def brute_force_auc(pos, neg):
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_force_top1(gallery, gallery_ids, queries, query_ids):
    hits = 0
    for q, qid in zip(queries, query_ids):
        best_idx, best_sim = 0, -np.inf
        for i, g in enumerate(gallery):
            sim = float(np.dot(q, g) / (np.linalg.norm(q) * np.linalg.norm(g)))
            if sim > best_sim:
                best_idx, best_sim = i, sim
        hits += gallery_ids[best_idx] == qid
    return hits / len(queries)


class TestCosine:
    def test_self_similarity(self):
        v = np.array([1.0, 2.0, -3.0])
        assert cosine(v, v) == 1.0

    def test_orthogonal(self):
        assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_direct_formula(self):
        assert cosine([1.0, 2.0], [2.0, 1.0]) == pytest.approx(0.8, abs=1e-15)

    def test_zero_vector_degenerate(self):
        with pytest.warns(DegenerateSimilarityWarning):
            assert cosine([0.0, 0.0], [1.0, 2.0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cosine([1.0], [1.0, 2.0])


class TestPearson:
    def test_affine_relation(self):
        a = np.array([1.0, 2.0, 5.0, 7.0])
        assert pearson(a, 2 * a + 3) == pytest.approx(1.0, abs=1e-12)

    def test_negation(self):
        a = np.array([1.0, 2.0, 5.0])
        assert pearson(a, -a) == pytest.approx(-1.0, abs=1e-12)

    def test_hand_value(self):
        assert pearson([1.0, 2.0, 3.0], [1.0, 3.0, 2.0]) == pytest.approx(0.5)

    def test_identical_inputs_exactly_one(self):
        values = gaussian_stream(12, 49).astype(np.float64)
        assert pearson(values, values.copy()) == 1.0

    def test_constant_degenerate(self):
        with pytest.warns(DegenerateSimilarityWarning):
            assert pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == 0.0


class TestAucFromScores:
    def test_full_separation(self):
        assert auc_from_scores([2.0, 3.0], [0.0, 1.0]) == 1.0

    def test_all_ties(self):
        assert auc_from_scores([1.0, 1.0], [1.0, 1.0]) == 0.5

    def test_interleaved(self):
        assert auc_from_scores([1.0, 3.0], [2.0]) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            auc_from_scores([], [1.0])

    def test_matches_brute_force_exactly(self):
        for trial in range(200):
            stream_seed = 1000 + trial
            n_pos = 1 + trial % 17
            n_neg = 1 + (trial * 7) % 23
            raw = gaussian_stream(stream_seed, n_pos + n_neg).astype(np.float64)
            raw = np.round(raw, 1)  # force plenty of ties
            pos, neg = raw[:n_pos], raw[n_pos:]
            assert auc_from_scores(pos, neg) == brute_force_auc(pos, neg)


class TestVerificationPairs:
    def test_deterministic(self):
        ids = np.repeat(np.arange(20), 3)
        a = sample_verification_pairs(ids, 30, 30, seed=5)
        b = sample_verification_pairs(ids, 30, 30, seed=5)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_pair_semantics(self):
        ids = np.repeat(np.arange(10), 3)
        same, diff = sample_verification_pairs(ids, 15, 15, seed=0)
        assert (ids[same[:, 0]] == ids[same[:, 1]]).all()
        assert (ids[diff[:, 0]] != ids[diff[:, 1]]).all()
        assert len({tuple(p) for p in same}) == 15
        assert len({tuple(p) for p in diff}) == 15

    def test_no_multisample_patient_rejected(self):
        with pytest.raises(ValueError):
            sample_verification_pairs(np.arange(10), 5, 5, seed=0)


class TestVerificationAuc:
    def test_identical_features_chance(self):
        ids = np.repeat(np.arange(10), 2)
        feats = np.ones((20, 2, 2, 3), dtype=np.float32)
        result = verification_auc(ids, feats, n_same=10, n_diff=10, seed=0)
        assert result.auc == 0.5

    def test_patient_one_hot_perfect(self):
        ids = np.repeat(np.arange(8), 2)
        feats = np.zeros((16, 1, 1, 8), dtype=np.float32)
        for i, pid in enumerate(ids):
            feats[i, 0, 0, pid] = 1.0
        result = verification_auc(ids, feats, n_same=8, n_diff=8, seed=0)
        assert result.auc == 1.0

    def test_rotation_invariance(self):
        ids = np.repeat(np.arange(12), 2)
        feats = gaussian_stream(3, 24 * 4).reshape(24, 1, 1, 4)
        feats = feats + 0.5 * feats[ids * 2]  # inject identity correlation
        base = verification_auc(ids, feats, n_same=12, n_diff=12, seed=1).auc
        # a common orthogonal rotation of every pooled vector
        q, _ = np.linalg.qr(gaussian_stream(9, 16).reshape(4, 4).astype(np.float64))
        rotated = (feats.reshape(24, 4) @ q.T).reshape(24, 1, 1, 4).astype(np.float32)
        assert verification_auc(ids, rotated, n_same=12, n_diff=12, seed=1).auc == \
            pytest.approx(base, abs=1e-9)

    def test_same_key_permutation_leaves_auc_unchanged(self):
        ids = np.repeat(np.arange(15), 2)
        feats = np.abs(gaussian_stream(4, 30 * 7 * 7 * 6)).reshape(30, 7, 7, 6)
        feats = (feats + 0.8 * feats[ids * 2]).astype(np.float32)
        perm = gen_params(MasterKey.from_seed(3), 49, 6, TransformConfig()).perm
        shuffled = np.stack([spatial_permute(f, perm) for f in feats])
        for mode in ("pooled", "flattened"):
            a = verification_auc(ids, feats, n_same=15, n_diff=15, seed=2, mode=mode).auc
            b = verification_auc(ids, shuffled, n_same=15, n_diff=15, seed=2, mode=mode).auc
            assert abs(a - b) < 1e-9


class TestTop1Retrieval:
    def test_queries_equal_gallery(self):
        gallery = gaussian_stream(5, 40).reshape(10, 4).astype(np.float64)
        ids = np.arange(10)
        assert top1_retrieval(gallery, ids, gallery.copy(), ids) == 1.0

    def test_all_identical_tie_break(self):
        gallery = np.ones((5, 3))
        queries = np.ones((10, 3))
        query_ids = np.array([0, 1, 2, 3, 4] * 2)
        # every similarity ties; lowest gallery index (patient 0) wins
        expected = np.mean(query_ids == 0)
        assert top1_retrieval(gallery, np.arange(5), queries, query_ids) == expected

    def test_matches_brute_force_scan(self):
        for trial in range(50):
            n_gal = 3 + trial % 7
            n_query = 2 + trial % 5
            gallery = gaussian_stream(trial, n_gal * 6).reshape(n_gal, 6).astype(np.float64)
            queries = gaussian_stream(trial + 999, n_query * 6).reshape(n_query, 6).astype(np.float64)
            gal_ids = np.arange(n_gal)
            q_ids = (np.arange(n_query) * 2) % n_gal
            fast = top1_retrieval(gallery, gal_ids, queries, q_ids)
            assert fast == brute_force_top1(gallery, gal_ids, queries, q_ids)

    def test_scale_invariance(self):
        gallery = gaussian_stream(8, 24).reshape(6, 4).astype(np.float64)
        queries = gaussian_stream(9, 12).reshape(3, 4).astype(np.float64)
        ids = np.arange(6)
        q_ids = np.array([0, 2, 4])
        base = top1_retrieval(gallery, ids, queries, q_ids)
        assert top1_retrieval(gallery, ids, queries * 17.0, q_ids) == base

    def test_duplicate_gallery_ids_rejected(self):
        with pytest.raises(ValueError):
            top1_retrieval(np.ones((2, 2)), [1, 1], np.ones((1, 2)), [1])

    def test_missing_query_patient_rejected(self):
        with pytest.raises(ValueError):
            top1_retrieval(np.ones((2, 2)), [0, 1], np.ones((1, 2)), [7])


class TestFeatureVectors:
    def test_modes(self):
        feats = np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4)
        pooled = feature_vectors(feats, "pooled")
        assert pooled.shape == (1, 4)
        flat = feature_vectors(feats, "flattened")
        assert flat.shape == (1, 24)
        with pytest.raises(ValueError):
            feature_vectors(feats, "other")


class TestMetricsReport:
    def test_range_validation(self):
        with pytest.raises(ValueError):
            MetricsReport(experiment_id="x", method="raw", d=4, num_layers=0,
                          verification_auc=1.5)
