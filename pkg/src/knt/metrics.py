"""Privacy and utility measurement.

Re-identification is scored by cosine similarity between feature vectors:
verification AUC over same-patient / different-patient pairs (exact
Mann-Whitney rank statistic) and Top-1 gallery retrieval.  Feature vectors
come in two modes: "pooled" (channel means over spatial positions) and
"flattened" (the whole h*w*c map as one vector).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .keying import Xoshiro256StarStar, fold_seed

__all__ = [
    "DegenerateSimilarityWarning",
    "cosine",
    "auc_from_scores",
    "pearson",
    "feature_vectors",
    "sample_verification_pairs",
    "verification_auc",
    "top1_retrieval",
    "VerificationResult",
    "MetricsReport",
]

SIMILARITY_MODES = ("pooled", "flattened")


class DegenerateSimilarityWarning(UserWarning):
    """Raised (as a warning) when a similarity input is constant or zero."""


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors; 0.0 (with a warning) if either is zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("zero-norm vector in cosine", DegenerateSimilarityWarning,
                      stacklevel=2)
        return 0.0
    return float(a @ b / (na * nb))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Sample Pearson correlation; 0.0 (with a warning) if either input is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("need at least 2 points")
    ac = a - a.mean()
    bc = b - b.mean()
    va = ac @ ac
    vb = bc @ bc
    if va == 0.0 or vb == 0.0:
        warnings.warn("constant vector in pearson", DegenerateSimilarityWarning,
                      stacklevel=2)
        return 0.0
    return float(ac @ bc / np.sqrt(va * vb))


def _midranks(scores: np.ndarray) -> np.ndarray:
    # 1-based ranks, ties sharing their average rank.
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    boundaries = np.flatnonzero(sorted_scores[1:] != sorted_scores[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(scores)]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    return ranks


def auc_from_scores(pos_scores, neg_scores) -> float:
    """Exact AUC: fraction of (pos, neg) pairs with pos > neg, ties counted 1/2.

    Computed by midranks, which equals the brute-force pair count exactly.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need at least one positive and one negative score")
    ranks = _midranks(np.concatenate([pos, neg]))
    n_pos, n_neg = len(pos), len(neg)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def feature_vectors(features: np.ndarray, mode: str = "pooled") -> np.ndarray:
    """Reduce a batch (n, h, w, c) to per-sample vectors for similarity scoring."""
    if mode not in SIMILARITY_MODES:
        raise ValueError(f"mode must be one of {SIMILARITY_MODES}")
    if features.ndim != 4:
        raise ValueError("expected a batch of shape (n, h, w, c)")
    n = features.shape[0]
    if mode == "pooled":
        return features.astype(np.float64).mean(axis=(1, 2))
    return features.reshape(n, -1).astype(np.float64)


def _normalized(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return vectors / safe


def sample_verification_pairs(
    patient_ids: np.ndarray, n_same: int, n_diff: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministically sample index pairs for the verification protocol.

    Same-patient pairs are drawn uniformly without replacement from the set
    of all same-patient sample pairs; different-patient pairs by rejection
    sampling without replacement.  Returns (same_pairs, diff_pairs) as
    (k, 2) int arrays.
    """
    patient_ids = np.asarray(patient_ids)
    n = len(patient_ids)
    same_pool = []
    for pid in np.unique(patient_ids):
        idx = np.flatnonzero(patient_ids == pid)
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                same_pool.append((idx[a], idx[b]))
    if not same_pool:
        raise ValueError("no patient has at least 2 samples")
    if n_same > len(same_pool):
        raise ValueError(
            f"requested {n_same} same-patient pairs but only {len(same_pool)} exist"
        )
    stream = Xoshiro256StarStar(fold_seed(seed, "pairs-same"))
    pick = stream.permutation(len(same_pool))[:n_same]
    same = np.asarray([same_pool[i] for i in pick], dtype=np.int64)

    stream = Xoshiro256StarStar(fold_seed(seed, "pairs-diff"))
    seen: set[tuple[int, int]] = set()
    diff = []
    while len(diff) < n_diff:
        i = int(stream.next_u64() % np.uint64(n))
        j = int(stream.next_u64() % np.uint64(n))
        if i == j or patient_ids[i] == patient_ids[j]:
            continue
        pair = (min(i, j), max(i, j))
        if pair in seen:
            continue
        seen.add(pair)
        diff.append(pair)
    return same, np.asarray(diff, dtype=np.int64)


@dataclass(frozen=True)
class VerificationResult:
    auc: float
    n_same: int
    n_diff: int
    seed: int
    mode: str


def verification_auc(
    patient_ids: np.ndarray,
    features: np.ndarray,
    n_same: int = 500,
    n_diff: int = 500,
    seed: int = 0,
    mode: str = "pooled",
) -> VerificationResult:
    """Same-patient vs different-patient cosine AUC on sampled pairs.

    0.5 means the features carry no usable identity signal under this
    (unsupervised) attack; 1.0 means every same-patient pair outscores every
    different-patient pair.
    """
    vecs = _normalized(feature_vectors(features, mode))
    same, diff = sample_verification_pairs(patient_ids, n_same, n_diff, seed)
    pos = np.einsum("ij,ij->i", vecs[same[:, 0]], vecs[same[:, 1]])
    neg = np.einsum("ij,ij->i", vecs[diff[:, 0]], vecs[diff[:, 1]])
    return VerificationResult(
        auc=auc_from_scores(pos, neg), n_same=n_same, n_diff=n_diff,
        seed=seed, mode=mode,
    )


def top1_retrieval(
    gallery: np.ndarray,
    gallery_ids: np.ndarray,
    queries: np.ndarray,
    query_ids: np.ndarray,
) -> float:
    """Fraction of queries whose highest-cosine gallery entry is the right patient.

    Ties break to the lowest gallery index.  Gallery ids must be unique and
    every query patient must appear in the gallery.
    """
    gallery_ids = np.asarray(gallery_ids)
    query_ids = np.asarray(query_ids)
    if len(np.unique(gallery_ids)) != len(gallery_ids):
        raise ValueError("gallery patient ids must be unique")
    missing = np.setdiff1d(query_ids, gallery_ids)
    if len(missing):
        raise ValueError(f"query patients missing from gallery: {missing[:5]}")
    g = _normalized(np.asarray(gallery, dtype=np.float64).reshape(len(gallery), -1))
    q = _normalized(np.asarray(queries, dtype=np.float64).reshape(len(queries), -1))
    sims = q @ g.T
    best = np.argmax(sims, axis=1)  # argmax takes the first maximum: lowest index
    return float(np.mean(gallery_ids[best] == query_ids))


@dataclass
class MetricsReport:
    """One experiment row: re-identification and utility metrics plus provenance."""

    experiment_id: str
    method: str
    d: int
    num_layers: int
    verification_auc: float | None = None
    top1: float | None = None
    classification_auc: float | None = None
    n_pairs: int = 0
    n_queries: int = 0
    key_seed: int | None = None
    key_fingerprint: str | None = None
    eval_seed: int | None = None
    mode: str = "pooled"
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("verification_auc", "top1", "classification_auc"):
            value = getattr(self, name)
            if value is not None and not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} out of range: {value}")
