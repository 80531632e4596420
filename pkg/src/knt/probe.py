"""Server-side utility heads: linear multi-label probes and spatial CAMs.

A probe is a linear classifier on pooled (channel-mean) feature vectors,
trained with full-batch Adam on per-label binary cross-entropy.  A "spatial"
probe applies the same weights position by position instead; its per-class
activation map averages back to the classifier logit exactly, which is what
lets a key holder inverse-permute the map into the original coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .keying import Xoshiro256StarStar, fold_seed
from .metrics import auc_from_scores, pearson
from .optim import Adam
from .transform import KntParams, TransformConfig, knt_apply, spatial_unpermute

__all__ = [
    "LinearProbe",
    "ProbeTrainConfig",
    "gap",
    "train_probe",
    "predict_logits",
    "probe_auc",
    "spatial_cam",
    "cam_preservation",
]


def gap(F: np.ndarray) -> np.ndarray:
    """Global average pooling: per-channel mean over the spatial positions.

    Accepts one map (h, w, c) or a batch (n, h, w, c).  Permutation
    invariant up to accumulation order.
    """
    if F.ndim == 3:
        return F.mean(axis=(0, 1), dtype=np.float64).astype(np.float32)
    if F.ndim == 4:
        return F.mean(axis=(1, 2), dtype=np.float64).astype(np.float32)
    raise ValueError("expected (h, w, c) or (n, h, w, c)")


@dataclass(frozen=True)
class ProbeTrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int | None = None  # None = full batch
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class LinearProbe:
    """Trained linear head.

    For pooled probes the logit is x @ weights.T + bias.  For spatial probes
    (``pooled=False``) the stored bias is the whole-map bias; the logit is
    x @ weights.T + bias / positions, identical to averaging the per-position
    scores of :func:`spatial_cam`.
    """

    weights: np.ndarray            # (num_labels, dim) float64
    bias: np.ndarray               # (num_labels,) float64
    pooled: bool = True
    positions: int | None = None   # spatial probes only
    degenerate_labels: tuple[int, ...] = ()


def _bce_grad(z, y, active):
    # Mean BCE over samples and active labels; p - y is the logit gradient.
    p = expit(z)
    scale = 1.0 / (z.shape[0] * max(active.sum(), 1))
    g = (p - y) * scale
    g[:, ~active] = 0.0
    return g


def train_probe(
    x: np.ndarray,
    y: np.ndarray,
    cfg: ProbeTrainConfig | None = None,
    spatial_positions: int | None = None,
) -> LinearProbe:
    """Fit a multi-label linear probe on pooled feature vectors.

    ``x`` is (n, dim), ``y`` is (n, num_labels) with 0/1 entries.  Labels
    that are constant in the training set cannot be fit; they are excluded
    from the loss, pinned to the empirical prior logit, and flagged in
    ``degenerate_labels``.  Training is full-batch by default and bitwise
    deterministic given the config seed.
    """
    cfg = cfg or ProbeTrainConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise ValueError("expected aligned (n, dim) features and (n, labels) targets")
    if len(x) < 2:
        raise ValueError("need at least 2 training samples")
    if y.shape[1] < 1:
        raise ValueError("need at least 1 label")
    n, dim = x.shape
    k = y.shape[1]

    # Standardize inputs for optimization (rectified features carry a large
    # DC offset); the affine is folded back into (w, b) so the stored probe
    # is a plain linear head on raw pooled features.
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    x = (x - mu) / sd

    prior = y.mean(axis=0)
    active = (prior > 0.0) & (prior < 1.0)
    w = np.zeros((k, dim), dtype=np.float64)
    b = np.zeros(k, dtype=np.float64)

    opt_w = Adam(w.shape, lr=cfg.learning_rate)
    opt_b = Adam(b.shape, lr=cfg.learning_rate)
    order_seed = fold_seed(cfg.seed, "probe-shuffle")
    for epoch in range(cfg.epochs):
        if cfg.batch_size is None:
            batches = [np.arange(n)]
        else:
            perm = Xoshiro256StarStar(fold_seed(order_seed, epoch)).permutation(n)
            batches = [
                perm[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)
            ]
        for idx in batches:
            z = x[idx] @ w.T + b
            gz = _bce_grad(z, y[idx], active)
            gw = gz.T @ x[idx]
            if cfg.weight_decay:
                gw = gw + cfg.weight_decay * w
            w = opt_w.step(w, gw)
            b = opt_b.step(b, gz.sum(axis=0))

    w = w / sd
    b = b - w @ mu

    degenerate = tuple(int(i) for i in np.flatnonzero(~active))
    if degenerate:
        clipped = np.clip(prior, 1e-6, 1.0 - 1e-6)
        for i in degenerate:
            w[i] = 0.0
            b[i] = np.log(clipped[i] / (1.0 - clipped[i]))

    if spatial_positions is not None:
        return LinearProbe(
            weights=w, bias=b * spatial_positions, pooled=False,
            positions=spatial_positions, degenerate_labels=degenerate,
        )
    return LinearProbe(weights=w, bias=b, degenerate_labels=degenerate)


def predict_logits(probe: LinearProbe, x: np.ndarray) -> np.ndarray:
    """Classifier logits for pooled feature vectors (n, dim) -> (n, labels)."""
    x = np.asarray(x, dtype=np.float64)
    bias = probe.bias if probe.pooled else probe.bias / probe.positions
    return x @ probe.weights.T + bias


def probe_auc(probe: LinearProbe, x: np.ndarray, y: np.ndarray) -> float:
    """Macro AUC: per-label AUC of the sigmoid scores, averaged over labels.

    Labels with no positives or no negatives in the test set are skipped.
    """
    scores = expit(predict_logits(probe, x))
    y = np.asarray(y)
    aucs = []
    for label in range(y.shape[1]):
        mask = y[:, label] > 0
        if mask.all() or not mask.any():
            continue
        aucs.append(auc_from_scores(scores[mask, label], scores[~mask, label]))
    if not aucs:
        raise ValueError("every label is degenerate in the test set")
    return float(np.mean(aucs))


def spatial_cam(probe: LinearProbe, F: np.ndarray, label: int) -> np.ndarray:
    """Class activation map: per-position score w_k . f_i + b_k / (h*w).

    Requires a spatial probe.  The map's mean equals the classifier logit
    for the class, so inverse-permuting the map is all a key holder needs to
    read the attention in original coordinates.
    """
    if probe.pooled:
        raise ValueError("CAM extraction needs a probe trained as spatial")
    if F.ndim != 3:
        raise ValueError("expected a single feature map (h, w, c)")
    h, w, _ = F.shape
    if probe.positions != h * w:
        raise ValueError(f"probe positions {probe.positions} != map positions {h * w}")
    scores = F.astype(np.float64) @ probe.weights[label]
    return scores + probe.bias[label] / probe.positions


def cam_preservation(
    F: np.ndarray,
    params: KntParams,
    cfg: TransformConfig,
    probe_original: LinearProbe,
    probe_transformed: LinearProbe,
    label: int,
    key_available: bool,
) -> float:
    """Pearson correlation between original-feature and transformed-feature CAMs.

    The transformed-feature CAM is inverse-permuted first only when the key
    is available; without the key the attention lands in shuffled
    coordinates and the correlation collapses.
    """
    cam_orig = spatial_cam(probe_original, F, label)
    transformed = knt_apply(F, params, cfg)
    cam_trans = spatial_cam(probe_transformed, transformed, label)
    if key_available and cfg.permute:
        cam_trans = spatial_unpermute(cam_trans, params.perm)
    return pearson(cam_orig.ravel(), cam_trans.ravel())
