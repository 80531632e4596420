"""Experiment orchestration: defenses, protocols, sweeps, benchmarks.

Ties the pieces together the way the CLI runs them: pick a defense method,
apply it to a dataset (per key seed), then score re-identification,
downstream utility, or key-compromise recovery.  Everything here is
deterministic given the seeds in the call.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attacks import (
    AttackReport,
    GradAttackConfig,
    attack_eval,
    grad_attack_batch,
    pinv_attack,
)
from .baselines import DpConfig, add_gaussian_noise, dp_parameters, dp_release
from .keying import PUBLIC_KEY, MasterKey, derive_seed, fold_seed, key_permutation
from .metrics import MetricsReport, top1_retrieval, verification_auc, feature_vectors
from .probe import ProbeTrainConfig, gap, probe_auc, train_probe
from .synthdata import Dataset
from .transform import TransformConfig, apply_batch, gen_params, spatial_permute

__all__ = [
    "METHODS",
    "DefenseSpec",
    "resolve_key",
    "apply_defense",
    "gallery_split",
    "run_reid",
    "run_probe",
    "run_attack",
    "run_sweep",
    "run_bench",
]

METHODS = (
    "raw", "noise", "perm", "knt", "knt_nokey", "knt_linear", "knt_noperm", "dp",
)

#: Methods whose transform is derived from a secret key.
KEYED_METHODS = ("perm", "knt", "knt_linear", "knt_noperm")


@dataclass(frozen=True)
class DefenseSpec:
    """One fully-resolved defense: method plus every knob it needs."""

    method: str
    d: int | None = None
    layers: int = 2
    sigma: float = 3.0                 # "noise" method only
    dp: DpConfig | None = None         # "dp" method only
    weight_std: float | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; pick from {METHODS}")
        if self.method == "dp" and self.dp is None:
            raise ValueError("method 'dp' needs a DpConfig")

    def transform_config(self) -> TransformConfig:
        return TransformConfig(
            layers=self.layers,
            dim=self.d,
            nonlinear=self.method != "knt_linear",
            permute=self.method != "knt_noperm",
            weight_std=self.weight_std,
        )


def resolve_key(method: str, key: MasterKey | None, key_seed: int | None) -> MasterKey | None:
    """Pick the key a method will use (non-keyed methods get none)."""
    if method == "knt_nokey":
        return PUBLIC_KEY
    if method in KEYED_METHODS:
        if key is not None:
            return key
        if key_seed is not None:
            return MasterKey.from_seed(key_seed)
        raise ValueError(f"method {method!r} needs --key or a key seed")
    return None


def apply_defense(
    features: np.ndarray,
    spec: DefenseSpec,
    key: MasterKey | None = None,
    seed: int = 0,
    train_features: np.ndarray | None = None,
    threads: int = 1,
) -> tuple[np.ndarray, dict]:
    """Apply one defense to a batch of feature maps.

    ``seed`` drives per-sample noise streams (noise / dp).  The dp method
    derives its clip norm from ``train_features`` (fit on the training side,
    applied everywhere), so those must be supplied.  Returns the defended
    batch and an info dict for provenance.
    """
    n, h, w, c = features.shape
    info: dict = {"method": spec.method, "d": spec.d or c, "L": spec.layers}

    if spec.method == "raw":
        return features.astype(np.float32, copy=True), info

    if spec.method == "noise":
        out = np.stack([
            add_gaussian_noise(features[i], spec.sigma, fold_seed(seed, "noise", i))
            for i in range(n)
        ])
        info.update(sigma=spec.sigma, noise_seed=seed, d=c, L=0)
        return out, info

    if spec.method == "dp":
        if train_features is None:
            raise ValueError("dp defense needs train_features for the clip norm")
        norms = [float(np.linalg.norm(f.astype(np.float64))) for f in train_features]
        params = dp_parameters(spec.dp, norms)
        out = np.stack([
            dp_release(features[i], spec.dp, norms, fold_seed(seed, "dp", i))
            for i in range(n)
        ])
        info.update(dp=params, noise_seed=seed, d=c, L=0)
        return out, info

    if key is None:
        raise ValueError(f"method {spec.method!r} needs a key")
    info["key_fingerprint"] = key.fingerprint()

    if spec.method == "perm":
        perm = key_permutation(derive_seed(key, "perm"), h * w)
        out = np.stack([spatial_permute(features[i], perm) for i in range(n)])
        info.update(d=c, L=0)
        return out, info

    cfg = spec.transform_config()
    params = gen_params(key, h * w, c, cfg)
    out = apply_batch(features, params, cfg, threads=threads)
    info.update(d=params.out_dim, L=params.num_layers, nonlinear=cfg.nonlinear,
                permute=cfg.permute)
    return out, info


def gallery_split(patient_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First sample of each patient forms the gallery; the rest are queries."""
    patient_ids = np.asarray(patient_ids)
    seen: set = set()
    gallery, queries = [], []
    for i, pid in enumerate(patient_ids):
        if pid in seen:
            queries.append(i)
        else:
            seen.add(pid)
            gallery.append(i)
    return np.asarray(gallery, dtype=np.int64), np.asarray(queries, dtype=np.int64)


def _key_seed_list(spec: DefenseSpec, key_seeds) -> list[int | None]:
    # Methods without per-key variation run once.
    if spec.method in ("raw", "knt_nokey"):
        return [None]
    return list(key_seeds)


def run_reid(
    dataset: Dataset,
    spec: DefenseSpec,
    key_seeds=(0,),
    eval_seed: int = 0,
    mode: str = "pooled",
    n_same: int = 500,
    n_diff: int = 500,
    train_features: np.ndarray | None = None,
    threads: int = 1,
    experiment_id: str = "reid",
    key: MasterKey | None = None,
) -> list[MetricsReport]:
    """Verification AUC + Top-1 of the defended features, one report per seed.

    An explicit ``key`` overrides the per-seed derived keys (and collapses
    the grid to a single run for keyed methods).
    """
    reports = []
    seeds = [None] if key is not None else _key_seed_list(spec, key_seeds)
    for ks in seeds:
        key_ks = key if key is not None else resolve_key(spec.method, None, ks)
        defended, info = apply_defense(
            dataset.features, spec, key=key_ks, seed=ks or 0,
            train_features=train_features, threads=threads,
        )
        verif = verification_auc(
            dataset.patient_ids, defended, n_same=n_same, n_diff=n_diff,
            seed=eval_seed, mode=mode,
        )
        g_idx, q_idx = gallery_split(dataset.patient_ids)
        vecs = feature_vectors(defended, mode)
        top1 = top1_retrieval(
            vecs[g_idx], dataset.patient_ids[g_idx],
            vecs[q_idx], dataset.patient_ids[q_idx],
        )
        reports.append(MetricsReport(
            experiment_id=experiment_id,
            method=spec.method,
            d=info["d"],
            num_layers=info["L"],
            verification_auc=verif.auc,
            top1=top1,
            n_pairs=n_same + n_diff,
            n_queries=len(q_idx),
            key_seed=ks,
            key_fingerprint=info.get("key_fingerprint"),
            eval_seed=eval_seed,
            mode=mode,
            extra={k: v for k, v in info.items()
                   if k in ("sigma", "dp", "nonlinear", "permute")},
        ))
    return reports


def run_probe(
    train: Dataset,
    test: Dataset,
    spec: DefenseSpec,
    key_seeds=(0,),
    probe_cfg: ProbeTrainConfig | None = None,
    threads: int = 1,
    experiment_id: str = "probe",
    key: MasterKey | None = None,
) -> list[MetricsReport]:
    """Train a linear probe on defended train features, score macro AUC on test."""
    probe_cfg = probe_cfg or ProbeTrainConfig()
    reports = []
    seeds = [None] if key is not None else _key_seed_list(spec, key_seeds)
    for ks in seeds:
        key_ks = key if key is not None else resolve_key(spec.method, None, ks)
        defended_train, info = apply_defense(
            train.features, spec, key=key_ks, seed=ks or 0,
            train_features=train.features, threads=threads,
        )
        defended_test, _ = apply_defense(
            test.features, spec, key=key_ks, seed=fold_seed(ks or 0, "test"),
            train_features=train.features, threads=threads,
        )
        probe = train_probe(gap(defended_train), train.labels, probe_cfg)
        auc = probe_auc(probe, gap(defended_test), test.labels)
        reports.append(MetricsReport(
            experiment_id=experiment_id,
            method=spec.method,
            d=info["d"],
            num_layers=info["L"],
            classification_auc=auc,
            key_seed=ks,
            key_fingerprint=info.get("key_fingerprint"),
            eval_seed=probe_cfg.seed,
            extra={k: v for k, v in info.items() if k in ("sigma", "dp")},
        ))
    return reports


def run_attack(
    dataset: Dataset,
    attack: str,
    key_seeds=(0,),
    d: int | None = None,
    layers: int = 2,
    nonlinear: bool = True,
    grad_cfg: GradAttackConfig | None = None,
    n_samples: int | None = None,
    seed: int = 0,
    threads: int = 1,
) -> list[AttackReport]:
    """Key-compromise recovery: transform, hand the attacker the key, score.

    ``attack`` is "pinv" or "grad".  Retrieval asks whether the recovered
    features re-identify the patient in a reference database that holds the
    original features: the gallery is one original per patient, and the
    attacked samples are those same gallery entries (capped at
    ``n_samples``), so a perfect recovery scores Top-1 = 1.0 by matching its
    own original.
    """
    if attack not in ("pinv", "grad"):
        raise ValueError("attack must be 'pinv' or 'grad'")
    g_idx, _ = gallery_split(dataset.patient_ids)
    q_idx = g_idx if n_samples is None else g_idx[:n_samples]
    h, w, c = dataset.features.shape[1:]
    cfg = TransformConfig(layers=layers, dim=d, nonlinear=nonlinear)
    gallery = dataset.features[g_idx].reshape(len(g_idx), -1)

    reports = []
    for ks in key_seeds:
        key = MasterKey.from_seed(ks)
        params = gen_params(key, h * w, c, cfg)
        transformed = apply_batch(dataset.features[q_idx], params, cfg,
                                  threads=threads)
        start = time.perf_counter()
        if attack == "pinv":
            recovered = np.stack([pinv_attack(t, params) for t in transformed])
        else:
            recovered = grad_attack_batch(
                transformed, params, grad_cfg, seed=fold_seed(seed, "attack", ks),
                sample_ids=q_idx, nonlinear=nonlinear, threads=threads,
            )
        elapsed = time.perf_counter() - start
        report = attack_eval(
            recovered, dataset.features[q_idx], dataset.patient_ids[q_idx],
            gallery, dataset.patient_ids[g_idx],
            attack=attack + ("" if nonlinear else "-linear"),
            d=params.out_dim, num_layers=params.num_layers,
            wall_time_per_sample=elapsed / max(len(q_idx), 1),
            key_seed=ks, key_fingerprint=key.fingerprint(),
        )
        reports.append(report)
    return reports


def run_sweep(
    train: Dataset,
    test: Dataset,
    layer_grid=(1, 2, 3, 4),
    dim_grid=(None,),
    key_seeds=(0, 1, 2),
    eval_seed: int = 0,
    mode: str = "pooled",
    n_same: int = 500,
    n_diff: int = 500,
    probe_cfg: ProbeTrainConfig | None = None,
    threads: int = 1,
    verification_dataset: Dataset | None = None,
) -> list[dict]:
    """Grid over (layers, dim): per-cell mean/std verification and probe AUC.

    Cells run in a worker pool; output order is the grid order (layers major,
    dims minor) regardless of completion order.  Verification (which needs
    no training) runs on ``verification_dataset`` when given, the test side
    otherwise.
    """
    cells = [(L, d) for L in layer_grid for d in dim_grid]
    verif_ds = verification_dataset if verification_dataset is not None else test

    def run_cell(cell):
        L, d = cell
        spec = DefenseSpec(method="knt", d=d, layers=L)
        reid = run_reid(verif_ds, spec, key_seeds=key_seeds, eval_seed=eval_seed,
                        mode=mode, n_same=n_same, n_diff=n_diff)
        probe = run_probe(train, test, spec, key_seeds=key_seeds,
                          probe_cfg=probe_cfg)
        verifs = [r.verification_auc for r in reid]
        top1s = [r.top1 for r in reid]
        cls = [r.classification_auc for r in probe]
        return {
            "L": L,
            "d": d if d is not None else train.features.shape[-1],
            "n_key_seeds": len(key_seeds),
            "verif_auc_mean": float(np.mean(verifs)),
            "verif_auc_std": float(np.std(verifs)),
            "top1_mean": float(np.mean(top1s)),
            "cls_auc_mean": float(np.mean(cls)),
            "cls_auc_std": float(np.std(cls)),
        }

    if threads <= 1 or len(cells) == 1:
        return [run_cell(cell) for cell in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run_cell, cells))


def run_bench(
    h: int = 7,
    w: int = 7,
    c: int = 512,
    d: int | None = None,
    layers: int = 2,
    reps: int = 1000,
    warmup: int = 50,
    key_seed: int = 0,
) -> dict:
    """Median per-sample transform latency, single-threaded.

    BLAS pools are pinned to one thread when threadpoolctl is importable, so
    the number is comparable across machines.
    """
    from .keying import Xoshiro256StarStar
    from .transform import knt_apply

    cfg = TransformConfig(layers=layers, dim=d)
    params = gen_params(MasterKey.from_seed(key_seed), h * w, c, cfg)
    F = np.abs(
        Xoshiro256StarStar(fold_seed(key_seed, "bench-input"))
        .gaussians(h * w * c)
        .reshape(h, w, c)
    )

    def measure() -> list[float]:
        for _ in range(warmup):
            knt_apply(F, params, cfg)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            knt_apply(F, params, cfg)
            times.append(time.perf_counter() - t0)
        return times

    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=1):
            times = measure()
        pinned = True
    except ImportError:  # pragma: no cover
        times = measure()
        pinned = False

    times.sort()
    return {
        "h": h, "w": w, "c": c, "d": cfg.out_dim(c), "L": layers,
        "reps": reps,
        "median_ms": 1e3 * times[len(times) // 2],
        "p90_ms": 1e3 * times[int(len(times) * 0.9)],
        "single_threaded": pinned,
    }
