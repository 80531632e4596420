"""Keyed nonlinear feature obfuscation for split inference.

A client holding a secret key shuffles the spatial positions of a CNN
feature map and pushes every position through a small key-derived ReLU
network (optionally projecting channels down) before shipping it to a
server.  This package implements that transform bit-reproducibly, plus the
measurement machinery around it: patient re-identification metrics, linear
probes and CAMs for downstream utility, key-compromise inversion attacks,
and noise / differential-privacy baselines, all runnable on synthetic or
imported feature tensors.
"""

__version__ = "0.1.0"

from .attacks import (
    AttackReport,
    GradAttackConfig,
    grad_attack,
    grad_attack_batch,
    knt_objective_grad,
    pinv_attack,
    pinv_solve,
)
from .baselines import DpConfig, add_gaussian_noise, dp_release, dp_sigma, l2_clip
from .keying import (
    PUBLIC_KEY,
    MasterKey,
    Xoshiro256StarStar,
    derive_seed,
    fold_seed,
    gaussian_stream,
    key_permutation,
    uniform_stream,
)
from .metrics import (
    MetricsReport,
    auc_from_scores,
    cosine,
    pearson,
    top1_retrieval,
    verification_auc,
)
from .probe import (
    LinearProbe,
    ProbeTrainConfig,
    cam_preservation,
    gap,
    probe_auc,
    spatial_cam,
    train_probe,
)
from .synthdata import Dataset, SynthConfig, generate, split_patient_disjoint
from .transform import (
    KntParams,
    TransformConfig,
    apply_batch,
    gen_params,
    knt_apply,
    mlp_forward,
    spatial_permute,
    spatial_unpermute,
)

__all__ = [
    "__version__",
    "MasterKey", "PUBLIC_KEY", "Xoshiro256StarStar",
    "derive_seed", "fold_seed", "uniform_stream", "gaussian_stream",
    "key_permutation",
    "TransformConfig", "KntParams", "gen_params", "spatial_permute",
    "spatial_unpermute", "mlp_forward", "knt_apply", "apply_batch",
    "cosine", "pearson", "auc_from_scores", "verification_auc",
    "top1_retrieval", "MetricsReport",
    "GradAttackConfig", "AttackReport", "pinv_solve", "pinv_attack",
    "knt_objective_grad", "grad_attack", "grad_attack_batch",
    "DpConfig", "add_gaussian_noise", "l2_clip", "dp_sigma", "dp_release",
    "LinearProbe", "ProbeTrainConfig", "gap", "train_probe", "probe_auc",
    "spatial_cam", "cam_preservation",
    "SynthConfig", "Dataset", "generate", "split_patient_disjoint",
]
