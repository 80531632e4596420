"""Key-compromise inversion attacks.

These model an adversary who holds the key and all derived parameters and
tries to recover the pre-transform features from a transmitted map.  Two
routes: closed-form least squares through the composite affine map (exact
for the linear ablation, garbage once ReLUs are involved), and iterative
gradient-based recovery with Adam restarts (works through ReLU, degrades
with projection).

The transform applies the same parameters at every spatial position, so the
joint inversion problem separates into independent per-position problems;
both attacks exploit that.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .keying import Xoshiro256StarStar, fold_seed
from .metrics import _normalized, top1_retrieval
from .optim import Adam
from .transform import KntParams, mlp_forward, spatial_unpermute

__all__ = [
    "GradAttackConfig",
    "AttackReport",
    "pinv_solve",
    "composite_affine",
    "pinv_attack",
    "knt_objective_grad",
    "estimate_input_mean",
    "grad_attack",
    "grad_attack_batch",
    "attack_eval",
]


@dataclass(frozen=True)
class GradAttackConfig:
    """Gradient inversion knobs.

    ``ridge`` is the L2 penalty on the recovered vector in the objective
    ||forward(f_hat) - g||^2 + ridge * ||f_hat||^2.  ``init_scale`` is the
    per-element std of the Gaussian restart initializations; the default
    matches the elementwise RMS of unit-scale rectified features.
    """

    steps: int = 2000
    restarts: int = 5
    ridge: float = 1e-4
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


def pinv_solve(A: np.ndarray, y: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    """Ridge least squares: minimize ||A x - y||^2 + ridge ||x||^2.

    Solves the normal equations (A^T A + ridge I) x = A^T y with a Cholesky
    factorization.  ``y`` may be a vector or a matrix of stacked right-hand
    sides (one per column).
    """
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError("A must be a matrix")
    if y.shape[0] != A.shape[0]:
        raise ValueError(f"rhs length {y.shape[0]} != rows {A.shape[0]}")
    gram = A.T @ A
    gram[np.diag_indices_from(gram)] += ridge
    try:
        factor = scipy.linalg.cho_factor(gram, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "normal equations not positive definite (rank-deficient map?); "
            "raise the ridge parameter"
        ) from exc
    return scipy.linalg.cho_solve(factor, A.T @ y, check_finite=False)


def composite_affine(params: KntParams) -> tuple[np.ndarray, np.ndarray]:
    """Collapse the layer chain into one affine map (M, c): x -> M x + c.

    Exactly the transform's action when every ReLU is removed.
    """
    layers = params._layers64
    m, c = layers[0][0].copy(), layers[0][1].copy()
    for w, b in layers[1:]:
        m = w @ m
        c = w @ c + b
    return m, c


def pinv_attack(G: np.ndarray, params: KntParams, ridge: float = 0.0) -> np.ndarray:
    """Closed-form inversion assuming the transform were affine.

    Treats the layer chain as the composite affine map and least-squares
    solves each position, then undoes the spatial permutation.  The same
    solve is applied whether or not the map was actually produced with
    ReLUs; when it was, the affine assumption is wrong and the recovered
    features are near-random.  That failure is the point being measured.

    The default ridge is 0: the composite of square Gaussian layers has
    small trailing singular values, and even a 1e-8 ridge visibly shrinks
    those directions.  Rank-deficient maps (d < c) need an explicit ridge;
    the solve fails with that advice otherwise.
    """
    if G.ndim != 3:
        raise ValueError("expected a feature map of shape (h, w, d)")
    if G.shape[2] != params.out_dim:
        raise ValueError(f"channels {G.shape[2]} != params out_dim {params.out_dim}")
    h, w, d = G.shape
    m, c = composite_affine(params)
    flat = G.reshape(h * w, d).astype(np.float64)
    solved = pinv_solve(m, (flat - c).T, ridge)  # (in_dim, h*w)
    estimate = solved.T.reshape(h, w, params.in_dim)
    return spatial_unpermute(estimate, params.perm).astype(np.float32)


def _objective(
    x: np.ndarray,
    params: KntParams,
    targets: np.ndarray,
    ridge: float,
    nonlinear: bool,
    want_grad: bool = True,
) -> tuple[np.ndarray, np.ndarray | None]:
    # Batched objective: rows of x are independent recovery problems.
    h = x
    pre_acts = []
    for w64, b64 in params._layers64:
        pre = h @ w64.T + b64
        pre_acts.append(pre)
        h = np.maximum(pre, 0.0) if nonlinear else pre
    residual = h - targets
    loss = np.einsum("ij,ij->i", residual, residual)
    if ridge:
        loss = loss + ridge * np.einsum("ij,ij->i", x, x)
    if not want_grad:
        return loss, None
    gh = 2.0 * residual
    for (w64, _), pre in zip(reversed(params._layers64), reversed(pre_acts)):
        if nonlinear:
            gh = gh * (pre > 0.0)  # subgradient at exactly 0 is 0
        gh = gh @ w64
    grad = gh + (2.0 * ridge) * x if ridge else gh
    return loss, grad


def knt_objective_grad(
    f_hat: np.ndarray,
    params: KntParams,
    g: np.ndarray,
    ridge: float = 1e-4,
    nonlinear: bool = True,
) -> tuple[float, np.ndarray] | tuple[np.ndarray, np.ndarray]:
    """Recovery objective and its exact gradient.

    ``f_hat`` is a candidate input vector (in_dim,) and ``g`` the observed
    output (out_dim,); batched rows are accepted too.  The gradient is the
    reverse-mode chain through the affine+ReLU layers, with the ReLU
    derivative at exactly 0 taken as 0.
    """
    f_hat = np.asarray(f_hat, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    single = f_hat.ndim == 1
    x = f_hat.reshape(-1, params.in_dim)
    t = g.reshape(-1, params.out_dim)
    if x.shape[0] != t.shape[0]:
        raise ValueError("f_hat and g batch sizes differ")
    loss, grad = _objective(x, params, t, ridge, nonlinear)
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def estimate_input_mean(G: np.ndarray, params: KntParams,
                        nonlinear: bool = True) -> float:
    """Attacker-side guess of the mean input activation.

    The attacker knows the parameters and that inputs are rectified
    (nonnegative) feature maps, so they can bisect for the constant input
    level m >= 0 whose forward image matches the observed output mean.
    Centering restart initializations there puts them in the right orthant,
    which matters a lot through stacked ReLUs.
    """
    target = float(np.asarray(G, dtype=np.float64).mean())
    ones = np.ones(params.in_dim, dtype=np.float64)

    def forward_mean(level: float) -> float:
        return float(mlp_forward(level * ones, params, nonlinear=nonlinear).mean())

    if forward_mean(0.0) >= target:
        return 0.0
    lo, hi = 0.0, 1.0
    while forward_mean(hi) < target:
        hi *= 2.0
        if hi > 1e9:
            return 0.0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if forward_mean(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class GradAttackResult:
    """Per-sample gradient attack output plus restart diagnostics."""

    estimate: np.ndarray          # (h, w, in_dim) float32
    initial_losses: np.ndarray    # (restarts, positions)
    final_losses: np.ndarray      # (restarts, positions)
    best_restart: np.ndarray      # (positions,)
    init_center: float = 0.0


def grad_attack(
    G: np.ndarray,
    params: KntParams,
    cfg: GradAttackConfig | None = None,
    seed: int = 0,
    sample_id: int = 0,
    nonlinear: bool = True,
) -> GradAttackResult:
    """Recover one sample's features by Adam through the known transform.

    Every (position, restart) trajectory is an independent row of a batched
    Adam run; initializations are Gaussian (std ``cfg.init_scale``) around
    the attacker's moment-matched input mean, drawn from streams pre-derived
    from (seed, sample_id, position, restart), so results are identical at
    any parallelism level.  The lowest-final-loss restart wins per position.
    """
    cfg = cfg or GradAttackConfig()
    if G.ndim != 3:
        raise ValueError("expected a feature map of shape (h, w, d)")
    if G.shape[2] != params.out_dim:
        raise ValueError(f"channels {G.shape[2]} != params out_dim {params.out_dim}")
    h, w, d = G.shape
    hw = h * w
    c_in = params.in_dim
    flat_g = G.reshape(hw, d).astype(np.float64)
    center = estimate_input_mean(G, params) if nonlinear else 0.0

    x = np.empty((cfg.restarts, hw, c_in), dtype=np.float64)
    for restart in range(cfg.restarts):
        for pos in range(hw):
            stream = Xoshiro256StarStar(
                fold_seed(seed, "grad-init", sample_id, pos, restart)
            )
            x[restart, pos] = center + stream.gaussians(c_in, cfg.init_scale)
    x = x.reshape(cfg.restarts * hw, c_in)
    targets = np.tile(flat_g, (cfg.restarts, 1))

    initial, _ = _objective(x, params, targets, cfg.ridge, nonlinear, want_grad=False)
    opt = Adam(x.shape, lr=cfg.learning_rate, beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.eps)
    for _ in range(cfg.steps):
        _, grad = _objective(x, params, targets, cfg.ridge, nonlinear)
        x = opt.step(x, grad)
    final, _ = _objective(x, params, targets, cfg.ridge, nonlinear, want_grad=False)

    final_rp = final.reshape(cfg.restarts, hw)
    ranked = np.where(np.isfinite(final_rp), final_rp, np.inf)
    dead = ~np.isfinite(ranked).any(axis=0)
    if dead.any():
        raise RuntimeError(
            f"gradient attack failed: all restarts non-finite at positions "
            f"{np.flatnonzero(dead)[:5].tolist()}"
        )
    best = np.argmin(ranked, axis=0)
    chosen = x.reshape(cfg.restarts, hw, c_in)[best, np.arange(hw)]
    estimate = spatial_unpermute(chosen.reshape(h, w, c_in), params.perm)
    return GradAttackResult(
        estimate=estimate.astype(np.float32),
        initial_losses=initial.reshape(cfg.restarts, hw),
        final_losses=final_rp,
        best_restart=best,
        init_center=center,
    )


def grad_attack_batch(
    maps: np.ndarray,
    params: KntParams,
    cfg: GradAttackConfig | None = None,
    seed: int = 0,
    sample_ids: np.ndarray | None = None,
    nonlinear: bool = True,
    threads: int = 1,
) -> np.ndarray:
    """Gradient attack over a batch (n, h, w, d) -> recovered (n, h, w, in_dim)."""
    if maps.ndim != 4:
        raise ValueError("expected a batch of shape (n, h, w, d)")
    if sample_ids is None:
        sample_ids = np.arange(len(maps))

    def one(i: int) -> np.ndarray:
        return grad_attack(
            maps[i], params, cfg, seed=seed, sample_id=int(sample_ids[i]),
            nonlinear=nonlinear,
        ).estimate

    if threads <= 1:
        outs = [one(i) for i in range(len(maps))]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(one, range(len(maps))))
    return np.stack(outs, axis=0)


@dataclass
class AttackReport:
    """Recovery quality of one attack run."""

    attack: str
    d: int
    num_layers: int
    mean_cosine: float
    std_cosine: float
    top1: float
    n_samples: int
    wall_time_per_sample: float | None = None
    key_seed: int | None = None
    key_fingerprint: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (-1.0 - 1e-9 <= self.mean_cosine <= 1.0 + 1e-9):
            raise ValueError(f"mean cosine out of range: {self.mean_cosine}")


def attack_eval(
    recovered: np.ndarray,
    originals: np.ndarray,
    patient_ids: np.ndarray,
    gallery: np.ndarray,
    gallery_ids: np.ndarray,
    attack: str = "",
    d: int = 0,
    num_layers: int = 0,
    wall_time_per_sample: float | None = None,
    key_seed: int | None = None,
    key_fingerprint: str | None = None,
) -> AttackReport:
    """Score recovered features against the originals.

    Per-sample cosine between the flattened recovered and original maps,
    plus Top-1 retrieval of the recovered features against a gallery of
    original features (one per patient): can the attacker re-identify the
    patient in another database from what they recovered?
    """
    if len(recovered) != len(originals) or len(recovered) != len(patient_ids):
        raise ValueError("recovered / originals / patient_ids must align")
    rec = _normalized(np.asarray(recovered, dtype=np.float64).reshape(len(recovered), -1))
    orig = _normalized(np.asarray(originals, dtype=np.float64).reshape(len(originals), -1))
    cosines = np.einsum("ij,ij->i", rec, orig)
    top1 = top1_retrieval(
        np.asarray(gallery).reshape(len(gallery), -1), gallery_ids,
        rec, patient_ids,
    )
    return AttackReport(
        attack=attack,
        d=d,
        num_layers=num_layers,
        mean_cosine=float(np.mean(cosines)),
        std_cosine=float(np.std(cosines)),
        top1=top1,
        n_samples=len(recovered),
        wall_time_per_sample=wall_time_per_sample,
        key_seed=key_seed,
        key_fingerprint=key_fingerprint,
    )
