"""Non-keyed comparison defenses: additive Gaussian noise and DP release.

The DP baseline is the classical Gaussian mechanism on per-image L2-clipped
features: clip each feature map to the q-th percentile of training-set
norms, then add N(0, sigma^2 I) with sigma calibrated from (epsilon, delta)
and the clip norm as L2 sensitivity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .keying import Xoshiro256StarStar

__all__ = [
    "DpConfig",
    "add_gaussian_noise",
    "l2_clip",
    "quantile",
    "dp_sigma",
    "dp_parameters",
    "dp_release",
]


@dataclass(frozen=True)
class DpConfig:
    """Privacy budget and clipping rule for the Gaussian mechanism."""

    epsilon: float
    delta: float
    clip_quantile: float = 0.95

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")
        if not (0.0 < self.clip_quantile <= 1.0):
            raise ValueError("clip_quantile must lie in (0, 1]")


def add_gaussian_noise(F: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Elementwise F + N(0, sigma^2), noise drawn from the keyed stream."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return F.astype(np.float32, copy=True)
    noise = Xoshiro256StarStar(seed).gaussians(F.size, sigma).reshape(F.shape)
    return (F.astype(np.float32) + noise).astype(np.float32)


def l2_clip(F: np.ndarray, c: float) -> np.ndarray:
    """Scale the whole map down to L2 norm ``c`` if it exceeds it."""
    if c <= 0:
        raise ValueError("clip norm must be > 0")
    norm = float(np.linalg.norm(F.astype(np.float64)))
    if norm <= c:
        return F.astype(np.float32, copy=True)
    return (F.astype(np.float64) * (c / norm)).astype(np.float32)


def quantile(values, q: float) -> float:
    """Sorted-order linear-interpolation quantile (the clip-norm rule).

    With sorted values x[0..n-1], position p = (n-1)*q, the result is
    x[floor(p)] + (p - floor(p)) * (x[floor(p)+1] - x[floor(p)]).
    """
    values = np.sort(np.asarray(values, dtype=np.float64))
    if len(values) == 0:
        raise ValueError("empty value list")
    if not (0.0 <= q <= 1.0):
        raise ValueError("q must lie in [0, 1]")
    pos = (len(values) - 1) * q
    lo = int(math.floor(pos))
    if lo == len(values) - 1:
        return float(values[-1])
    frac = pos - lo
    return float(values[lo] + frac * (values[lo + 1] - values[lo]))


def dp_sigma(epsilon: float, delta: float, sensitivity: float) -> float:
    """Gaussian-mechanism noise scale: sensitivity * sqrt(2 ln(1.25/delta)) / epsilon.

    The classical calibration is only a formal (epsilon, delta) guarantee for
    epsilon <= 1; larger budgets are accepted with the same formula and the
    caller is expected to flag them in reports (see :func:`dp_parameters`).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    if sensitivity < 0:
        raise ValueError("sensitivity must be >= 0")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def dp_parameters(cfg: DpConfig, train_norms) -> dict:
    """Resolve the data-dependent release parameters (clip norm, sigma, flags)."""
    clip = quantile(train_norms, cfg.clip_quantile)
    return {
        "clip_norm": clip,
        "sigma": dp_sigma(cfg.epsilon, cfg.delta, clip),
        "epsilon": cfg.epsilon,
        "delta": cfg.delta,
        "clip_quantile": cfg.clip_quantile,
        # classical formula only formally valid for epsilon <= 1
        "epsilon_above_classical_range": cfg.epsilon > 1.0,
    }


def dp_release(F: np.ndarray, cfg: DpConfig, train_norms, seed: int) -> np.ndarray:
    """Clip to the training-quantile norm, then add calibrated Gaussian noise."""
    info = dp_parameters(cfg, train_norms)
    clipped = l2_clip(F, info["clip_norm"])
    return add_gaussian_noise(clipped, info["sigma"], seed)
