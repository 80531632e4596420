"""Keyed feature-map obfuscation.

A feature map is a float32 array of shape (h, w, c): h*w spatial positions,
each carrying a c-channel vector.  The transform shuffles the positions with
a key-derived permutation, then pushes every position's channel vector
through the same key-derived multi-layer perceptron (ReLU after each layer;
the first layer may project c down to a smaller width d).

Matrix products accumulate in double precision and round to float32 on
store, so results do not depend on vectorization width or thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .keying import MasterKey, derive_seed, gaussian_stream, key_permutation

__all__ = [
    "TransformConfig",
    "KntParams",
    "gen_params",
    "spatial_permute",
    "spatial_unpermute",
    "mlp_forward",
    "knt_apply",
    "apply_batch",
]


@dataclass(frozen=True)
class TransformConfig:
    """Shape and ablation knobs for the keyed transform.

    ``dim=None`` keeps the input channel count (square layers, no
    compression).  ``nonlinear=False`` drops every ReLU, including the last
    one, giving the linear keyed ablation.  ``permute=False`` skips the
    spatial shuffle.  ``weight_std=None`` uses 1/sqrt(dim), which roughly
    preserves vector norms through each layer.
    """

    layers: int = 2
    dim: int | None = None
    nonlinear: bool = True
    permute: bool = True
    weight_std: float | None = None

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.dim is not None and self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.weight_std is not None and not self.weight_std > 0:
            raise ValueError("weight_std must be > 0")

    def out_dim(self, in_dim: int) -> int:
        return self.dim if self.dim is not None else in_dim


@dataclass(frozen=True)
class KntParams:
    """Key-derived parameters: one spatial permutation plus affine layers.

    ``layers[i]`` is a (weights, bias) pair with float32 weights of shape
    (d_out, d_in).  The first layer maps the input channel count to the
    output width d; all later layers are square d x d.  Immutable and safe
    to share across threads.
    """

    perm: np.ndarray
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self) -> None:
        if len(self.layers) < 1:
            raise ValueError("need at least one layer")
        if sorted(self.perm.tolist()) != list(range(len(self.perm))):
            raise ValueError("perm is not a bijection over 0..n-1")
        prev = self.layers[0][0].shape[1]
        for idx, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {idx + 1} has inconsistent shapes")
            if w.shape[1] != prev:
                raise ValueError(
                    f"layer {idx + 1} in_dim {w.shape[1]} != previous out_dim {prev}"
                )
            prev = w.shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def positions(self) -> int:
        return len(self.perm)

    @cached_property
    def _layers64(self) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        # Double-precision copies for the accumulation contract; cached so the
        # per-sample hot path does not re-convert 2 MB of weights every call.
        return tuple(
            (w.astype(np.float64), b.astype(np.float64)) for w, b in self.layers
        )


def gen_params(
    key: MasterKey, positions: int, in_dim: int, cfg: TransformConfig
) -> KntParams:
    """Generate all transform parameters for one key.

    Streams are domain-separated by label: "perm" for the shuffle, "W1"/"b1",
    "W2"/"b2", ... for the layers.  Weight matrices fill row-major.  Same key
    and config always give bitwise-identical parameters.
    """
    d = cfg.out_dim(in_dim)
    std = cfg.weight_std if cfg.weight_std is not None else 1.0 / math.sqrt(d)
    perm = key_permutation(derive_seed(key, "perm"), positions)
    layers = []
    d_in = in_dim
    for layer in range(1, cfg.layers + 1):
        w = gaussian_stream(derive_seed(key, f"W{layer}"), d * d_in, std)
        b = gaussian_stream(derive_seed(key, f"b{layer}"), d, std)
        layers.append((w.reshape(d, d_in), b))
        d_in = d
    return KntParams(perm=perm, layers=tuple(layers))


def _check_spatial(arr: np.ndarray, perm: np.ndarray) -> tuple[int, int]:
    if arr.ndim < 2:
        raise ValueError("expected an array with leading (h, w) axes")
    h, w = arr.shape[0], arr.shape[1]
    if h * w != len(perm):
        raise ValueError(f"permutation length {len(perm)} != positions {h * w}")
    return h, w


def spatial_permute(arr: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Shuffle spatial positions: output position i holds input position perm[i].

    Works on any array with leading (h, w) axes; channel vectors (or CAM
    scalars) move whole.
    """
    h, w = _check_spatial(arr, perm)
    flat = arr.reshape(h * w, *arr.shape[2:])
    return flat[perm].reshape(arr.shape)


def spatial_unpermute(arr: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`spatial_permute` for the same permutation."""
    h, w = _check_spatial(arr, perm)
    flat = arr.reshape(h * w, *arr.shape[2:])
    out = np.empty_like(flat)
    out[perm] = flat
    return out.reshape(arr.shape)


def mlp_forward(
    v: np.ndarray, params: KntParams, nonlinear: bool = True
) -> np.ndarray:
    """Push channel vector(s) through the keyed layers.

    ``v`` has shape (..., in_dim); the result has shape (..., out_dim) in
    float32.  With ``nonlinear`` every layer ends in ReLU (so the output is
    nonnegative); without it the chain is purely affine.
    """
    if v.shape[-1] != params.in_dim:
        raise ValueError(f"input width {v.shape[-1]} != layer in_dim {params.in_dim}")
    h = v.reshape(-1, params.in_dim).astype(np.float64)
    for w64, b64 in params._layers64:
        h = h @ w64.T + b64
        if nonlinear:
            np.maximum(h, 0.0, out=h)
    out = h.astype(np.float32)
    return out.reshape(*v.shape[:-1], params.out_dim)


def knt_apply(F: np.ndarray, params: KntParams, cfg: TransformConfig) -> np.ndarray:
    """Full keyed transform of one feature map: permute, then per-position MLP.

    Input (h, w, c) float32, output (h, w, d) float32.  The permutation is
    skipped when ``cfg.permute`` is false; ReLUs are controlled by
    ``cfg.nonlinear``.  Parameters are shared across positions, so the
    result equals stitching :func:`mlp_forward` over each position of the
    permuted map.
    """
    if F.ndim != 3:
        raise ValueError("feature map must have shape (h, w, c)")
    if F.shape[2] != params.in_dim:
        raise ValueError(f"channels {F.shape[2]} != params in_dim {params.in_dim}")
    x = spatial_permute(F, params.perm) if cfg.permute else F
    return mlp_forward(x, params, nonlinear=cfg.nonlinear)


def apply_batch(
    features: np.ndarray,
    params: KntParams,
    cfg: TransformConfig,
    threads: int = 1,
) -> np.ndarray:
    """Transform a batch of feature maps (n, h, w, c) -> (n, h, w, d).

    Each sample is processed by an independent pure call, so the output is
    byte-identical at any thread count.
    """
    if features.ndim != 4:
        raise ValueError("expected a batch of shape (n, h, w, c)")
    if threads <= 1 or len(features) <= 1:
        outs = [knt_apply(f, params, cfg) for f in features]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(lambda f: knt_apply(f, params, cfg), features))
    return np.stack(outs, axis=0)
