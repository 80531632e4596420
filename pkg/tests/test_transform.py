"""Transform pipeline: permutation algebra, MLP contract, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knt.keying import MasterKey, gaussian_stream
from knt.metrics import cosine
from knt.probe import gap
from knt.transform import (
    KntParams,
    TransformConfig,
    apply_batch,
    gen_params,
    knt_apply,
    mlp_forward,
    spatial_permute,
    spatial_unpermute,
)

KEY = MasterKey.from_seed(0)


def random_map(h, w, c, seed=0):
    return np.abs(gaussian_stream(seed, h * w * c).reshape(h, w, c))


def identity_params(positions, dim, perm=None):
    eye = np.eye(dim, dtype=np.float32)
    zero = np.zeros(dim, dtype=np.float32)
    if perm is None:
        perm = np.arange(positions, dtype=np.int64)
    return KntParams(perm=perm, layers=((eye, zero),))


class TestConfigAndParams:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TransformConfig(layers=0)
        with pytest.raises(ValueError):
            TransformConfig(dim=0)

    def test_shapes_square(self):
        params = gen_params(KEY, 49, 64, TransformConfig(layers=2))
        assert [(w.shape, b.shape) for w, b in params.layers] == [
            ((64, 64), (64,)), ((64, 64), (64,)),
        ]

    def test_shapes_projection(self):
        # first layer projects 512 -> 128, later layers stay square
        params = gen_params(KEY, 49, 512, TransformConfig(layers=2, dim=128))
        assert params.layers[0][0].shape == (128, 512)
        assert params.layers[0][1].shape == (128,)
        assert params.layers[1][0].shape == (128, 128)
        assert params.in_dim == 512 and params.out_dim == 128

    def test_same_key_bitwise_identical(self):
        cfg = TransformConfig(layers=3, dim=32)
        a = gen_params(KEY, 49, 64, cfg)
        b = gen_params(KEY, 49, 64, cfg)
        np.testing.assert_array_equal(a.perm, b.perm)
        for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
            np.testing.assert_array_equal(wa, wb)
            np.testing.assert_array_equal(ba, bb)

    def test_weight_std_override(self):
        wide = gen_params(KEY, 4, 64, TransformConfig(weight_std=1.0))
        narrow = gen_params(KEY, 4, 64, TransformConfig(weight_std=0.125))
        ratio = wide.layers[0][0].astype(np.float64) / narrow.layers[0][0]
        np.testing.assert_allclose(ratio, 8.0, rtol=1e-5)

    def test_params_reject_non_bijection(self):
        eye = np.eye(2, dtype=np.float32)
        with pytest.raises(ValueError):
            KntParams(perm=np.array([0, 0]), layers=((eye, np.zeros(2, np.float32)),))


class TestPermutation:
    def test_identity_perm_is_noop(self):
        F = random_map(3, 3, 4)
        np.testing.assert_array_equal(spatial_permute(F, np.arange(9)), F)

    def test_single_position(self):
        F = random_map(1, 1, 8)
        np.testing.assert_array_equal(spatial_permute(F, np.array([0])), F)

    def test_two_position_swap(self):
        F = np.array([[[1.0]], [[2.0]]], dtype=np.float32)  # (2, 1, 1)
        out = spatial_permute(F, np.array([1, 0]))
        np.testing.assert_array_equal(out.ravel(), [2.0, 1.0])
        back = spatial_unpermute(out, np.array([1, 0]))
        np.testing.assert_array_equal(back, F)

    def test_round_trip_exact(self):
        F = random_map(7, 7, 8, seed=3)
        perm = gen_params(KEY, 49, 8, TransformConfig()).perm
        np.testing.assert_array_equal(
            spatial_unpermute(spatial_permute(F, perm), perm), F
        )

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32), st.integers(1, 6), st.integers(1, 6))
    def test_round_trip_property(self, seed, h, w):
        from knt.keying import key_permutation

        F = random_map(h, w, 3, seed=seed % 1000)
        perm = key_permutation(seed, h * w)
        np.testing.assert_array_equal(
            spatial_unpermute(spatial_permute(F, perm), perm), F
        )

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            spatial_permute(random_map(2, 2, 3), np.arange(3))

    def test_gap_invariance(self):
        F = random_map(7, 7, 16, seed=5)
        perm = gen_params(KEY, 49, 16, TransformConfig()).perm
        np.testing.assert_allclose(gap(spatial_permute(F, perm)), gap(F), atol=1e-6)

    def test_same_key_cosine_invariance(self):
        A = random_map(7, 7, 16, seed=1)
        B = random_map(7, 7, 16, seed=2)
        perm = gen_params(KEY, 49, 16, TransformConfig()).perm
        before = cosine(A.ravel(), B.ravel())
        after = cosine(spatial_permute(A, perm).ravel(),
                       spatial_permute(B, perm).ravel())
        assert abs(before - after) < 1e-9


class TestMlpForward:
    def test_identity_on_nonnegative(self):
        params = identity_params(1, 4)
        v = np.array([0.0, 1.0, 2.0, 3.0], dtype=np.float32)
        np.testing.assert_array_equal(mlp_forward(v, params, nonlinear=True), v)

    def test_relu_definition(self):
        params = identity_params(1, 2)
        v = np.array([-1.0, 2.0], dtype=np.float32)
        np.testing.assert_array_equal(mlp_forward(v, params, nonlinear=True), [0.0, 2.0])
        np.testing.assert_array_equal(mlp_forward(v, params, nonlinear=False), [-1.0, 2.0])

    def test_hand_network_against_straight_line_oracle(self):
        w1 = np.array([[1.0, -1.0], [0.5, 2.0]], dtype=np.float32)
        b1 = np.array([0.25, -0.5], dtype=np.float32)
        w2 = np.array([[2.0, 1.0], [-1.0, 1.0]], dtype=np.float32)
        b2 = np.array([0.0, 0.1], dtype=np.float32)
        params = KntParams(perm=np.arange(1), layers=((w1, b1), (w2, b2)))
        v = np.array([1.0, 1.0], dtype=np.float32)

        # independent straight-line evaluation
        h1 = np.maximum(w1.astype(np.float64) @ v + b1, 0.0)
        expected = np.maximum(w2.astype(np.float64) @ h1 + b2, 0.0)
        np.testing.assert_allclose(mlp_forward(v, params, nonlinear=True),
                                   expected.astype(np.float32), rtol=0, atol=0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mlp_forward(np.zeros(3, np.float32), identity_params(1, 4))


class TestKntApply:
    def test_full_identity_configuration(self):
        F = random_map(4, 4, 8, seed=9)
        cfg = TransformConfig(layers=1, nonlinear=False, permute=False)
        params = identity_params(16, 8)
        np.testing.assert_array_equal(knt_apply(F, params, cfg), F)

    def test_zero_input_constant_output(self):
        # parameters are shared across positions, so zero input gives the
        # same vector at every position
        cfg = TransformConfig(layers=2)
        params = gen_params(KEY, 9, 8, cfg)
        G = knt_apply(np.zeros((3, 3, 8), np.float32), params, cfg)
        np.testing.assert_array_equal(G, np.broadcast_to(G[0, 0], G.shape))

    def test_matches_per_position_oracle(self):
        F = random_map(2, 2, 2, seed=11)
        cfg = TransformConfig(layers=2)
        params = gen_params(KEY, 4, 2, cfg)
        G = knt_apply(F, params, cfg)
        permuted = spatial_permute(F, params.perm).reshape(4, 2)
        for i in range(4):
            np.testing.assert_array_equal(
                G.reshape(4, -1)[i], mlp_forward(permuted[i], params)
            )

    def test_output_nonnegative(self):
        cfg = TransformConfig(layers=2)
        params = gen_params(KEY, 49, 16, cfg)
        G = knt_apply(random_map(7, 7, 16, seed=4) - 0.5, params, cfg)
        assert (G >= 0).all()

    def test_noperm_skips_shuffle(self):
        F = random_map(3, 3, 4, seed=2)
        cfg = TransformConfig(layers=1, nonlinear=False, permute=False)
        params = gen_params(KEY, 9, 4, cfg)
        expected = mlp_forward(F, params, nonlinear=False)
        np.testing.assert_array_equal(knt_apply(F, params, cfg), expected)

    def test_channel_mismatch_rejected(self):
        cfg = TransformConfig()
        params = gen_params(KEY, 9, 4, cfg)
        with pytest.raises(ValueError):
            knt_apply(random_map(3, 3, 5), params, cfg)


class TestBatchDeterminism:
    def test_thread_counts_byte_identical(self):
        cfg = TransformConfig(layers=2, dim=8)
        params = gen_params(KEY, 16, 12, cfg)
        batch = np.stack([random_map(4, 4, 12, seed=s) for s in range(12)])
        reference = apply_batch(batch, params, cfg, threads=1)
        for threads in (4, 8):
            np.testing.assert_array_equal(
                apply_batch(batch, params, cfg, threads=threads), reference
            )

    def test_different_keys_different_outputs(self):
        cfg = TransformConfig(layers=2)
        F = random_map(4, 4, 8, seed=1)
        a = knt_apply(F, gen_params(MasterKey.from_seed(1), 16, 8, cfg), cfg)
        b = knt_apply(F, gen_params(MasterKey.from_seed(2), 16, 8, cfg), cfg)
        assert not np.array_equal(a, b)
