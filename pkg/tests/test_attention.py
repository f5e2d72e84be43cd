"""The four attention mechanisms: closed-form degenerate cases, loop oracles,
shape/symmetry invariants, and finite-difference gradients."""

import numpy as np
import pytest

import oracles
from mimdit import tensor as T
from mimdit.attention import (
    AttentionParams,
    ChannelAttentionParams,
    SEParams,
    TokenSequence,
    channel_self_attention,
    se_attention,
    spatial_self_attention,
    swin_attention,
    window_partition,
    window_reverse,
)
from mimdit.errors import ConfigurationError, DimensionError, ParameterError
from mimdit.gradcheck import max_relative_error


def seq(values, grid=None):
    tokens = T.Tensor(values)
    if grid is None:
        grid = (1, tokens.shape[0])
    return TokenSequence(tokens, grid[0], grid[1])


def rand_seq(rng, grid, dim, requires_grad=False):
    h, w = grid
    tokens = T.Tensor(rng.standard_normal((h * w, dim)), requires_grad=requires_grad)
    return TokenSequence(tokens, h, w)


class TestTokenSequence:
    def test_grid_must_cover_tokens(self):
        with pytest.raises(DimensionError):
            TokenSequence(T.Tensor(np.ones((6, 3))), 2, 2)

    def test_rank_two_required(self):
        with pytest.raises(DimensionError):
            TokenSequence(T.Tensor(np.ones((2, 3, 4))), 2, 3)

    def test_with_tokens_keeps_grid(self):
        x = rand_seq(np.random.default_rng(0), (2, 3), 4)
        y = x.with_tokens(x.tokens * 2.0)
        assert (y.grid_height, y.grid_width) == (2, 3)
        assert y.length == 6 and y.dim == 4


class TestSpatialAttention:
    def test_single_token_collapses_to_value_path(self):
        rng = np.random.default_rng(1)
        p = AttentionParams(4, rng)
        x = rand_seq(rng, (1, 1), 4)
        out = spatial_self_attention(x, p)
        want = p.output(p.value(x.tokens))
        assert np.abs(out.tokens.data - want.data).max() < 1e-15

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        p = AttentionParams(6, rng)
        x = rng.standard_normal((5, 6))
        perm = rng.permutation(5)
        base = spatial_self_attention(seq(x, (1, 5)), p).tokens.data
        permuted = spatial_self_attention(seq(x[perm], (1, 5)), p).tokens.data
        assert np.abs(permuted - base[perm]).max() < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        p = AttentionParams(8, rng)
        x = rng.standard_normal((4, 8))
        out = spatial_self_attention(seq(x, (2, 2)), p).tokens.data
        assert np.abs(out - oracles.spatial_attention(x, p)).max() < 1e-10

    def test_two_heads_match_oracle(self):
        rng = np.random.default_rng(4)
        p = AttentionParams(8, rng, heads=2)
        x = rng.standard_normal((4, 8))
        out = spatial_self_attention(seq(x, (2, 2)), p).tokens.data
        assert np.abs(out - oracles.spatial_attention(x, p)).max() < 1e-10

    def test_dim_mismatch(self):
        rng = np.random.default_rng(5)
        with pytest.raises(DimensionError):
            spatial_self_attention(rand_seq(rng, (2, 2), 6), AttentionParams(4, rng))


class TestChannelAttention:
    def test_single_channel_collapses_to_value_path(self):
        rng = np.random.default_rng(6)
        p = ChannelAttentionParams(1, rng)
        x = rand_seq(rng, (1, 3), 1)
        out = channel_self_attention(x, p)
        want = p.output(p.value(x.tokens))
        assert np.abs(out.tokens.data - want.data).max() < 1e-15

    def test_spatial_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        p = ChannelAttentionParams(4, rng)
        x = rng.standard_normal((6, 4))
        perm = rng.permutation(6)
        base = channel_self_attention(seq(x, (1, 6)), p).tokens.data
        permuted = channel_self_attention(seq(x[perm], (1, 6)), p).tokens.data
        assert np.abs(permuted - base[perm]).max() < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        p = ChannelAttentionParams(4, rng)
        x = rng.standard_normal((6, 4))
        out = channel_self_attention(seq(x, (2, 3)), p).tokens.data
        assert np.abs(out - oracles.channel_attention(x, p)).max() < 1e-10

    def test_temperature_scales_affinity(self):
        rng = np.random.default_rng(9)
        p = ChannelAttentionParams(4, rng)
        x = rand_seq(rng, (2, 3), 4)
        cold = channel_self_attention(x, p).tokens.data
        p.temperature.data[:] = 25.0
        hot = channel_self_attention(x, p).tokens.data
        assert np.abs(cold - hot).max() > 1e-8

    def test_dim_mismatch(self):
        rng = np.random.default_rng(10)
        with pytest.raises(DimensionError):
            channel_self_attention(rand_seq(rng, (2, 2), 6), ChannelAttentionParams(4, rng))


class TestSwinAttention:
    def test_full_grid_window_equals_spatial(self):
        rng = np.random.default_rng(11)
        p = AttentionParams(4, rng)
        x = rand_seq(rng, (3, 3), 4)
        swin = swin_attention(x, p, window=3, shift=0).tokens.data
        plain = spatial_self_attention(x, p).tokens.data
        assert np.array_equal(swin, plain)

    def test_partition_reverse_roundtrip_bit_exact(self):
        rng = np.random.default_rng(12)
        tokens = T.Tensor(rng.standard_normal((16, 5)))
        windows = window_partition(tokens, 4, 4, 2)
        assert windows.shape == (4, 4, 5)
        back = window_reverse(windows, 4, 4, 2)
        assert np.array_equal(back.data, tokens.data)

    def test_partition_groups_window_rows(self):
        tokens = T.Tensor(np.arange(16.0).reshape(16, 1))
        windows = window_partition(tokens, 4, 4, 2)
        assert np.array_equal(windows.data[0, :, 0], [0.0, 1.0, 4.0, 5.0])
        assert np.array_equal(windows.data[3, :, 0], [10.0, 11.0, 14.0, 15.0])

    def test_shifted_matches_loop_oracle(self):
        rng = np.random.default_rng(13)
        p = AttentionParams(4, rng)
        x = rng.standard_normal((16, 4))
        out = swin_attention(seq(x, (4, 4)), p, window=2, shift=1).tokens.data
        want = oracles.swin_attention(x, 4, 4, p, window=2, shift=1)
        assert np.abs(out - want).max() < 1e-10

    def test_unshifted_matches_loop_oracle(self):
        rng = np.random.default_rng(14)
        p = AttentionParams(4, rng)
        x = rng.standard_normal((16, 4))
        out = swin_attention(seq(x, (4, 4)), p, window=2, shift=0).tokens.data
        want = oracles.swin_attention(x, 4, 4, p, window=2, shift=0)
        assert np.abs(out - want).max() < 1e-10

    def test_non_divisible_grid_rejected(self):
        rng = np.random.default_rng(15)
        p = AttentionParams(4, rng)
        with pytest.raises(ConfigurationError):
            swin_attention(rand_seq(rng, (3, 4), 4), p, window=2, shift=0)

    def test_shift_bounds(self):
        rng = np.random.default_rng(16)
        p = AttentionParams(4, rng)
        x = rand_seq(rng, (4, 4), 4)
        for shift in (-1, 2):
            with pytest.raises(ParameterError):
                swin_attention(x, p, window=2, shift=shift)


class TestSEAttention:
    def test_zero_excitation_scales_by_half(self):
        rng = np.random.default_rng(17)
        p = SEParams(8, rng)
        p.excite.weight.data[:] = 0.0
        p.excite.bias.data[:] = 0.0
        x = rand_seq(rng, (2, 2), 8)
        out = se_attention(x, p)
        assert np.array_equal(out.tokens.data, x.tokens.data * 0.5)

    def test_scales_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(18)
        p = SEParams(8, rng)
        x = rand_seq(rng, (2, 2), 8)
        out = se_attention(x, p).tokens.data
        ratio = out / x.tokens.data
        assert np.all(ratio > 0.0) and np.all(ratio < 1.0)

    def test_matches_oracle(self):
        rng = np.random.default_rng(19)
        p = SEParams(8, rng)
        x = rng.standard_normal((4, 8))
        out = se_attention(seq(x, (2, 2)), p).tokens.data
        assert np.abs(out - oracles.se_attention(x, p)).max() < 1e-12

    def test_bottleneck_reduction(self):
        rng = np.random.default_rng(20)
        p = SEParams(8, rng, reduction=4)
        assert p.squeeze.weight.shape == (8, 2)
        assert p.excite.weight.shape == (2, 8)

    def test_dim_mismatch(self):
        rng = np.random.default_rng(21)
        with pytest.raises(DimensionError):
            se_attention(rand_seq(rng, (2, 2), 6), SEParams(4, rng))


class TestSharedInvariants:
    def mechanisms(self, rng, dim):
        return [
            ("spatial", AttentionParams(dim, rng), lambda x, p: spatial_self_attention(x, p)),
            ("channel", ChannelAttentionParams(dim, rng), lambda x, p: channel_self_attention(x, p)),
            ("swin", AttentionParams(dim, rng), lambda x, p: swin_attention(x, p, window=2, shift=1)),
            ("se", SEParams(dim, rng), lambda x, p: se_attention(x, p)),
        ]

    def test_all_mechanisms_preserve_shape(self):
        rng = np.random.default_rng(22)
        for name, p, fn in self.mechanisms(rng, 8):
            x = rand_seq(rng, (4, 4), 8)
            out = fn(x, p)
            assert out.tokens.shape == (16, 8), name
            assert (out.grid_height, out.grid_width) == (4, 4), name

    def test_all_mechanism_gradients_pass_fd(self):
        rng = np.random.default_rng(23)
        for name, p, fn in self.mechanisms(rng, 4):
            x = rand_seq(rng, (2, 2), 4, requires_grad=True)
            weights = T.Tensor(rng.standard_normal((4, 4)))
            wrt = [x.tokens] + p.parameters()
            err = max_relative_error(lambda: T.tensor_sum(fn(x, p).tokens * weights), wrt)
            assert err < 1e-4, f"{name}: {err:.3e}"
