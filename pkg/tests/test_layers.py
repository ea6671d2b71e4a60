import math

import numpy as np
import pytest

from dwvit.errors import CheckpointError, ConfigurationError, DegenerateStatisticsError, DimensionError
from dwvit.layers import (
    Attention,
    AttentionBlock,
    BatchNorm2d,
    FeedForward,
    FeedForwardBlock,
    LayerNorm,
    Linear,
    PatchEmbed,
    TokenSequence,
    TransformerBlock,
    ffn_block,
    layer_norm,
    mhsa_block,
)
from dwvit.tensor import Tensor


def test_linear_shapes_and_init(rng):
    layer = Linear(8, 3, rng)
    assert layer.weight.shape == (3, 8)
    assert np.abs(layer.weight.data).max() <= 0.04
    np.testing.assert_array_equal(layer.bias.data, np.zeros(3))
    assert layer(Tensor(np.ones((2, 5, 8), dtype=np.float32))).shape == (2, 5, 3)


def test_layer_norm_normalizes_last_axis(rng):
    norm = LayerNorm(6)
    out = norm(Tensor(rng.standard_normal((2, 4, 6)) * 5 + 3)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)


class TestBatchNorm2d:
    def test_single_value_per_channel_is_degenerate(self):
        bn = BatchNorm2d(3)
        with pytest.raises(DegenerateStatisticsError):
            bn(Tensor(np.ones((1, 3, 1, 1))))

    def test_eval_mode_allows_single_value(self):
        bn = BatchNorm2d(3).eval()
        out = bn(Tensor(np.full((1, 3, 1, 1), 2.0, dtype=np.float32)))
        np.testing.assert_allclose(out.data.ravel(), 2.0 / np.sqrt(1.0 + 1e-5), rtol=1e-6)

    def test_running_statistics_use_momentum_and_unbiased_variance(self, rng):
        bn = BatchNorm2d(2)
        x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        bn(Tensor(x))
        count = 4 * 3 * 3
        np.testing.assert_allclose(bn.running_mean.data, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
        np.testing.assert_allclose(
            bn.running_var.data,
            0.9 + 0.1 * x.var(axis=(0, 2, 3)) * count / (count - 1),
            rtol=1e-5,
        )

    def test_training_output_is_normalized(self, rng):
        bn = BatchNorm2d(2)
        out = bn(Tensor(rng.standard_normal((4, 2, 3, 3)) * 3 + 1)).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)

    def test_rejects_wrong_channel_count(self):
        with pytest.raises(DimensionError):
            BatchNorm2d(2)(Tensor(np.ones((2, 3, 2, 2))))

    def test_running_statistics_are_buffers(self):
        bn = BatchNorm2d(2)
        assert [name for name, _ in bn.named_parameters()] == ["gamma", "beta"]
        assert [name for name, _ in bn.named_buffers()] == ["running_mean", "running_var"]


def test_state_dict_round_trip(rng):
    block = TransformerBlock(8, 2, 16, rng)
    other = TransformerBlock(8, 2, 16, rng)
    other.load_state_dict(block.state_dict())
    for (name, a), (_, b) in zip(block.named_parameters(), other.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_load_state_dict_reports_missing_and_shape_mismatch(rng):
    layer = Linear(4, 2, rng)
    with pytest.raises(CheckpointError, match="missing"):
        layer.load_state_dict({"weight": np.zeros((2, 4))})
    with pytest.raises(CheckpointError, match="weight"):
        layer.load_state_dict({"weight": np.zeros((3, 4)), "bias": np.zeros(2)})


def test_patch_embed_orders_patches_row_major(rng):
    embed = PatchEmbed(4, 2, 1, 4, rng, use_class_token=False, use_pos_embed=False)
    # identity projection on the flattened 2x2 patch
    embed.proj.weight.data[:] = np.eye(4, dtype=np.float32)
    image = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    tokens = embed(Tensor(image)).tokens.data[0]
    np.testing.assert_array_equal(tokens[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(tokens[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(tokens[2], [8, 9, 12, 13])


def test_patch_embed_class_token_and_positions(rng):
    embed = PatchEmbed(8, 4, 3, 6, rng)
    seq = embed(Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32)))
    assert seq.tokens.shape == (2, 5, 6)
    assert seq.has_class_token and (seq.grid_h, seq.grid_w) == (2, 2)
    # zero images: class slot is cls_token + pos_embed[0], patch slots are pos_embed rows
    np.testing.assert_allclose(
        seq.tokens.data[1, 0], embed.cls_token.data + embed.pos_embed.data[0], rtol=1e-6
    )
    np.testing.assert_allclose(seq.tokens.data[0, 1:], embed.pos_embed.data[1:], rtol=1e-6)


def test_patch_embed_rejects_indivisible_image(rng):
    with pytest.raises(ConfigurationError):
        PatchEmbed(10, 4, 3, 8, rng)


def test_token_sequence_checks_grid():
    with pytest.raises(ConfigurationError, match="2x2 grid plus class token"):
        TokenSequence(Tensor(np.zeros((1, 4, 8))), True, 2, 2)


def test_attention_needs_divisible_heads(rng):
    with pytest.raises(ConfigurationError, match="divisible"):
        Attention(10, 3, rng)


def test_transformer_block_keeps_shape(rng):
    block = TransformerBlock(8, 2, 16, rng)
    seq = TokenSequence(Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32)), True, 2, 2)
    out = block(seq)
    assert out.tokens.shape == (2, 5, 8)
    assert out.has_class_token


def randomize_biases(module, rng):
    for name, param in module.named_parameters():
        if name.endswith("bias"):
            param.data[:] = rng.standard_normal(param.shape)


def layer_norm_rows(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mean = sum(row) / len(row)
        var = sum((v - mean) ** 2 for v in row) / len(row)
        out[i] = [(v - mean) / math.sqrt(var + eps) for v in row]
    return out


def attention_loops(x: np.ndarray, attn: Attention) -> np.ndarray:
    """Single-sample multi-head attention, one score at a time."""
    count, dim = x.shape
    head_dim = dim // attn.heads

    def project(layer, rows):
        return rows @ layer.weight.data.T + layer.bias.data

    q, k, v = project(attn.q, x), project(attn.k, x), project(attn.v, x)
    out = np.zeros_like(x)
    for h in range(attn.heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        for i in range(count):
            scores = [
                sum(q[i, c] * k[j, c] for c in range(cols.start, cols.stop)) / math.sqrt(head_dim)
                for j in range(count)
            ]
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            for j in range(count):
                out[i, cols] += weights[j] / total * v[j, cols]
    return project(attn.proj, out)


def feed_forward_loops(x: np.ndarray, ff: FeedForward) -> np.ndarray:
    out = np.zeros_like(x)
    for t, row in enumerate(x):
        hidden = [
            h * 0.5 * (1.0 + math.erf(h / math.sqrt(2.0)))
            for h in ff.fc1.weight.data @ row + ff.fc1.bias.data
        ]
        out[t] = ff.fc2.weight.data @ np.array(hidden) + ff.fc2.bias.data
    return out


def sequence(rng, batch=2, grid=2, dim=4, class_token=True, dtype=np.float64):
    count = grid * grid + int(class_token)
    tokens = Tensor(rng.standard_normal((batch, count, dim)).astype(dtype))
    return TokenSequence(tokens, class_token, grid, grid)


class TestAttentionBlock:
    def test_zero_projection_is_identity(self, rng):
        block = AttentionBlock(4, 2, rng)
        block.attn.proj.weight.data[:] = 0.0
        seq = sequence(rng, dtype=np.float32)
        np.testing.assert_array_equal(mhsa_block(seq, block).tokens.data, seq.tokens.data)

    @pytest.mark.parametrize("heads", [1, 2])
    def test_matches_loop_oracle(self, rng, heads):
        block = AttentionBlock(4, heads, rng, dtype=np.float64)
        randomize_biases(block, rng)
        x = rng.standard_normal((1, 3, 4))
        seq = TokenSequence(Tensor(x), False, 1, 3)
        expected = x[0] + attention_loops(layer_norm_rows(x[0]), block.attn)
        np.testing.assert_allclose(mhsa_block(seq, block).tokens.data[0], expected, rtol=1e-10, atol=1e-12)

    def test_attention_weights_sum_to_one(self, rng):
        attn = Attention(4, 1, rng, dtype=np.float64)
        for layer in (attn.q, attn.k):
            layer.weight.data[:] = 0.0
        # equal scores: every token gets the mean of the values
        attn.v.weight.data[:] = np.eye(4)
        attn.proj.weight.data[:] = np.eye(4)
        x = rng.standard_normal((1, 3, 4))
        out = attn(Tensor(x)).data[0]
        np.testing.assert_allclose(out, np.tile(x[0].mean(axis=0), (3, 1)), rtol=1e-12)


class TestFeedForwardBlock:
    def test_zero_weights_are_identity(self, rng):
        block = FeedForwardBlock(4, 8, rng)
        for layer in (block.ff.fc1, block.ff.fc2):
            layer.weight.data[:] = 0.0
        seq = sequence(rng, dtype=np.float32)
        np.testing.assert_array_equal(ffn_block(seq, block).tokens.data, seq.tokens.data)

    def test_matches_loop_oracle(self, rng):
        block = FeedForwardBlock(4, 8, rng, dtype=np.float64)
        randomize_biases(block, rng)
        x = rng.standard_normal((1, 3, 4))
        seq = TokenSequence(Tensor(x), False, 1, 3)
        expected = x[0] + feed_forward_loops(layer_norm_rows(x[0]), block.ff)
        np.testing.assert_allclose(ffn_block(seq, block).tokens.data[0], expected, rtol=1e-10, atol=1e-12)


def test_transformer_block_is_patch_permutation_equivariant(rng):
    block = TransformerBlock(4, 2, 8, rng, dtype=np.float64)
    randomize_biases(block, rng)
    seq = sequence(rng, grid=2)
    order = np.array([3, 0, 2, 1])
    permuted_tokens = np.concatenate([seq.tokens.data[:, :1], seq.tokens.data[:, 1:][:, order]], axis=1)
    out = block(seq).tokens.data
    permuted = block(seq.with_tokens(Tensor(permuted_tokens))).tokens.data
    # key order changes the summation order, so agreement is to rounding
    np.testing.assert_allclose(permuted[:, 0], out[:, 0], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(permuted[:, 1:], out[:, 1:][:, order], rtol=1e-12, atol=1e-14)


class TestLayerNormValues:
    def test_one_two_three(self):
        ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
        out = layer_norm(Tensor(np.array([1.0, 2.0, 3.0])), ones, zeros, eps=0.0).data
        np.testing.assert_allclose(out, [-math.sqrt(1.5), 0.0, math.sqrt(1.5)], rtol=1e-12)
        assert out[0] == pytest.approx(-1.22474, abs=1e-5)

    def test_invariant_to_a_constant_shift(self, rng):
        norm = LayerNorm(6, dtype=np.float64)
        x = rng.standard_normal((3, 6))
        np.testing.assert_allclose(norm(Tensor(x + 7.5)).data, norm(Tensor(x)).data, atol=1e-12)


class TestBatchNormValues:
    def test_eval_is_repeatable(self, rng):
        bn = BatchNorm2d(2)
        bn(Tensor(rng.standard_normal((4, 2, 3, 3)).astype(np.float32)))
        bn.eval()
        x = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32))
        running = bn.running_mean.data.copy()
        np.testing.assert_array_equal(bn(x).data, bn(x).data)
        np.testing.assert_array_equal(bn.running_mean.data, running)

    def test_constant_channel_gives_beta(self):
        bn = BatchNorm2d(2)
        bn.gamma.data[:] = [3.0, 4.0]
        bn.beta.data[:] = [0.5, -1.5]
        x = np.empty((2, 2, 3, 3), dtype=np.float32)
        x[:, 0], x[:, 1] = 2.0, -3.0
        out = bn(Tensor(x)).data
        np.testing.assert_array_equal(out[:, 0], np.full((2, 3, 3), 0.5, dtype=np.float32))
        np.testing.assert_array_equal(out[:, 1], np.full((2, 3, 3), -1.5, dtype=np.float32))
