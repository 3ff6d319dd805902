"""Patch embedding and attention-stack behavior."""

import math

import numpy as np
import pytest

from tomatoseg import tensor as T
from tomatoseg.errors import ConfigError, ShapeError
from tomatoseg.transformer import (
    PatchConfig,
    PatchEmbedder,
    TransformerLayer,
    TransformerStack,
    assemble_patches,
    attention_head,
    cmsa,
    embed,
    encoder_layer,
    partition_patches,
    patch_side_from_count,
)


def t(data, grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float32), requires_grad=grad)


class TestPartition:
    def test_patch_side_formula(self):
        # 8x8 image cut into 16 patches must have side 2
        assert patch_side_from_count(8, 8, 16) == 2

    def test_side_must_be_integral(self):
        with pytest.raises(ShapeError):
            patch_side_from_count(8, 8, 5)

    def test_unit_patches(self):
        x = t(np.array([[1, 2], [3, 4]], np.float32).reshape(2, 2, 1))
        patches = partition_patches(x, 1)
        assert np.array_equal(patches.data, [[1], [2], [3], [4]])

    def test_partition_inverse(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (8, 12, 3)).astype(np.float32)
        patches = partition_patches(t(x), 4)
        back = assemble_patches(patches.data, 8, 12, 3, 4)
        assert np.array_equal(back, x)

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            partition_patches(t(np.ones((6, 6, 1))), 4)


class TestEmbed:
    def _embedder(self, n_p=4, width=8, dim=6, zero_pos=False, zero_proj=False):
        rng = np.random.default_rng(1)
        emb = PatchEmbedder.create(n_p, width, dim, rng)
        if zero_pos:
            emb.pos.data = np.zeros_like(emb.pos.data)
        if zero_proj:
            emb.proj.data = np.zeros_like(emb.proj.data)
        return emb

    def test_zero_patches_zero_positions(self):
        emb = self._embedder(zero_pos=True)
        out = embed(t(np.zeros((4, 8))), emb)
        assert np.all(out.data == 0)

    def test_zero_patches_nonzero_positions(self):
        emb = self._embedder()
        out = embed(t(np.zeros((4, 8))), emb)
        assert np.array_equal(out.data, emb.pos.data)

    def test_additivity(self):
        rng = np.random.default_rng(2)
        emb = self._embedder()
        patches = rng.uniform(-1, 1, (4, 8)).astype(np.float32)
        full = embed(t(patches), emb).data
        pos_only = embed(t(np.zeros((4, 8))), emb).data
        zero_pos = PatchEmbedder(emb.proj, t(np.zeros((4, 6))))
        patch_only = embed(t(patches), zero_pos).data
        assert np.allclose(full, patch_only + pos_only, atol=1e-6)

    def test_width_mismatch(self):
        emb = self._embedder()
        with pytest.raises(ShapeError):
            embed(t(np.zeros((4, 9))), emb)


class TestAttentionHead:
    def test_zero_logits_average_value(self):
        rng = np.random.default_rng(3)
        v = rng.uniform(-1, 1, (5, 4)).astype(np.float32)
        out, attn = attention_head(t(np.zeros((5, 4))), t(np.zeros((5, 4))), t(v), 16)
        assert np.allclose(out.data, np.tile(v.mean(axis=0), (5, 1)), atol=1e-6)
        assert np.allclose(attn.data, 1.0 / 5, atol=1e-6)

    def test_single_token_returns_value(self):
        rng = np.random.default_rng(4)
        q = rng.uniform(-1, 1, (1, 4)).astype(np.float32)
        v = rng.uniform(-1, 1, (1, 4)).astype(np.float32)
        out, _ = attention_head(t(q), t(q), t(v), 16)
        assert np.allclose(out.data, v, atol=1e-6)

    def test_identical_tokens_identical_rows(self):
        rng = np.random.default_rng(5)
        row_q = rng.uniform(-1, 1, 4)
        row_v = rng.uniform(-1, 1, 4)
        q = t(np.tile(row_q, (3, 1)))
        v = t(np.tile(row_v, (3, 1)))
        out, _ = attention_head(q, q, v, 16)
        assert np.allclose(out.data[0], out.data[1], atol=1e-7)
        assert np.allclose(out.data[1], out.data[2], atol=1e-7)

    def test_rows_stochastic(self):
        rng = np.random.default_rng(6)
        q = t(rng.uniform(-2, 2, (7, 8)))
        k = t(rng.uniform(-2, 2, (7, 8)))
        v = t(rng.uniform(-1, 1, (7, 8)))
        _, attn = attention_head(q, k, v, 8)
        assert np.abs(attn.data.sum(axis=-1) - 1.0).max() <= 1e-6
        assert attn.data.min() >= 0


class TestCMSA:
    def test_single_head_equals_full_width(self):
        cfg = PatchConfig(patch=2, embed_dim=8, heads=1, depth=1)
        layer = TransformerLayer.create(cfg, np.random.default_rng(7))
        rng = np.random.default_rng(8)
        x = t(rng.uniform(-1, 1, (5, 8)))
        got = cmsa(x, layer, cfg)
        q = T.matmul(x, layer.wq)
        k = T.matmul(x, layer.wk)
        v = T.matmul(x, layer.wv)
        want, _ = attention_head(q, k, v, 8)
        assert np.array_equal(got.data, want.data)

    def test_permutation_equivariance(self):
        cfg = PatchConfig(patch=2, embed_dim=8, heads=2, depth=1)
        layer = TransformerLayer.create(cfg, np.random.default_rng(9))
        rng = np.random.default_rng(10)
        x = rng.uniform(-1, 1, (6, 8)).astype(np.float32)
        perm = np.random.default_rng(11).permutation(6)
        out = cmsa(t(x), layer, cfg).data
        out_perm = cmsa(t(x[perm]), layer, cfg).data
        assert np.allclose(out_perm, out[perm], atol=1e-5)

    def test_output_dims(self):
        cfg = PatchConfig(patch=2, embed_dim=12, heads=3, depth=1)
        layer = TransformerLayer.create(cfg, np.random.default_rng(12))
        out = cmsa(t(np.random.default_rng(13).uniform(-1, 1, (9, 12))), layer, cfg)
        assert out.dims == (9, 12)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            PatchConfig(patch=2, embed_dim=10, heads=3, depth=1)


class TestQKScaling:
    def test_joint_scaling_squares(self):
        # scaling Q and K inputs by c multiplies pre-softmax logits by c^2/sqrt(l)
        rng = np.random.default_rng(14)
        l = 8
        q = rng.uniform(-1, 1, (4, l)).astype(np.float32)
        k = rng.uniform(-1, 1, (4, l)).astype(np.float32)
        c = 1.7
        base = (q @ k.T) / math.sqrt(l)
        scaled = ((c * q) @ (c * k).T) / math.sqrt(l)
        assert np.allclose(scaled, c * c * base, atol=1e-5)
        direct = T.scale(T.matmul(t(q), T.transpose(t(k))), 1.0 / math.sqrt(l))
        assert np.allclose(direct.data, base, atol=1e-6)


class TestEncoderLayer:
    def test_zero_weights_pure_residual(self):
        cfg = PatchConfig(patch=2, embed_dim=8, heads=2, depth=1)
        layer = TransformerLayer.create(cfg, np.random.default_rng(15))
        for w in (layer.wq, layer.wk, layer.wv, layer.ff1_w, layer.ff2_w):
            w.data = np.zeros_like(w.data)
        rng = np.random.default_rng(16)
        x = t(rng.uniform(-1, 1, (5, 8)))
        out = encoder_layer(x, layer, cfg)
        # attention output is zero, so the result is layernorm(x + 0)
        want = T.layernorm(x, layer.ln2_g, layer.ln2_b)
        assert np.allclose(out.data, want.data, atol=1e-6)

    def test_dims_preserved(self):
        cfg = PatchConfig(patch=2, embed_dim=16, heads=4, depth=1)
        layer = TransformerLayer.create(cfg, np.random.default_rng(17))
        x = t(np.random.default_rng(18).uniform(-1, 1, (10, 16)))
        assert encoder_layer(x, layer, cfg).dims == (10, 16)


class TestStack:
    def test_depth_one_equals_single_layer(self):
        cfg = PatchConfig(patch=4, embed_dim=8, heads=2, depth=1)
        stack = TransformerStack.create(8, 8, 3, cfg, np.random.default_rng(19))
        rng = np.random.default_rng(20)
        x = t(rng.uniform(0, 1, (8, 8, 3)))
        got = stack.forward(x)
        q = embed(partition_patches(x, 4), stack.embedder)
        want = encoder_layer(q, stack.layers[0], cfg)
        assert np.array_equal(got.data, want.data)

    def test_default_depth_output_dims(self):
        cfg = PatchConfig(patch=4, embed_dim=8, heads=2, depth=3)
        stack = TransformerStack.create(8, 8, 3, cfg, np.random.default_rng(21))
        x = t(np.random.default_rng(22).uniform(0, 1, (8, 8, 3)))
        assert stack.forward(x).dims == (4, 8)

    def test_deterministic_under_seed(self):
        def run():
            cfg = PatchConfig(patch=4, embed_dim=8, heads=2, depth=3)
            stack = TransformerStack.create(8, 8, 3, cfg, np.random.default_rng(23))
            x = T.Tensor(
                np.random.default_rng(24).uniform(0, 1, (8, 8, 3)).astype(np.float32)
            )
            return stack.forward(x).data

        assert np.array_equal(run(), run())

    def test_attention_rows_stochastic_through_stack(self):
        cfg = PatchConfig(patch=4, embed_dim=8, heads=2, depth=3)
        stack = TransformerStack.create(8, 8, 3, cfg, np.random.default_rng(25))
        x = t(np.random.default_rng(26).uniform(0, 1, (8, 8, 3)))
        attns = []
        stack.forward(x, collect_attn=attns)
        assert len(attns) == 3 * 2
        for attn in attns:
            assert np.abs(attn.data.sum(axis=-1) - 1.0).max() <= 1e-6
            assert attn.data.min() >= 0

    def test_depth_validation(self):
        with pytest.raises(ConfigError):
            PatchConfig(patch=4, embed_dim=8, heads=2, depth=0)
