"""Segmentation network structure, fusion, decoder, and persistence."""

import numpy as np
import pytest

from tomatoseg import tensor as T
from tomatoseg.checkpoint import load_checkpoint, read_entries, save_checkpoint, write_entries
from tomatoseg.errors import CheckpointError, ConfigError, ShapeError
from tomatoseg.model import RB, SPB, ArchConfig, SegModel

TINY = ArchConfig(
    rows=16,
    cols=16,
    channels=3,
    classes=3,
    widths=(4, 6),
    spb_counts=(1, 2),
    patch=4,
    embed_dim=8,
    heads=2,
    depth=1,
)


def tiny_model(seed=0, **overrides):
    from dataclasses import replace

    return SegModel.create(replace(TINY, **overrides), seed=seed)


def rand_image(seed, arch=TINY):
    rng = np.random.default_rng(seed)
    return T.Tensor(rng.uniform(0, 1, (arch.rows, arch.cols, arch.channels)).astype(np.float32))


class TestArchConfig:
    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            ArchConfig(rows=48, cols=48, widths=(4, 4, 4, 4, 4), spb_counts=(1, 1, 1, 1, 1))

    def test_default_block_totals(self):
        arch = ArchConfig()
        assert sum(arch.spb_counts) == 11
        assert arch.levels == 5

    def test_backbone_hook_rejects_unknown(self):
        with pytest.raises(ConfigError):
            ArchConfig(backbone_id="resnet101")

    def test_widths_counts_must_align(self):
        with pytest.raises(ConfigError):
            ArchConfig(widths=(4, 8), spb_counts=(1, 1, 1), rows=32, cols=32)


class TestSPB:
    def test_shape_preserved(self):
        spb = SPB.create(np.random.default_rng(0), 3, 5)
        x = T.Tensor(np.random.default_rng(1).uniform(0, 1, (12, 10, 3)).astype(np.float32))
        out = spb.forward(x, training=True)
        assert out.dims == (12, 10, 5)

    def test_pure_residual_with_zero_convs(self):
        spb = SPB.create(np.random.default_rng(2), 4, 4)
        for unit in spb.units:
            unit.w.data = np.zeros_like(unit.w.data)
        x = T.Tensor(np.random.default_rng(3).uniform(0, 1, (8, 8, 4)).astype(np.float32))
        out = spb.forward(x, training=True)
        assert np.array_equal(out.data, x.data)

    def test_block_counts(self):
        spb = SPB.create(np.random.default_rng(4), 4, 4)
        assert len(spb.units) == 4  # 4 convs, 4 batchnorms (2 ReLUs in forward)


class TestRB:
    def test_halves_spatial(self):
        rb = RB.create(np.random.default_rng(5), 4)
        x = T.Tensor(np.random.default_rng(6).uniform(0, 1, (32, 32, 4)).astype(np.float32))
        pooled, idx, pre = rb.forward(x, training=True)
        assert pooled.dims == (16, 16, 4)
        assert pre.dims == (32, 32, 4)

    def test_indices_pair_with_unpool(self):
        rb = RB.create(np.random.default_rng(7), 4)
        x = T.Tensor(np.random.default_rng(8).uniform(0, 1, (8, 8, 4)).astype(np.float32))
        pooled, idx, _ = rb.forward(x, training=True)
        up = T.max_unpool2x2(pooled, idx)
        again, _ = T.maxpool2x2(up)
        assert np.array_equal(again.data, pooled.data)

    def test_odd_dims_rejected(self):
        rb = RB.create(np.random.default_rng(9), 4)
        x = T.Tensor(np.ones((7, 8, 4), np.float32))
        with pytest.raises(ShapeError):
            rb.forward(x, training=True)


class TestEncoder:
    def test_latent_dims_default_widths(self):
        arch = ArchConfig(rows=64, cols=64)
        model = SegModel.create(arch, seed=0)
        f_e, skips, indices = model.encoder_forward(rand_image(0, arch), training=False)
        assert f_e.dims == (2, 2, 256)
        assert len(skips) == 5 and len(indices) == 5

    def test_skips_strictly_decreasing(self):
        model = tiny_model()
        _, skips, _ = model.encoder_forward(rand_image(1), training=False)
        spatial = [s.dims[0] * s.dims[1] for s in skips]
        assert spatial == sorted(spatial, reverse=True)
        assert all(a > b for a, b in zip(spatial, spatial[1:]))

    def test_deterministic(self):
        a = tiny_model(seed=3)
        b = tiny_model(seed=3)
        x = rand_image(2)
        fa, _, _ = a.encoder_forward(x, training=False)
        fb, _, _ = b.encoder_forward(x, training=False)
        assert np.array_equal(fa.data, fb.data)


class TestFuse:
    def test_zero_projection_is_neutral(self):
        model = tiny_model()
        model.fuse_proj.w.data = np.zeros_like(model.fuse_proj.w.data)
        model.fuse_proj.b.data = np.zeros_like(model.fuse_proj.b.data)
        x = rand_image(4)
        f_e, _, _ = model.encoder_forward(x, training=False)
        p_t = model.stack.forward(x)
        f_d = model.fuse(f_e, p_t)
        assert np.array_equal(f_d.data, f_e.data)

    def test_ablation_bypasses_fuse(self):
        model = tiny_model(use_transformer=False)
        assert model.stack is None
        out = model.forward(rand_image(5))
        assert out.dims == (16, 16, 3)

    def test_dims_contract(self):
        model = tiny_model()
        x = rand_image(6)
        f_e, _, _ = model.encoder_forward(x, training=False)
        f_d = model.fuse(f_e, model.stack.forward(x))
        assert f_d.dims == f_e.dims

    def test_non_square_grid_rejected(self):
        model = tiny_model()
        f_e = T.Tensor(np.zeros((4, 4, 6), np.float32))
        p_t = T.Tensor(np.zeros((12, 8), np.float32))  # 12 tokens: no square grid
        with pytest.raises(ConfigError):
            model.fuse(f_e, p_t)


class TestDecoder:
    def test_probability_contract(self):
        model = tiny_model()
        out = model.forward(rand_image(7))
        sums = out.data.sum(axis=-1)
        assert np.abs(sums - 1.0).max() <= 1e-5
        assert out.data.min() >= 0

    def test_zero_everything_uniform(self):
        model = tiny_model()
        for name, p in model.params.items():
            if name.startswith("dec.") or name.startswith("head."):
                if name.endswith(".w") or name.endswith(".b"):
                    p.data = np.zeros_like(p.data)
        x = rand_image(8)
        f_e, skips, indices = model.encoder_forward(x, training=False)
        zero_fd = T.Tensor(np.zeros(f_e.dims, np.float32))
        probs = model.decoder_forward(zero_fd, skips, indices)
        assert np.allclose(probs.data, 1.0 / 3.0, atol=1e-6)

    def test_mismatched_indices_rejected(self):
        model = tiny_model()
        x = rand_image(9)
        f_e, skips, indices = model.encoder_forward(x, training=False)
        with pytest.raises(ShapeError):
            model.decoder_forward(f_e, skips, list(reversed(indices)))


class TestModelForward:
    def test_output_dims(self):
        arch = ArchConfig(rows=64, cols=64, classes=4)
        model = SegModel.create(arch, seed=0)
        out = model.forward(rand_image(10, arch))
        assert out.dims == (64, 64, 4)

    def test_argmax_in_range(self):
        model = tiny_model()
        mask, conf = model.predict(rand_image(11))
        assert mask.min() >= 0 and mask.max() < 3
        assert conf.min() >= 0 and conf.max() <= 1

    def test_bit_identical_forwards(self):
        model = tiny_model(seed=5)
        x = rand_image(12)
        a = model.forward(x).data
        b = model.forward(x).data
        assert np.array_equal(a, b)

    def test_flip_equivariance_with_constant_weights(self):
        model = tiny_model()
        for p in model.params.values():
            p.data = np.full_like(p.data, 0.01)
        x = rand_image(13)
        mask, _ = model.predict(x)
        flipped = T.Tensor(x.data[:, ::-1, :].copy())
        mask_f, _ = model.predict(flipped)
        assert np.array_equal(mask_f[:, ::-1], mask)

    def test_param_count_pure_function_of_arch(self):
        a = tiny_model(seed=0)
        b = tiny_model(seed=99)
        assert a.param_count() == b.param_count()
        wider = tiny_model(widths=(8, 6))
        assert wider.param_count() != a.param_count()

    def test_ablation_keeps_probability_contract(self):
        model = tiny_model(use_transformer=False)
        out = model.forward(rand_image(14))
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() <= 1e-5


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = tiny_model(seed=7)
        x = rand_image(15)
        before = model.forward(x).data
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        restored = load_checkpoint(path)
        after = restored.forward(x).data
        assert np.array_equal(before, after)
        assert restored.arch == model.arch

    def test_manifest_names_unique_and_complete(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        entries = read_entries(path)
        own = model.state_arrays()
        assert set(own) <= set(entries)
        assert len(entries) == len(own) + len([k for k in entries if k.startswith("arch.")])

    def test_corrupted_magic(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        assert err.value.offset == 0

    def test_unsupported_version_names_supported(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        import zlib, struct

        blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])) & 0xFFFFFFFF)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        assert "supported versions: 1" in str(err.value)

    def test_truncation_reports_offset(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_crc_detects_flip(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        blob[100] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        assert "CRC" in str(err.value)

    def test_arch_mismatch_names_parameter(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        entries = {
            k: v for k, v in read_entries(path).items() if not k.startswith("arch.")
        }
        other = tiny_model(widths=(8, 6))
        with pytest.raises(CheckpointError) as err:
            other.load_state(entries)
        assert "enc.l1" in str(err.value)

    def test_optimizer_sidecar_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        entries = {
            "eg2.a": rng.uniform(0, 1, (3, 4)).astype(np.float32),
            "edx2.a": rng.uniform(0, 1, (3, 4)).astype(np.float32),
        }
        path = tmp_path / "state.opt"
        write_entries(path, entries)
        back = read_entries(path)
        for k in entries:
            assert np.array_equal(back[k], entries[k])
