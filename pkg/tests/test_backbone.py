"""Video encoder: patch embedding, time-table interpolation, divided blocks."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from crossview import ConfigError, ContractError, Tensor, grad_check
from crossview.backbone import (
    BackboneConfig,
    SpaceTimeBlock,
    VideoEncoder,
    interpolate_time_embeddings,
)


def _rng(seed=42):
    return np.random.default_rng(seed)


TINY = BackboneConfig(image_size=8, patch_size=4, channels=1, dim=8, depth=1, heads=2,
                      pretrain_frames=4, mlp_ratio=2)


class TestBackboneConfig:
    def test_desk_defaults(self):
        cfg = BackboneConfig()
        assert (cfg.image_size, cfg.patch_size, cfg.dim, cfg.depth, cfg.heads) == (
            32, 8, 64, 2, 4,
        )
        assert cfg.patches_per_frame == 16
        assert cfg.pretrain_frames == 8

    def test_patch_count_arithmetic(self):
        assert BackboneConfig(image_size=224, patch_size=16, dim=64).patches_per_frame == 196

    def test_invalid_geometry_rejected(self):
        with pytest.raises(ConfigError):
            BackboneConfig(image_size=30, patch_size=8)
        with pytest.raises(ConfigError):
            BackboneConfig(dim=30, heads=4)
        with pytest.raises(ConfigError):
            BackboneConfig(depth=0)


class TestTimeEmbeddingInterpolation:
    def test_identity_when_counts_match_bitwise(self):
        table = Tensor(_rng().standard_normal((8, 16)))
        out = interpolate_time_embeddings(table, 8)
        assert np.array_equal(out.data, table.data)
        assert out.data.tobytes() == table.data.tobytes()

    @pytest.mark.parametrize("target", [16, 24, 32])
    def test_endpoints_exact(self, target):
        table = Tensor(_rng(1).standard_normal((8, 12)))
        out = interpolate_time_embeddings(table, target).data
        npt.assert_array_equal(out[0], table.data[0])
        npt.assert_array_equal(out[-1], table.data[-1])

    def test_two_to_three_midpoint(self):
        table = Tensor(np.array([[0.0, 10.0], [2.0, 30.0]]))
        out = interpolate_time_embeddings(table, 3).data
        npt.assert_allclose(out, [[0.0, 10.0], [1.0, 20.0], [2.0, 30.0]], atol=1e-12)

    def test_single_target_frame_takes_first_row(self):
        table = Tensor(_rng(2).standard_normal((8, 4)))
        out = interpolate_time_embeddings(table, 1).data
        npt.assert_array_equal(out, table.data[:1])

    def test_single_source_row_repeats(self):
        table = Tensor(np.array([[3.0, -1.0]]))
        out = interpolate_time_embeddings(table, 5).data
        npt.assert_array_equal(out, np.tile([3.0, -1.0], (5, 1)))

    @pytest.mark.parametrize("target", [16, 24, 32])
    def test_matches_scalar_oracle(self, target):
        # independent per-feature scalar interpolation oracle
        rng = _rng(3)
        t0, d = 8, 6
        table = rng.standard_normal((t0, d))
        out = interpolate_time_embeddings(Tensor(table), target).data
        for t in range(target):
            src = (t * (t0 - 1)) / (target - 1)
            lo = min(math.floor(src), t0 - 2)
            w = src - lo
            for f in range(d):
                expected = (1.0 - w) * table[lo, f] + w * table[lo + 1, f]
                assert abs(out[t, f] - expected) < 1e-12

    def test_invalid_target_rejected(self):
        with pytest.raises(ConfigError):
            interpolate_time_embeddings(Tensor(np.zeros((4, 2))), 0)


class TestPatchEmbed:
    def test_token_shape_desk(self):
        enc = VideoEncoder(BackboneConfig(), _rng())
        frames = Tensor(_rng(1).standard_normal((2, 3, 1, 32, 32)))
        assert enc.patch_embed(frames).shape == (2, 3, 16, 64)

    def test_token_shape_large_image(self):
        cfg = BackboneConfig(image_size=224, patch_size=16, channels=3, dim=64)
        enc = VideoEncoder(cfg, _rng())
        frames = Tensor(_rng(1).standard_normal((1, 1, 3, 224, 224)))
        assert enc.patch_embed(frames).shape == (1, 1, 196, 64)

    def test_zero_input_zero_projection_leaves_positions(self):
        enc = VideoEncoder(BackboneConfig(), _rng())
        enc.patch_proj.weight.data[:] = 0.0
        enc.patch_proj.bias.data[:] = 0.0
        out = enc.patch_embed(Tensor(np.zeros((2, 2, 1, 32, 32)))).data
        expected = np.broadcast_to(enc.pos_spatial.data[1:], (2, 2, 16, 64))
        npt.assert_array_equal(out, expected)

    def test_patch_flattening_matches_manual_slice(self):
        # first patch token of clip 0 frame 0 must project pixels [0:8, 0:8]
        enc = VideoEncoder(BackboneConfig(), _rng())
        frames = _rng(5).standard_normal((1, 1, 1, 32, 32))
        out = enc.patch_embed(Tensor(frames)).data[0, 0, 0]
        flat = frames[0, 0, :, 0:8, 0:8].reshape(-1)
        expected = (
            flat @ enc.patch_proj.weight.data.T
            + enc.patch_proj.bias.data
            + enc.pos_spatial.data[1]
        )
        npt.assert_allclose(out, expected, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        enc = VideoEncoder(BackboneConfig(), _rng())
        with pytest.raises(ContractError):
            enc.patch_embed(Tensor(np.zeros((1, 1, 1, 16, 16))))
        with pytest.raises(ContractError):
            enc.forward(Tensor(np.zeros((1, 1, 32, 32))))


def _zero_residual_projections(enc: VideoEncoder) -> None:
    for block in enc.blocks:
        for layer in (block.t_attn.proj, block.s_attn.proj, block.mlp.fc2):
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0


class TestSpaceTimeBlock:
    def test_zeroed_output_projections_make_identity(self):
        block = SpaceTimeBlock(8, 2, 2, _rng(7))
        for layer in (block.t_attn.proj, block.s_attn.proj, block.mlp.fc2):
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        x = _rng(8).standard_normal((2, 3, 5, 8))
        npt.assert_array_equal(block(Tensor(x)).data, x)

    def test_single_frame_temporal_attention_is_value_path(self):
        # with T=1 the temporal softmax weight is 1: the temporal sub-layer
        # adds exactly proj(value(ln(x)))
        block = SpaceTimeBlock(8, 2, 2, _rng(9))
        x = _rng(10).standard_normal((2, 1, 5, 8))

        ln = block.ln_t
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        xn = (x - mu) / np.sqrt(var + ln.eps) * ln.gamma.data + ln.beta.data
        qkv_w, qkv_b = block.t_attn.qkv.weight.data, block.t_attn.qkv.bias.data
        v = xn @ qkv_w[16:].T + qkv_b[16:]
        t_out = v @ block.t_attn.proj.weight.data.T + block.t_attn.proj.bias.data
        after_temporal = x + t_out

        swapped = Tensor(x).swapaxes(1, 2)
        got = (swapped + block.t_attn(block.ln_t(swapped))).swapaxes(1, 2).data
        npt.assert_allclose(got, after_temporal, atol=1e-10)

    def test_temporal_attention_mixes_only_across_frames(self):
        # zero the spatial attention + mlp residuals; token j of frame t then
        # depends only on token j of other frames, never on other tokens
        # (the bump hits a single feature: a whole-token constant bump would
        # sit in LayerNorm's null space and propagate nowhere)
        block = SpaceTimeBlock(8, 2, 2, _rng(11))
        for layer in (block.s_attn.proj, block.mlp.fc2):
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        x = _rng(12).standard_normal((1, 3, 4, 8))
        base = block(Tensor(x)).data
        bumped = x.copy()
        bumped[0, 1, 2, 5] += 1.0  # frame 1, token 2, one feature
        out = block(Tensor(bumped)).data
        changed = np.abs(out - base).sum(axis=-1)[0] > 1e-12
        assert changed[:, 2].all()  # token 2 of every frame sees the bump
        assert not changed[:, [0, 1, 3]].any()  # other tokens untouched

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        # readout weights are scaled down so finite-difference noise stays
        # below the checker's absolute floor (see grad_check docstring)
        rng = _rng(seed)
        block = SpaceTimeBlock(6, 2, 2, rng)
        x = Tensor(rng.standard_normal((1, 2, 3, 6)), requires_grad=True)
        w = rng.standard_normal((1, 2, 3, 6)) * 1e-3

        def fn():
            return (block(x) * w).sum()

        params = [("x", x)] + list(block.named_parameters())
        assert grad_check(fn, params) < 1e-4


class TestVideoEncoder:
    def test_feature_shape_and_variation(self):
        enc = VideoEncoder(TINY, _rng(20))
        clips = Tensor(_rng(21).standard_normal((3, 2, 1, 8, 8)))
        feats = enc(clips)
        assert feats.shape == (3, 8)
        assert not np.allclose(feats.data[0], feats.data[1])

    def test_identical_clips_identical_features(self):
        enc = VideoEncoder(TINY, _rng(22))
        clip = _rng(23).standard_normal((2, 1, 8, 8))
        batch = Tensor(np.stack([clip, clip, clip]))
        feats = enc(batch).data
        npt.assert_array_equal(feats[0], feats[1])
        npt.assert_array_equal(feats[1], feats[2])

    def test_batched_equals_per_clip_loop(self):
        enc = VideoEncoder(BackboneConfig(), _rng(24))
        clips = _rng(25).standard_normal((4, 4, 1, 32, 32))
        batched = enc(Tensor(clips)).data
        looped = np.stack([enc.encode_video(Tensor(c)).data for c in clips])
        npt.assert_array_equal(batched, looped)

    def test_zeroed_residuals_reduce_to_cls_readout(self):
        # with every residual branch output zeroed the blocks are identity and
        # the feature is LayerNorm(cls + pos[0] + mean of interpolated rows)
        enc = VideoEncoder(TINY, _rng(26))
        enc.time_embed.data[:] = _rng(27).standard_normal(enc.time_embed.shape)
        _zero_residual_projections(enc)
        t = 3
        clips = Tensor(_rng(28).standard_normal((2, t, 1, 8, 8)))
        got = enc(clips).data

        tte = interpolate_time_embeddings(Tensor(enc.time_embed.data), t).data
        cls_path = enc.cls_token.data + enc.pos_spatial.data[0] + tte.mean(axis=0)
        mu, sd = cls_path.mean(), cls_path.std()
        expected = (cls_path - mu) / np.sqrt(sd**2 + 1e-5)
        expected = expected * enc.ln_final.gamma.data + enc.ln_final.beta.data
        npt.assert_allclose(got, np.broadcast_to(expected, (2, 8)), atol=1e-12)

    def test_frame_count_flexibility_via_interpolation(self):
        enc = VideoEncoder(TINY, _rng(29))  # table length 4
        for t in (1, 2, 4, 6):
            feats = enc(Tensor(_rng(30).standard_normal((1, t, 1, 8, 8))))
            assert feats.shape == (1, 8)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_through_full_encoder(self, seed):
        cfg = BackboneConfig(image_size=4, patch_size=2, channels=1, dim=4, depth=1,
                             heads=2, pretrain_frames=2, mlp_ratio=2)
        rng = _rng(seed)
        enc = VideoEncoder(cfg, rng)
        clips = Tensor(rng.standard_normal((2, 2, 1, 4, 4)))
        w = rng.standard_normal((2, 4)) * 1e-3

        def fn():
            return (enc(clips) * w).sum()

        assert grad_check(fn, enc.named_parameters()) < 1e-4
        # every parameter participates for generic input
        for name, p in enc.named_parameters():
            assert p.grad is not None and np.abs(p.grad).max() > 0, name
