"""Vision encoder geometry, mixing behavior, and freezing."""

import numpy as np
import pytest
import torch

from dualvid.encoders import (
    FeatureGrid,
    ImageEncoder,
    ImageEncoderSpec,
    VideoEncoder,
    VideoEncoderSpec,
    downsample_frames,
    frames_to_tensor,
)
from dualvid.errors import SegmentLengthError, ShapeMismatchError
from dualvid.media import FrameArray


def make_frames(num, size, channels=3, seed=0):
    rng = np.random.default_rng(seed)
    return FrameArray(rng.random((num, size, size, channels), dtype=np.float32))


TOY_IMG = ImageEncoderSpec(input_size=28, patch_size=14, feature_dim=16,
                           num_blocks=2, num_heads=2)
TOY_VID = VideoEncoderSpec(input_size=28, patch_size=14, feature_dim=16,
                           num_blocks=2, num_heads=2, frames_per_segment=3)


class TestSpecValidation:
    def test_grid_sizes(self):
        assert ImageEncoderSpec().grid == 24
        assert VideoEncoderSpec().grid == 16
        assert TOY_IMG.grid == 2
        assert TOY_IMG.tokens_per_frame == 4

    def test_patch_must_divide_input(self):
        with pytest.raises(ValueError):
            ImageEncoderSpec(input_size=100, patch_size=14)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            ImageEncoderSpec(feature_dim=30, num_heads=4)

    def test_need_at_least_two_blocks(self):
        with pytest.raises(ValueError):
            ImageEncoderSpec(num_blocks=1)
        with pytest.raises(ValueError):
            VideoEncoderSpec(num_blocks=1)

    def test_segment_length_positive(self):
        with pytest.raises(ValueError):
            VideoEncoderSpec(frames_per_segment=0)


class TestFeatureGrid:
    def test_must_be_4d(self):
        with pytest.raises(ShapeMismatchError):
            FeatureGrid(torch.zeros(2, 4, 4))

    def test_must_be_square(self):
        with pytest.raises(ShapeMismatchError):
            FeatureGrid(torch.zeros(2, 4, 5, 8))

    def test_rejects_nan(self):
        data = torch.zeros(1, 2, 2, 4)
        data[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            FeatureGrid(data)

    def test_properties(self):
        grid = FeatureGrid(torch.zeros(3, 2, 2, 8))
        assert grid.num_frames == 3
        assert grid.grid == 2
        assert grid.dim == 8


class TestImageEncoderGeometry:
    def test_full_size_grid(self):
        enc = ImageEncoder(seed=0)
        frames = make_frames(16, 336)
        out = enc.encode(frames)
        assert tuple(out.data.shape) == (16, 24, 24, enc.spec.feature_dim)

    def test_toy_grid(self):
        enc = ImageEncoder(TOY_IMG, seed=0)
        out = enc.encode(make_frames(5, 28))
        assert tuple(out.data.shape) == (5, 2, 2, 16)

    def test_wrong_resolution_rejected(self):
        enc = ImageEncoder(TOY_IMG, seed=0)
        with pytest.raises(ShapeMismatchError):
            enc.encode(make_frames(2, 14))

    def test_wrong_channels_rejected(self):
        enc = ImageEncoder(TOY_IMG, seed=0)
        with pytest.raises(ShapeMismatchError):
            enc.encode(make_frames(2, 28, channels=1))


class TestVideoEncoderGeometry:
    def test_full_size_grid(self):
        enc = VideoEncoder(seed=0)
        segment = make_frames(enc.spec.frames_per_segment, 224)
        out = enc.encode(segment)
        assert tuple(out.data.shape) == (4, 16, 16, enc.spec.feature_dim)

    def test_wrong_segment_length_rejected(self):
        enc = VideoEncoder(TOY_VID, seed=0)
        with pytest.raises(SegmentLengthError):
            enc.encode(make_frames(2, 28))
        with pytest.raises(SegmentLengthError):
            enc.encode(make_frames(4, 28))

    def test_wrong_resolution_rejected(self):
        enc = VideoEncoder(TOY_VID, seed=0)
        with pytest.raises(ShapeMismatchError):
            enc.encode(make_frames(3, 14))


class TestPerFrameIndependence:
    """The image encoder must treat each frame in isolation."""

    def test_identical_frames_identical_features(self):
        enc = ImageEncoder(TOY_IMG, seed=3)
        one = make_frames(1, 28, seed=7)
        stacked = FrameArray(np.repeat(one.data, 4, axis=0))
        out = enc.encode(stacked).data
        for i in range(1, 4):
            assert torch.equal(out[0], out[i])

    def test_frame_permutation_permutes_features(self):
        enc = ImageEncoder(TOY_IMG, seed=3)
        frames = make_frames(6, 28, seed=11)
        perm = [4, 0, 5, 2, 1, 3]
        base = enc.encode(frames).data
        shuffled = enc.encode(frames.select(perm)).data
        for dst, src in enumerate(perm):
            assert torch.allclose(shuffled[dst], base[src], atol=1e-6)

    def test_perturbing_one_frame_leaves_others(self):
        enc = ImageEncoder(TOY_IMG, seed=3)
        frames = make_frames(4, 28, seed=13)
        altered = frames.data.copy()
        altered[2] = np.clip(altered[2] + 0.25, 0.0, 1.0)
        base = enc.encode(frames).data
        out = enc.encode(FrameArray(altered)).data
        assert not torch.allclose(out[2], base[2])
        for i in (0, 1, 3):
            assert torch.equal(out[i], base[i])


class TestTemporalMixing:
    """The video encoder must mix information across frames."""

    def test_perturbing_one_frame_changes_all(self):
        enc = VideoEncoder(TOY_VID, seed=5)
        segment = make_frames(3, 28, seed=17)
        altered = segment.data.copy()
        altered[0] = np.clip(altered[0] + 0.3, 0.0, 1.0)
        base = enc.encode(segment).data
        out = enc.encode(FrameArray(altered)).data
        for i in range(3):
            assert not torch.allclose(out[i], base[i], atol=1e-7)

    def test_frame_order_matters(self):
        enc = VideoEncoder(TOY_VID, seed=5)
        segment = make_frames(3, 28, seed=19)
        reversed_ = enc.encode(segment.select([2, 1, 0])).data
        base = enc.encode(segment).data
        assert not torch.allclose(reversed_, base.flip(0), atol=1e-6)


class TestPenultimateTap:
    """Features come from the second-to-last block, bypassing the last."""

    def test_image_tap_matches_manual_run(self):
        enc = ImageEncoder(TOY_IMG, seed=9)
        frames = make_frames(3, 28, seed=23)
        out = enc.encode(frames).data
        with torch.no_grad():
            images = frames_to_tensor(frames)
            tokens = enc.vit.embed_patches(images) + enc.vit.pos_embed
            for block in list(enc.vit.blocks)[:-1]:
                tokens = block(tokens)
        manual = tokens.reshape(3, 2, 2, 16)
        assert torch.equal(out, manual)

    def test_last_block_does_not_influence_output(self):
        enc = ImageEncoder(TOY_IMG, seed=9)
        frames = make_frames(2, 28, seed=29)
        before = enc.encode(frames).data.clone()
        with torch.no_grad():
            for p in enc.vit.blocks[-1].parameters():
                p.add_(1.0)
        after = enc.encode(frames).data
        assert torch.equal(before, after)

    def test_video_tap_matches_manual_run(self):
        enc = VideoEncoder(TOY_VID, seed=9)
        segment = make_frames(3, 28, seed=31)
        out = enc.encode(segment).data
        with torch.no_grad():
            images = frames_to_tensor(segment)
            per_frame = enc.vit.embed_patches(images)
            joint = per_frame.reshape(1, -1, 16) + enc.vit.pos_embed
            for block in list(enc.vit.blocks)[:-1]:
                joint = block(joint)
        manual = joint.reshape(3, 2, 2, 16)
        assert torch.equal(out, manual)


class TestFrozenWeights:
    def test_no_parameter_requires_grad(self):
        for enc in (ImageEncoder(TOY_IMG, seed=0), VideoEncoder(TOY_VID, seed=0)):
            assert all(not p.requires_grad for p in enc.parameters())
            assert sum(p.numel() for p in enc.parameters()) > 0

    def test_encode_is_repeatable(self):
        enc = ImageEncoder(TOY_IMG, seed=21)
        frames = make_frames(3, 28, seed=37)
        a = enc.encode(frames).data
        b = enc.encode(frames).data
        assert torch.equal(a, b)

    def test_same_seed_same_weights(self):
        a = ImageEncoder(TOY_IMG, seed=42)
        b = ImageEncoder(TOY_IMG, seed=42)
        frames = make_frames(2, 28, seed=41)
        assert torch.equal(a.encode(frames).data, b.encode(frames).data)

    def test_different_seed_different_weights(self):
        a = ImageEncoder(TOY_IMG, seed=42)
        b = ImageEncoder(TOY_IMG, seed=43)
        frames = make_frames(2, 28, seed=41)
        assert not torch.equal(a.encode(frames).data, b.encode(frames).data)


class TestDownsample:
    def test_checkerboard_averages_to_half(self):
        tile = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        board = np.tile(tile, (8, 8))  # 16x16
        frames = FrameArray(board[None, :, :, None])
        out = downsample_frames(frames, 8)
        assert out.data.shape == (1, 8, 8, 1)
        assert np.allclose(out.data, 0.5, atol=1e-6)

    def test_constant_frames_preserved(self):
        frames = FrameArray(np.full((2, 16, 16, 3), 0.375, dtype=np.float32))
        out = downsample_frames(frames, 4)
        assert np.allclose(out.data, 0.375, atol=1e-6)

    def test_same_size_is_identity(self):
        frames = make_frames(2, 16)
        out = downsample_frames(frames, 16)
        assert np.array_equal(out.data, frames.data)

    def test_upscale_rejected(self):
        with pytest.raises(ValueError):
            downsample_frames(make_frames(1, 16), 32)

    def test_output_stays_in_unit_range(self):
        frames = make_frames(3, 32, seed=43)
        out = downsample_frames(frames, 8)
        assert out.data.min() >= 0.0
        assert out.data.max() <= 1.0
