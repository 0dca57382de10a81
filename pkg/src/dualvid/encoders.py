"""Frozen reference vision encoders.

Two small randomly initialized vision transformers stand in for large
pretrained encoders: a per-frame image encoder for spatial detail and a
joint space-time video encoder for per-segment temporal context. Both are
frozen at construction; only their output geometry and mixing behavior
matter downstream. Features are read from the penultimate block, not the
last one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import TransformerBlock
from .errors import SegmentLengthError, ShapeMismatchError
from .media import FrameArray

FEATURE_TAP = "penultimate"


def _validate_vit_geometry(input_size, patch_size, feature_dim, num_heads, num_blocks):
    if input_size % patch_size != 0:
        raise ValueError(f"patch_size {patch_size} must divide input_size {input_size}")
    if feature_dim % num_heads != 0:
        raise ValueError(f"feature_dim {feature_dim} not divisible by {num_heads} heads")
    if num_blocks < 2:
        raise ValueError("need num_blocks >= 2 to read a penultimate layer")


@dataclass(frozen=True)
class ImageEncoderSpec:
    """Geometry of the per-frame spatial encoder."""

    input_size: int = 336
    patch_size: int = 14
    feature_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    in_channels: int = 3

    def __post_init__(self):
        _validate_vit_geometry(
            self.input_size, self.patch_size, self.feature_dim,
            self.num_heads, self.num_blocks,
        )

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def tokens_per_frame(self) -> int:
        return self.grid * self.grid


@dataclass(frozen=True)
class VideoEncoderSpec:
    """Geometry of the per-segment spatiotemporal encoder."""

    input_size: int = 224
    patch_size: int = 14
    feature_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    frames_per_segment: int = 4
    in_channels: int = 3

    def __post_init__(self):
        _validate_vit_geometry(
            self.input_size, self.patch_size, self.feature_dim,
            self.num_heads, self.num_blocks,
        )
        if self.frames_per_segment < 1:
            raise ValueError("frames_per_segment must be >= 1")

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def tokens_per_frame(self) -> int:
        return self.grid * self.grid


@dataclass
class FeatureGrid:
    """Encoder output as a [frames, grid, grid, dim] tensor."""

    data: torch.Tensor
    tap: str = FEATURE_TAP

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeMismatchError(
                f"feature grid must be 4-d [F, G, G, D], got {tuple(self.data.shape)}"
            )
        if self.data.shape[1] != self.data.shape[2]:
            raise ShapeMismatchError("feature grid must be square")
        if not torch.isfinite(self.data).all():
            raise ValueError("feature grid contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[3]


def frames_to_tensor(frames: FrameArray, dtype=torch.float32) -> torch.Tensor:
    """[T, H, W, C] float array to a [T, C, H, W] torch tensor."""
    return torch.from_numpy(np.ascontiguousarray(frames.data)).permute(0, 3, 1, 2).to(dtype)


class _TinyViT(nn.Module):
    """Patch embedding + positional embedding + transformer blocks.

    The forward pass reads the stream after the second-to-last block; the
    final block exists but never contributes to emitted features.
    """

    def __init__(self, spec, num_positions: int, seed: int):
        super().__init__()
        self.spec = spec
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_embed = nn.Conv2d(
                spec.in_channels, spec.feature_dim,
                kernel_size=spec.patch_size, stride=spec.patch_size,
            )
            self.pos_embed = nn.Parameter(
                0.02 * torch.randn(num_positions, spec.feature_dim)
            )
            self.blocks = nn.ModuleList(
                TransformerBlock(spec.feature_dim, spec.num_heads)
                for _ in range(spec.num_blocks)
            )
        for p in self.parameters():
            p.requires_grad_(False)

    def embed_patches(self, images: torch.Tensor) -> torch.Tensor:
        """[B, C, H, W] images to [B, tokens, D] patch embeddings."""
        patches = self.patch_embed(images)  # [B, D, G, G]
        return patches.flatten(2).transpose(1, 2)

    def run_to_tap(self, tokens: torch.Tensor) -> torch.Tensor:
        for block in self.blocks[:-1]:
            tokens = block(tokens)
        return tokens


class ImageEncoder(nn.Module):
    """Per-frame spatial features; frames never attend to each other."""

    def __init__(self, spec: ImageEncoderSpec | None = None, seed: int = 0):
        super().__init__()
        self.spec = spec or ImageEncoderSpec()
        self.vit = _TinyViT(self.spec, self.spec.tokens_per_frame, seed)

    def encode(self, frames: FrameArray) -> FeatureGrid:
        spec = self.spec
        if frames.height != spec.input_size or frames.width != spec.input_size:
            raise ShapeMismatchError(
                f"image encoder expects {spec.input_size}x{spec.input_size} frames, "
                f"got {frames.height}x{frames.width}"
            )
        if frames.channels != spec.in_channels:
            raise ShapeMismatchError(
                f"expected {spec.in_channels} channels, got {frames.channels}"
            )
        with torch.no_grad():
            images = frames_to_tensor(frames, dtype=self.vit.pos_embed.dtype)
            tokens = self.vit.embed_patches(images) + self.vit.pos_embed
            tokens = self.vit.run_to_tap(tokens)
        grid = spec.grid
        data = tokens.reshape(frames.num_frames, grid, grid, spec.feature_dim)
        return FeatureGrid(data=data)

    forward = encode


class VideoEncoder(nn.Module):
    """Segment features with joint attention over every frame and patch."""

    def __init__(self, spec: VideoEncoderSpec | None = None, seed: int = 1):
        super().__init__()
        self.spec = spec or VideoEncoderSpec()
        positions = self.spec.frames_per_segment * self.spec.tokens_per_frame
        self.vit = _TinyViT(self.spec, positions, seed)

    def encode(self, segment: FrameArray) -> FeatureGrid:
        spec = self.spec
        if segment.num_frames != spec.frames_per_segment:
            raise SegmentLengthError(
                f"segment has {segment.num_frames} frames, encoder expects "
                f"{spec.frames_per_segment}"
            )
        if segment.height != spec.input_size or segment.width != spec.input_size:
            raise ShapeMismatchError(
                f"video encoder expects {spec.input_size}x{spec.input_size} frames, "
                f"got {segment.height}x{segment.width}"
            )
        if segment.channels != spec.in_channels:
            raise ShapeMismatchError(
                f"expected {spec.in_channels} channels, got {segment.channels}"
            )
        with torch.no_grad():
            images = frames_to_tensor(segment, dtype=self.vit.pos_embed.dtype)
            per_frame = self.vit.embed_patches(images)  # [n, tokens, D]
            joint = per_frame.reshape(1, -1, spec.feature_dim) + self.vit.pos_embed
            joint = self.vit.run_to_tap(joint)
        grid = spec.grid
        data = joint.reshape(spec.frames_per_segment, grid, grid, spec.feature_dim)
        return FeatureGrid(data=data)

    forward = encode


def downsample_frames(frames: FrameArray, target: int) -> FrameArray:
    """Bilinear resize to target x target; upscaling is refused."""
    if target > frames.height or target > frames.width:
        raise ValueError(
            f"target {target} exceeds current size "
            f"{frames.height}x{frames.width}; only downsampling is supported"
        )
    if target == frames.height and target == frames.width:
        return frames
    tensor = frames_to_tensor(frames)
    resized = F.interpolate(
        tensor, size=(target, target), mode="bilinear", align_corners=False
    )
    data = resized.permute(0, 2, 3, 1).clamp(0.0, 1.0).numpy()
    return FrameArray(data)
