"""End-to-end video-language model.

Wires the frozen dual encoders, the two trainable adapters, token fusion,
and the causal LM into one module. The encoder_mode axis switches between
the dual path and single-encoder ablations; fusion_order switches between
the sequential and interleaved layouts.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapter import AdapterConfig, VisionLanguageAdapter
from .encoders import (
    ImageEncoder,
    ImageEncoderSpec,
    VideoEncoder,
    VideoEncoderSpec,
    downsample_frames,
)
from .errors import EmptyLossMaskError, SegmentLengthError, ShapeMismatchError
from .fusion import TokenBlock, TokenSequence, assemble_tokens
from .lm import (
    BOS_ID,
    EOS_ID,
    CausalLM,
    LMConfig,
    encode_text,
    generate,
    render_prompt,
)
from .media import FrameArray

ENCODER_MODES = ("dual", "image", "video")
DEFAULT_SYSTEM_PROMPT = "You are a helpful assistant that answers questions about videos."


@dataclass(frozen=True)
class PipelineConfig:
    num_segments: int = 4
    encoder_mode: str = "dual"
    fusion_order: str = "sequential"
    pool_kernel: int = 2
    image_pool_mode: str = "spatial_avg"
    video_pool_mode: str = "spatial_avg"
    system_prompt: str = DEFAULT_SYSTEM_PROMPT

    def __post_init__(self):
        if self.encoder_mode not in ENCODER_MODES:
            raise ValueError(f"encoder_mode must be one of {ENCODER_MODES}")
        if self.num_segments < 1:
            raise ValueError("num_segments must be >= 1")


@dataclass
class MultimodalExample:
    """One assembled LM input: embeddings plus answer-token bookkeeping."""

    embeddings: torch.Tensor  # [L, D]
    answer_ids: list[int]
    answer_start: int  # absolute position of the first answer token
    visual_len: int


class VideoLanguageModel(nn.Module):
    def __init__(
        self,
        image_spec: ImageEncoderSpec | None = None,
        video_spec: VideoEncoderSpec | None = None,
        lm_config: LMConfig | None = None,
        pipeline: PipelineConfig | None = None,
        seed: int = 0,
    ):
        super().__init__()
        self.image_spec = image_spec or ImageEncoderSpec()
        self.video_spec = video_spec or VideoEncoderSpec()
        self.lm_config = lm_config or LMConfig()
        self.pipeline = pipeline or PipelineConfig()

        self.image_encoder = ImageEncoder(self.image_spec, seed=seed)
        self.video_encoder = VideoEncoder(self.video_spec, seed=seed + 1)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 2)
            self.image_adapter = VisionLanguageAdapter(AdapterConfig(
                in_dim=self.image_spec.feature_dim,
                out_dim=self.lm_config.embed_dim,
                pool_mode=self.pipeline.image_pool_mode,
                pool_kernel=self.pipeline.pool_kernel,
            ))
            self.video_adapter = VisionLanguageAdapter(AdapterConfig(
                in_dim=self.video_spec.feature_dim,
                out_dim=self.lm_config.embed_dim,
                pool_mode=self.pipeline.video_pool_mode,
                pool_kernel=self.pipeline.pool_kernel,
            ))
        self.lm = CausalLM(self.lm_config, seed=seed + 3)

    @property
    def frames_expected(self) -> int:
        return self.pipeline.num_segments * self.video_spec.frames_per_segment

    def _fit(self, frames: FrameArray, size: int) -> FrameArray:
        if frames.height == size and frames.width == size:
            return frames
        if frames.height < size or frames.width < size:
            raise ShapeMismatchError(
                f"frames are {frames.height}x{frames.width}, smaller than the "
                f"required {size}x{size}; upsampling is not supported"
            )
        return downsample_frames(frames, size)

    def encode_streams(self, frames: FrameArray):
        """Sampled frames to (image PooledTokens, per-segment video PooledTokens)."""
        mode = self.pipeline.encoder_mode
        num_segments = self.pipeline.num_segments
        per_segment = self.video_spec.frames_per_segment
        if frames.num_frames != num_segments * per_segment:
            raise SegmentLengthError(
                f"expected {num_segments} segments x {per_segment} frames = "
                f"{num_segments * per_segment}, got {frames.num_frames} frames"
            )
        img_tokens = None
        vid_tokens = None
        if mode in ("dual", "image"):
            img_frames = self._fit(frames, self.image_spec.input_size)
            img_tokens = self.image_adapter(self.image_encoder.encode(img_frames))
        if mode in ("dual", "video"):
            vid_frames = self._fit(frames, self.video_spec.input_size)
            vid_tokens = []
            for s in range(num_segments):
                seg = FrameArray(vid_frames.data[s * per_segment:(s + 1) * per_segment])
                vid_tokens.append(self.video_adapter(self.video_encoder.encode(seg)))
        return img_tokens, vid_tokens

    def build_sequence(self, frames: FrameArray, text_embeds: torch.Tensor) -> TokenSequence:
        img_tokens, vid_tokens = self.encode_streams(frames)
        mode = self.pipeline.encoder_mode
        if mode == "dual":
            return assemble_tokens(img_tokens, vid_tokens, text_embeds,
                                   order=self.pipeline.fusion_order)
        if mode == "image":
            return TokenSequence([
                TokenBlock("image", img_tokens.flatten()),
                TokenBlock("text", text_embeds),
            ])
        blocks = [
            TokenBlock("video_segment", seg.flatten(), segment_index=s)
            for s, seg in enumerate(vid_tokens)
        ]
        blocks.append(TokenBlock("text", text_embeds))
        return TokenSequence(blocks)

    def assemble_example(
        self, frames: FrameArray, question: str, answer: str | None = None
    ) -> MultimodalExample:
        """[BOS + system prompt][visual tokens][prompt][answer + EOS]."""
        sys_ids = [BOS_ID] + encode_text(self.pipeline.system_prompt)
        prompt_ids = encode_text(render_prompt(question))
        answer_ids = encode_text(answer) + [EOS_ID] if answer is not None else []
        text_ids = torch.tensor(prompt_ids + answer_ids, dtype=torch.long)
        text_embeds = self.lm.embed_tokens(text_ids)
        seq = self.build_sequence(frames, text_embeds)
        sys_embeds = self.lm.embed_tokens(torch.tensor(sys_ids, dtype=torch.long))
        full = torch.cat([sys_embeds, seq.embeddings()], dim=0)
        visual_len = seq.visual_len()
        answer_start = len(sys_ids) + visual_len + len(prompt_ids)
        return MultimodalExample(
            embeddings=full,
            answer_ids=answer_ids,
            answer_start=answer_start,
            visual_len=visual_len,
        )

    def example_loss(self, frames: FrameArray, question: str, answer: str) -> torch.Tensor:
        """Mean next-token NLL over the answer tokens only."""
        example = self.assemble_example(frames, question, answer)
        if not example.answer_ids:
            raise EmptyLossMaskError("example has no answer tokens to score")
        logits = self.lm.forward_embeddings(example.embeddings)
        first = example.answer_start - 1  # the position that predicts answer token 0
        rows = logits[first:first + len(example.answer_ids)]
        targets = torch.tensor(example.answer_ids, dtype=torch.long)
        return F.cross_entropy(rows, targets)

    def answer_question(
        self,
        frames: FrameArray,
        question: str,
        max_new: int = 64,
        mode: str = "greedy",
        temperature: float = 1.0,
        generator: torch.Generator | None = None,
    ) -> str:
        example = self.assemble_example(frames, question, answer=None)
        result = generate(self.lm, example.embeddings, max_new, mode,
                          temperature, generator)
        return result.text

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Partition every named parameter into the six training groups."""
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {
            "image_encoder": [],
            "video_encoder": [],
            "image_adapter": [],
            "video_adapter": [],
            "lm_base": [],
            "lora": [],
        }
        for name, param in self.named_parameters():
            if name.startswith("image_encoder."):
                groups["image_encoder"].append((name, param))
            elif name.startswith("video_encoder."):
                groups["video_encoder"].append((name, param))
            elif name.startswith("image_adapter."):
                groups["image_adapter"].append((name, param))
            elif name.startswith("video_adapter."):
                groups["video_adapter"].append((name, param))
            elif "lora_" in name:
                groups["lora"].append((name, param))
            else:
                groups["lm_base"].append((name, param))
        return groups
