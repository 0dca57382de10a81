"""Assembly of the LM input sequence from pooled visual tokens and text.

The canonical layout places every image token first, then the video
segments in order, then the text. An interleaved variant groups image
frames by owning segment and emits [image_s, video_s] pairs. A small
budget calculator reports whether the visual prefix fits the LM context.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .adapter import PooledTokens
from .errors import ShapeMismatchError

BLOCK_KINDS = ("image", "video_segment", "text")
ORDERS = ("sequential", "interleaved")


@dataclass
class TokenBlock:
    kind: str
    embeddings: torch.Tensor  # [L_block, D_t]
    segment_index: int | None = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ShapeMismatchError(
                f"block embeddings must be [L >= 1, D], got {tuple(self.embeddings.shape)}"
            )
        if self.kind == "video_segment" and self.segment_index is None:
            raise ValueError("video blocks must carry a segment index")

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class TokenSequence:
    blocks: list[TokenBlock] = field(default_factory=list)

    @property
    def total_len(self) -> int:
        return sum(b.length for b in self.blocks)

    @property
    def block_lengths(self) -> list[int]:
        return [b.length for b in self.blocks]

    def embeddings(self) -> torch.Tensor:
        return torch.cat([b.embeddings for b in self.blocks], dim=0)

    def visual_len(self) -> int:
        return sum(b.length for b in self.blocks if b.kind != "text")


def _check_dims(img, vid, text):
    dims = {img.dim} | {v.dim for v in vid} | {text.shape[1]}
    if len(dims) != 1:
        raise ShapeMismatchError(f"embedding dims disagree: {sorted(dims)}")


def assemble_tokens(
    img: PooledTokens,
    vid: list[PooledTokens],
    text: torch.Tensor,
    order: str = "sequential",
) -> TokenSequence:
    """Build the LM input layout from the two visual streams plus text.

    sequential: [all image tokens][video segment 0..K-1][text]
    interleaved: image frames are split into K consecutive equal groups
    (the sampled frame array is already segment-ordered) and emitted as
    [image_s, video_s] per segment, then text.
    """
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}, got {order!r}")
    if len(vid) == 0:
        raise ValueError("need at least one video segment")
    if text.ndim != 2 or text.shape[0] < 1:
        raise ShapeMismatchError(
            f"text embeddings must be [L >= 1, D], got {tuple(text.shape)}"
        )
    _check_dims(img, vid, text)

    num_segments = len(vid)
    video_blocks = [
        TokenBlock("video_segment", seg.flatten(), segment_index=s)
        for s, seg in enumerate(vid)
    ]
    text_block = TokenBlock("text", text)

    if order == "sequential":
        blocks = [TokenBlock("image", img.flatten())] + video_blocks + [text_block]
        return TokenSequence(blocks)

    if img.num_frames % num_segments != 0:
        raise ValueError(
            f"interleaved order needs image frames ({img.num_frames}) divisible "
            f"by the segment count ({num_segments})"
        )
    per = img.num_frames // num_segments
    blocks = []
    for s in range(num_segments):
        chunk = PooledTokens(img.data[s * per:(s + 1) * per])
        blocks.append(TokenBlock("image", chunk.flatten(), segment_index=s))
        blocks.append(video_blocks[s])
    blocks.append(text_block)
    return TokenSequence(blocks)


@dataclass(frozen=True)
class BudgetReport:
    image_tokens: int
    video_tokens: int
    visual_tokens: int
    context_window: int
    reserved_text: int
    available: int
    fits: bool

    def as_dict(self) -> dict:
        return {
            "image_tokens": self.image_tokens,
            "video_tokens": self.video_tokens,
            "visual_tokens": self.visual_tokens,
            "context_window": self.context_window,
            "reserved_text": self.reserved_text,
            "available": self.available,
            "fits": self.fits,
        }


def token_budget(
    num_frames: int,
    num_segments: int,
    img_grid_pooled: int,
    vid_grid_pooled: int,
    context_window: int,
    reserved_text: int,
) -> BudgetReport:
    """Visual-token total versus the LM context the text must share.

    Frame counts that do not divide evenly are truncated the same way the
    sampler truncates them, so the report matches what the pipeline emits.
    """
    for name, value in (
        ("num_frames", num_frames),
        ("num_segments", num_segments),
        ("img_grid_pooled", img_grid_pooled),
        ("vid_grid_pooled", vid_grid_pooled),
        ("context_window", context_window),
    ):
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    if reserved_text < 0:
        raise ValueError("reserved_text must be >= 0")

    effective_frames = num_segments * (num_frames // num_segments)
    image_tokens = effective_frames * img_grid_pooled * img_grid_pooled
    video_tokens = effective_frames * vid_grid_pooled * vid_grid_pooled
    visual = image_tokens + video_tokens
    available = context_window - reserved_text
    return BudgetReport(
        image_tokens=image_tokens,
        video_tokens=video_tokens,
        visual_tokens=visual,
        context_window=context_window,
        reserved_text=reserved_text,
        available=available,
        fits=visual <= available,
    )
