"""Video frame handling: segment planning, frame sampling, scene detection.

Frames are kept as plain float arrays in [0, 1] with explicit axis order
[frames, height, width, channels]. Real container decoding is out of scope;
videos enter the pipeline either as a directory of numbered images or as a
raw little-endian tensor file (see :class:`RawTensorSource`).
"""

from __future__ import annotations

import re
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientFramesError

DEFAULT_SCENE_THRESHOLD = 0.3


@dataclass(frozen=True)
class VideoClipMeta:
    """Identity and geometry of a source clip, without its pixel data."""

    id: str
    total_frames: int
    fps: float
    source_path: str = ""

    def __post_init__(self):
        if self.total_frames < 1:
            raise ValueError(f"total_frames must be >= 1, got {self.total_frames}")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")


@dataclass
class FrameArray:
    """Decoded frames as a [frames, height, width, channels] array in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ValueError(f"expected a 4-d [T, H, W, C] array, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("need at least one frame")
        if arr.shape[3] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {arr.shape[3]}")
        if not np.issubdtype(arr.dtype, np.floating):
            raise ValueError(f"frames must be float-typed, got {arr.dtype}")
        if not np.isfinite(arr).all():
            raise ValueError("frames contain non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")
        self.data = arr

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def select(self, indices) -> "FrameArray":
        """Gather a subset of frames, preserving order of `indices`."""
        return FrameArray(self.data[np.asarray(indices, dtype=np.int64)])


@dataclass
class SegmentPlan:
    """Partition of sampled-frame indices into equal contiguous segments."""

    num_segments: int
    frames_per_segment: int
    segments: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.segments) != self.num_segments:
            raise ValueError("segment count does not match num_segments")
        seen: set[int] = set()
        for seg in self.segments:
            if len(seg) != self.frames_per_segment:
                raise ValueError("all segments must have frames_per_segment entries")
            if sorted(seg) != list(seg):
                raise ValueError("segment indices must be sorted ascending")
            overlap = seen.intersection(seg)
            if overlap:
                raise ValueError(f"segments overlap on indices {sorted(overlap)}")
            seen.update(seg)

    @property
    def total_frames(self) -> int:
        return self.num_segments * self.frames_per_segment


@dataclass
class SceneList:
    """Scene boundaries plus one representative keyframe per scene.

    `boundaries[i]` is the first frame of scene i; scene i spans
    [boundaries[i], boundaries[i+1]) and the last scene runs to num_frames.
    """

    boundaries: list[int]
    keyframes: list[int]
    num_frames: int

    def __post_init__(self):
        if not self.boundaries or self.boundaries[0] != 0:
            raise ValueError("boundaries must start at frame 0")
        if any(b >= c for b, c in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("boundaries must be strictly increasing")
        if self.boundaries[-1] >= self.num_frames:
            raise ValueError("last boundary lies beyond the video")
        if len(self.keyframes) != len(self.boundaries):
            raise ValueError("need exactly one keyframe per scene")
        for key, (start, end) in zip(self.keyframes, self.spans()):
            if not start <= key < end:
                raise ValueError(f"keyframe {key} outside its scene [{start}, {end})")

    def spans(self) -> list[tuple[int, int]]:
        """Half-open [start, end) frame ranges, one per scene."""
        ends = list(self.boundaries[1:]) + [self.num_frames]
        return list(zip(self.boundaries, ends))

    @property
    def num_scenes(self) -> int:
        return len(self.boundaries)


def plan_segments(num_frames: int, num_segments: int) -> SegmentPlan:
    """Split frame indices {0..T-1} into equal contiguous segments.

    When num_segments does not divide num_frames, the tail frames are
    dropped so every segment keeps the same length (at most
    num_segments - 1 frames are lost).
    """
    if num_segments < 1:
        raise ValueError(f"num_segments must be >= 1, got {num_segments}")
    if num_frames < num_segments:
        raise ValueError(
            f"cannot split {num_frames} frames into {num_segments} segments"
        )
    per_segment = num_frames // num_segments
    segments = [
        list(range(s * per_segment, (s + 1) * per_segment))
        for s in range(num_segments)
    ]
    return SegmentPlan(
        num_segments=num_segments, frames_per_segment=per_segment, segments=segments
    )


def sample_frames(meta: VideoClipMeta, num_frames: int, num_segments: int) -> list[int]:
    """Pick source frame indices segment by segment.

    The source video is divided into num_segments equal spans; within the
    s-th span, frames_per_segment indices are taken uniformly spaced as
    floor(span_start + j * span_len / per_segment). The result is sorted
    ascending and has exactly num_frames entries (after the same tail
    truncation as :func:`plan_segments`).
    """
    if meta.total_frames < num_frames:
        raise InsufficientFramesError(
            f"video {meta.id!r} has {meta.total_frames} frames, need {num_frames}"
        )
    plan = plan_segments(num_frames, num_segments)
    per_segment = plan.frames_per_segment
    total = meta.total_frames
    indices: list[int] = []
    for s in range(num_segments):
        span_start = total * s // num_segments
        span_end = total * (s + 1) // num_segments
        span_len = span_end - span_start
        for j in range(per_segment):
            indices.append(span_start + (j * span_len) // per_segment)
    return indices


def detect_scenes(
    frames: FrameArray, threshold: float = DEFAULT_SCENE_THRESHOLD
) -> SceneList:
    """Cut the video wherever consecutive frames differ strongly.

    A new scene starts at frame t when the mean absolute pixel difference
    between frames t and t-1 exceeds `threshold`. Frame 0 always starts the
    first scene. Keyframes are the median-index frame of each scene.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    data = frames.data
    boundaries = [0]
    for t in range(1, frames.num_frames):
        diff = float(np.abs(data[t] - data[t - 1]).mean())
        if diff > threshold:
            boundaries.append(t)
    scenes = SceneList(
        boundaries=boundaries,
        keyframes=_median_keyframes(boundaries, frames.num_frames),
        num_frames=frames.num_frames,
    )
    return scenes


def select_keyframes(scenes: SceneList) -> list[int]:
    """Return the median-index frame of each scene."""
    return _median_keyframes(scenes.boundaries, scenes.num_frames)


def _median_keyframes(boundaries: list[int], num_frames: int) -> list[int]:
    ends = list(boundaries[1:]) + [num_frames]
    return [start + (end - start) // 2 for start, end in zip(boundaries, ends)]


# ---------------------------------------------------------------------------
# Frame sources
# ---------------------------------------------------------------------------


class FrameSource(ABC):
    """Read-only access to a clip's frames, decoupled from the container."""

    @property
    @abstractmethod
    def num_frames(self) -> int: ...

    @abstractmethod
    def load(self, indices=None) -> FrameArray:
        """Decode the given frame indices (all frames when None)."""

    def meta(self, clip_id: str, fps: float = 1.0) -> VideoClipMeta:
        return VideoClipMeta(
            id=clip_id,
            total_frames=self.num_frames,
            fps=fps,
            source_path=str(getattr(self, "path", "")),
        )


class ImageDirSource(FrameSource):
    """Directory of numbered image files, ordered by the number in the name."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.is_dir():
            raise OSError(f"not a directory: {self.path}")
        entries = []
        for item in self.path.iterdir():
            match = re.search(r"(\d+)", item.stem)
            if item.is_file() and match:
                entries.append((int(match.group(1)), item))
        if not entries:
            raise OSError(f"no numbered image files in {self.path}")
        entries.sort()
        self._files = [item for _, item in entries]

    @property
    def num_frames(self) -> int:
        return len(self._files)

    def load(self, indices=None) -> FrameArray:
        from PIL import Image

        if indices is None:
            indices = range(self.num_frames)
        frames = []
        for i in indices:
            with Image.open(self._files[i]) as img:
                frames.append(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0)
        return FrameArray(np.stack(frames))


RAW_TENSOR_HEADER = struct.Struct("<4I")  # frames, height, width, channels


class RawTensorSource(FrameSource):
    """Raw tensor file: four little-endian uint32 (T, H, W, C) then float32 data."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            header = fh.read(RAW_TENSOR_HEADER.size)
            if len(header) != RAW_TENSOR_HEADER.size:
                raise OSError(f"truncated raw tensor header in {self.path}")
            self._shape = RAW_TENSOR_HEADER.unpack(header)
        expected = RAW_TENSOR_HEADER.size + 4 * int(np.prod(self._shape))
        actual = self.path.stat().st_size
        if actual != expected:
            raise OSError(
                f"{self.path}: payload size {actual} does not match shape {self._shape}"
            )

    @property
    def num_frames(self) -> int:
        return self._shape[0]

    def load(self, indices=None) -> FrameArray:
        count = int(np.prod(self._shape))
        with open(self.path, "rb") as fh:
            fh.seek(RAW_TENSOR_HEADER.size)
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(self._shape)
        frames = FrameArray(data.astype(np.float32))
        return frames if indices is None else frames.select(list(indices))


def write_raw_tensor(path, frames: FrameArray) -> None:
    """Serialize frames to the raw little-endian tensor format."""
    data = np.ascontiguousarray(frames.data.astype("<f4"))
    with open(path, "wb") as fh:
        fh.write(RAW_TENSOR_HEADER.pack(*data.shape))
        fh.write(data.tobytes())


def open_video(path) -> FrameSource:
    """Open a clip from a directory of images or a raw tensor file."""
    path = Path(path)
    if path.is_dir():
        return ImageDirSource(path)
    return RawTensorSource(path)
