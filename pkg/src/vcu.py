"""
Video Condition Unit: prompt text plus aligned frame and mask sequences.

Layout is always ``references ++ video``: the first ``ref_count`` frames are
reference images (their masks are all zero, i.e. keep), the remaining
``video_len`` frames are the context video. Frames are float32 in [-1, 1] with
shape (count, h, w, 3); masks are float32 in {0, 1} with shape (count, h, w),
where 1 marks pixels to generate or edit.
"""
import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from src.errors import ArgumentError, DimensionError, MaskValueError

logger = logging.getLogger(__name__)

BASE_TASKS = ("T2V", "R2V", "V2V", "MV2V")


@dataclass(frozen=True)
class TaskTag:
    """Metadata tag: a base task, or ``Composite`` with the base tasks it combines."""
    kind: str
    parts: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in BASE_TASKS + ("Composite",):
            raise ArgumentError(f"unknown task tag {self.kind!r}")

    def __str__(self):
        if self.kind == "Composite":
            return f"Composite({'+'.join(self.parts)})"
        return self.kind

    @classmethod
    def parse(cls, text):
        if text.startswith("Composite(") and text.endswith(")"):
            inner = text[len("Composite("):-1]
            return cls("Composite", tuple(p for p in inner.split("+") if p))
        return cls(text)

    def combine(self, other):
        mine = self.parts if self.kind == "Composite" else (self.kind,)
        theirs = other.parts if other.kind == "Composite" else (other.kind,)
        return TaskTag("Composite", mine + theirs)


@dataclass(frozen=True)
class Vcu:
    prompt: str
    frames: np.ndarray
    masks: np.ndarray
    ref_count: int
    video_len: int
    task_tag: TaskTag = field(default_factory=lambda: TaskTag("T2V"))

    def __post_init__(self):
        for arr in (self.frames, self.masks):
            if isinstance(arr, np.ndarray):
                arr.flags.writeable = False

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    @property
    def references(self):
        return self.frames[:self.ref_count]

    @property
    def video_frames(self):
        return self.frames[self.ref_count:]

    @property
    def video_masks(self):
        return self.masks[self.ref_count:]


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


def _check_positive(**values):
    for name, value in values.items():
        if int(value) < 1:
            raise ArgumentError(f"{name} must be positive, got {value}")


def as_frames(frames, operation):
    """Stack/convert frames to a float32 (count, h, w, 3) array."""
    if isinstance(frames, (list, tuple)):
        shapes = {np.shape(f) for f in frames}
        if len(shapes) > 1:
            raise DimensionError(operation, "frames have different shapes", sorted(shapes))
        frames = np.stack(frames) if frames else np.zeros((0, 1, 1, 3), dtype=np.float32)
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise DimensionError(operation, "frames must have shape (count, h, w, 3)", [frames.shape])
    return frames


def as_masks(masks, operation):
    masks = np.asarray(masks, dtype=np.float32)
    if masks.ndim != 3:
        raise DimensionError(operation, "masks must have shape (count, h, w)", [masks.shape])
    if not np.all((masks == 0) | (masks == 1)):
        raise MaskValueError(f"{operation}: mask not binary")
    return masks


def to_u8(frames):
    """[-1, 1] -> {0..255} with value = round((x + 1) * 127.5)."""
    x = np.clip(np.asarray(frames, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


def from_u8(values):
    return (np.asarray(values, dtype=np.float64) / 127.5 - 1.0).astype(np.float32)


def quantize(frames):
    """Snap frames onto the 8-bit grid so that they survive the container exactly."""
    return from_u8(to_u8(frames))


def make_t2v(prompt, n, h, w):
    _check_positive(n=n, h=h, w=w)
    frames = np.zeros((n, h, w, 3), dtype=np.float32)
    masks = np.ones((n, h, w), dtype=np.float32)
    return Vcu(prompt, frames, masks, 0, int(n), TaskTag("T2V"))


def make_r2v(prompt, refs, n):
    _check_positive(n=n)
    refs = as_frames(refs, "make_r2v")
    if len(refs) == 0:
        raise ArgumentError("make_r2v needs at least one reference frame")
    l, h, w, _ = refs.shape
    frames = np.concatenate([refs, np.zeros((n, h, w, 3), dtype=np.float32)])
    masks = np.concatenate([np.zeros((l, h, w), dtype=np.float32), np.ones((n, h, w), dtype=np.float32)])
    return Vcu(prompt, frames, masks, l, int(n), TaskTag("R2V"))


def make_v2v(prompt, video):
    video = as_frames(video, "make_v2v")
    if len(video) == 0:
        raise ArgumentError("make_v2v needs a non-empty video")
    n, h, w, _ = video.shape
    return Vcu(prompt, video.copy(), np.ones((n, h, w), dtype=np.float32), 0, n, TaskTag("V2V"))


def make_mv2v(prompt, video, masks):
    video = as_frames(video, "make_mv2v")
    masks = as_masks(masks, "make_mv2v")
    if len(video) == 0:
        raise ArgumentError("make_mv2v needs a non-empty video")
    if video.shape[:3] != masks.shape:
        raise DimensionError("make_mv2v", "video and masks are not aligned", [video.shape, masks.shape])
    return Vcu(prompt, video.copy(), masks.copy(), 0, len(video), TaskTag("MV2V"))


def with_references(vcu, refs):
    """Prepend reference frames (keep-masks) in front of any existing references."""
    refs = as_frames(refs, "with_references")
    if len(refs) == 0:
        raise ArgumentError("with_references needs at least one reference frame")
    if refs.shape[1:3] != (vcu.height, vcu.width):
        raise DimensionError("with_references", "reference size differs from the unit", [refs.shape, vcu.frames.shape])
    l = len(refs)
    frames = np.concatenate([refs, vcu.frames])
    masks = np.concatenate([np.zeros((l, vcu.height, vcu.width), dtype=np.float32), vcu.masks])
    return Vcu(vcu.prompt, frames, masks, vcu.ref_count + l, vcu.video_len, vcu.task_tag.combine(TaskTag("R2V")))


def make_frame_anchored(prompt, anchors, n, h, w, condition_mode):
    """
    Zero video except at anchor frames

    condition_mode=True: anchors are control signals to repaint (masks all one).
    condition_mode=False: anchors are real frames to keep (mask zero at anchors, one elsewhere).
    """
    _check_positive(n=n, h=h, w=w)
    indices = [int(i) for i, _ in anchors]
    if len(set(indices)) != len(indices):
        raise ArgumentError(f"duplicate anchor indices: {indices}")
    if any(i < 0 or i >= n for i in indices):
        raise ArgumentError(f"anchor indices {indices} outside [0, {n})")
    frames = np.zeros((n, h, w, 3), dtype=np.float32)
    masks = np.ones((n, h, w), dtype=np.float32)
    for i, frame in anchors:
        frame = np.asarray(frame, dtype=np.float32)
        if frame.shape != (h, w, 3):
            raise DimensionError("make_frame_anchored", f"anchor {i} has the wrong shape", [frame.shape, (h, w, 3)])
        frames[i] = frame
        if not condition_mode:
            masks[i] = 0.0
    tag = TaskTag("V2V") if condition_mode else TaskTag("MV2V")
    return Vcu(prompt, frames, masks, 0, int(n), tag)


def validate(vcu):
    """Return every invariant violation of a unit (empty list when valid). Never raises."""
    violations = []
    frames, masks = np.asarray(vcu.frames), np.asarray(vcu.masks)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        violations.append(Violation("frames", f"expected shape (count, h, w, 3), got {frames.shape}"))
        return violations
    if masks.ndim != 3:
        violations.append(Violation("masks", f"expected shape (count, h, w), got {masks.shape}"))
        return violations
    if vcu.ref_count < 0:
        violations.append(Violation("ref_count", f"must be >= 0, got {vcu.ref_count}"))
    if vcu.video_len < 1:
        violations.append(Violation("video_len", f"must be >= 1, got {vcu.video_len}"))
    expected = vcu.ref_count + vcu.video_len
    if len(frames) != expected:
        violations.append(Violation("frames", f"length {len(frames)} != ref_count + video_len = {expected}"))
    if len(masks) != expected:
        violations.append(Violation("masks", f"length {len(masks)} != ref_count + video_len = {expected}"))
    if frames.shape[1] < 1 or frames.shape[2] < 1:
        violations.append(Violation("frames", f"spatial size must be positive, got {frames.shape[1:3]}"))
    if masks.shape[1:] != frames.shape[1:3]:
        violations.append(Violation("masks", f"spatial shape {masks.shape[1:]} differs from frames {frames.shape[1:3]}"))
    if not np.all(np.isfinite(frames)) or frames.size and (frames.min() < -1.0 or frames.max() > 1.0):
        violations.append(Violation("frames", "values outside [-1, 1]"))
    for i in range(len(masks)):
        m = masks[i]
        if not np.all((m == 0) | (m == 1)):
            violations.append(Violation(f"masks[{i}]", "mask not binary"))
        elif i < vcu.ref_count and np.any(m != 0):
            violations.append(Violation(f"masks[{i}]", "reference mask must be zero"))
    return violations


def is_valid(vcu):
    return not validate(vcu)
