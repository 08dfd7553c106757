"""Footage pre-processing: isolate the tracked runner from the scene.

Given per-frame boxes from an external tracker, every pixel outside the
(padded) runner box is replaced by a background ``tau``: a constant
mid-gray frame (BB) or the clip's average frame (SB).
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

NEUTRAL_VALUE = 128
BOX_PADDING = 0.10

Box = tuple[float, float, float, float]


class ContextMode(str, enum.Enum):
    BB = "BB"  # runner box over a neutral frame
    SB = "SB"  # runner box over the still (average) background

    @classmethod
    def parse(cls, value: "str | ContextMode") -> "ContextMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


class TrackError(ValueError):
    pass


@dataclass
class TrackedClip:
    frames: np.ndarray  # T x H x W x 3, uint8
    boxes: list[Optional[Box]]
    fps: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[0] == 0 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be a non-empty T x H x W x 3 array, got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {self.frames.dtype}")
        if len(self.boxes) != len(self.frames):
            raise ValueError(f"{len(self.boxes)} boxes for {len(self.frames)} frames")
        h, w = self.height, self.width
        for t, box in enumerate(self.boxes):
            if box is not None and not (0 <= box[0] < box[2] <= w and 0 <= box[1] < box[3] <= h):
                raise TrackError(f"frame {t}: box {box} outside a {w}x{h} frame or degenerate")

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def __len__(self) -> int:
        return self.frames.shape[0]


def read_track_rows(track_file: str | os.PathLike) -> list[tuple[int, int, float, float, float, float, float]]:
    """Parse ``frame_index,track_id,x0,y0,x1,y1,score`` rows; ``#`` lines and a header are skipped."""
    rows = []
    with open(track_file, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            try:
                frame, tid = int(row[0]), int(row[1])
                x0, y0, x1, y1, score = (float(v) for v in row[2:7])
            except (ValueError, IndexError):
                if lineno == 1:  # header
                    continue
                raise TrackError(f"{track_file}:{lineno}: malformed track row {row!r}") from None
            rows.append((frame, tid, x0, y0, x1, y1, score))
    return rows


def ingest_tracks(track_file: str | os.PathLike, frames: np.ndarray, track_id: int, fps: float = 25.0) -> TrackedClip:
    """Align the designated track's boxes with ``frames``; frames without a row are ``None``."""
    frames = np.asarray(frames)
    n, h, w = frames.shape[:3]
    boxes: list[Optional[Box]] = [None] * n
    scores = [-math.inf] * n
    found = False
    for frame, tid, x0, y0, x1, y1, score in read_track_rows(track_file):
        if tid != track_id:
            continue
        found = True
        if not 0 <= frame < n:
            log.warning("%s: frame %d beyond clip of %d frames, ignored", track_file, frame, n)
            continue
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise TrackError(f"{track_file}: frame {frame} box {(x0, y0, x1, y1)} outside {w}x{h} frame")
        if score > scores[frame]:
            boxes[frame] = (x0, y0, x1, y1)
            scores[frame] = score
    if not found:
        raise TrackError(f"runner not found: no rows for track id {track_id} in {track_file}")
    return TrackedClip(frames=frames, boxes=boxes, fps=fps)


def fill_missing_boxes(boxes: Sequence[Optional[Box]]) -> list[Box]:
    """Linearly interpolate interior gaps; hold the nearest box across clip edges."""
    present = [i for i, b in enumerate(boxes) if b is not None]
    if not present:
        raise TrackError("no boxes present in clip")
    idx = np.asarray(present, dtype=float)
    vals = np.asarray([boxes[i] for i in present], dtype=float)
    t = np.arange(len(boxes), dtype=float)
    # np.interp holds endpoint values outside [idx[0], idx[-1]]
    filled = np.stack([np.interp(t, idx, vals[:, c]) for c in range(4)], axis=1)
    out = []
    for i, b in enumerate(boxes):
        out.append(tuple(b) if b is not None else tuple(float(v) for v in filled[i]))
    return out


def pad_box(box: Box, width: int, height: int, padding: float = BOX_PADDING) -> tuple[int, int, int, int]:
    """Grow a box by ``padding`` of its size per side and snap outward to integer pixel bounds."""
    x0, y0, x1, y1 = box
    dx, dy = (x1 - x0) * padding, (y1 - y0) * padding
    return (
        max(0, math.floor(x0 - dx)),
        max(0, math.floor(y0 - dy)),
        min(width, math.ceil(x1 + dx)),
        min(height, math.ceil(y1 + dy)),
    )


def context_masks(clip: TrackedClip, padding: float = BOX_PADDING) -> np.ndarray:
    """Boolean T x H x W array, True where the runner box (after padding) keeps input pixels."""
    masks = np.zeros(clip.frames.shape[:3], dtype=bool)
    for t, box in enumerate(fill_missing_boxes(clip.boxes)):
        x0, y0, x1, y1 = pad_box(box, clip.width, clip.height, padding)
        masks[t, y0:y1, x0:x1] = True
    return masks


def average_frame(clip: TrackedClip | np.ndarray) -> np.ndarray:
    """Per-pixel mean over all frames, rounded half-up to uint8."""
    frames = clip.frames if isinstance(clip, TrackedClip) else np.asarray(clip)
    if frames.shape[0] == 0:
        raise ValueError("average_frame needs at least one frame")
    n = frames.shape[0]
    total = frames.astype(np.int64).sum(axis=0)
    # floor(total / n + 1/2) in exact integer arithmetic
    return ((2 * total + n) // (2 * n)).astype(np.uint8)


def background(clip: TrackedClip, mode: ContextMode, neutral: int = NEUTRAL_VALUE) -> np.ndarray:
    mode = ContextMode.parse(mode)
    if mode is ContextMode.BB:
        return np.full(clip.frames.shape[1:], neutral, dtype=np.uint8)
    return average_frame(clip)


def apply_context(
    clip: TrackedClip,
    mode: ContextMode | str,
    padding: float = BOX_PADDING,
    neutral: int = NEUTRAL_VALUE,
) -> np.ndarray:
    """Return frames with the padded runner box kept and everything else set to the background."""
    tau = background(clip, mode, neutral)
    masks = context_masks(clip, padding)
    return np.where(masks[..., None], clip.frames, tau[None]).astype(np.uint8)
