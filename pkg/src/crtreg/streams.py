"""Backbone inputs: the RGB stream and the dense optical-flow stream."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy.ndimage import uniform_filter

INPUT_SIZE = 224
FLOW_BOUND = 20.0


class StreamKind(str, enum.Enum):
    RGB = "RGB"
    FLOW = "FLOW"

    @classmethod
    def parse(cls, value: "str | StreamKind") -> "StreamKind":
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


class FlowError(RuntimeError):
    pass


@dataclass
class StreamTensor:
    kind: StreamKind
    data: np.ndarray  # T x H x W x C, float32
    value_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        self.kind = StreamKind.parse(self.kind)
        channels = 3 if self.kind is StreamKind.RGB else 2
        if self.data.ndim != 4 or self.data.shape[-1] != channels:
            raise ValueError(f"{self.kind.value} stream must be T x H x W x {channels}, got {self.data.shape}")
        lo, hi = self.value_range
        if self.data.size and (self.data.min() < lo or self.data.max() > hi):
            raise ValueError(f"{self.kind.value} stream values leave declared range {self.value_range}")

    @property
    def frames(self) -> int:
        return self.data.shape[0]


class FlowEstimator(Protocol):
    """Frame pair (H x W grayscale float) -> H x W x 2 displacement (u, v) in pixels.

    Implementations set ``reentrant = True`` when calls may overlap; otherwise
    callers serialize them.
    """

    reentrant: bool

    def __call__(self, prev: np.ndarray, nxt: np.ndarray) -> np.ndarray: ...


def resize_bilinear(frames: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a T x H x W x C stack using half-pixel centres."""
    out_h, out_w = (size, size) if isinstance(size, int) else size
    t, h, w, c = frames.shape
    src = frames.astype(np.float64, copy=False)
    if (h, w) == (out_h, out_w):
        return src.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    rows = src[:, y0] * (1 - wy)[None, :, None, None] + src[:, y1] * wy[None, :, None, None]
    out = rows[:, :, x0] * (1 - wx)[None, None, :, None] + rows[:, :, x1] * wx[None, None, :, None]
    return out


def to_gray(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        return frames
    return frames @ np.array([0.299, 0.587, 0.114])


def prepare_rgb(frames: np.ndarray, size: int = INPUT_SIZE) -> StreamTensor:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise ValueError("prepare_rgb needs a non-empty T x H x W x 3 frame sequence")
    resized = resize_bilinear(frames, size)
    data = resized / 127.5 - 1.0
    return StreamTensor(StreamKind.RGB, np.clip(data, -1.0, 1.0).astype(np.float32))


def clip_and_scale(flow: np.ndarray, bound: float = FLOW_BOUND) -> np.ndarray:
    return (np.clip(flow, -bound, bound) / bound).astype(np.float32)


class BlockMatchingFlow:
    """Exhaustive SSD block matching with parabolic sub-pixel refinement.

    Coarse but dependency-free. Ties (e.g. on flat regions) resolve to the
    smallest displacement, so static constant areas yield exactly zero flow.
    """

    reentrant = True

    def __init__(self, radius: int = 6, window: int = 9):
        self.radius = radius
        self.window = window
        r = radius
        dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
        self._dy = dy.ravel()
        self._dx = dx.ravel()
        self._bias = 1e-9 * (self._dx**2 + self._dy**2)

    @property
    def support(self) -> int:
        """Chebyshev distance within which image content can influence a pixel's estimate."""
        return self.window // 2 + self.radius

    def __call__(self, prev: np.ndarray, nxt: np.ndarray) -> np.ndarray:
        prev = np.asarray(prev, dtype=np.float64)
        nxt = np.asarray(nxt, dtype=np.float64)
        if prev.shape != nxt.shape or prev.ndim != 2:
            raise ValueError(f"frame pair shapes differ or are not 2-D: {prev.shape} vs {nxt.shape}")
        h, w = prev.shape
        r = self.radius
        padded = np.pad(nxt, r, mode="edge")
        cost = np.empty((len(self._dy), h, w))
        for k, (dy, dx) in enumerate(zip(self._dy, self._dx)):
            shifted = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            cost[k] = uniform_filter((shifted - prev) ** 2, size=self.window, mode="nearest")
        cost += self._bias[:, None, None]
        best = cost.argmin(axis=0)
        u = self._dx[best].astype(np.float64)
        v = self._dy[best].astype(np.float64)

        side = 2 * r + 1
        iy, ix = np.divmod(best, side)
        u += self._refine(cost, iy, ix, side, axis="x")
        v += self._refine(cost, iy, ix, side, axis="y")
        return np.stack([u, v], axis=-1)

    @staticmethod
    def _refine(cost, iy, ix, side, axis):
        inner = (ix > 0) & (ix < side - 1) if axis == "x" else (iy > 0) & (iy < side - 1)
        step = 1 if axis == "x" else side
        k = iy * side + ix
        km = np.where(inner, k - step, k)
        kp = np.where(inner, k + step, k)
        take = lambda idx: np.take_along_axis(cost, idx[None], axis=0)[0]
        c0, cm, cp = take(k), take(km), take(kp)
        denom = cm - 2 * c0 + cp
        with np.errstate(divide="ignore", invalid="ignore"):
            off = np.where(inner & (denom > 1e-12), 0.5 * (cm - cp) / denom, 0.0)
        return np.clip(off, -0.5, 0.5)


def farneback_flow(prev: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    """OpenCV Farneback dense flow; needs ``opencv-python``."""
    import cv2

    a = np.clip(prev, 0, 255).astype(np.uint8)
    b = np.clip(nxt, 0, 255).astype(np.uint8)
    return cv2.calcOpticalFlowFarneback(a, b, None, 0.5, 3, 15, 3, 5, 1.2, 0).astype(np.float64)


farneback_flow.reentrant = True

ESTIMATORS: dict[str, Callable[[], FlowEstimator]] = {
    "block": BlockMatchingFlow,
    "farneback": lambda: farneback_flow,
}


def compute_flow(
    frames: np.ndarray,
    estimator: FlowEstimator | None = None,
    bound: float = FLOW_BOUND,
) -> StreamTensor:
    """Dense flow for each consecutive pair, clipped to +-bound px and scaled to [-1, 1].

    The T-1 fields are padded back to T by repeating the last one.
    """
    frames = np.asarray(frames)
    if frames.shape[0] < 2:
        raise ValueError("compute_flow needs at least 2 frames")
    estimator = estimator or BlockMatchingFlow()
    gray = to_gray(frames)
    fields = []
    for t in range(len(gray) - 1):
        try:
            field = np.asarray(estimator(gray[t], gray[t + 1]), dtype=np.float64)
        except Exception as exc:
            raise FlowError(f"flow estimation failed for frame pair ({t}, {t + 1}): {exc}") from exc
        if field.shape != gray.shape[1:] + (2,):
            raise FlowError(f"flow estimator returned {field.shape} for frame pair ({t}, {t + 1})")
        fields.append(clip_and_scale(field, bound))
    fields.append(fields[-1])
    return StreamTensor(StreamKind.FLOW, np.stack(fields))


def prepare_flow(
    frames: np.ndarray,
    size: int = INPUT_SIZE,
    estimator: FlowEstimator | None = None,
    bound: float = FLOW_BOUND,
) -> StreamTensor:
    """Flow at the frames' native resolution, then resized to ``size``; displacements keep source-pixel units."""
    flow = compute_flow(frames, estimator, bound)
    resized = np.clip(resize_bilinear(flow.data, size), -1.0, 1.0)
    return StreamTensor(StreamKind.FLOW, resized.astype(np.float32))
