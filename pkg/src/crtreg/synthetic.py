"""Synthetic race footage with a planted CRT signal.

Each runner is a textured square crossing a flat mid-gray scene. A latent
``z`` in [0, 1], affine in the runner's clean CRT, sets both the square's
brightness and its speed, so the RGB and the flow streams each carry the
target. Recorded CRTs add Gaussian noise of ``noise_sigma`` in normalised
units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, shift

from .dataset import Manifest, ObservationRecord, atomic_save_npy, atomic_write_text, write_manifest

HOUR = 3600
# (base, span) in hours per recording point; CRT = base + span * pace
RP_SCHEDULE = {"RP4": (8.0, 6.0), "RP5": (9.5, 8.0), "RP6": (11.0, 9.5)}


@dataclass(frozen=True)
class SyntheticSpec:
    n_runners: int = 40
    frames: int = 12
    size: int = 64
    square: int = 16
    noise_sigma: float = 0.01
    seed: int = 0
    drop_track_rows: int = 2  # tracker dropouts per clip, interior frames

    @property
    def crt_range(self) -> tuple[float, float]:
        lo = min(b for b, _ in RP_SCHEDULE.values()) * HOUR
        hi = max(b + s for b, s in RP_SCHEDULE.values()) * HOUR
        return lo, hi


def _texture(rng: np.random.Generator, side: int) -> np.ndarray:
    tex = gaussian_filter(rng.uniform(size=(side, side)), 1.0)
    return (tex - tex.min()) / (tex.max() - tex.min())


def render_clip(z: float, spec: SyntheticSpec, texture: np.ndarray) -> tuple[np.ndarray, list[tuple]]:
    """Frames (T x H x W x 3 uint8) and the runner's exact boxes."""
    s, H = spec.square, spec.size
    gain = 40.0 + 80.0 * z
    speed = 1.0 + 2.0 * z  # px/frame
    tint = np.array([1.0, 0.9, 0.8])
    y0 = (H - s) / 2.0
    runner = 130.0 + gain * texture  # always brighter than the 128 scene
    frames, boxes = [], []
    for t in range(spec.frames):
        x = 2.0 + speed * t
        xi, yi = int(np.floor(x)), int(np.floor(y0))
        layer = np.zeros((H, H))
        mask = np.zeros((H, H))
        layer[yi : yi + s, xi : xi + s] = runner
        mask[yi : yi + s, xi : xi + s] = 1.0
        frac = (y0 - yi, x - xi)
        gray = 128.0 * (1.0 - shift(mask, frac, order=1)) + shift(layer, frac, order=1)
        frame = 128.0 + (gray[..., None] - 128.0) * tint
        frames.append(np.clip(np.rint(frame), 0, 255).astype(np.uint8))
        boxes.append((x, y0, x + s, y0 + s))
    return np.stack(frames), boxes


def make_synthetic_dataset(root: str | Path, spec: SyntheticSpec = SyntheticSpec()) -> Manifest:
    """Write clips (``.npy``), track files and ``manifest.jsonl`` under ``root``.

    Also writes ``latents.json`` mapping ``runner/rp`` to the planted ``z``.
    """
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    texture = _texture(rng, spec.square)
    lo, hi = spec.crt_range
    records, latents = [], {}
    for i in range(spec.n_runners):
        runner = f"runner_{i:03d}"
        pace = rng.uniform()
        for rp, (base, span) in RP_SCHEDULE.items():
            clean = (base + span * pace) * HOUR
            noise = float(np.clip(rng.normal(0.0, spec.noise_sigma), -3 * spec.noise_sigma, 3 * spec.noise_sigma))
            crt = int(round(clean + noise * hi))
            z = (clean - lo) / (hi - lo)
            frames, boxes = render_clip(z, spec, texture)
            clip_rel = f"clips/{runner}__{rp}.npy"
            track_rel = f"tracks/{runner}__{rp}.csv"
            atomic_save_npy(root / clip_rel, frames)
            atomic_write_text(root / track_rel, _track_csv(boxes, rng, spec))
            records.append(ObservationRecord(runner, rp, clip_rel, track_rel, crt))
            latents[f"{runner}/{rp}"] = z
    manifest = Manifest(records, tuple(RP_SCHEDULE), fps=25.0, clip_seconds=spec.frames / 25.0)
    write_manifest(manifest, root / "manifest.jsonl")
    atomic_write_text(root / "latents.json", json.dumps(latents, indent=1, sort_keys=True))
    return Manifest(records, tuple(RP_SCHEDULE), 25.0, spec.frames / 25.0, source=str(root / "manifest.jsonl"))


def _track_csv(boxes, rng, spec: SyntheticSpec) -> str:
    drop = set()
    if spec.drop_track_rows and len(boxes) > 2:
        drop = set(rng.choice(np.arange(1, len(boxes) - 1), size=min(spec.drop_track_rows, len(boxes) - 2), replace=False))
    lines = ["frame_index,track_id,x0,y0,x1,y1,score"]
    for t, (x0, y0, x1, y1) in enumerate(boxes):
        if t not in drop:
            lines.append(f"{t},1,{x0:.4f},{y0:.4f},{x1:.4f},{y1:.4f},0.95")
        # a bystander the pipeline must ignore
        lines.append(f"{t},2,0.0,0.0,6.0,10.0,0.80")
    return "\n".join(lines) + "\n"


def translating_texture(frames: int = 8, size: int = 64, step: tuple[int, int] = (3, 0), seed: int = 0) -> np.ndarray:
    """Smooth random texture moving by ``step = (dx, dy)`` whole pixels per frame (T x H x W x 3 uint8)."""
    rng = np.random.default_rng(seed)
    dx, dy = step
    margin = max(abs(dx), abs(dy)) * frames
    canvas = gaussian_filter(rng.uniform(0, 255, (size + 2 * margin, size + 2 * margin)), 1.5)
    canvas = (canvas - canvas.min()) / (canvas.max() - canvas.min()) * 255
    out = []
    for t in range(frames):
        # content moves by +step, so the crop window moves by -step
        y, x = margin - dy * t, margin - dx * t
        out.append(canvas[y : y + size, x : x + size])
    gray = np.clip(np.rint(np.stack(out)), 0, 255).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=-1)


def heteroscedastic_predictions(n: int = 400, base_sigma: float = 0.01, seed: int = 0) -> list[tuple[float, float]]:
    """``(y_true, y_pred)`` pairs whose noise level doubles from one timing quartile to the next."""
    rng = np.random.default_rng(seed)
    y_true = np.sort(rng.uniform(0.1, 0.9, n))
    quartile = np.minimum((4 * np.arange(n)) // n, 3)
    y_pred = y_true + rng.normal(0.0, 1.0, n) * base_sigma * 2.0**quartile
    return list(zip(y_true.tolist(), y_pred.tolist()))
