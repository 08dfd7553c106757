"""Per-observation pipeline steps: load clip, adjust context, build streams, cache embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .backbone import Backbone, BackboneError, StubBackbone, TapPoint, select_tap
from .context import ContextMode, apply_context, ingest_tracks
from .dataset import EmbeddingCache, EmbeddingCacheEntry, Manifest, ObservationRecord, atomic_save_npy, _safe
from .streams import ESTIMATORS, INPUT_SIZE, StreamKind, prepare_flow, prepare_rgb

log = logging.getLogger(__name__)


def load_clip(path: str | Path) -> np.ndarray:
    """Decoded clip as a T x H x W x 3 uint8 RGB array (``.npy``, ``.npz`` or any OpenCV-readable video)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"clip not found: {path}")
    if path.suffix == ".npy":
        frames = np.load(path, allow_pickle=False)
    elif path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            frames = z["frames"]
    else:
        import cv2

        cap = cv2.VideoCapture(str(path))
        frames = []
        ok, frame = cap.read()
        while ok:
            frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
            ok, frame = cap.read()
        cap.release()
        if not frames:
            raise ValueError(f"could not decode any frame from {path}")
        frames = np.stack(frames)
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3 or frames.dtype != np.uint8:
        raise ValueError(f"{path}: expected T x H x W x 3 uint8 frames, got {frames.shape} {frames.dtype}")
    return frames


def processed_path(store: str | Path, record: ObservationRecord, context: ContextMode) -> Path:
    context = ContextMode.parse(context)
    return Path(store) / context.value / f"{_safe(record.runner_id)}__{_safe(record.rp_id)}.npy"


def preprocess_observation(
    manifest: Manifest,
    record: ObservationRecord,
    contexts: Iterable[ContextMode],
    store: str | Path,
    track_id: int = 1,
    force: bool = False,
) -> tuple[int, int]:
    """Write one processed clip per context; returns (written, skipped)."""
    contexts = [ContextMode.parse(c) for c in contexts]
    todo = [c for c in contexts if force or not processed_path(store, record, c).exists()]
    if not todo:
        return 0, len(contexts)
    frames = load_clip(manifest.resolve(record.clip_path))
    clip = ingest_tracks(manifest.resolve(record.track_path), frames, track_id, fps=manifest.fps)
    for ctx in todo:
        atomic_save_npy(processed_path(store, record, ctx), apply_context(clip, ctx))
    return len(todo), len(contexts) - len(todo)


@dataclass
class BackboneSet:
    """One backbone per stream kind; RGB and FLOW never share weights."""

    rgb: Backbone
    flow: Backbone

    def __getitem__(self, kind: StreamKind) -> Backbone:
        return self.rgb if StreamKind.parse(kind) is StreamKind.RGB else self.flow

    def describe(self) -> dict:
        return {"RGB": self.rgb.weights_hash, "FLOW": self.flow.weights_hash}


def make_backbones(stub: bool = True, weights: dict | None = None, seed: int = 0, device: str = "cpu") -> BackboneSet:
    """Stub networks, or I3D networks from ``weights = {"RGB": {"path", "sha256"}, "FLOW": {...}}``."""
    if stub:
        return BackboneSet(StubBackbone(StreamKind.RGB, seed), StubBackbone(StreamKind.FLOW, seed))
    from .i3d import I3DBackbone

    weights = weights or {}
    nets = {}
    for kind in (StreamKind.RGB, StreamKind.FLOW):
        spec = weights.get(kind.value) or {}
        if not spec.get("path"):
            raise BackboneError(f"no {kind.value} weights configured (use --stub for the test backbone)")
        nets[kind] = I3DBackbone(kind, spec["path"], spec.get("sha256"), device=device)
    return BackboneSet(nets[StreamKind.RGB], nets[StreamKind.FLOW])


def stream_tensor(frames: np.ndarray, kind: StreamKind, input_size: int = INPUT_SIZE, flow: str = "block"):
    if kind is StreamKind.RGB:
        return prepare_rgb(frames, input_size)
    return prepare_flow(frames, input_size, ESTIMATORS[flow]())


def extract_observation(
    record: ObservationRecord,
    store: str | Path,
    cache: EmbeddingCache,
    backbones: BackboneSet,
    contexts: Iterable[ContextMode],
    taps: Iterable[TapPoint],
    streams: Iterable[StreamKind] = (StreamKind.RGB, StreamKind.FLOW),
    input_size: int = INPUT_SIZE,
    flow: str = "block",
    force: bool = False,
) -> tuple[int, int]:
    """Fill the cache for one observation; returns (written, skipped).

    One forward pass per (context, stream) serves every requested tap.
    Entries that are absent or fail their checksum are recomputed.
    """
    taps = [TapPoint.parse(t) for t in taps]
    written = skipped = 0
    for ctx in contexts:
        ctx = ContextMode.parse(ctx)
        frames = None
        for kind in streams:
            kind = StreamKind.parse(kind)
            keys = {tap: (record.runner_id, record.rp_id, ctx.value, kind.value, tap.value) for tap in taps}
            todo = [tap for tap, key in keys.items() if force or cache.read(key) is None]
            skipped += len(taps) - len(todo)
            if not todo:
                continue
            if frames is None:
                path = processed_path(store, record, ctx)
                if not path.exists():
                    raise FileNotFoundError(f"processed clip missing: {path} (run preprocess first)")
                frames = np.load(path, allow_pickle=False)
            out = backbones[kind].forward(stream_tensor(frames, kind, input_size, flow))
            for tap in todo:
                cache.write(EmbeddingCacheEntry(keys[tap], select_tap(out, tap), tap.dim))
                written += 1
    return written, skipped
