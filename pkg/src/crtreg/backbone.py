"""Two-stream backbone adapter, tap points and embedding fusion."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol

import numpy as np

from .context import ContextMode
from .streams import StreamKind, StreamTensor

LOGIT_DIM = 400
FEATURE_DIM = 1024


class TapPoint(str, enum.Enum):
    LOGITS_400 = "400"
    PENULTIMATE_1024 = "1024"

    @property
    def dim(self) -> int:
        return LOGIT_DIM if self is TapPoint.LOGITS_400 else FEATURE_DIM

    @classmethod
    def parse(cls, value: "str | int | TapPoint") -> "TapPoint":
        if isinstance(value, cls):
            return value
        text = str(value).upper()
        for tap in cls:
            if text in (tap.value, tap.name):
                return tap
        raise ValueError(f"unknown tap point {value!r}")


class FusionMode(str, enum.Enum):
    SUM = "SUM"
    CONCAT = "CONCAT"

    @classmethod
    def parse(cls, value: "str | FusionMode") -> "FusionMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


class BackboneError(RuntimeError):
    pass


class FusionError(ValueError):
    pass


def embedding_dim(tap: TapPoint, fusion: Optional[FusionMode]) -> int:
    tap = TapPoint.parse(tap)
    return tap.dim * 2 if fusion is FusionMode.CONCAT else tap.dim


@dataclass
class Embedding:
    vector: np.ndarray
    tap: TapPoint
    streams: frozenset = field(default_factory=frozenset)
    fusion: Optional[FusionMode] = None
    context: Optional[ContextMode] = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32).ravel()
        self.tap = TapPoint.parse(self.tap)
        self.streams = frozenset(StreamKind.parse(s) for s in self.streams)
        if not self.streams:
            raise ValueError("embedding needs at least one stream")
        if (self.fusion is None) != (len(self.streams) == 1):
            raise ValueError("fusion is set iff the embedding covers both streams")
        expected = embedding_dim(self.tap, self.fusion)
        if self.dim != expected:
            raise ValueError(
                f"dim {self.dim} inconsistent with tap {self.tap.value} / fusion {self.fusion}: expected {expected}"
            )

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    @property
    def label(self) -> str:
        """Row label in the ablation table, e.g. ``2048-RGB∪Flow``."""
        names = {StreamKind.RGB: "RGB", StreamKind.FLOW: "Flow"}
        if self.fusion is None:
            stream = names[next(iter(self.streams))]
        else:
            stream = "RGB+Flow" if self.fusion is FusionMode.SUM else "RGB∪Flow"
        return f"{self.dim}-{stream}"


@dataclass(frozen=True)
class BackboneOutput:
    logits: np.ndarray  # (400,)
    pool_avg: np.ndarray  # (1024,) global spatio-temporal average pool
    pool_max: np.ndarray  # (1024,) global spatio-temporal max pool


class Backbone(Protocol):
    """One pretrained stream network. Not required to be reentrant."""

    kind: StreamKind
    weights_hash: str

    def forward(self, stream: StreamTensor) -> BackboneOutput: ...


def penultimate_features(out: BackboneOutput) -> np.ndarray:
    """Combine the two pooled 1024-vectors by elementwise average."""
    return (out.pool_avg.astype(np.float32) + out.pool_max.astype(np.float32)) / np.float32(2.0)


def select_tap(out: BackboneOutput, tap: TapPoint) -> np.ndarray:
    tap = TapPoint.parse(tap)
    if tap is TapPoint.LOGITS_400:
        return np.asarray(out.logits, dtype=np.float32)
    return penultimate_features(out)


def extract(
    backbone: Backbone,
    stream: StreamTensor,
    tap: TapPoint | str,
    context: ContextMode | None = None,
) -> Embedding:
    if stream.kind is not backbone.kind:
        raise BackboneError(f"{stream.kind.value} stream fed to a {backbone.kind.value} backbone")
    out = backbone.forward(stream)
    return Embedding(select_tap(out, tap), tap, frozenset({stream.kind}), None, context)


def fuse(a: Embedding, b: Embedding, mode: FusionMode | str) -> Embedding:
    """Sum or concatenate two single-stream embeddings; concatenation is always RGB first."""
    mode = FusionMode.parse(mode)
    if a.tap is not b.tap:
        raise FusionError(f"tap mismatch: {a.tap.value} vs {b.tap.value}")
    if a.dim != b.dim:
        raise FusionError(f"dim mismatch: {a.dim} vs {b.dim}")
    if a.streams & b.streams:
        raise FusionError("embeddings share a stream")
    if a.fusion is not None or b.fusion is not None:
        raise FusionError("only single-stream embeddings can be fused")
    if StreamKind.FLOW in a.streams:
        a, b = b, a
    if mode is FusionMode.SUM:
        vector = a.vector + b.vector
    else:
        vector = np.concatenate([a.vector, b.vector])
    context = a.context if a.context == b.context else None
    return Embedding(vector, a.tap, a.streams | b.streams, mode, context)


# ------------------------------------------------------------------ stub


def _stream_seed(kind: StreamKind, seed: int) -> np.random.Generator:
    tag = 1 if kind is StreamKind.RGB else 2
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


class StubBackbone:
    """Deterministic stand-in for a pretrained stream network.

    The clip is cut into temporal segments of ``segment`` frames (the real
    network's temporal stride at its last block). Each segment is summarised
    by per-channel means and mean magnitudes; a fixed random projection plus a
    fixed per-position bias maps them to a 1024-channel feature map, which is
    average- and max-pooled. The position bias dominates the signal, so the
    max pool picks a fixed segment per channel and stays affine in the
    statistics. Logits are a fixed linear read-out of the average pool.
    """

    max_positions = 64

    def __init__(self, kind: StreamKind | str, seed: int = 0, segment: int = 8):
        self.kind = StreamKind.parse(kind)
        self.seed = seed
        self.segment = segment
        channels = 3 if self.kind is StreamKind.RGB else 2
        n_stats = 2 * channels
        rng = _stream_seed(self.kind, seed)
        self._proj = rng.normal(0.0, 1.0 / np.sqrt(n_stats), size=(n_stats, FEATURE_DIM))
        self._position_bias = rng.normal(0.0, 1.0, size=(self.max_positions, FEATURE_DIM))
        self._head = rng.normal(0.0, 1.0 / np.sqrt(FEATURE_DIM), size=(FEATURE_DIM, LOGIT_DIM))
        self._bias = rng.normal(0.0, 0.1, size=LOGIT_DIM)
        self.weights_hash = f"stub-{self.kind.value.lower()}-{seed}"

    def segment_statistics(self, data: np.ndarray) -> np.ndarray:
        data = data.astype(np.float64)
        stats = []
        for start in range(0, data.shape[0], self.segment):
            chunk = data[start : start + self.segment]
            stats.append(np.concatenate([chunk.mean(axis=(0, 1, 2)), np.abs(chunk).mean(axis=(0, 1, 2))]))
        return np.stack(stats[: self.max_positions])

    def forward(self, stream: StreamTensor) -> BackboneOutput:
        if stream.kind is not self.kind:
            raise BackboneError(f"{stream.kind.value} stream fed to a {self.kind.value} backbone")
        stats = self.segment_statistics(stream.data)
        fmap = stats @ self._proj + self._position_bias[: len(stats)]  # positions x 1024
        pool_avg = fmap.mean(axis=0)
        pool_max = fmap.max(axis=0)
        logits = pool_avg @ self._head + self._bias
        return BackboneOutput(
            logits.astype(np.float32), pool_avg.astype(np.float32), pool_max.astype(np.float32)
        )


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dimension_table(taps: Iterable[TapPoint] = tuple(TapPoint)) -> dict[tuple[str, str], int]:
    """Embedding size for every (tap, stream selection) combination."""
    table = {}
    for tap in taps:
        for label, fusion in (("RGB", None), ("FLOW", None), ("SUM", FusionMode.SUM), ("CONCAT", FusionMode.CONCAT)):
            table[(tap.value, label)] = embedding_dim(tap, fusion)
    return table
