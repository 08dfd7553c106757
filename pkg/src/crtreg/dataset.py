"""Dataset manifest, observation records and the on-disk embedding cache.

Manifest files are UTF-8 JSON Lines. Lines starting with ``#`` and blank
lines are ignored. The first remaining line is a header object::

    {"recording_points": ["RP4", "RP5", "RP6"], "fps": 25, "clip_seconds": 7}

and every following line is one observation with the fields, in order,
``runner_id, rp_id, clip_path, track_path, crt_seconds``.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

RECORD_FIELDS = ("runner_id", "rp_id", "clip_path", "track_path", "crt_seconds")
SINGLE_STREAM_DIMS = (400, 1024)


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class ObservationRecord:
    runner_id: str
    rp_id: str
    clip_path: str
    track_path: str
    crt_seconds: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.runner_id, self.rp_id)

    def to_json(self) -> dict:
        return {name: getattr(self, name) for name in RECORD_FIELDS}


@dataclass(frozen=True)
class Manifest:
    records: tuple[ObservationRecord, ...]
    recording_points: tuple[str, ...]
    fps: float = 25.0
    clip_seconds: float = 7.0
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "recording_points", tuple(self.recording_points))
        validate_records(self.records, self.recording_points)

    def __len__(self) -> int:
        return len(self.records)

    def rp_index(self, rp_id: str) -> int:
        return self.recording_points.index(rp_id)

    def resolve(self, path: str) -> Path:
        """Resolve a record path relative to the manifest file's directory."""
        p = Path(path)
        if p.is_absolute() or self.source is None:
            return p
        return Path(self.source).parent / p

    def header(self) -> dict:
        return {
            "recording_points": list(self.recording_points),
            "fps": self.fps,
            "clip_seconds": self.clip_seconds,
        }


def validate_records(
    records: tuple[ObservationRecord, ...],
    rps: tuple[str, ...],
    lines: list[int] | None = None,
) -> None:
    """Check every manifest invariant; ``lines`` maps records to source line numbers."""
    where = (lambda i: f"line {lines[i]}") if lines else (lambda i: f"record {i}")
    if not rps:
        raise ManifestError("recording_points must be non-empty")
    if len(set(rps)) != len(rps):
        raise ManifestError(f"recording_points contain duplicates: {list(rps)}")
    if not records:
        raise ManifestError("empty manifest")

    seen: dict[tuple[str, str], int] = {}
    by_runner: dict[str, list[tuple[int, int, int]]] = {}
    for i, rec in enumerate(records):
        if rec.rp_id not in rps:
            raise ManifestError(f"{where(i)}: unknown recording point {rec.rp_id!r}")
        if rec.crt_seconds < 0:
            raise ManifestError(f"{where(i)}: negative crt_seconds {rec.crt_seconds}")
        if rec.key in seen:
            raise ManifestError(
                f"duplicate (runner_id, rp_id) {rec.key} at {where(seen[rec.key])} and {where(i)}"
            )
        seen[rec.key] = i
        by_runner.setdefault(rec.runner_id, []).append((rps.index(rec.rp_id), rec.crt_seconds, i))

    for runner, points in by_runner.items():
        points.sort()
        for (_, crt_a, ia), (_, crt_b, ib) in zip(points, points[1:]):
            if crt_b <= crt_a:
                raise ManifestError(
                    f"non-monotone CRT for runner {runner!r}: {crt_a} ({where(ia)}) "
                    f"then {crt_b} ({where(ib)})"
                )


def _parse_record(obj: dict, lineno: int) -> ObservationRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected an object")
    missing = [f for f in RECORD_FIELDS if f not in obj]
    if missing:
        raise ManifestError(f"line {lineno}: missing field(s) {missing}")
    crt = obj["crt_seconds"]
    if isinstance(crt, bool) or not isinstance(crt, (int, float)) or crt != int(crt):
        raise ManifestError(f"line {lineno}: crt_seconds must be an integer, got {crt!r}")
    return ObservationRecord(
        runner_id=str(obj["runner_id"]),
        rp_id=str(obj["rp_id"]),
        clip_path=str(obj["clip_path"]),
        track_path=str(obj["track_path"]),
        crt_seconds=int(crt),
    )


def load_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    header = None
    records: list[ObservationRecord] = []
    linenos: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: malformed record ({exc.msg})") from None
            if header is None:
                if not isinstance(obj, dict) or "recording_points" not in obj:
                    raise ManifestError(f"line {lineno}: expected header with recording_points")
                header = obj
                continue
            records.append(_parse_record(obj, lineno))
            linenos.append(lineno)
    if header is None:
        raise ManifestError("empty manifest")

    rps = header["recording_points"]
    if not isinstance(rps, list):
        raise ManifestError("header: recording_points must be a list")
    rps = tuple(str(r) for r in rps)
    validate_records(tuple(records), rps, linenos)
    return Manifest(
        records=tuple(records),
        recording_points=rps,
        fps=float(header.get("fps", 25.0)),
        clip_seconds=float(header.get("clip_seconds", 7.0)),
        source=str(path),
    )


def dump_manifest(manifest: Manifest) -> str:
    lines = [json.dumps(manifest.header())]
    lines += [json.dumps(rec.to_json()) for rec in manifest.records]
    return "\n".join(lines) + "\n"


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> Path:
    return atomic_write_text(path, dump_manifest(manifest))


# ---------------------------------------------------------------- atomic I/O


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: str | os.PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_save_npy(path: str | os.PathLike, array: np.ndarray) -> Path:
    buf = io.BytesIO()
    np.save(buf, array, allow_pickle=False)
    return atomic_write_bytes(path, buf.getvalue())


# ----------------------------------------------------------- embedding cache

CacheKey = tuple  # (runner_id, rp_id, context_mode, stream, tap_point)

_SAFE = re.compile(r"[^A-Za-z0-9._-]")


def _safe(part: str) -> str:
    return _SAFE.sub("_", str(part))


def _key_str(key: CacheKey) -> tuple[str, ...]:
    runner, rp, context, stream, tap = key
    return tuple(str(getattr(v, "value", v)) for v in (runner, rp, context, stream, tap))


@dataclass
class EmbeddingCacheEntry:
    key: CacheKey
    vector: np.ndarray
    dim: int

    def __post_init__(self):
        self.key = _key_str(self.key)
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1 or self.vector.shape[0] != self.dim:
            raise CacheError(
                f"length mismatch for {self.key}: vector has {self.vector.size} values, "
                f"declared dim {self.dim}"
            )
        if self.dim not in SINGLE_STREAM_DIMS:
            raise CacheError(f"single-stream entries must have dim in {SINGLE_STREAM_DIMS}")


class EmbeddingCache:
    """One ``.npy`` per key plus a JSON sidecar holding dim, dtype, config hash and checksum.

    Layout: ``root/<context>/<tap>/<runner>__<rp>__<stream>.npy``.
    """

    def __init__(self, root: str | os.PathLike, config_hash: str = ""):
        self.root = Path(root)
        self.config_hash = config_hash

    def path_for(self, key: CacheKey) -> Path:
        runner, rp, context, stream, tap = _key_str(key)
        name = f"{_safe(runner)}__{_safe(rp)}__{_safe(stream)}.npy"
        return self.root / _safe(context) / _safe(tap) / name

    def write(self, entry: EmbeddingCacheEntry) -> CacheKey:
        path = self.path_for(entry.key)
        data = entry.vector.astype("<f4")
        meta = {
            "key": list(entry.key),
            "dim": entry.dim,
            "dtype": "float32",
            "config_hash": self.config_hash,
            "sha256": hashlib.sha256(data.tobytes()).hexdigest(),
        }
        # vector first: a sidecar only ever points at a complete array
        atomic_save_npy(path, data)
        atomic_write_text(path.with_suffix(".json"), json.dumps(meta, sort_keys=True) + "\n")
        return entry.key

    def read(self, key: CacheKey) -> EmbeddingCacheEntry | None:
        """Return the entry, or ``None`` when it is absent or fails its checksum.

        A cache opened with a non-empty ``config_hash`` also rejects entries
        written under a different hash.
        """
        path = self.path_for(key)
        meta_path = path.with_suffix(".json")
        if not path.exists() or not meta_path.exists():
            return None
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            vector = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            log.warning("unreadable cache entry %s (%s); treating as absent", path, exc)
            return None
        if hashlib.sha256(vector.astype("<f4").tobytes()).hexdigest() != meta.get("sha256"):
            log.warning("checksum mismatch for cache entry %s; treating as absent", path)
            return None
        if vector.shape != (meta.get("dim"),):
            log.warning("dim mismatch for cache entry %s; treating as absent", path)
            return None
        if self.config_hash and meta.get("config_hash") != self.config_hash:
            log.info("cache entry %s was built under another backbone config; treating as stale", path)
            return None
        return EmbeddingCacheEntry(key=_key_str(key), vector=vector, dim=int(meta["dim"]))

    def __contains__(self, key: CacheKey) -> bool:
        return self.read(key) is not None

    def keys(self) -> Iterable[CacheKey]:
        for meta_path in sorted(self.root.glob("*/*/*.json")):
            try:
                yield tuple(json.loads(meta_path.read_text(encoding="utf-8"))["key"])
            except (OSError, ValueError, KeyError):
                continue


def write_cache(cache: EmbeddingCache, entry: EmbeddingCacheEntry) -> CacheKey:
    return cache.write(entry)


def read_cache(cache: EmbeddingCache, key: CacheKey) -> EmbeddingCacheEntry | None:
    return cache.read(key)
