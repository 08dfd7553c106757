"""Repeated k-fold protocol, MAE reporting, quartile curves and the ablation grid."""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .backbone import Embedding, FusionMode, TapPoint, embedding_dim, fuse
from .context import ContextMode
from .dataset import EmbeddingCache, EmbeddingCacheEntry, Manifest, ObservationRecord, atomic_write_bytes, atomic_write_text
from .regression import RegressorKind, mse, train
from .streams import StreamKind
from .targets import TargetError, TargetScaler, fit_scaler

log = logging.getLogger(__name__)

REPORT_VERSION = 1

ALL_STREAMS = frozenset({StreamKind.RGB, StreamKind.FLOW})


class EvaluationError(RuntimeError):
    pass


class MissingEmbeddings(EvaluationError):
    def __init__(self, missing: list[tuple]):
        self.missing = missing
        shown = "\n".join("  " + "/".join(map(str, k)) for k in missing[:20])
        more = f"\n  ... and {len(missing) - 20} more" if len(missing) > 20 else ""
        super().__init__(f"{len(missing)} missing cache cell(s):\n{shown}{more}")


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class ExperimentConfig:
    tap: TapPoint
    streams: frozenset
    fusion: Optional[FusionMode]
    context: ContextMode
    regressor: RegressorKind
    folds: int = 10
    repetitions: int = 20
    seed: int = 0
    group_by_runner: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tap", TapPoint.parse(self.tap))
        object.__setattr__(self, "streams", frozenset(StreamKind.parse(s) for s in self.streams))
        object.__setattr__(self, "context", ContextMode.parse(self.context))
        object.__setattr__(self, "regressor", RegressorKind.parse(self.regressor))
        if self.fusion is not None:
            object.__setattr__(self, "fusion", FusionMode.parse(self.fusion))
        if not self.streams or not self.streams <= ALL_STREAMS:
            raise ValueError(f"invalid stream selection {self.streams}")
        if (self.fusion is not None) != (self.streams == ALL_STREAMS):
            raise ValueError("fusion must be set iff both streams are selected")
        if self.folds < 2 or self.repetitions < 1:
            raise ValueError("need folds >= 2 and repetitions >= 1")

    @property
    def dim(self) -> int:
        return embedding_dim(self.tap, self.fusion)

    @property
    def row_label(self) -> str:
        if self.fusion is None:
            stream = "RGB" if StreamKind.RGB in self.streams else "Flow"
        else:
            stream = "RGB+Flow" if self.fusion is FusionMode.SUM else "RGB∪Flow"
        return f"{self.dim}-{stream}-{self.context.value}"

    def to_json(self) -> dict:
        return {
            "tap": self.tap.value,
            "streams": sorted(s.value for s in self.streams),
            "fusion": self.fusion.value if self.fusion else None,
            "context": self.context.value,
            "regressor": self.regressor.value,
            "folds": self.folds,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "group_by_runner": self.group_by_runner,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        return cls(
            tap=obj["tap"],
            streams=frozenset(obj["streams"]),
            fusion=obj["fusion"],
            context=obj["context"],
            regressor=obj["regressor"],
            folds=obj["folds"],
            repetitions=obj["repetitions"],
            seed=obj["seed"],
            group_by_runner=obj.get("group_by_runner", False),
        )


STREAM_ROWS = (
    (frozenset({StreamKind.RGB}), None),
    (frozenset({StreamKind.FLOW}), None),
    (ALL_STREAMS, FusionMode.SUM),
    (ALL_STREAMS, FusionMode.CONCAT),
)


def table_cells(
    taps: Iterable[TapPoint] = (TapPoint.LOGITS_400, TapPoint.PENULTIMATE_1024),
    contexts: Iterable[ContextMode] = (ContextMode.BB, ContextMode.SB),
    stream_rows: Sequence = STREAM_ROWS,
) -> list[tuple[TapPoint, frozenset, Optional[FusionMode], ContextMode]]:
    """(tap, streams, fusion, context) cells in ablation-table order: tap blocks, then context, then stream rows."""
    contexts = [ContextMode.parse(c) for c in contexts]
    return [
        (TapPoint.parse(tap), streams, fusion, ctx)
        for tap in taps
        for ctx in contexts
        for streams, fusion in stream_rows
    ]


# ------------------------------------------------------------------ splits


def kfold_split(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition; test sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    tests = np.array_split(perm, k)
    out = []
    for test in tests:
        mask = np.ones(n, dtype=bool)
        mask[test] = False
        out.append((np.flatnonzero(mask), np.sort(test)))
    return out


def group_kfold_split(groups: Sequence, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Like ``kfold_split`` but every group (runner) lands in exactly one test fold."""
    labels = sorted(set(groups))
    if k > len(labels):
        raise ValueError(f"cannot split {len(labels)} groups into {k} folds")
    groups = np.asarray([labels.index(g) for g in groups])
    fold_of = np.empty(len(labels), dtype=int)
    for f, chunk in enumerate(np.array_split(np.random.default_rng(seed).permutation(len(labels)), k)):
        fold_of[chunk] = f
    assignment = fold_of[groups]
    idx = np.arange(len(groups))
    return [(idx[assignment != f], idx[assignment == f]) for f in range(k)]


# ----------------------------------------------------------------- metrics


def mae(y_true: Sequence[float], y_pred: Sequence[float]) -> float:
    a = np.asarray(y_true, dtype=np.float64)
    b = np.asarray(y_pred, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("mae of empty sequences")
    return float(np.mean(np.abs(a - b)))


@dataclass(frozen=True)
class PredictionRow:
    repetition: int
    fold: int
    runner_id: str
    rp_id: str
    y_true: float
    y_pred: float

    def to_json(self) -> dict:
        return {
            "repetition": self.repetition,
            "fold": self.fold,
            "runner_id": self.runner_id,
            "rp_id": self.rp_id,
            "y_true": self.y_true,
            "y_pred": self.y_pred,
        }


def _rows_arrays(rows) -> tuple[np.ndarray, np.ndarray]:
    if rows and isinstance(rows[0], PredictionRow):
        return (np.array([r.y_true for r in rows]), np.array([r.y_pred for r in rows]))
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def quartile_boundaries(y_true: np.ndarray) -> tuple[float, float, float]:
    return tuple(float(v) for v in np.percentile(y_true, [25, 50, 75]))


def quartile_curve(rows) -> tuple[float, float, float, float]:
    """Cumulative MAE over rows with y_true up to each quartile boundary; the last value is the overall MAE.

    ``rows`` are ``PredictionRow``s or ``(y_true, y_pred)`` pairs.
    """
    y_true, y_pred = _rows_arrays(list(rows))
    if y_true.size == 0:
        raise ValueError("quartile_curve needs at least one row")
    bounds = quartile_boundaries(y_true)
    curve = [mae(y_true[y_true <= b], y_pred[y_true <= b]) for b in bounds]
    curve.append(mae(y_true, y_pred))
    return tuple(curve)


def quartile_buckets(rows) -> tuple[float, ...]:
    """Per-bucket (non-cumulative) MAE; NaN for an empty bucket."""
    y_true, y_pred = _rows_arrays(list(rows))
    b = (-np.inf, *quartile_boundaries(y_true), np.inf)
    out = []
    for q in range(4):
        sel = (y_true > b[q]) & (y_true <= b[q + 1])
        out.append(mae(y_true[sel], y_pred[sel]) if sel.any() else math.nan)
    return tuple(out)


def degradation(curve: Sequence[float]) -> tuple[float, ...]:
    """Relative MAE increase of each quartile against the first, in percent."""
    base = curve[0]
    return tuple(0.0 if base == 0 else 100.0 * (c - base) / base for c in curve)


# ------------------------------------------------------------------ report


@dataclass
class EvaluationReport:
    config: ExperimentConfig
    mae_normalized: float
    mae_minutes: float
    per_quartile_mae: tuple[float, float, float, float]
    per_bucket_mae: tuple[float, float, float, float]
    fold_predictions: list[PredictionRow]
    scaler: TargetScaler
    fold_scalers: list[dict] = field(default_factory=list)
    mse_normalized: float = 0.0
    clamped_targets: int = 0
    weights: dict = field(default_factory=dict)
    created: str = ""

    @property
    def label(self) -> str:
        return self.config.row_label

    def recompute_mae(self) -> float:
        y_true, y_pred = _rows_arrays(self.fold_predictions)
        return mae(y_true, y_pred)

    def summary_json(self) -> dict:
        return {
            "type": "report",
            "version": REPORT_VERSION,
            "label": self.label,
            "config": self.config.to_json(),
            "mae_normalized": self.mae_normalized,
            "mae_minutes": self.mae_minutes,
            "mse_normalized": self.mse_normalized,
            "per_quartile_mae": list(self.per_quartile_mae),
            "per_bucket_mae": [None if math.isnan(v) else v for v in self.per_bucket_mae],
            "scaler": self.scaler.to_json(),
            "fold_scalers": self.fold_scalers,
            "clamped_targets": self.clamped_targets,
            "weights": self.weights,
            "n_predictions": len(self.fold_predictions),
            "created": self.created,
        }

    def to_lines(self) -> list[str]:
        lines = [json.dumps(self.summary_json(), sort_keys=True, ensure_ascii=False)]
        for row in self.fold_predictions:
            lines.append(json.dumps({"type": "prediction", **row.to_json()}, sort_keys=True))
        return lines


def write_reports(reports: Sequence[EvaluationReport], path: str | Path) -> Path:
    lines = [line for rep in reports for line in rep.to_lines()]
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_reports(path: str | Path) -> list[EvaluationReport]:
    reports: list[EvaluationReport] = []
    current = None
    rows: list[PredictionRow] = []

    def flush():
        if current is not None:
            reports.append(_report_from_json(current, rows))

    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("type") == "report":
                flush()
                current, rows = obj, []
            elif obj.get("type") == "prediction":
                obj.pop("type")
                rows.append(PredictionRow(**obj))
    flush()
    return reports


def _report_from_json(obj: dict, rows: list[PredictionRow]) -> EvaluationReport:
    return EvaluationReport(
        config=ExperimentConfig.from_json(obj["config"]),
        mae_normalized=obj["mae_normalized"],
        mae_minutes=obj["mae_minutes"],
        per_quartile_mae=tuple(obj["per_quartile_mae"]),
        per_bucket_mae=tuple(math.nan if v is None else v for v in obj["per_bucket_mae"]),
        fold_predictions=rows,
        scaler=TargetScaler.from_json(obj["scaler"]),
        fold_scalers=obj.get("fold_scalers", []),
        mse_normalized=obj.get("mse_normalized", 0.0),
        clamped_targets=obj.get("clamped_targets", 0),
        weights=obj.get("weights", {}),
        created=obj.get("created", ""),
    )


# ------------------------------------------------------------- embeddings

ComputeFn = Callable[[ObservationRecord, ContextMode, StreamKind, TapPoint], np.ndarray]


def required_keys(config: ExperimentConfig, manifest: Manifest) -> list[tuple]:
    streams = sorted(config.streams, key=lambda s: s.value != "RGB")
    return [
        (rec.runner_id, rec.rp_id, config.context.value, s.value, config.tap.value)
        for rec in manifest.records
        for s in streams
    ]


def missing_cells(configs: Iterable[ExperimentConfig], manifest: Manifest, cache: EmbeddingCache) -> list[tuple]:
    seen, missing = set(), []
    for cfg in configs:
        for key in required_keys(cfg, manifest):
            if key not in seen:
                seen.add(key)
                if cache.read(key) is None:
                    missing.append(key)
    return missing


def _single(cache, rec, cfg, stream, compute):
    key = (rec.runner_id, rec.rp_id, cfg.context.value, stream.value, cfg.tap.value)
    entry = cache.read(key)
    if entry is None:
        if compute is None:
            raise MissingEmbeddings([key])
        vector = np.asarray(compute(rec, cfg.context, stream, cfg.tap), dtype=np.float32)
        entry = EmbeddingCacheEntry(key, vector, cfg.tap.dim)
        cache.write(entry)
    return Embedding(entry.vector, cfg.tap, frozenset({stream}), None, cfg.context)


def design_matrix(
    config: ExperimentConfig,
    manifest: Manifest,
    cache: EmbeddingCache,
    compute: ComputeFn | None = None,
) -> np.ndarray:
    """Stack one (possibly fused) embedding per manifest record."""
    if compute is None:
        missing = missing_cells([config], manifest, cache)
        if missing:
            raise MissingEmbeddings(missing)
    rows = []
    for rec in manifest.records:
        if config.fusion is None:
            (stream,) = config.streams
            emb = _single(cache, rec, config, stream, compute)
        else:
            rgb = _single(cache, rec, config, StreamKind.RGB, compute)
            flow = _single(cache, rec, config, StreamKind.FLOW, compute)
            emb = fuse(rgb, flow, config.fusion)
        rows.append(emb.vector)
    X = np.stack(rows)
    if X.shape[1] != config.dim:
        raise EvaluationError(f"{config.row_label}: built {X.shape[1]}-dim inputs")
    return X


# --------------------------------------------------------------- protocol


def _fit_fold(task):
    kind, X_train, y_train, X_test, seed, hyper = task
    model = train(kind, X_train, y_train, seed=seed, hyperparameters=hyper)
    return model.predict(X_test)


def _fold_tasks(config, manifest, X, crts, rp_idx, hyper, oracle):
    groups = [rec.runner_id for rec in manifest.records]
    last_rp = len(manifest.recording_points) - 1
    for r in range(config.repetitions):
        seed = config.seed + r
        if config.group_by_runner:
            splits = group_kfold_split(groups, config.folds, seed)
        else:
            splits = kfold_split(len(manifest), config.folds, seed)
        for f, (tr, te) in enumerate(splits):
            try:
                scaler = fit_scaler(zip(rp_idx[tr], crts[tr]), first_rp=0, last_rp=last_rp)
            except TargetError as exc:
                raise EvaluationError(f"{config.row_label}/{config.regressor.value} rep {r} fold {f}: {exc}") from exc
            y_train = scaler.normalize(crts[tr])
            # held-out CRTs outside the training range are clamped; counted and logged once per report
            y_test = scaler.normalize(crts[te], warn=False)
            clamped = int(np.count_nonzero((crts[te] < scaler.min0) | (crts[te] > scaler.maxP)))
            task = None if oracle else (config.regressor, X[tr], y_train, X[te], seed, hyper)
            yield r, f, tr, te, scaler, y_test, clamped, task


def run_experiment(
    config: ExperimentConfig,
    dataset: Manifest,
    cache: EmbeddingCache,
    compute: ComputeFn | None = None,
    hyperparameters: dict | None = None,
    workers: int = 1,
    oracle: bool = False,
    weights: dict | None = None,
    X: np.ndarray | None = None,
) -> EvaluationReport:
    """Repeated k-fold evaluation of one ablation cell.

    For each repetition ``r`` (split seed ``config.seed + r``) and fold, the
    target scaler is fit on the training split only, the regressor is trained
    on normalised targets and the held-out predictions are pooled. With
    ``oracle=True`` predictions are the held-out targets themselves.
    """
    if X is None:
        X = design_matrix(config, dataset, cache, compute)
    crts = np.array([rec.crt_seconds for rec in dataset.records], dtype=np.float64)
    rp_idx = np.array([dataset.rp_index(rec.rp_id) for rec in dataset.records])
    if hyperparameters is None:
        from .regression import load_hyperparameters

        hyperparameters = load_hyperparameters()[config.regressor.value]

    folds = list(_fold_tasks(config, dataset, X, crts, rp_idx, hyperparameters, oracle))
    if oracle:
        preds = [y_test for *_, y_test, _, _ in folds]
    elif workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(_fit_fold, [t[-1] for t in folds]))
    else:
        preds = []
        for r, f, *_, task in folds:
            try:
                preds.append(_fit_fold(task))
            except Exception as exc:
                raise EvaluationError(f"{config.row_label}/{config.regressor.value} rep {r} fold {f}: {exc}") from exc

    rows: list[PredictionRow] = []
    fold_scalers = []
    clamped_total = 0
    for (r, f, _tr, te, scaler, y_test, clamped, _), y_pred in zip(folds, preds):
        clamped_total += clamped
        fold_scalers.append({"repetition": r, "fold": f, **scaler.to_json()})
        for i, yt, yp in zip(te, y_test, y_pred):
            rec = dataset.records[i]
            rows.append(PredictionRow(r, f, rec.runner_id, rec.rp_id, float(yt), float(yp)))

    y_true, y_pred = _rows_arrays(rows)
    overall = mae(y_true, y_pred)
    curve = quartile_curve(rows)
    reference = fit_scaler(zip(rp_idx, crts), first_rp=0, last_rp=len(dataset.recording_points) - 1)
    if clamped_total:
        log.warning("%s: %d held-out CRT(s) clamped into the training range", config.row_label, clamped_total)
    return EvaluationReport(
        config=config,
        mae_normalized=overall,
        mae_minutes=reference.denormalize_error(overall),
        per_quartile_mae=curve,
        per_bucket_mae=quartile_buckets(rows),
        fold_predictions=rows,
        scaler=reference,
        fold_scalers=fold_scalers,
        mse_normalized=mse(y_true, y_pred),
        clamped_targets=clamped_total,
        weights=dict(weights or {}),
        created=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def ablation_grid(
    dataset: Manifest,
    cache: EmbeddingCache,
    regressors: Sequence[RegressorKind | str],
    taps: Iterable[TapPoint] = (TapPoint.LOGITS_400, TapPoint.PENULTIMATE_1024),
    contexts: Iterable[ContextMode] = (ContextMode.BB, ContextMode.SB),
    stream_rows: Sequence = STREAM_ROWS,
    folds: int = 10,
    repetitions: int = 20,
    seed: int = 0,
    group_by_runner: bool = False,
    hyperparameters: dict | None = None,
    workers: int = 1,
    oracle: bool = False,
    weights: dict | None = None,
    progress: Callable[[EvaluationReport], None] | None = None,
) -> list[EvaluationReport]:
    """Evaluate every (cell, regressor) pair; reports come back in table order."""
    from .regression import load_hyperparameters

    hyper = hyperparameters or load_hyperparameters()
    regressors = [RegressorKind.parse(r) for r in regressors]
    cells = table_cells(taps, contexts, stream_rows)
    configs = [
        ExperimentConfig(tap, streams, fusion, ctx, reg, folds, repetitions, seed, group_by_runner)
        for (tap, streams, fusion, ctx), reg in itertools.product(cells, regressors)
    ]
    missing = missing_cells(configs, dataset, cache)
    if missing:
        raise MissingEmbeddings(missing)
    reports = []
    matrices: dict[tuple, np.ndarray] = {}
    for cfg in configs:
        cell = (cfg.tap, cfg.streams, cfg.fusion, cfg.context)
        if cell not in matrices:
            matrices[cell] = design_matrix(cfg, dataset, cache)
        rep = run_experiment(
            cfg,
            dataset,
            cache,
            hyperparameters=hyper[cfg.regressor.value],
            workers=workers,
            oracle=oracle,
            weights=weights,
            X=matrices[cell],
        )
        if progress:
            progress(rep)
        reports.append(rep)
    return reports


# --------------------------------------------------------------- rendering


def table_rows(reports: Sequence[EvaluationReport], minutes: bool = False):
    """(header, rows) with one row per cell and one column per regressor, in table order."""
    regs: list[RegressorKind] = []
    cells: dict[str, dict[str, float]] = {}
    for rep in reports:
        if rep.config.regressor not in regs:
            regs.append(rep.config.regressor)
        value = rep.mae_minutes if minutes else rep.mae_normalized
        cells.setdefault(rep.label, {})[rep.config.regressor.short] = value
    header = ["#Embedd.-Stream-Cont.", *[r.short for r in regs]]
    rows = [[label, *[vals.get(r.short) for r in regs]] for label, vals in cells.items()]
    return header, rows


def render_text(reports: Sequence[EvaluationReport], minutes: bool = False) -> str:
    header, rows = table_rows(reports, minutes)
    fmt = (lambda v: f"{v:.1f} min") if minutes else (lambda v: f"{v:.3f}")
    body = [[r[0], *["-" if v is None else fmt(v) for v in r[1:]]] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    line = lambda cells: "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"
    sep = "+-" + "-+-".join("-" * w for w in widths) + "-+"
    out = [sep, line(header), sep]
    for i, row in enumerate(body):
        out.append(line(row))
        if (i + 1) % 4 == 0:
            out.append(sep)
    if len(body) % 4:
        out.append(sep)
    return "\n".join(out) + "\n"


def render_csv(reports: Sequence[EvaluationReport], minutes: bool = False) -> str:
    import csv
    import io

    header, rows = table_rows(reports, minutes)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([row[0], *["" if v is None else repr(v) for v in row[1:]]])
    return buf.getvalue()


def quartile_records(reports: Sequence[EvaluationReport]) -> list[dict]:
    return [
        {
            "label": rep.label,
            "regressor": rep.config.regressor.short,
            "cumulative_mae": list(rep.per_quartile_mae),
            "degradation_percent": list(degradation(rep.per_quartile_mae)),
        }
        for rep in reports
    ]


def plot_quartiles(reports: Sequence[EvaluationReport], path: str | Path) -> Path:
    """Relative MAE increase per timing quartile, one line per report."""
    import io

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rep in reports:
        ax.plot(["Q1", "Q2", "Q3", "Q4"], degradation(rep.per_quartile_mae), marker="o",
                label=f"{rep.label} {rep.config.regressor.short}")
    ax.set_ylabel("MAE increase over Q1 (%)")
    ax.legend(fontsize=6, loc="upper left", bbox_to_anchor=(1.02, 1.0), ncol=1 + len(reports) // 25)
    buf = io.BytesIO()
    fig.savefig(buf, format=Path(path).suffix.lstrip(".") or "png", bbox_inches="tight")
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())
