"""Command-line entry point: ``crtreg <command> [options]``.

Commands run the pipeline stage by stage::

    crtreg preprocess --manifest data/manifest.jsonl --context both
    crtreg extract    --manifest data/manifest.jsonl --tap both --stub
    crtreg evaluate   --manifest data/manifest.jsonl --tap 1024 --streams rgb,flow --fusion concat --context sb
    crtreg ablate     --manifest data/manifest.jsonl --regressors all
    crtreg report     reports/ablation.jsonl --units minutes

Settings come from an optional YAML file (``--config``); flags override it
and ``CRTREG_CACHE`` overrides the cache root. Exit codes: 0 success,
1 partial failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from .backbone import BackboneError, FusionMode, TapPoint
from .context import ContextMode
from .dataset import EmbeddingCache, Manifest, ManifestError, atomic_write_text, load_manifest
from .evaluation import (
    STREAM_ROWS,
    EvaluationError,
    ExperimentConfig,
    MissingEmbeddings,
    ablation_grid,
    design_matrix,
    plot_quartiles,
    quartile_records,
    read_reports,
    render_csv,
    render_text,
    run_experiment,
    write_reports,
)
from .pipeline import BackboneSet, extract_observation, make_backbones, preprocess_observation
from .regression import RegressorKind, load_hyperparameters, train
from .streams import ESTIMATORS, INPUT_SIZE, StreamKind
from .targets import fit_scaler

log = logging.getLogger("crtreg")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
CONFIG_VERSION = 1
CACHE_ENV = "CRTREG_CACHE"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    """Everything a run depends on. Serialised into every report."""

    version: int = CONFIG_VERSION
    manifest: str = ""
    store: str = "processed"
    cache: str = "cache"
    reports: str = "reports"
    weights: dict = field(default_factory=dict)  # {"RGB": {"path", "sha256"}, "FLOW": {...}}
    stub: bool = False
    stub_seed: int = 0
    contexts: list = field(default_factory=lambda: ["BB", "SB"])
    taps: list = field(default_factory=lambda: ["400", "1024"])
    fusions: list = field(default_factory=lambda: ["SUM", "CONCAT"])
    regressors: list = field(default_factory=lambda: ["MLP"])
    folds: int = 10
    repetitions: int = 20
    seed: int = 0
    workers: int = 1
    track_id: int = 1
    flow: str = "block"
    input_size: int = INPUT_SIZE
    group_by_runner: bool = False
    hyperparameters: str = ""  # YAML path; empty means the packaged defaults

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version} (expected {CONFIG_VERSION})")
        try:
            self.contexts = [ContextMode.parse(c).value for c in self.contexts]
            self.taps = [TapPoint.parse(t).value for t in self.taps]
            self.fusions = [FusionMode.parse(f).value for f in self.fusions]
            self.regressors = [RegressorKind.parse(r).value for r in self.regressors]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.flow not in ESTIMATORS:
            raise ConfigError(f"unknown flow estimator {self.flow!r}; choose from {sorted(ESTIMATORS)}")
        if self.folds < 2 or self.repetitions < 1 or self.workers < 1 or self.input_size < 8:
            raise ConfigError("folds >= 2, repetitions >= 1, workers >= 1 and input_size >= 8 are required")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**obj)

    def backbone_hash(self) -> str:
        """Identifies the settings that determine embedding values."""
        if self.stub:
            weights = {"stub_seed": self.stub_seed}
        else:
            weights = {k: (v or {}).get("sha256", "") for k, v in sorted(self.weights.items())}
        blob = json.dumps({"weights": weights, "flow": self.flow, "input_size": self.input_size}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return obj


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _expand(value: str, choices: Sequence[str]) -> list[str]:
    return list(choices) if value.lower() in ("both", "all") else _split(value)


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults < config file < CRTREG_CACHE < flags."""
    obj = load_config(getattr(args, "config", None))
    if os.environ.get(CACHE_ENV):
        obj["cache"] = os.environ[CACHE_ENV]
    simple = ("manifest", "store", "cache", "reports", "folds", "repetitions", "seed", "workers",
              "track_id", "flow", "input_size", "stub_seed", "hyperparameters")
    for name in simple:
        value = getattr(args, name, None)
        if value is not None:
            obj[name] = value
    if getattr(args, "stub", False):
        obj["stub"] = True
    if getattr(args, "group_by_runner", False):
        obj["group_by_runner"] = True
    if getattr(args, "context", None):
        obj["contexts"] = _expand(args.context, [c.value for c in ContextMode])
    if getattr(args, "tap", None):
        obj["taps"] = _expand(args.tap, [t.value for t in TapPoint])
    if getattr(args, "regressors", None):
        obj["regressors"] = _expand(args.regressors, [r.value for r in RegressorKind])
    if getattr(args, "fusions", None):
        obj["fusions"] = _expand(args.fusions, [f.value for f in FusionMode])
    weights = dict(obj.get("weights") or {})
    for kind in ("rgb", "flow"):
        path = getattr(args, f"weights_{kind}", None)
        digest = getattr(args, f"sha256_{kind}", None)
        if path or digest:
            entry = dict(weights.get(kind.upper()) or {})
            if path:
                entry["path"] = path
            if digest:
                entry["sha256"] = digest
            weights[kind.upper()] = entry
    obj["weights"] = weights
    config = PipelineConfig.from_dict(obj)
    if not config.manifest:
        raise ConfigError("no manifest given (--manifest or `manifest:` in the config file)")
    return config


def _manifest(config: PipelineConfig) -> Manifest:
    try:
        return load_manifest(config.manifest)
    except (OSError, ManifestError) as exc:
        raise ConfigError(f"manifest {config.manifest}: {exc}") from exc


def _hyperparameters(config: PipelineConfig) -> dict:
    try:
        return load_hyperparameters(config.hyperparameters or None)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"hyperparameters: {exc}") from exc


# ---------------------------------------------------------------- preprocess


def _preprocess_one(task):
    manifest, record, contexts, store, track_id, force = task
    try:
        written, skipped = preprocess_observation(manifest, record, contexts, store, track_id, force)
        return record.key, written, skipped, None
    except Exception as exc:  # reported per observation, the run carries on
        return record.key, 0, 0, f"{type(exc).__name__}: {exc}"


def _fan_out(fn, tasks, workers: int, initializer=None, initargs=()):
    if workers <= 1:
        if initializer:
            initializer(*initargs)
        yield from map(fn, tasks)
        return
    with ProcessPoolExecutor(max_workers=workers, initializer=initializer, initargs=initargs) as pool:
        yield from pool.map(fn, tasks)


def _summarise(stage: str, results, contexts_label: str) -> int:
    written = skipped = 0
    failed = []
    for key, w, s, err in results:
        written += w
        skipped += s
        if err:
            failed.append(key)
            log.error("%s failed observation=%s/%s context=%s error=%r", stage, key[0], key[1], contexts_label, err)
    log.info("%s done written=%d skipped=%d failed=%d", stage, written, skipped, len(failed))
    print(f"{stage}: {written} written, {skipped} skipped, {len(failed)} failed")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_preprocess(args, config: PipelineConfig) -> int:
    manifest = _manifest(config)
    contexts = [ContextMode.parse(c) for c in config.contexts]
    tasks = [(manifest, rec, contexts, config.store, config.track_id, args.force) for rec in manifest.records]
    return _summarise("preprocess", _fan_out(_preprocess_one, tasks, config.workers), ",".join(config.contexts))


# ------------------------------------------------------------------- extract

_WORKER_BACKBONES: BackboneSet | None = None


def _init_backbones(stub, weights, stub_seed):
    global _WORKER_BACKBONES
    _WORKER_BACKBONES = make_backbones(stub=stub, weights=weights, seed=stub_seed)


def _extract_one(task):
    record, store, cache_root, cache_hash, contexts, taps, input_size, flow, force = task
    cache = EmbeddingCache(cache_root, cache_hash)
    try:
        written, skipped = extract_observation(
            record, store, cache, _WORKER_BACKBONES, contexts, taps, input_size=input_size, flow=flow, force=force
        )
        return record.key, written, skipped, None
    except Exception as exc:
        return record.key, 0, 0, f"{type(exc).__name__}: {exc}"


def cmd_extract(args, config: PipelineConfig) -> int:
    manifest = _manifest(config)
    try:
        # built here first so a missing file or hash mismatch aborts before any work
        backbones = make_backbones(stub=config.stub, weights=config.weights, seed=config.stub_seed)
    except BackboneError as exc:
        raise ConfigError(str(exc)) from exc
    log.info("backbones %s", json.dumps(backbones.describe(), sort_keys=True))
    contexts = [ContextMode.parse(c) for c in config.contexts]
    taps = [TapPoint.parse(t) for t in config.taps]
    cache_hash = config.backbone_hash()
    tasks = [
        (rec, config.store, config.cache, cache_hash, contexts, taps, config.input_size, config.flow, args.force)
        for rec in manifest.records
    ]
    global _WORKER_BACKBONES
    if config.workers <= 1:
        _WORKER_BACKBONES = backbones
        results = map(_extract_one, tasks)
    else:
        results = _fan_out(
            _extract_one, tasks, config.workers, _init_backbones, (config.stub, config.weights, config.stub_seed)
        )
    return _summarise("extract", results, ",".join(config.contexts))


# ------------------------------------------------------ evaluate / ablate


def _streams(value: str) -> frozenset:
    return frozenset(StreamKind.parse(s) for s in _expand(value, ["RGB", "FLOW"]))


def _experiment(args, config: PipelineConfig) -> ExperimentConfig:
    streams = _streams(args.streams)
    fusion = FusionMode.parse(args.fusion) if args.fusion else None
    if len(streams) == 2 and fusion is None:
        fusion = FusionMode.CONCAT
    if len(config.contexts) != 1 or len(config.taps) != 1 or len(config.regressors) != 1:
        raise ConfigError("evaluate runs one cell: give exactly one --context, --tap and --regressor")
    try:
        return ExperimentConfig(
            tap=TapPoint.parse(config.taps[0]),
            streams=streams,
            fusion=fusion,
            context=ContextMode.parse(config.contexts[0]),
            regressor=RegressorKind.parse(config.regressors[0]),
            folds=config.folds,
            repetitions=config.repetitions,
            seed=config.seed,
            group_by_runner=config.group_by_runner,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _write_outputs(reports, config: PipelineConfig, name: str) -> Path:
    out = Path(config.reports)
    path = write_reports(reports, out / f"{name}.jsonl")
    atomic_write_text(out / f"{name}.txt", render_text(reports))
    atomic_write_text(out / f"{name}.csv", render_csv(reports))
    atomic_write_text(out / f"{name}.quartiles.json", json.dumps(quartile_records(reports), indent=1, sort_keys=True))
    atomic_write_text(out / f"{name}.config.yaml", yaml.safe_dump(config.to_json(), sort_keys=True))
    return path


def _report_missing(exc: MissingEmbeddings) -> int:
    print(str(exc), file=sys.stderr)
    print("run `crtreg extract` for the listed cells first", file=sys.stderr)
    return EXIT_CONFIG


def cmd_evaluate(args, config: PipelineConfig) -> int:
    manifest = _manifest(config)
    experiment = _experiment(args, config)
    hyper = _hyperparameters(config)[experiment.regressor.value]
    cache = EmbeddingCache(config.cache)
    try:
        report = run_experiment(
            experiment, manifest, cache, hyperparameters=hyper, workers=config.workers,
            oracle=args.oracle, weights={"pipeline": config.to_json()},
        )
    except MissingEmbeddings as exc:
        return _report_missing(exc)
    path = _write_outputs([report], config, args.name or "evaluate")
    print(render_text([report]), end="")
    print(f"mae={report.mae_normalized:.6f} ({report.mae_minutes:.1f} min) -> {path}")
    return EXIT_OK


def _stream_rows(config: PipelineConfig):
    wanted = {FusionMode.parse(f) for f in config.fusions}
    return tuple(row for row in STREAM_ROWS if row[1] is None or row[1] in wanted)


def cmd_ablate(args, config: PipelineConfig) -> int:
    manifest = _manifest(config)
    hyper = _hyperparameters(config)
    cache = EmbeddingCache(config.cache)
    started = time.monotonic()

    def progress(rep):
        log.info(
            "cell done config=%s regressor=%s mae=%.6f", rep.label, rep.config.regressor.value, rep.mae_normalized
        )

    try:
        reports = ablation_grid(
            manifest, cache, config.regressors,
            taps=[TapPoint.parse(t) for t in config.taps],
            contexts=[ContextMode.parse(c) for c in config.contexts],
            stream_rows=_stream_rows(config),
            folds=config.folds, repetitions=config.repetitions, seed=config.seed,
            group_by_runner=config.group_by_runner, hyperparameters=hyper, workers=config.workers,
            oracle=args.oracle, weights={"pipeline": config.to_json()}, progress=progress,
        )
    except MissingEmbeddings as exc:
        return _report_missing(exc)
    path = _write_outputs(reports, config, args.name or "ablation")
    if args.plot:
        plot_quartiles(reports, Path(config.reports) / f"{args.name or 'ablation'}.quartiles.png")
    print(render_text(reports), end="")
    print(f"{len(reports)} cells in {time.monotonic() - started:.1f}s -> {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        reports = read_reports(args.reports_file)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read reports {args.reports_file}: {exc}") from exc
    if not reports:
        raise ConfigError(f"{args.reports_file} holds no reports")
    minutes = args.units == "minutes"
    text = render_csv(reports, minutes) if args.format == "csv" else render_text(reports, minutes)
    print(text, end="")
    if args.plot:
        plot_quartiles(reports, args.plot)
    return EXIT_OK


# ---------------------------------------------------------------- training


def cmd_train(args, config: PipelineConfig) -> int:
    """Fit one cell's regressor on every observation and save it."""
    manifest = _manifest(config)
    experiment = _experiment(args, config)
    cache = EmbeddingCache(config.cache)
    try:
        X = design_matrix(experiment, manifest, cache)
    except MissingEmbeddings as exc:
        return _report_missing(exc)
    rp_idx = [manifest.rp_index(r.rp_id) for r in manifest.records]
    crts = [r.crt_seconds for r in manifest.records]
    scaler = fit_scaler(zip(rp_idx, crts), first_rp=0, last_rp=len(manifest.recording_points) - 1)
    y = scaler.normalize(crts, warn=False)
    hyper = _hyperparameters(config)[experiment.regressor.value]
    model = train(experiment.regressor, X, y, seed=config.seed, hyperparameters=hyper)
    path = model.save(args.output)
    atomic_write_text(
        Path(args.output).with_suffix(".json"),
        json.dumps({"experiment": experiment.to_json(), "scaler": scaler.to_json()}, indent=1, sort_keys=True),
    )
    print(f"trained {experiment.row_label}/{experiment.regressor.short} on {len(y)} observations -> {path}")
    return EXIT_OK


def cmd_grid_search(args, config: PipelineConfig) -> int:
    """Score every combination of the pinned grid for one cell; lowest MAE wins."""
    manifest = _manifest(config)
    experiment = _experiment(args, config)
    hyper = _hyperparameters(config)
    grid = load_hyperparameters(config.hyperparameters or None, section="grid").get(experiment.regressor.value, {})
    cache = EmbeddingCache(config.cache)
    try:
        X = design_matrix(experiment, manifest, cache)
    except MissingEmbeddings as exc:
        return _report_missing(exc)
    names = sorted(grid)
    results = []
    for values in itertools.product(*(grid[n] for n in names)):
        params = {**hyper[experiment.regressor.value], **dict(zip(names, values))}
        rep = run_experiment(experiment, manifest, cache, hyperparameters=params, workers=config.workers, X=X)
        results.append({"params": dict(zip(names, values)), "mae_normalized": rep.mae_normalized})
        log.info("grid point params=%s mae=%.6f", json.dumps(results[-1]["params"]), rep.mae_normalized)
    results.sort(key=lambda r: r["mae_normalized"])
    out = Path(config.reports) / f"grid_{experiment.regressor.value.lower()}.json"
    atomic_write_text(out, json.dumps(results, indent=1, sort_keys=True))
    for r in results:
        print(f"{r['mae_normalized']:.4f}  {json.dumps(r['params'], sort_keys=True)}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML pipeline config; flags override it")
    p.add_argument("--manifest", help="JSONL dataset manifest")
    p.add_argument("--store", help="processed clip directory")
    p.add_argument("--cache", help=f"embedding cache root (env {CACHE_ENV} also overrides)")
    p.add_argument("--reports", help="report output directory")
    p.add_argument("--workers", type=int, help="bounded worker pool size")
    p.add_argument("-v", "--verbose", action="store_true")


def _cell_args(p: argparse.ArgumentParser, one_cell: bool):
    p.add_argument("--tap", help="400, 1024" + ("" if one_cell else " or both"))
    p.add_argument("--context", help="bb, sb" + ("" if one_cell else " or both"))
    if one_cell:
        p.add_argument("--streams", default="rgb,flow", help="rgb, flow or rgb,flow")
        p.add_argument("--fusion", help="sum or concat (two-stream cells only)")
        p.add_argument("--regressor", dest="regressors", help="LR, RF, GB, SVM or MLP")
    else:
        p.add_argument("--regressors", help="comma list or 'all'")
        p.add_argument("--fusions", help="sum, concat or both")
    p.add_argument("--folds", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--group-by-runner", action="store_true", help="keep each runner's observations in one fold")
    p.add_argument("--hyperparameters", help="YAML overriding the packaged regressor settings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crtreg", description="Cumulative race time regression from race footage.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="write BB/SB context clips")
    _common(p)
    p.add_argument("--context", help="bb, sb or both")
    p.add_argument("--track-id", type=int, help="designated runner id in the track files")
    p.add_argument("--force", action="store_true", help="recompute existing outputs")

    p = sub.add_parser("extract", help="fill the embedding cache")
    _common(p)
    p.add_argument("--context", help="bb, sb or both")
    p.add_argument("--tap", help="400, 1024 or both")
    p.add_argument("--stub", action="store_true", help="use the deterministic test backbone")
    p.add_argument("--stub-seed", type=int)
    for kind in ("rgb", "flow"):
        p.add_argument(f"--weights-{kind}", help=f"{kind.upper()} I3D state dict")
        p.add_argument(f"--sha256-{kind}", help=f"expected sha256 of the {kind.upper()} weights")
    p.add_argument("--flow", choices=sorted(ESTIMATORS))
    p.add_argument("--input-size", type=int)
    p.add_argument("--force", action="store_true", help="recompute existing entries")

    for name, one_cell, helptext in (
        ("evaluate", True, "repeated k-fold evaluation of one cell"),
        ("ablate", False, "evaluate the whole grid"),
        ("train", True, "fit one cell on all observations and save the model"),
        ("grid-search", True, "score the pinned hyperparameter grid for one cell"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _cell_args(p, one_cell)
        if name in ("evaluate", "ablate"):
            p.add_argument("--oracle", action="store_true", help="predict the held-out targets (harness check)")
            p.add_argument("--name", help="report file stem")
        if name == "ablate":
            p.add_argument("--plot", action="store_true", help="also write the quartile plot")
        if name == "train":
            p.add_argument("--output", required=True, help="model file")

    p = sub.add_parser("report", help="render saved reports")
    p.add_argument("reports_file", help="JSONL written by evaluate or ablate")
    p.add_argument("--units", choices=("normalized", "minutes"), default="normalized")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--plot", help="write the quartile plot here")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


COMMANDS = {
    "preprocess": cmd_preprocess,
    "extract": cmd_extract,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "train": cmd_train,
    "grid-search": cmd_grid_search,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "report":
            return cmd_report(args)
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except EvaluationError as exc:
        log.error("evaluation failed: %s", exc)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
