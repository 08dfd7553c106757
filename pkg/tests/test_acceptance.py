"""Acceptance gate: the eight release criteria at their stated tolerances and time budgets.

Each test prints ``ACCEPTANCE <n> <name>: PASS|FAIL (<seconds>s)``; the
lines are repeated in the pytest terminal summary. Run standalone with
``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import contextlib
import json
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from crtreg.backbone import Embedding, StubBackbone, TapPoint, extract, fuse
from crtreg.cli import main as crtreg
from crtreg.context import ContextMode, TrackedClip, apply_context, average_frame, context_masks, fill_missing_boxes, pad_box
from crtreg.dataset import EmbeddingCache, Manifest, ObservationRecord
from crtreg.evaluation import (
    ExperimentConfig,
    kfold_split,
    mae,
    quartile_curve,
    read_reports,
    run_experiment,
    table_cells,
)
from crtreg.regression import MLP, MLPConfig, gradient_check, mse
from crtreg.streams import BlockMatchingFlow, StreamKind, compute_flow, prepare_flow, prepare_rgb
from crtreg.synthetic import SyntheticSpec, heteroscedastic_predictions, make_synthetic_dataset, translating_texture
from crtreg.targets import TargetScaler, fit_scaler

RESULTS: list[str] = []

TABLE_LABELS = [
    f"{dim}-{stream}-{ctx}"
    for tap in ("400", "1024")
    for ctx in ("BB", "SB")
    for dim, stream in (
        (tap, "RGB"),
        (tap, "Flow"),
        (tap, "RGB+Flow"),
        ("800" if tap == "400" else "2048", "RGB∪Flow"),
    )
]


@contextlib.contextmanager
def criterion(number: int, name: str, budget_s: float):
    started = time.monotonic()
    status = "FAIL"
    try:
        yield
        elapsed = time.monotonic() - started
        assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
        status = "PASS"
    finally:
        line = f"ACCEPTANCE {number} {name}: {status} ({time.monotonic() - started:.1f}s, budget {budget_s:g}s)"
        RESULTS.append(line)
        print(line)


# 1 ---------------------------------------------------------------------


def test_1_dimension_grid():
    with criterion(1, "dimension grid", 1.0):
        clip = np.random.default_rng(0).integers(0, 256, (4, 16, 16, 3), dtype=np.uint8)
        nets = {StreamKind.RGB: StubBackbone(StreamKind.RGB), StreamKind.FLOW: StubBackbone(StreamKind.FLOW)}
        streams = {StreamKind.RGB: prepare_rgb(clip), StreamKind.FLOW: prepare_flow(clip)}
        labels = []
        for tap, kinds, fusion, ctx in table_cells():
            singles = {k: extract(nets[k], streams[k], tap, ctx) for k in kinds}
            emb: Embedding = next(iter(singles.values())) if fusion is None else fuse(
                singles[StreamKind.RGB], singles[StreamKind.FLOW], fusion
            )
            cfg = ExperimentConfig(tap, kinds, fusion, ctx, "LINEAR")
            assert emb.dim == cfg.dim
            labels.append(f"{emb.label}-{ctx.value}")
            assert labels[-1] == cfg.row_label
        assert labels == TABLE_LABELS
        assert {int(label.split("-")[0]) for label in labels} == {400, 800, 1024, 2048}


# 2 ---------------------------------------------------------------------


def random_manifest(rng) -> Manifest:
    n_rps = int(rng.integers(2, 5))
    rps = tuple(f"RP{i}" for i in range(n_rps))
    records = []
    for i in range(int(rng.integers(2, 30))):
        crt = int(rng.integers(20_000, 40_000))
        first = 0 if i < 2 else int(rng.integers(0, n_rps))
        last = n_rps - 1 if i < 2 else int(rng.integers(first, n_rps))
        for rp in rps[first : last + 1]:
            records.append(ObservationRecord(f"r{i}", rp, "c", "t", crt))
            crt += int(rng.integers(1, 20_000))
    return Manifest(records, rps)


def test_2_normalization_suite():
    with criterion(2, "normalization suite", 5.0):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            m = random_manifest(rng)
            rp = np.array([m.rp_index(r.rp_id) for r in m.records])
            crt = np.array([r.crt_seconds for r in m.records], dtype=float)
            train = rng.uniform(size=len(crt)) < 0.8
            last = len(m.recording_points) - 1
            if not (train & (rp == 0)).any() or not (train & (rp == last)).any():
                continue
            scaler = fit_scaler(zip(rp[train], crt[train]), 0, last)
            y = scaler.normalize(crt[train], warn=False)
            assert np.all((y >= 0) & (y <= 1))
            inside = np.unique(crt[train][(crt[train] >= scaler.min0) & (crt[train] <= scaler.maxP)])
            assert np.all(np.diff(scaler.normalize(inside)) > 0)
        minutes = TargetScaler(28800, 73980).denormalize_error(0.015)
        assert abs(minutes - 18.5) <= 0.1


# 3 ---------------------------------------------------------------------


def moving_runner(frames=10, size=64, seed=0):
    rng = np.random.default_rng(seed)
    clip = np.full((frames, size, size, 3), 60, np.uint8)
    clip += rng.integers(0, 30, clip.shape, dtype=np.uint8)  # textured, static background
    boxes = []
    for t in range(frames):
        x0, y0 = 4 + 4 * t, 20 + (t % 3)
        clip[t, y0 : y0 + 16, x0 : x0 + 10] = rng.integers(150, 256, (16, 10, 3), dtype=np.uint8)
        boxes.append(None if t in (3, 4) else (float(x0), float(y0), float(x0 + 10), float(y0 + 16)))
    return TrackedClip(clip, boxes)


def test_3_context_adjustment():
    with criterion(3, "context adjustment", 30.0):
        clip = moving_runner()
        T, H, W = clip.frames.shape[:3]
        # brute-force per-pixel mean, rounded half-up with exact rationals
        oracle = np.empty((H, W, 3), np.uint8)
        for y in range(H):
            for x in range(W):
                for c in range(3):
                    mean = Fraction(sum(int(clip.frames[t, y, x, c]) for t in range(T)), T)
                    oracle[y, x, c] = int(mean + Fraction(1, 2))
        assert np.array_equal(average_frame(clip), oracle)

        boxes = fill_missing_boxes(clip.boxes)
        for mode in ContextMode:
            out = apply_context(clip, mode)
            tau = np.full((H, W, 3), 128, np.uint8) if mode is ContextMode.BB else oracle
            for t in range(T):
                x0, y0, x1, y1 = pad_box(boxes[t], W, H)
                for y in range(H):
                    for x in range(W):
                        inside = x0 <= x < x1 and y0 <= y < y1
                        want = clip.frames[t, y, x] if inside else tau[y, x]
                        assert np.array_equal(out[t, y, x], want), (mode, t, y, x)

        flow = BlockMatchingFlow()
        bb = apply_context(clip, ContextMode.BB).mean(axis=-1)
        masks = context_masks(clip)
        square = np.ones((3, 3), bool)
        for t in range(T - 1):
            field = flow(bb[t], bb[t + 1])
            near = binary_dilation(masks[t] | masks[t + 1], square, iterations=flow.support)
            assert np.hypot(field[..., 0], field[..., 1])[~near].max() <= 0.5


# 4 ---------------------------------------------------------------------


def test_4_flow_sanity():
    with criterion(4, "flow sanity", 30.0):
        frames = translating_texture(frames=8, size=64, step=(3, 0), seed=4)
        fwd = compute_flow(frames).data[:-1]
        assert abs(np.median(fwd[..., 0]) - 0.15) <= 0.05
        assert abs(np.median(fwd[..., 1])) <= 0.05
        bwd = compute_flow(frames[::-1]).data[:-1]
        assert abs(np.median(fwd[..., 0]) + np.median(bwd[..., 0])) <= 0.1


# 5 ---------------------------------------------------------------------


def test_5_cross_validation_protocol():
    with criterion(5, "cross-validation protocol", 10.0):
        for n in range(10, 501):
            for k in (2, 5, 10):
                tests = [te for _, te in kfold_split(n, k, seed=n * 31 + k)]
                joined = np.concatenate(tests)
                assert len(joined) == n and np.array_equal(np.sort(joined), np.arange(n))
        splits = kfold_split(456, 10, seed=0)
        assert {len(tr) for tr, _ in splits} <= {410, 411} and {len(te) for _, te in splits} <= {45, 46}

        records = [
            ObservationRecord(f"r{i}", rp, "c", "t", 30_000 + 1000 * (i % 40) + 9000 * j)
            for i in range(152)
            for j, rp in enumerate(("RP4", "RP5", "RP6"))
        ]
        manifest = Manifest(records, ("RP4", "RP5", "RP6"))
        cfg = ExperimentConfig("400", {"RGB"}, None, "SB", "LINEAR", folds=10, repetitions=20)
        X = np.zeros((456, 400), np.float32)
        report = run_experiment(cfg, manifest, EmbeddingCache("/nonexistent"), oracle=True, X=X)
        assert len(report.fold_predictions) == 20 * 456 == 9120


# 6 ---------------------------------------------------------------------


def test_6_objective_correctness():
    with criterion(6, "objective correctness", 30.0):
        for got, want in (
            (mse([0, 1], [1, 0]), 1.0),
            (mse([0.5], [0.0]), 0.25),
            (mse([0.3, 0.3], [0.3, 0.3]), 0.0),
            (mae([0, 1], [1, 0]), 1.0),
            (mae([0.2, 0.4], [0.25, 0.35]), 0.05),
        ):
            assert abs(got - want) <= 1e-12
        rng = np.random.default_rng(6)
        X, y = rng.normal(size=(3, 8)), rng.uniform(0.2, 0.8, size=3)
        model = MLP(8, MLPConfig(hidden=(6, 5), dtype="float64"), seed=6)
        for p in model.params.values():
            p += 0.1 * rng.normal(size=p.shape)
        assert gradient_check(model, X, y) <= 1e-4


# 7 ---------------------------------------------------------------------

E2E_RUNNERS = 30
E2E_FOLDS = 5
E2E_REPETITIONS = 1


@pytest.mark.slow
def test_7_end_to_end_planted_signal(tmp_path):
    with criterion(7, "end-to-end planted signal", 300.0):
        manifest = make_synthetic_dataset(tmp_path / "data", SyntheticSpec(n_runners=E2E_RUNNERS, noise_sigma=0.01))
        flags = ["--manifest", manifest.source, "--store", str(tmp_path / "processed"),
                 "--cache", str(tmp_path / "cache"), "--reports", str(tmp_path / "reports")]
        assert crtreg(["preprocess", *flags, "--context", "both"]) == 0
        assert crtreg(["extract", *flags, "--context", "both", "--tap", "both", "--stub"]) == 0
        grid = ["--regressors", "LINEAR,MLP", "--folds", str(E2E_FOLDS), "--repetitions", str(E2E_REPETITIONS)]
        assert crtreg(["ablate", *flags, *grid]) == 0
        assert crtreg(["ablate", *flags, *grid, "--oracle", "--name", "oracle"]) == 0

        reports = read_reports(tmp_path / "reports" / "ablation.jsonl")
        assert len(reports) == 32
        worst = max(reports, key=lambda r: r.mae_normalized)
        print(f"  worst cell {worst.label}/{worst.config.regressor.short}: {worst.mae_normalized:.4f}")
        for rep in reports:
            assert rep.mae_normalized <= 0.02, f"{rep.label}/{rep.config.regressor.short}: {rep.mae_normalized}"
            assert rep.per_quartile_mae[3] == rep.mae_normalized
        oracle = read_reports(tmp_path / "reports" / "oracle.jsonl")
        assert len(oracle) == 32 and all(r.mae_normalized == 0.0 for r in oracle)

        rows = heteroscedastic_predictions(400, base_sigma=0.01, seed=7)
        curve = quartile_curve(rows)
        assert all(a < b for a, b in zip(curve, curve[1:]))
        assert curve[3] == mae(*zip(*rows))


# 8 ---------------------------------------------------------------------


def test_8_determinism(tmp_path):
    with criterion(8, "determinism", 60.0):
        manifest = make_synthetic_dataset(tmp_path / "data", SyntheticSpec(n_runners=6, seed=8))
        flags = ["--manifest", manifest.source, "--store", str(tmp_path / "processed"),
                 "--cache", str(tmp_path / "cache"), "--reports", str(tmp_path / "reports")]
        assert crtreg(["preprocess", *flags]) == 0
        assert crtreg(["extract", *flags, "--tap", "400", "--context", "sb", "--stub"]) == 0
        cell = ["--tap", "400", "--context", "sb", "--regressor", "MLP", "--folds", "3", "--repetitions", "2"]
        assert crtreg(["evaluate", *flags, *cell, "--name", "first"]) == 0
        assert crtreg(["evaluate", *flags, *cell, "--name", "second"]) == 0

        def records(name):
            out = []
            for line in (tmp_path / "reports" / f"{name}.jsonl").read_text().splitlines():
                obj = json.loads(line)
                obj.pop("created", None)
                out.append(json.dumps(obj, sort_keys=True, ensure_ascii=False).encode())
            return out

        first, second = records("first"), records("second")
        assert len(first) == 1 + 2 * len(manifest)
        assert first == second


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    print("\n".join(RESULTS))
    sys.exit(code)
