import json

import numpy as np
import pytest

from crtreg.backbone import TapPoint
from crtreg.context import ContextMode
from crtreg.dataset import EmbeddingCache
from crtreg.pipeline import (
    extract_observation,
    load_clip,
    make_backbones,
    preprocess_observation,
    processed_path,
)
from crtreg.synthetic import SyntheticSpec, make_synthetic_dataset, render_clip


@pytest.fixture
def dataset(tmp_path):
    return make_synthetic_dataset(tmp_path / "data", SyntheticSpec(n_runners=2, seed=2)), tmp_path


def test_load_clip_formats(tmp_path):
    frames = np.random.default_rng(0).integers(0, 256, (3, 16, 16, 3), dtype=np.uint8)
    np.save(tmp_path / "a.npy", frames)
    np.savez(tmp_path / "b.npz", frames=frames)
    np.testing.assert_array_equal(load_clip(tmp_path / "a.npy"), frames)
    np.testing.assert_array_equal(load_clip(tmp_path / "b.npz"), frames)
    np.save(tmp_path / "bad.npy", frames[..., 0])
    with pytest.raises(ValueError, match="T x H x W x 3"):
        load_clip(tmp_path / "bad.npy")
    with pytest.raises(FileNotFoundError):
        load_clip(tmp_path / "none.npy")


def test_load_clip_video_is_rgb(tmp_path):
    cv2 = pytest.importorskip("cv2")
    path = str(tmp_path / "clip.avi")
    writer = cv2.VideoWriter(path, cv2.VideoWriter_fourcc(*"MJPG"), 25, (32, 32))
    red_bgr = np.zeros((32, 32, 3), np.uint8)
    red_bgr[..., 2] = 255
    for _ in range(4):
        writer.write(red_bgr)
    writer.release()
    frames = load_clip(path)
    assert frames.shape == (4, 32, 32, 3)
    assert frames[..., 0].mean() > 200 and frames[..., 2].mean() < 50


def test_preprocess_and_extract_skip_existing(dataset):
    manifest, root = dataset
    rec = manifest.records[0]
    store = root / "processed"
    assert preprocess_observation(manifest, rec, list(ContextMode), store) == (2, 0)
    assert preprocess_observation(manifest, rec, list(ContextMode), store) == (0, 2)
    assert processed_path(store, rec, "SB").exists()

    calls = []
    backbones = make_backbones(stub=True)
    for net in (backbones.rgb, backbones.flow):
        original = net.forward
        net.forward = lambda s, _f=original: calls.append(s.kind) or _f(s)
    cache = EmbeddingCache(root / "cache")
    written, skipped = extract_observation(rec, store, cache, backbones, list(ContextMode), list(TapPoint), input_size=32)
    assert (written, skipped) == (8, 0)
    assert len(calls) == 4  # one pass per (context, stream) serves both taps
    assert extract_observation(rec, store, cache, backbones, list(ContextMode), list(TapPoint), input_size=32) == (0, 8)


def test_extract_needs_preprocessed_clip(dataset):
    manifest, root = dataset
    with pytest.raises(FileNotFoundError, match="preprocess"):
        extract_observation(manifest.records[0], root / "none", EmbeddingCache(root / "c"), make_backbones(),
                            ["BB"], ["400"], input_size=32)


def test_synthetic_latent_is_affine_in_crt(dataset):
    manifest, root = dataset
    latents = json.loads((root / "data" / "latents.json").read_text())
    z = np.array([latents[f"{r.runner_id}/{r.rp_id}"] for r in manifest.records])
    crt = np.array([r.crt_seconds for r in manifest.records], dtype=float)
    slope, intercept = np.polyfit(z, crt, 1)
    resid = crt - (slope * z + intercept)
    assert slope > 0
    assert np.abs(resid).max() <= 3 * 0.01 * SyntheticSpec().crt_range[1] + 1


def test_synthetic_boxes_stay_in_frame():
    spec = SyntheticSpec()
    for z in (0.0, 0.5, 1.0):
        frames, boxes = render_clip(z, spec, np.ones((spec.square, spec.square)))
        assert frames.shape == (spec.frames, spec.size, spec.size, 3)
        assert all(0 <= b[0] and b[2] <= spec.size for b in boxes)
