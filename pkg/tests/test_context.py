import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crtreg.context import (
    ContextMode,
    TrackedClip,
    TrackError,
    apply_context,
    average_frame,
    context_masks,
    fill_missing_boxes,
    ingest_tracks,
    pad_box,
)
from crtreg.streams import BlockMatchingFlow


def write_track(path, rows, header=True):
    lines = ["frame_index,track_id,x0,y0,x1,y1,score"] if header else []
    lines += [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_ingest_full_track_175_frames(tmp_path):
    frames = np.zeros((175, 32, 32, 3), np.uint8)
    rows = [(t, 1, 2, 3, 12, 20, 0.9) for t in range(175)]
    clip = ingest_tracks(write_track(tmp_path / "t.csv", rows), frames, track_id=1)
    assert len(clip.boxes) == 175
    assert all(b == (2.0, 3.0, 12.0, 20.0) for b in clip.boxes)


def test_ingest_gap_marks_missing(tmp_path):
    frames = np.zeros((175, 32, 32, 3), np.uint8)
    rows = [(t, 1, 2, 3, 12, 20, 0.9) for t in range(175) if not 80 <= t <= 90]
    rows += [(t, 4, 0, 0, 5, 5, 0.99) for t in range(175)]  # another track
    clip = ingest_tracks(write_track(tmp_path / "t.csv", rows), frames, track_id=1)
    assert [t for t, b in enumerate(clip.boxes) if b is None] == list(range(80, 91))


def test_ingest_keeps_highest_score_per_frame(tmp_path):
    frames = np.zeros((2, 16, 16, 3), np.uint8)
    rows = [(0, 1, 0, 0, 4, 4, 0.3), (0, 1, 1, 1, 5, 5, 0.8), (1, 1, 0, 0, 4, 4, 0.5)]
    clip = ingest_tracks(write_track(tmp_path / "t.csv", rows), frames, track_id=1)
    assert clip.boxes[0] == (1.0, 1.0, 5.0, 5.0)


def test_ingest_runner_not_found(tmp_path):
    frames = np.zeros((3, 16, 16, 3), np.uint8)
    with pytest.raises(TrackError, match="runner not found"):
        ingest_tracks(write_track(tmp_path / "t.csv", [(0, 2, 0, 0, 4, 4, 0.9)]), frames, track_id=1)


def test_ingest_box_outside_frame(tmp_path):
    frames = np.zeros((3, 16, 16, 3), np.uint8)
    with pytest.raises(TrackError, match="outside"):
        ingest_tracks(write_track(tmp_path / "t.csv", [(0, 1, 0, 0, 17, 4, 0.9)]), frames, track_id=1)


def test_fill_missing_interpolates_and_holds_edges():
    boxes = [None, (0, 0, 4, 4), None, None, (6, 3, 10, 7), None]
    filled = fill_missing_boxes(boxes)
    assert filled[0] == (0, 0, 4, 4)
    assert filled[2] == pytest.approx((2, 1, 6, 5))
    assert filled[3] == pytest.approx((4, 2, 8, 6))
    assert filled[5] == (6, 3, 10, 7)


def test_pad_box_grows_ten_percent_and_clamps():
    assert pad_box((10, 10, 20, 30), 64, 64) == (9, 8, 21, 32)
    assert pad_box((0, 0, 64, 64), 64, 64) == (0, 0, 64, 64)


def test_average_frame_identical_frames():
    frame = np.random.default_rng(0).integers(0, 256, (8, 9, 3), dtype=np.uint8)
    np.testing.assert_array_equal(average_frame(np.stack([frame] * 5)), frame)


def test_average_frame_rounds_half_up():
    frames = np.stack([np.zeros((2, 2, 3), np.uint8), np.full((2, 2, 3), 255, np.uint8)])
    assert np.all(average_frame(frames) == 128)


def moving_square(n=175, size=64, side=10, step=1):
    frames = np.zeros((n, size, size, 3), np.uint8)
    boxes = []
    for t in range(n):
        x = (t * step) % (size - side)
        y = (t * 3 * step) % (size - side)
        frames[t, y : y + side, x : x + side] = 255
        boxes.append((float(x), float(y), float(x + side), float(y + side)))
    return frames, boxes


def test_average_frame_matches_occupancy_count():
    frames, _ = moving_square()
    occupancy = np.zeros((64, 64), np.int64)
    for t in range(len(frames)):
        for y in range(64):
            for x in range(64):
                occupancy[y, x] += frames[t, y, x, 0] == 255
    expected = np.floor(255 * occupancy / 175 + 0.5)
    avg = average_frame(frames)
    np.testing.assert_array_equal(avg[..., 0], expected)
    assert np.all(avg[occupancy == 0] == 0)


@pytest.mark.parametrize("mode", list(ContextMode))
def test_whole_frame_box_is_identity(mode):
    frames = np.random.default_rng(1).integers(0, 256, (4, 12, 10, 3), dtype=np.uint8)
    clip = TrackedClip(frames, [(0, 0, 10, 12)] * 4)
    np.testing.assert_array_equal(apply_context(clip, mode), frames)


def pixel_partition_holds(clip, mode):
    out = apply_context(clip, mode)
    assert out.shape == clip.frames.shape and out.dtype == np.uint8
    tau = np.full(clip.frames.shape[1:], 128, np.uint8) if mode is ContextMode.BB else average_frame(clip)
    boxes = fill_missing_boxes(clip.boxes)
    for t in range(len(clip)):
        x0, y0, x1, y1 = pad_box(boxes[t], clip.width, clip.height)
        for y in range(clip.height):
            for x in range(clip.width):
                inside = x0 <= x < x1 and y0 <= y < y1
                expected = clip.frames[t, y, x] if inside else tau[y, x]
                if not np.array_equal(out[t, y, x], expected):
                    return False
    return True


@pytest.mark.parametrize("mode", list(ContextMode))
def test_pixel_partition_exhaustive(mode):
    frames, boxes = moving_square(n=12, size=24, side=6, step=1)
    noise = np.random.default_rng(2).integers(0, 40, frames.shape, dtype=np.uint8)
    boxes[5] = None
    clip = TrackedClip(frames | noise, boxes)
    assert pixel_partition_holds(clip, mode)


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_pixel_partition_property(data):
    t = data.draw(st.integers(1, 5))
    h, w = data.draw(st.integers(4, 12)), data.draw(st.integers(4, 12))
    seed = data.draw(st.integers(0, 2**16))
    frames = np.random.default_rng(seed).integers(0, 256, (t, h, w, 3), dtype=np.uint8)
    boxes = []
    for _ in range(t):
        if data.draw(st.booleans()) and any(b is not None for b in boxes):
            boxes.append(None)
            continue
        x0 = data.draw(st.integers(0, w - 1))
        y0 = data.draw(st.integers(0, h - 1))
        boxes.append((x0, y0, data.draw(st.integers(x0 + 1, w)), data.draw(st.integers(y0 + 1, h))))
    if all(b is None for b in boxes):
        boxes[0] = (0, 0, 1, 1)
    mode = data.draw(st.sampled_from(list(ContextMode)))
    assert pixel_partition_holds(TrackedClip(frames, boxes), mode)


def test_bb_is_idempotent():
    frames, boxes = moving_square(n=10, size=32, side=8)
    clip = TrackedClip(frames, boxes)
    once = apply_context(clip, ContextMode.BB)
    twice = apply_context(TrackedClip(once, boxes), ContextMode.BB)
    np.testing.assert_array_equal(once, twice)


def test_sb_uses_one_background_per_clip():
    frames, boxes = moving_square(n=10, size=32, side=8)
    clip = TrackedClip(frames, boxes)
    out = apply_context(clip, ContextMode.SB)
    outside = ~context_masks(clip)
    tau = average_frame(clip)
    for t in range(len(clip)):
        np.testing.assert_array_equal(out[t][outside[t]], tau[outside[t]])


def test_bb_exterior_has_no_flow():
    rng = np.random.default_rng(5)
    frames = rng.integers(0, 256, (6, 64, 64, 3), dtype=np.uint8)
    boxes = [(10 + 3 * t, 20, 26 + 3 * t, 40) for t in range(6)]
    clip = TrackedClip(frames, boxes)
    out = apply_context(clip, ContextMode.BB)
    gray = out.mean(axis=-1)
    inside = context_masks(clip)
    flow = BlockMatchingFlow()
    for t in range(5):
        field = flow(gray[t], gray[t + 1])
        # exterior = pixels whose estimate cannot see either box
        far = ~(_dilate(inside[t], flow.support) | _dilate(inside[t + 1], flow.support))
        assert np.hypot(field[..., 0], field[..., 1])[far].max() <= 0.5


def _dilate(mask, r):
    from scipy.ndimage import binary_dilation

    return binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=r)
