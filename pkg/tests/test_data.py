import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from hart.data import (DatasetError, SceneConfig, SequenceSample, curriculum_window, generate_dataset,
                       generate_sequence, load_dataset, parse_config_file, save_dataset, sequence_seed, sprite_mask)
from hart.losses import iou

SMALL = SceneConfig(height=40, width=48, size_min=8, size_max=12, length=6)


def lone_target(seed, **kw):
    """Single sprite on a flat background so target pixels can be read back off the frame."""
    cfg = dataclasses.replace(SceneConfig(), n_distractors=0, background="flat", drift=0.0, **kw)
    return generate_sequence(cfg, seed)


def target_pixels(frame):
    bg = frame[0, 0]
    return np.any(frame != bg, axis=-1)


def tight_box(mask):
    rows, cols = np.nonzero(mask)
    # pixel i covers [i - 0.5, i + 0.5]
    return np.array([cols.min() - 0.5, rows.min() - 0.5, cols.max() - cols.min() + 1, rows.max() - rows.min() + 1])


# --- generation -----------------------------------------------------------------------
def test_same_seed_bit_identical():
    a, b = generate_sequence(SMALL, 5), generate_sequence(SMALL, 5)
    assert a.frames.tobytes() == b.frames.tobytes() and a.boxes.tobytes() == b.boxes.tobytes()


def test_different_seeds_differ():
    assert not np.array_equal(generate_sequence(SMALL, 5).frames, generate_sequence(SMALL, 6).frames)


def test_zero_velocity_gives_identical_boxes():
    cfg = dataclasses.replace(SMALL, speed_min=0.0, speed_max=0.0, random_walk=0.0, drift=0.0)
    s = generate_sequence(cfg, 1)
    assert np.all(s.boxes == s.boxes[0])


def test_shapes_and_dtype():
    s = generate_sequence(SMALL, 2)
    assert s.frames.shape == (6, 40, 48, 3) and s.frames.dtype == np.uint8 and s.boxes.shape == (6, 4)
    f = s.float_frames()
    assert f.min() >= 0.0 and f.max() <= 1.0


@pytest.mark.parametrize("background", ["flat", "noise", "texture"])
def test_pixel_range_every_background(background):
    s = generate_sequence(dataclasses.replace(SMALL, background=background), 3)
    f = s.float_frames()
    assert np.all((f >= 0) & (f <= 1))


def test_box_contains_most_target_pixels():
    for seed in range(20):
        s = lone_target(seed)
        for frame, box in zip(s.frames, s.boxes):
            m = target_pixels(frame)
            rows, cols = np.nonzero(m)
            inside = (cols >= box[0]) & (cols <= box[0] + box[2]) & (rows >= box[1]) & (rows <= box[1] + box[3])
            assert inside.mean() >= 0.8


def test_declared_box_matches_tight_sprite_box():
    worst = 1.0
    for seed in range(20):
        s = lone_target(seed)
        for frame, box in zip(s.frames, s.boxes):
            worst = min(worst, iou(tight_box(target_pixels(frame)), box).item())
    assert worst >= 0.8


def test_sprites_start_inside_frame():
    for seq in generate_dataset(SceneConfig(), 20, seed=4):
        x, y, w, h = seq.boxes[0]
        assert x >= 0 and y >= 0 and x + w <= 96 and y + h <= 96


def test_per_frame_motion_bounded_by_sprite_size():
    cfg = SceneConfig()
    for seq in generate_dataset(cfg, 20, seed=5):
        step = np.abs(np.diff(seq.boxes[:, :2], axis=0))
        assert step.max() < cfg.size_min


def test_distractors_present_and_distinct_in_colour():
    s = generate_sequence(dataclasses.replace(SceneConfig(), background="flat", drift=0.0), 7)
    colours = {tuple(c) for c in s.frames[0].reshape(-1, 3)}
    # background plus target plus two distractors, unless sprites overlap completely
    assert len(colours) >= 3


def test_distractor_boxes_recorded_and_windowed():
    s = generate_sequence(dataclasses.replace(SMALL, length=10), 4)
    assert s.distractors.shape == (10, 2, 4)
    w = s.window(3, 4)
    np.testing.assert_array_equal(w.distractors, s.distractors[3:7])
    # distractors share the target's size range and stay in frame
    assert np.all(s.distractors[..., 2:] >= 8) and np.all(s.distractors[..., :2] >= 0)


def test_occluder_hides_part_of_target_mid_sequence():
    base = dict(n_distractors=0, background="flat", drift=0.0)
    clear = generate_sequence(dataclasses.replace(SceneConfig(), occluder_prob=0.0, **base), 8)
    occluded = generate_sequence(dataclasses.replace(SceneConfig(), occluder_prob=1.0, **base), 8)
    assert np.array_equal(clear.boxes, occluded.boxes)
    mid = len(clear) // 2
    x, y, w, h = clear.boxes[mid]
    sl = np.s_[int(np.ceil(y)):int(y + h) + 1, int(np.ceil(x)):int(x + w) + 1]
    changed = np.any(clear.frames[mid][sl] != occluded.frames[mid][sl], axis=-1)
    assert 0 < changed.mean() < 1


def test_sprite_mask_shapes():
    box = np.array([2.0, 2.0, 8.0, 8.0])
    rect = sprite_mask("rect", box, 12, 12)
    disc = sprite_mask("disc", box, 12, 12)
    tri = sprite_mask("triangle", box, 12, 12)
    assert rect.sum() == 81
    assert tri.sum() < disc.sum() < rect.sum()
    assert not (disc & ~rect).any() and not (tri & ~rect).any()
    with pytest.raises(ValueError):
        sprite_mask("star", box, 12, 12)


@pytest.mark.parametrize("field,value", [("background", "stripes"), ("size_min", 0.5), ("size_max", 100.0),
                                         ("speed_max", 20.0), ("length", 1)])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        dataclasses.replace(SceneConfig(), **{field: value}).validate()


def test_sequence_seeds_are_distinct_per_index():
    seeds = {sequence_seed(0, i) for i in range(1000)}
    assert len(seeds) == 1000 and sequence_seed(0, 3) == sequence_seed(0, 3) != sequence_seed(1, 3)


def test_dataset_ids_and_independence():
    ds = generate_dataset(SMALL, 3, seed=9)
    assert [s.id for s in ds] == ["seq_000000", "seq_000001", "seq_000002"]
    # each sequence depends only on (seed, index)
    again = generate_dataset(SMALL, 5, seed=9)
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(ds, again))


# --- samples and windows ----------------------------------------------------------------
def test_sample_length_mismatch():
    with pytest.raises(DatasetError, match="3 frames but 2 boxes"):
        SequenceSample(np.zeros((3, 4, 4, 3), np.uint8), np.ones((2, 4)), "x")


def test_sample_too_short():
    with pytest.raises(DatasetError, match="at least 2"):
        SequenceSample(np.zeros((1, 4, 4, 3), np.uint8), np.ones((1, 4)), "x")


def test_full_length_window_is_identity():
    s = generate_sequence(SMALL, 1)
    w = curriculum_window(s, len(s), 0)
    assert np.array_equal(w.frames, s.frames) and np.array_equal(w.boxes, s.boxes)


def test_window_reproducible_and_starts_with_its_box():
    s = generate_sequence(dataclasses.replace(SMALL, length=20), 1)
    a, b = curriculum_window(s, 5, 42), curriculum_window(s, 5, 42)
    assert a.id == b.id and np.array_equal(a.boxes, b.boxes)
    start = int(a.id.split("[")[1].split(":")[0])
    assert np.array_equal(a.boxes[0], s.boxes[start]) and len(a) == 5


def test_window_coverage():
    s = generate_sequence(dataclasses.replace(SMALL, length=20), 1)
    starts = {curriculum_window(s, 5, seed).id for seed in range(10_000)}
    assert len(starts) == 16


def test_window_too_long():
    s = generate_sequence(SMALL, 1)
    with pytest.raises(DatasetError, match="exceeds"):
        curriculum_window(s, 7, 0)


@settings(max_examples=50)
@given(st.integers(2, 6), st.integers(0, 2**32))
def test_window_is_contiguous_slice(length, seed):
    s = generate_sequence(SMALL, 1)
    w = curriculum_window(s, length, seed)
    start = int(w.id.split("[")[1].split(":")[0])
    assert np.array_equal(w.frames, s.frames[start:start + length])


# --- disk format ----------------------------------------------------------------------------
@pytest.fixture
def saved(tmp_path):
    ds = generate_dataset(SMALL, 2, seed=3)
    return ds, save_dataset(ds, tmp_path / "d")


def test_save_layout(saved):
    ds, manifest = saved
    root = manifest.parent
    assert manifest.read_text() == "seq_000000\nseq_000001\n"
    assert sorted(p.name for p in (root / "seq_000000" / "frames").iterdir())[:2] == ["000001.png", "000002.png"]
    assert (root / "seq_000000" / "boxes.csv").read_text().splitlines()[0] == "frame,x,y,w,h"


def test_load_round_trip(saved):
    ds, manifest = saved
    back = load_dataset(manifest)
    assert [s.id for s in back] == [s.id for s in ds] and [len(s) for s in back] == [6, 6]
    for a, b in zip(ds, back):
        assert np.array_equal(a.frames, b.frames) and np.array_equal(a.boxes, b.boxes)


def test_load_accepts_directory(saved):
    assert len(load_dataset(saved[1].parent)) == 2


def test_manifest_order_defines_iteration_order(saved):
    _, manifest = saved
    manifest.write_text("seq_000001\nseq_000000\n")
    assert [s.id for s in load_dataset(manifest)] == ["seq_000001", "seq_000000"]


def test_frames_load_lazily(saved):
    _, manifest = saved
    seq = load_dataset(manifest)[0]
    assert seq._frames is None
    seq.frames
    assert seq._frames is not None


def test_nonpositive_width_cites_row(saved):
    _, manifest = saved
    csv_path = manifest.parent / "seq_000000" / "boxes.csv"
    lines = csv_path.read_text().splitlines()
    lines[3] = "3,1.0,2.0,0.0,5.0"
    csv_path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="row 4"):
        load_dataset(manifest)


def test_malformed_row(saved):
    _, manifest = saved
    csv_path = manifest.parent / "seq_000001" / "boxes.csv"
    lines = csv_path.read_text().splitlines()
    lines[2] = "2,abc,2,3,4"
    csv_path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="seq_000001.*malformed row 3"):
        load_dataset(manifest)


def test_missing_frame_names_path(saved):
    _, manifest = saved
    victim = manifest.parent / "seq_000000" / "frames" / "000004.png"
    victim.unlink()
    with pytest.raises(DatasetError, match="000004.png"):
        load_dataset(manifest)


def test_frame_count_mismatch(saved):
    _, manifest = saved
    Image.new("RGB", (48, 40)).save(manifest.parent / "seq_000000" / "frames" / "000007.png")
    with pytest.raises(DatasetError, match="7 frame files but 6 boxes"):
        load_dataset(manifest)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="does not exist"):
        load_dataset(tmp_path / "nope.txt")


def test_grayscale_frames_replicated(tmp_path):
    seq = tmp_path / "g"
    (seq / "frames").mkdir(parents=True)
    for t in (1, 2):
        Image.fromarray(np.full((5, 6), 77 * t, np.uint8), mode="L").save(seq / "frames" / f"{t:06d}.png")
    (seq / "boxes.csv").write_text("frame,x,y,w,h\n1,0,0,2,2\n2,1,1,2,2\n")
    (tmp_path / "manifest.txt").write_text("g\n")
    s = load_dataset(tmp_path / "manifest.txt")[0]
    assert s.frames.shape == (2, 5, 6, 3) and np.all(s.frames[1] == 154)


# --- config files -----------------------------------------------------------------------------
def test_scene_config_from_file(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("# comment\nheight = 50\nbackground = flat\n\nsize_max = 14.5\n")
    cfg = SceneConfig.from_file(p)
    assert (cfg.height, cfg.background, cfg.size_max, cfg.width) == (50, "flat", 14.5, 96)


def test_config_unknown_key(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("height = 50\ncolour = red\n")
    with pytest.raises(ValueError, match=r"s.cfg:2: unknown key 'colour'"):
        parse_config_file(p, SceneConfig)


def test_config_bad_value(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("height = tall\n")
    with pytest.raises(ValueError, match="cannot parse"):
        parse_config_file(p, SceneConfig)


def test_config_missing_equals(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("height 50\n")
    with pytest.raises(ValueError, match="key = value"):
        parse_config_file(p, SceneConfig)
