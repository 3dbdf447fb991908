"""Synthetic moving-sprite sequences and the on-disk dataset format.

On disk a dataset is a directory holding ``manifest.txt`` (one sequence
directory per line, relative to the manifest) and, per sequence,
``frames/NNNNNN.png`` (1-indexed) plus ``boxes.csv`` with header
``frame,x,y,w,h``.  Box coordinates follow the package convention: the
centre of pixel ``(0, 0)`` is the origin, so a box's left edge at ``x``
covers pixel columns whose centres lie in ``[x, x + w]``.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

SHAPES = ("rect", "triangle", "disc")


class DatasetError(ValueError):
    pass


@dataclass
class SceneConfig:
    height: int = 96
    width: int = 96
    size_min: float = 12.0
    size_max: float = 22.0
    n_distractors: int = 2
    speed_min: float = 0.5
    speed_max: float = 2.5
    random_walk: float = 0.15
    occluder_prob: float = 0.0
    drift: float = 0.005
    background: str = "noise"
    min_color_dist: float = 0.45
    length: int = 30

    def validate(self) -> None:
        if self.background not in ("flat", "noise", "texture"):
            raise ValueError(f"background must be flat, noise or texture, got {self.background!r}")
        if not 1 <= self.size_min <= self.size_max:
            raise ValueError("need 1 <= size_min <= size_max")
        if self.size_max >= min(self.height, self.width):
            raise ValueError("sprites must fit inside the frame")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("need 0 <= speed_min <= speed_max")
        if self.speed_max + 3 * self.random_walk > self.size_min:
            raise ValueError("per-frame motion must stay below the smallest sprite size")
        if self.length < 2:
            raise ValueError("sequences need at least 2 frames")

    @classmethod
    def from_file(cls, path) -> "SceneConfig":
        return cls(**parse_config_file(path, cls))


def parse_config_file(path, schema) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = {f.name: f.type for f in fields(schema)}
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(val, str(types[key]), f"{path}:{lineno}")
    return out


def _coerce(val: str, typ: str, where: str):
    try:
        if typ.startswith("bool"):
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return val.lower() in ("true", "1", "yes")
        if typ.startswith("int"):
            return int(val)
        if typ.startswith("float"):
            return float(val)
        if typ.startswith("tuple"):
            return tuple(int(v) for v in val.replace("x", ",").split(",") if v.strip())
    except ValueError:
        raise ValueError(f"{where}: cannot parse {val!r} as {typ}") from None
    return val


class SequenceSample:
    """Frames ``(T, H, W, 3)`` as uint8 plus ground-truth boxes ``(T, 4)``.

    Frames may be supplied directly or through a loader called on first use.
    """

    def __init__(self, frames: np.ndarray | None, boxes: np.ndarray, id: str,
                 loader: Callable[[], np.ndarray] | None = None, length: int | None = None,
                 distractors: np.ndarray | None = None):
        self.boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        self.id = id
        # (T, N, 4) distractor boxes for generated scenes; not stored on disk
        self.distractors = distractors
        self._frames = frames
        self._loader = loader
        n = len(frames) if frames is not None else length
        if n is None or n != len(self.boxes):
            raise DatasetError(f"{id}: {n} frames but {len(self.boxes)} boxes")
        if n < 2:
            raise DatasetError(f"{id}: sequences need at least 2 frames")

    @property
    def frames(self) -> np.ndarray:
        if self._frames is None:
            self._frames = self._loader()
        return self._frames

    def __len__(self):
        return len(self.boxes)

    def float_frames(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        return self.frames[start:stop].astype(np.float64) / 255.0

    def window(self, start: int, length: int) -> "SequenceSample":
        if start < 0 or start + length > len(self):
            raise DatasetError(f"{self.id}: window [{start}, {start + length}) outside {len(self)} frames")
        d = None if self.distractors is None else self.distractors[start:start + length]
        return SequenceSample(self.frames[start:start + length], self.boxes[start:start + length],
                              f"{self.id}[{start}:{start + length}]", distractors=d)


# --- generation --------------------------------------------------------
def sequence_seed(global_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{global_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sprite_mask(shape: str, box: np.ndarray, height: int, width: int) -> np.ndarray:
    """Boolean ``(H, W)`` mask of pixels whose centre falls inside the sprite."""
    x, y, w, h = box
    cols = np.arange(width, dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)[:, None]
    inside = (cols >= x) & (cols <= x + w) & (rows >= y) & (rows <= y + h)
    if shape == "rect":
        return inside
    if shape == "disc":
        cx, cy = x + w / 2, y + h / 2
        return ((cols - cx) / (w / 2)) ** 2 + ((rows - cy) / (h / 2)) ** 2 <= 1.0
    if shape == "triangle":
        # apex at top centre, base along the bottom edge
        frac = np.clip((rows - y) / h, 0.0, 1.0)
        half = frac * w / 2
        return inside & (np.abs(cols - (x + w / 2)) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=3)
    img = np.broadcast_to(base, (cfg.height, cfg.width, 3)).copy()
    if cfg.background == "noise":
        img += rng.normal(0, 0.06, size=img.shape)
    elif cfg.background == "texture":
        tex = gaussian_filter(rng.normal(0, 1, size=(cfg.height, cfg.width, 3)), sigma=(3, 3, 0))
        img += 0.15 * tex / (tex.std() + 1e-12)
    return img


def _distinct_colors(n: int, min_dist: float, bg: np.ndarray, rng) -> list[np.ndarray]:
    colors: list[np.ndarray] = []
    tries = 0
    while len(colors) < n:
        c = rng.uniform(0, 1, size=3)
        tries += 1
        ok = all(np.linalg.norm(c - o) >= min_dist for o in colors) and np.linalg.norm(c - bg) >= 0.3
        if ok or tries > 10_000:
            colors.append(c)
    return colors


def _trajectory(cfg: SceneConfig, size: np.ndarray, rng) -> np.ndarray:
    H, W = cfg.height, cfg.width
    pos = np.array([rng.uniform(0, W - 1 - size[0]), rng.uniform(0, H - 1 - size[1])])
    ang = rng.uniform(0, 2 * np.pi)
    vel = rng.uniform(cfg.speed_min, cfg.speed_max) * np.array([np.cos(ang), np.sin(ang)])
    hi = np.array([W - 1 - size[0], H - 1 - size[1]])
    out = np.empty((cfg.length, 2))
    for t in range(cfg.length):
        out[t] = pos
        vel = vel + rng.normal(0, cfg.random_walk, size=2) if cfg.random_walk > 0 else vel
        speed = np.linalg.norm(vel)
        if speed > cfg.speed_max:
            vel *= cfg.speed_max / speed
        pos = pos + vel
        # reflect off the frame border
        for k in range(2):
            if pos[k] < 0:
                pos[k], vel[k] = -pos[k], -vel[k]
            elif pos[k] > hi[k]:
                pos[k], vel[k] = 2 * hi[k] - pos[k], -vel[k]
    return out


def generate_sequence(config: SceneConfig, seed: int, id: str | None = None) -> SequenceSample:
    """One target plus same-shape distractors; fully determined by ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    H, W, T = config.height, config.width, config.length
    shape = SHAPES[rng.integers(len(SHAPES))]
    bg = _background(config, rng)
    n = 1 + config.n_distractors
    colors = _distinct_colors(n, config.min_color_dist, bg.mean(axis=(0, 1)), rng)
    sizes = rng.uniform(config.size_min, config.size_max, size=(n, 2))
    paths = [_trajectory(config, sizes[k], rng) for k in range(n)]
    occluder = None
    if rng.random() < config.occluder_prob:
        mid = paths[0][T // 2] + sizes[0] / 2
        vertical = bool(rng.integers(2))
        thick = rng.uniform(3, 6)
        occluder = (vertical, mid[0 if vertical else 1] - thick / 2, thick, rng.uniform(0, 1, size=3))
    drift = rng.normal(0, config.drift, size=(T, n, 3)).cumsum(axis=0) if config.drift > 0 else np.zeros((T, n, 3))
    frames = np.empty((T, H, W, 3), dtype=np.uint8)
    boxes = np.empty((T, 4))
    for t in range(T):
        img = bg.copy()
        # distractors first so the target is drawn on top
        for k in list(range(1, n)) + [0]:
            box = np.concatenate([paths[k][t], sizes[k]])
            m = sprite_mask(shape, box, H, W)
            img[m] = np.clip(colors[k] + drift[t, k], 0, 1)
            if k == 0:
                boxes[t] = box
        if occluder is not None:
            vertical, lo, thick, col = occluder
            idx = np.arange(W if vertical else H)
            band = (idx >= lo) & (idx <= lo + thick)
            if vertical:
                img[:, band] = col
            else:
                img[band] = col
        frames[t] = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    others = np.stack([np.concatenate([paths[k], np.broadcast_to(sizes[k], (T, 2))], axis=1)
                       for k in range(1, n)], axis=1) if n > 1 else np.zeros((T, 0, 4))
    return SequenceSample(frames, boxes, id or f"synth-{seed}", distractors=others)


def generate_dataset(config: SceneConfig, count: int, seed: int) -> list[SequenceSample]:
    return [generate_sequence(config, sequence_seed(seed, i), id=f"seq_{i:06d}") for i in range(count)]


def curriculum_window(sample: SequenceSample, length: int, seed) -> SequenceSample:
    """Contiguous window of ``length`` frames at a seeded uniform start."""
    if length > len(sample):
        raise DatasetError(f"{sample.id}: window length {length} exceeds {len(sample)} frames")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    start = int(rng.integers(0, len(sample) - length + 1))
    return sample.window(start, length)


# --- disk format -------------------------------------------------------
def save_dataset(samples: Sequence[SequenceSample], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for s in samples:
        name = s.id.replace("/", "_")
        seq_dir = out / name
        (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(s.frames, 1):
            Image.fromarray(frame).save(seq_dir / "frames" / f"{t:06d}.png")
        with open(seq_dir / "boxes.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["frame", "x", "y", "w", "h"])
            for t, b in enumerate(s.boxes, 1):
                wr.writerow([t] + [repr(float(v)) for v in b])
        names.append(name)
    manifest = out / "manifest.txt"
    manifest.write_text("".join(n + "\n" for n in names))
    return manifest


def read_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode != "L" else im)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr.astype(np.uint8)


def load_sequence(seq_dir) -> SequenceSample:
    seq_dir = Path(seq_dir)
    csv_path = seq_dir / "boxes.csv"
    if not csv_path.exists():
        raise DatasetError(f"{seq_dir}: missing boxes.csv")
    boxes = []
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["frame", "x", "y", "w", "h"]:
        raise DatasetError(f"{csv_path}: header must be 'frame,x,y,w,h'")
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        try:
            frame = int(row[0])
            x, y, w, h = (float(v) for v in row[1:5])
            if len(row) != 5:
                raise ValueError
        except (ValueError, IndexError):
            raise DatasetError(f"{csv_path}: malformed row {lineno}: {row}") from None
        if frame != len(boxes) + 1:
            raise DatasetError(f"{csv_path}: row {lineno} has frame {frame}, expected {len(boxes) + 1}")
        if not (w > 0 and h > 0) or not np.all(np.isfinite([x, y, w, h])):
            raise DatasetError(f"{csv_path}: row {lineno} has a non-positive or non-finite box")
        boxes.append((x, y, w, h))
    paths = [seq_dir / "frames" / f"{t:06d}.png" for t in range(1, len(boxes) + 1)]
    for p in paths:
        if not p.exists():
            raise DatasetError(f"{seq_dir.name}: frame file {p} does not exist")
    extra = len(list((seq_dir / "frames").glob("*.png"))) - len(paths)
    if extra:
        raise DatasetError(f"{seq_dir.name}: {len(paths) + extra} frame files but {len(boxes)} boxes")
    return SequenceSample(None, np.array(boxes), seq_dir.name,
                          loader=lambda: np.stack([read_frame(p) for p in paths]), length=len(boxes))


def load_dataset(manifest_path) -> list[SequenceSample]:
    """Sequences in manifest order; frame pixels load on first access."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.txt"
    if not manifest_path.exists():
        raise DatasetError(f"manifest {manifest_path} does not exist")
    root = manifest_path.parent
    names = [ln.strip() for ln in manifest_path.read_text().splitlines() if ln.strip()]
    return [load_sequence(root / n) for n in names]
