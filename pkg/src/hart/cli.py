"""Command-line entry point: ``hart <command> ...``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .attention import BoundingBox, fit_sigma_polynomial
from .data import DatasetError, SceneConfig, generate_dataset, load_dataset, load_sequence, read_frame, save_dataset
from .tracker import HART
from .train import TrainConfig, evaluate, train

log = logging.getLogger("hart")


def _parse_box(text: str) -> BoundingBox:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"box must be x,y,w,h, got {text!r}") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"box must have 4 values, got {len(vals)}")
    return BoundingBox(*vals)


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    data = load_dataset(args.data)
    train(cfg, data, args.out, progress=True)
    log.info("wrote %s", Path(args.out) / "model.ckpt")
    return 0


def cmd_eval(args) -> int:
    model = HART.load(args.ckpt)
    report = evaluate(model, load_dataset(args.data), args.horizon)
    report.to_csv(args.out)
    print(f"average IoU {report.average:.4f} over {report.num_sequences} sequences")
    return 0


def _load_frames(seq_dir: Path) -> tuple[np.ndarray, np.ndarray | None]:
    if (seq_dir / "boxes.csv").exists():
        s = load_sequence(seq_dir)
        return s.frames, s.boxes
    paths = sorted((seq_dir / "frames").glob("*.png")) or sorted(seq_dir.glob("*.png"))
    if len(paths) < 2:
        raise DatasetError(f"{seq_dir}: need at least 2 PNG frames")
    return np.stack([read_frame(p) for p in paths]), None


def draw_overlay(frame: np.ndarray, box: BoundingBox, att_box: BoundingBox,
                 location_map: np.ndarray | None = None) -> Image.Image:
    """Frame with the predicted box (red), attention window (blue) and, if given,
    the location map stretched over the window as a green tint."""
    im = Image.fromarray(frame).convert("RGBA")
    if location_map is not None:
        w, h = max(1, round(att_box.w)), max(1, round(att_box.h))
        alpha = Image.fromarray(np.uint8(np.clip(location_map, 0, 1) * 160)).resize((w, h), Image.BILINEAR)
        tile = Image.new("RGBA", (w, h), (0, 255, 0, 0))
        tile.putalpha(alpha)
        layer = Image.new("RGBA", im.size, (0, 0, 0, 0))
        layer.paste(tile, (round(att_box.x), round(att_box.y)))
        im = Image.alpha_composite(im, layer)
    d = ImageDraw.Draw(im)
    d.rectangle([att_box.x, att_box.y, att_box.x + att_box.w, att_box.y + att_box.h], outline=(0, 128, 255))
    d.rectangle([box.x, box.y, box.x + box.w, box.y + box.h], outline=(255, 32, 32))
    return im.convert("RGB")


def cmd_track(args) -> int:
    model = HART.load(args.ckpt)
    seq_dir = Path(args.seq)
    frames, boxes = _load_frames(seq_dir)
    box = args.box
    if box is None:
        if boxes is None:
            raise SystemExit("--box is required when the sequence has no boxes.csv")
        box = BoundingBox(*boxes[0])
    steps = model.track_sequence(frames.astype(np.float64) / 255.0, box)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(1, *box.to_array(), *np.full(4, np.nan))]
    for t, s in enumerate(steps, 2):
        rows.append((t, *s.bbox.data[0], *s.attention.data[0]))
    with open(out / "trajectory.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x", "y", "w", "h", "att_cx", "att_cy", "att_sx", "att_sy"])
        wr.writerows(rows)
    if args.overlays:
        (out / "overlays").mkdir(exist_ok=True)
        for t, s in enumerate(steps, 2):
            cx, cy, sx, sy = s.attention.data[0]
            att_box = BoundingBox(cx - sx / 2, cy - sy / 2, sx, sy)
            draw_overlay(frames[t - 1], BoundingBox(*s.bbox.data[0]), att_box, s.location_map.data[0]).save(
                out / "overlays" / f"{t:06d}.png")
    print(f"tracked {len(steps)} frames; wrote {out / 'trajectory.csv'}")
    return 0


def cmd_synth(args) -> int:
    cfg = SceneConfig.from_file(args.config) if args.config else SceneConfig()
    manifest = save_dataset(generate_dataset(cfg, args.count, args.seed), args.out)
    print(f"wrote {args.count} sequences; manifest {manifest}")
    return 0


def cmd_fit_sigma(args) -> int:
    data = load_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    picks = rng.choice(len(data), size=min(args.images, len(data)), replace=False)
    images = [data[i].frames[int(rng.integers(len(data[i])))] / 255.0 for i in picks]
    H, W = images[0].shape[:2]
    g_max = (min(H, W) - 1) / (args.glimpse - 1)
    strides = np.linspace(0.25, g_max, args.strides)
    poly = fit_sigma_polynomial(strides, images, glimpse_size=args.glimpse, seed=args.seed)
    poly.save(args.out)
    print(f"sigma coefficients {poly.coefficients.tolist()} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hart", description="Hierarchical attentive recurrent tracking")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train with the curriculum")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="dataset manifest or directory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="average IoU over a horizon")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--horizon", type=int, default=20)
    s.add_argument("--out", default="report.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("track", help="track one sequence from an initial box")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--box", type=_parse_box, default=None, help="x,y,w,h on frame 1")
    s.add_argument("--overlays", action="store_true", help="write PNGs with box, attention and location map drawn")
    s.add_argument("--out", default="track_out")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("synth-data", help="generate a synthetic dataset")
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=100)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-sigma", help="fit the stride-to-width polynomial")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--glimpse", type=int, default=28)
    s.add_argument("--strides", type=int, default=24)
    s.add_argument("--images", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fit_sigma)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DatasetError, ValueError, KeyError, OSError) as exc:
        print(f"hart {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
