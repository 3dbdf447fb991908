"""RMSProp training with a sequence-length curriculum, and IoU evaluation."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import SigmaPolynomial, image_box
from .data import SequenceSample, curriculum_window, parse_config_file
from .losses import AdaptiveWeights, LossConfig, LossMode, target_mask, total_loss
from .tracker import DEFAULT_SIGMA, HART, ModelConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "seq_len", "l_track", "l_spatial", "l_app", "lambda_t", "lambda_s", "lambda_a",
               "total", "mean_iou")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    rmsprop_decay: float = 0.9
    batch_size: int = 8
    curriculum_start: int = 5
    curriculum_increment: int = 5
    curriculum_stages: int = 3
    curriculum_schedule: str = ""          # explicit lengths, e.g. "5,10,20"; overrides start/increment
    epochs_per_stage: int = 1
    steps_per_epoch: int = 500             # at the starting length; scaled by start/len afterwards
    max_seq_len: int = 30
    loss_mode: str = "full_hart"
    beta: float = 1e-4
    epsilon: float = 1e-4
    grad_clip: float = 5.0
    seed: int = 0
    glimpse_h: int = 28
    glimpse_w: int = 28
    image_h: int = 96
    image_w: int = 96
    v1_preset: str = "small"
    lstm_units: int = 100
    zoneout: float = 0.05
    dropout: float = 0.25
    app_dim: int = 64
    sigma_file: str = ""

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.curriculum_start < 2:
            raise ValueError("curriculum_start must be at least 2")
        LossMode(self.loss_mode)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        cfg = cls(**parse_config_file(path, cls))
        if cfg.sigma_file and not Path(cfg.sigma_file).is_absolute():
            cfg.sigma_file = str(Path(path).parent / cfg.sigma_file)
        return cfg

    def stage_lengths(self) -> list[int]:
        if self.curriculum_schedule:
            lengths = [int(v) for v in self.curriculum_schedule.split(",") if v.strip()]
        else:
            lengths = [self.curriculum_start + k * self.curriculum_increment
                       for k in range(self.curriculum_stages)]
        return [min(n, self.max_seq_len) for n in lengths]

    def steps_for(self, length: int) -> int:
        start = self.stage_lengths()[0]
        return max(1, round(self.steps_per_epoch * start / length)) * self.epochs_per_stage

    def model_config(self) -> ModelConfig:
        sigma = SigmaPolynomial.load(self.sigma_file).coefficients if self.sigma_file else DEFAULT_SIGMA
        return ModelConfig(image_hw=(self.image_h, self.image_w), glimpse_hw=(self.glimpse_h, self.glimpse_w),
                           v1_preset=self.v1_preset, dropout=self.dropout, zoneout=self.zoneout,
                           lstm_units=self.lstm_units, app_dim=self.app_dim,
                           use_location_map=LossMode(self.loss_mode) != LossMode.SPATIAL_ATT_ONLY,
                           sigma=tuple(float(c) for c in sigma), seed=self.seed)

    def loss_config(self) -> LossConfig:
        return LossConfig(epsilon=self.epsilon, beta=self.beta, mode=LossMode(self.loss_mode))


class RMSProp:
    """RMSProp with heavy-ball momentum on the normalised step.

    ``v = d*v + (1-d)*g^2``; ``m = mu*m + lr*g/sqrt(v + 1e-8)``; ``p -= m``.
    """

    def __init__(self, named_params: Sequence[tuple[str, ad.Tensor]], lr: float, decay: float = 0.9,
                 momentum: float = 0.9):
        self.params = list(named_params)
        self.lr, self.decay, self.momentum = lr, decay, momentum
        self.v = {n: np.zeros(p.shape) for n, p in self.params}
        self.m = {n: np.zeros(p.shape) for n, p in self.params}

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
        for name, p in self.params:
            if p.grad is None:
                continue
            self.v[name], self.m[name], p.data = rmsprop_update(
                p.data, p.grad, self.v[name], self.m[name], self.lr, self.decay, self.momentum)


def rmsprop_update(p, g, v, m, lr, decay, momentum):
    v = decay * v + (1 - decay) * g * g
    m = momentum * m + lr * g / np.sqrt(v + 1e-8)
    return v, m, p - m


def clip_grad_norm(params: Sequence[ad.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lo = np.maximum(a[..., :2], b[..., :2])
    hi = np.minimum(a[..., :2] + a[..., 2:], b[..., :2] + b[..., 2:])
    inter = np.prod(np.clip(hi - lo, 0, None), axis=-1)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    # (x + w) - x need not equal w, so identical boxes are scored exactly
    same = np.all(a == b, axis=-1)
    with np.errstate(invalid="ignore"):
        return np.where(same, 1.0, np.minimum(inter / union, 1.0))


@dataclass
class TrainState:
    model: HART
    weights: AdaptiveWeights
    optimizer: RMSProp
    step: int = 0


def sample_batch(dataset: Sequence[SequenceSample], batch_size: int, length: int, rng: np.random.Generator):
    picks = rng.integers(0, len(dataset), size=batch_size)
    wins = [curriculum_window(dataset[i], length, rng) for i in picks]
    frames = np.stack([w.float_frames() for w in wins])
    boxes = np.stack([w.boxes for w in wins])
    return frames, boxes


def loss_on_batch(model: HART, weights: AdaptiveWeights, frames, boxes, loss_cfg: LossConfig, rng=None):
    steps = model.unroll(frames, boxes[:, 0], rng=rng)
    H, W = model.cfg.image_hw
    return total_loss(steps, boxes[:, 1:], model.active_parameters(), loss_cfg, weights, image_box(H, W)), steps


def train(config: TrainConfig, dataset: Sequence[SequenceSample], out_dir, model: HART | None = None,
          progress: bool = False) -> TrainState:
    """Curriculum training; writes ``train_log.csv`` and per-stage checkpoints to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lengths = config.stage_lengths()
    too_short = [s.id for s in dataset if len(s) < max(lengths)]
    if too_short:
        raise ValueError(f"{len(too_short)} sequences shorter than curriculum length {max(lengths)}, "
                         f"e.g. {too_short[0]}")
    model = model or HART(config.model_config())
    weights = AdaptiveWeights()
    named = list(model.named_parameters()) + [("loss." + n, p) for n, p in weights.named_parameters()]
    opt = RMSProp(named, config.learning_rate, config.rmsprop_decay, config.momentum)
    loss_cfg = config.loss_config()
    rng = np.random.default_rng(config.seed + 1)
    state = TrainState(model, weights, opt)
    last_good = out / "last_good.ckpt"
    save_training_checkpoint(last_good, model, weights)
    params = [p for _, p in named]
    t0 = time.time()
    with open(out / "train_log.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_COLUMNS)
        for stage, length in enumerate(lengths):
            n_steps = config.steps_for(length)
            for _ in range(n_steps):
                frames, boxes = sample_batch(dataset, config.batch_size, length, rng)
                ad.zero_grad(params)
                try:
                    lb, steps = loss_on_batch(model, weights, frames, boxes, loss_cfg, rng)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"{exc} at step {state.step}; "
                                           f"last good checkpoint kept at {last_good}") from exc
                if not np.isfinite(lb.total.item()):
                    raise TrainingDiverged(f"loss is {lb.total.item()} at step {state.step}; "
                                           f"last good checkpoint kept at {last_good}")
                ad.backward(lb.total)
                clip_grad_norm(params, config.grad_clip)
                try:
                    opt.step()
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"{exc} at step {state.step}; "
                                           f"last good checkpoint kept at {last_good}") from exc
                state.step += 1
                pred = np.stack([s.bbox.data for s in steps], axis=1)
                mean_iou = float(box_iou(pred, boxes[:, 1:]).mean())
                f = lb.as_floats()
                wr.writerow([state.step, length, f["l_track"], f["l_spatial"], f["l_app"], f["lambda_t"],
                             f["lambda_s"], f["lambda_a"], f["total"], mean_iou])
                if progress and state.step % 50 == 0:
                    fh.flush()
                    log.info("step %d len %d total %.4f iou %.3f (%.0fs)", state.step, length, f["total"],
                             mean_iou, time.time() - t0)
            save_training_checkpoint(out / f"stage{stage + 1}_len{length}.ckpt", model, weights)
            save_training_checkpoint(last_good, model, weights)
    save_training_checkpoint(out / "model.ckpt", model, weights)
    return state


def save_training_checkpoint(path, model: HART, weights: AdaptiveWeights | None = None) -> None:
    from .checkpoint import save_checkpoint
    arrays = model.state_dict()
    if weights is not None:
        arrays["loss.log_lambda"] = weights.log_lambda.data.copy()
    save_checkpoint(path, arrays)


@dataclass
class EvalReport:
    curve: np.ndarray        # mean IoU per tracked timestep
    counts: np.ndarray       # sequences contributing at each timestep
    average: float
    num_sequences: int
    config_hash: str

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "mean_iou", "count"])
            for t, (v, n) in enumerate(zip(self.curve, self.counts), 2):
                wr.writerow([t, repr(float(v)), int(n)])
            wr.writerow(["all", repr(self.average), self.num_sequences])


def model_hash(model: HART) -> str:
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def predict_boxes(model: HART, dataset: Sequence[SequenceSample], horizon: int, batch_size: int = 25):
    """Eval-mode predictions ``(N, horizon, 4)``; NaN past the end of short sequences."""
    out = np.full((len(dataset), horizon, 4), np.nan)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(dataset):
        by_len.setdefault(min(len(s), horizon + 1), []).append(i)
    with ad.no_grad():
        for n, idxs in sorted(by_len.items()):
            for k in range(0, len(idxs), batch_size):
                chunk = idxs[k:k + batch_size]
                frames = np.stack([dataset[i].float_frames(0, n) for i in chunk])
                b1 = np.stack([dataset[i].boxes[0] for i in chunk])
                steps = model.unroll(frames, b1)
                out[chunk, :n - 1] = np.stack([s.bbox.data for s in steps], axis=1)
    return out


def evaluate(model: HART, dataset: Sequence[SequenceSample], horizon: int, tracker=None) -> EvalReport:
    """Initialise on frame 1 from ground truth, track ``horizon`` steps, average IoU per step.

    ``tracker`` may replace the model with any callable returning predictions
    shaped like :func:`predict_boxes`.
    """
    if not dataset:
        raise ValueError("evaluate: empty dataset")
    pred = tracker(dataset, horizon) if tracker is not None else predict_boxes(model, dataset, horizon)
    truth = np.full((len(dataset), horizon, 4), np.nan)
    for i, s in enumerate(dataset):
        n = min(len(s) - 1, horizon)
        truth[i, :n] = s.boxes[1:n + 1]
    ious = box_iou(pred, truth)
    valid = np.isfinite(ious)
    counts = valid.sum(axis=0)
    curve = np.where(counts > 0, np.nansum(ious, axis=0) / np.maximum(counts, 1), np.nan)
    average = float(np.nanmean(ious))
    h = model_hash(model) if model is not None else "external"
    return EvalReport(curve, counts, average, len(dataset), f"{h}-h{horizon}")


@dataclass
class MapContrast:
    inside: float            # mean location-map value on cells of the target mask
    outside: float           # mean on the remaining cells
    on_distractors: float    # mean on cells covering a distractor but not the target
    glimpses: int

    @property
    def gap(self) -> float:
        return self.inside - self.outside


def distractor_contrast(model: HART, dataset: Sequence[SequenceSample], horizon: int,
                        batch_size: int = 25) -> MapContrast:
    """Location-map statistics over tracked glimpses that show a distractor.

    A glimpse qualifies when some map cell centre lies in a distractor box and
    outside the target box.  Cells are pooled over all qualifying glimpses.
    """
    sums = np.zeros(3)
    counts = np.zeros(3)
    glimpses = 0
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(dataset):
        if s.distractors is None:
            raise ValueError(f"{s.id}: no distractor boxes recorded")
        by_len.setdefault(min(len(s), horizon + 1), []).append(i)
    with ad.no_grad():
        for n, idxs in sorted(by_len.items()):
            for k in range(0, len(idxs), batch_size):
                chunk = idxs[k:k + batch_size]
                frames = np.stack([dataset[i].float_frames(0, n) for i in chunk])
                steps = model.unroll(frames, np.stack([dataset[i].boxes[0] for i in chunk]))
                for t, step in enumerate(steps, 1):
                    att = step.attention.data
                    maps = step.location_map.data
                    truth = np.stack([dataset[i].boxes[t] for i in chunk])
                    tau = target_mask(att, truth, maps.shape[1:]).astype(bool)
                    near = np.zeros_like(tau)
                    for j in range(dataset[chunk[0]].distractors.shape[1]):
                        d = np.stack([dataset[i].distractors[t, j] for i in chunk])
                        near |= target_mask(att, d, maps.shape[1:]).astype(bool)
                    near &= ~tau
                    for b in np.nonzero(near.any(axis=(1, 2)) & tau.any(axis=(1, 2)))[0]:
                        glimpses += 1
                        for slot, cells in enumerate((tau[b], ~tau[b], near[b])):
                            sums[slot] += maps[b][cells].sum()
                            counts[slot] += cells.sum()
    if glimpses == 0:
        raise ValueError("distractor_contrast: no glimpse shows a distractor")
    inside, outside, dis = sums / np.maximum(counts, 1)
    return MapContrast(float(inside), float(outside), float(dis), glimpses)
