"""Tracking, attention and regularisation losses with learned task weights.

Boxes are ``(..., 4)`` tensors in ``(x, y, w, h)``.  All logarithms act on
clipped arguments, and clipping passes no gradient once active.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import BoundingBox, attention_to_boxes
from .autodiff import Tensor
from .nn import Module, param
from .tracker import StepOutput


class LossMode(str, Enum):
    SPATIAL_ATT_ONLY = "spatial_att_only"
    APP_ATT_NO_LOSS = "app_att_no_loss"
    FULL_HART = "full_hart"


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-4
    beta: float = 1e-4
    mode: LossMode = LossMode.FULL_HART

    def __post_init__(self):
        if not 0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        object.__setattr__(self, "mode", LossMode(self.mode))


class AdaptiveWeights(Module):
    """Positive task weights stored as their logarithms."""

    NAMES = ("track", "spatial", "appearance")

    def __init__(self):
        self.log_lambda = param(np.zeros(3))

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_lambda.data)

    def __call__(self) -> Tensor:
        return ad.exp(self.log_lambda)


@dataclass
class LossBreakdown:
    l_track: Tensor
    l_spatial: Tensor
    l_appearance: Tensor
    r_lambda: Tensor
    r_l2: Tensor
    total: Tensor
    lambdas: np.ndarray

    def as_floats(self) -> dict[str, float]:
        return {"l_track": self.l_track.item(), "l_spatial": self.l_spatial.item(),
                "l_app": self.l_appearance.item(), "r_lambda": self.r_lambda.item(),
                "r_l2": self.r_l2.item(), "total": self.total.item(),
                "lambda_t": float(self.lambdas[0]), "lambda_s": float(self.lambdas[1]),
                "lambda_a": float(self.lambdas[2])}


def _boxes(b) -> Tensor:
    if isinstance(b, BoundingBox):
        return Tensor(b.to_array())
    return ad.as_tensor(b)


def intersection_area(a, b) -> Tensor:
    a, b = _boxes(a), _boxes(b)
    lo = ad.maximum(a[..., :2], b[..., :2])
    hi = ad.minimum(a[..., :2] + a[..., 2:], b[..., :2] + b[..., 2:])
    side = ad.relu(hi - lo)
    return side[..., 0] * side[..., 1]


def iou(a, b) -> Tensor:
    """Intersection over union of axis-aligned boxes, broadcast over leading dims.

    Rounding can push the ratio for near-identical boxes an ulp above 1; the
    result is capped there.
    """
    a, b = _boxes(a), _boxes(b)
    inter = intersection_area(a, b)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return ad.minimum(inter / union, 1.0)


def tracking_loss(pred, truth, eps: float = 1e-4) -> Tensor:
    """Mean over timesteps (and batch) of ``-log(clip(IoU, eps, 1))``."""
    return ad.mean(-ad.log(ad.clip(iou(pred, truth), eps, 1.0)))


def spatial_attention_loss(att_boxes, truth, frame_box, eps: float = 1e-4) -> Tensor:
    """Coverage of the true box by the attention plus a penalty on attention size.

    Both log arguments are clipped to ``[eps, 1 - eps]``.
    """
    att_boxes, truth, frame_box = _boxes(att_boxes), _boxes(truth), _boxes(frame_box)
    coverage = intersection_area(att_boxes, truth) / (truth[..., 2] * truth[..., 3])
    term1 = -ad.log(ad.clip(coverage, eps, 1.0 - eps))
    term2 = -ad.log(ad.clip(1.0 - iou(att_boxes, frame_box), eps, 1.0 - eps))
    return ad.mean(term1 + term2)


def target_mask(att, box, map_dims: tuple[int, int]) -> np.ndarray:
    """Binary ``(..., h_v, w_v)`` mask of map cells whose centre lies in ``box``.

    Cells tile the attention window uniformly.  Plain numpy: the mask is a
    training target and never enters the tape.
    """
    att = np.asarray(att.to_array() if hasattr(att, "to_array") else getattr(att, "data", att), dtype=np.float64)
    box = np.asarray(box.to_array() if hasattr(box, "to_array") else getattr(box, "data", box), dtype=np.float64)
    hv, wv = map_dims
    x0 = att[..., 0] - att[..., 2] / 2
    y0 = att[..., 1] - att[..., 3] / 2
    cx = x0[..., None] + (np.arange(wv) + 0.5) / wv * att[..., 2, None]
    cy = y0[..., None] + (np.arange(hv) + 0.5) / hv * att[..., 3, None]
    inx = (cx >= box[..., 0, None]) & (cx <= box[..., 0, None] + box[..., 2, None])
    iny = (cy >= box[..., 1, None]) & (cy <= box[..., 1, None] + box[..., 3, None])
    return (iny[..., :, None] & inx[..., None, :]).astype(np.float64)


def appearance_loss(location_maps, masks, eps: float = 1e-4) -> Tensor:
    """Per-cell binary cross-entropy between target masks and location maps, averaged."""
    s = ad.clip(ad.as_tensor(location_maps), eps, 1.0 - eps)
    m = np.asarray(getattr(masks, "data", masks), dtype=np.float64)
    if s.shape != m.shape:
        raise ValueError(f"appearance_loss: maps {s.shape} and masks {m.shape} differ")
    return ad.mean(-(ad.log(s) * m + ad.log(1.0 - s) * (1.0 - m)))


def l2_regularizer(params: Sequence[Tensor], banks: Sequence[Tensor] = ()) -> Tensor:
    """``0.5 * |theta|^2 + 0.5 * |mean of dynamic banks|^2``.

    ``banks`` holds flat bank tensors ``(B, n)`` or ``(n,)``; the mean runs over
    every batch row of every timestep.
    """
    total = Tensor(0.0)
    for p in params:
        total = total + (p * p).sum() * 0.5
    if banks:
        rows = ad.concat([ad.reshape(b, (-1, b.shape[-1])) for b in banks], axis=0)
        m = rows.mean(axis=0)
        total = total + (m * m).sum() * 0.5
    return total


def adaptive_regularizer(weights: AdaptiveWeights, active=(True, True, True)) -> Tensor:
    """``sum log(1/lambda_i)`` over the active terms.

    With this sign ``lambda * L + log(1/lambda)`` is minimised at ``lambda = 1/L``,
    so each weight settles at the inverse magnitude of its loss.  The opposite
    sign has no minimum and drives every weight to zero.
    """
    idx = [i for i, a in enumerate(active) if a]
    return -weights.log_lambda[idx].sum()


def total_loss(steps, truth, params: Sequence[Tensor], config: LossConfig, weights: AdaptiveWeights,
               frame_box) -> LossBreakdown:
    """Assemble the weighted objective from tracker outputs.

    ``steps`` are the per-frame outputs for t = 2..T and ``truth`` the
    matching ground-truth boxes as ``(B, T-1, 4)``.
    """
    eps = config.epsilon
    truth = np.asarray(truth, dtype=np.float64)
    pred = ad.stack([s.bbox for s in steps], axis=1)
    att = ad.stack([s.attention for s in steps], axis=1)
    att_boxes = attention_to_boxes(att)
    l_t = tracking_loss(pred, truth, eps)
    l_s = spatial_attention_loss(att_boxes, truth, _boxes(frame_box), eps)
    use_app = config.mode == LossMode.FULL_HART
    if use_app:
        maps = ad.stack([s.location_map for s in steps], axis=1)
        masks = target_mask(att.data, truth, maps.shape[-2:])
        l_a = appearance_loss(maps, masks, eps)
    else:
        l_a = Tensor(0.0)
    banks = [s.bank.flat for s in steps if isinstance(s, StepOutput) and s.bank is not None]
    r_l2 = l2_regularizer(params, banks)
    lam = weights()
    active = (True, True, use_app)
    r_lam = adaptive_regularizer(weights, active)
    total = lam[0] * l_t + lam[1] * l_s + r_lam + r_l2 * config.beta
    if use_app:
        total = total + lam[2] * l_a
    return LossBreakdown(l_t, l_s, l_a, r_lam, r_l2, total, weights.values)
