"""Gaussian-grid spatial attention.

Coordinates are continuous pixel units in which pixel ``i`` is centred at
``i`` and covers ``[i - 0.5, i + 0.5)``.  An attention window is the 4-vector
``(center_x, center_y, span_x, span_y)``; an ``n``-point grid places Gaussian
centres at ``center - span/2 + r * span/(n-1)`` for ``r = 0..n-1``, so the
outermost rows sit on the window edges.  Row widths come from a polynomial in
the stride, fitted once against an antialiased bilinear resize.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import isotonic_regression, minimize_scalar

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

SIGMA_MIN = 0.1


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box; ``(x, y)`` is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(*map(float, a))

    @property
    def area(self) -> float:
        return self.w * self.h

    def is_valid(self) -> bool:
        return bool(np.all(np.isfinite(self.to_array())) and self.w > 0 and self.h > 0)


def image_box(height: int, width: int) -> BoundingBox:
    """The box covered by a full ``height x width`` frame."""
    return BoundingBox(-0.5, -0.5, float(width), float(height))


@dataclass(frozen=True)
class AttentionParams:
    center_x: float
    center_y: float
    span_x: float
    span_y: float
    clamped: bool = False

    def stride(self, glimpse_w: int, glimpse_h: int) -> tuple[float, float]:
        return self.span_x / (glimpse_w - 1), self.span_y / (glimpse_h - 1)

    def to_array(self) -> np.ndarray:
        return np.array([self.center_x, self.center_y, self.span_x, self.span_y])

    @classmethod
    def from_array(cls, a) -> "AttentionParams":
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(*map(float, a))


def box_to_attention(b: BoundingBox) -> AttentionParams:
    w, h = b.w, b.h
    clamped = w < 1 or h < 1
    if clamped:
        log.warning("box %s has a side below 1 px; clamping to 1", b)
        w, h = max(w, 1.0), max(h, 1.0)
    return AttentionParams(b.x + 0.5 * w, b.y + 0.5 * h, w, h, clamped)


def attention_to_box(a: AttentionParams) -> BoundingBox:
    return BoundingBox(a.center_x - 0.5 * a.span_x, a.center_y - 0.5 * a.span_y, a.span_x, a.span_y)


def boxes_to_attention(boxes) -> Tensor:
    """Differentiable ``(..., 4)`` box -> attention conversion (no clamping)."""
    boxes = ad.as_tensor(boxes)
    xy, wh = boxes[..., :2], boxes[..., 2:]
    return ad.concat([xy + wh * 0.5, wh], axis=-1)


def attention_to_boxes(att) -> Tensor:
    att = ad.as_tensor(att)
    c, s = att[..., :2], att[..., 2:]
    return ad.concat([c - s * 0.5, s], axis=-1)


class SigmaPolynomial:
    """Gaussian width as a 4th-order polynomial in the grid stride.

    Evaluations are clamped below at ``SIGMA_MIN`` pixels.
    """

    def __init__(self, coefficients: Sequence[float], sigma_min: float = SIGMA_MIN):
        c = np.asarray(coefficients, dtype=np.float64).reshape(-1)
        if c.shape != (5,):
            raise ValueError(f"expected 5 coefficients, got {c.shape[0]}")
        self.coefficients = c
        self.sigma_min = sigma_min

    def __call__(self, stride):
        g = np.asarray(stride, dtype=np.float64)
        return np.maximum(np.polynomial.polynomial.polyval(g, self.coefficients), self.sigma_min)

    def tensor(self, stride: Tensor) -> Tensor:
        acc = Tensor(np.full(stride.shape, self.coefficients[4]))
        for c in self.coefficients[3::-1]:
            acc = acc * stride + c
        return ad.clip(acc, self.sigma_min, None)

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{float(c)!r}\n" for c in self.coefficients))

    @classmethod
    def load(cls, path) -> "SigmaPolynomial":
        lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
        if len(lines) != 5:
            raise ValueError(f"{path}: expected 5 coefficient lines, found {len(lines)}")
        return cls([float(v) for v in lines])

    def __repr__(self):
        return f"SigmaPolynomial({self.coefficients.tolist()})"


def _as_att_tensor(params) -> Tensor:
    if isinstance(params, AttentionParams):
        return Tensor(params.to_array())
    return ad.as_tensor(params)


def gaussian_rows(center, span, image_len: int, glimpse_len: int, sigma: SigmaPolynomial) -> Tensor:
    """Row-normalised Gaussian filterbank of shape ``(..., glimpse_len, image_len)``."""
    if image_len < 1 or glimpse_len < 2:
        raise ValueError(f"need image_len >= 1 and glimpse_len >= 2, got {image_len}, {glimpse_len}")
    center, span = ad.as_tensor(center), ad.as_tensor(span)
    if not (np.all(np.isfinite(center.data)) and np.all(np.isfinite(span.data))):
        raise FloatingPointError("attention parameters are not finite")
    stride = span * (1.0 / (glimpse_len - 1))
    sig = sigma.tensor(stride)
    r = np.arange(glimpse_len, dtype=np.float64)
    ex = lambda t: ad.reshape(t, t.shape + (1, 1))
    mu = ex(center - span * 0.5) + ex(stride) * r[:, None]          # (..., n, 1)
    pix = np.arange(image_len, dtype=np.float64)
    z = -((pix - mu) ** 2) / (ex(sig * sig) * 2.0)                  # (..., n, L)
    # softmax-style normalisation; the shift is a constant so gradients are unchanged
    z = z - z.data.max(axis=-1, keepdims=True)
    e = ad.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def build_attention_matrix(params, axis: str, image_len: int, glimpse_len: int,
                           sigma: SigmaPolynomial) -> Tensor:
    att = _as_att_tensor(params)
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    k = 0 if axis == "x" else 1
    return gaussian_rows(att[..., k], att[..., k + 2], image_len, glimpse_len, sigma)


def extract_glimpse(image, params, glimpse_h: int, glimpse_w: int, sigma: SigmaPolynomial) -> Tensor:
    """``g = A_y x A_x^T`` applied per channel.

    ``image`` is ``(H, W, C)`` or batched ``(B, H, W, C)``; ``params`` is an
    ``AttentionParams``, a ``(4,)`` or a ``(B, 4)`` tensor.
    """
    image = ad.as_tensor(image)
    batched = image.ndim == 4
    if not batched:
        image = ad.reshape(image, (1,) + image.shape)
    B, H, W, C = image.shape
    if C not in (1, 3):
        raise ValueError(f"extract_glimpse: expected 1 or 3 channels, got {C}")
    if glimpse_h > 4 * H or glimpse_w > 4 * W:
        raise ValueError(f"glimpse {glimpse_h}x{glimpse_w} exceeds 4x the image size {H}x{W}")
    att = _as_att_tensor(params)
    if att.ndim == 1:
        att = ad.reshape(att, (1, 4))
    ay = gaussian_rows(att[:, 1], att[:, 3], H, glimpse_h, sigma)    # (B, h, H)
    ax = gaussian_rows(att[:, 0], att[:, 2], W, glimpse_w, sigma)    # (B, w, W)
    if att.shape[0] != B:
        raise ValueError(f"extract_glimpse: {att.shape[0]} attentions for {B} images")
    h, w = glimpse_h, glimpse_w
    # channels ride along in the matrix columns so each contraction is one gemm per sample
    g = ad.matmul(ay, ad.reshape(image, (B, H, W * C)))                   # (B, h, W*C)
    g = ad.reshape(ad.transpose(ad.reshape(g, (B, h, W, C)), (0, 2, 1, 3)), (B, W, h * C))
    g = ad.matmul(ax, g)                                                  # (B, w, h*C)
    g = ad.transpose(ad.reshape(g, (B, w, h, C)), (0, 2, 1, 3))
    return g if batched else ad.reshape(g, g.shape[1:])


# --- sigma regression -------------------------------------------------------
def _gauss_matrix(mu: np.ndarray, sigma: float, length: int) -> np.ndarray:
    z = -((np.arange(length) - mu[:, None]) ** 2) / (2 * sigma * sigma)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _triangle_matrix(mu: np.ndarray, stride: float, length: int) -> np.ndarray:
    """Antialiased bilinear resampling: a triangle filter widened to the stride when downsampling."""
    support = max(1.0, stride)
    w = np.maximum(0.0, 1.0 - np.abs(np.arange(length) - mu[:, None]) / support)
    tot = w.sum(axis=1, keepdims=True)
    return w / np.where(tot > 0, tot, 1.0)


def fit_sigma_polynomial(strides: Sequence[float], images: Sequence[np.ndarray], glimpse_size: int = 28,
                         windows_per_image: int = 4, seed: int = 0,
                         return_targets: bool = False):
    """Regress Gaussian width on stride against a bilinear crop-and-resize.

    For each stride a 1-D search finds the width whose Gaussian-grid glimpses
    best match (in mean squared error) bilinear resamples of the same
    windows, pooled over the corpus.  The targets are then fitted by least
    squares on ``{1, g, g^2, g^3, g^4}``.  Strides whose window would not fit
    inside the frames give edge-dominated targets, so keep them within
    ``(min(H, W) - 1) / (glimpse_size - 1)``.
    """
    strides = np.asarray(strides, dtype=np.float64)
    if strides.size < 20:
        raise ValueError(f"need at least 20 stride samples, got {strides.size}")
    imgs = []
    for im in images:
        im = np.asarray(im, dtype=np.float64)
        if im.ndim == 3:
            im = im.mean(axis=2)
        imgs.append(im)
    if not imgs or all(np.ptp(im) < 1e-12 for im in imgs):
        raise ValueError("degenerate corpus: every image is constant, sigma targets are underdetermined")
    n = glimpse_size
    targets = []
    for g in strides:
        # same window draws for every stride keep the targets comparable
        rng = np.random.default_rng(seed)
        span = g * (n - 1)
        pairs = []
        for im in imgs:
            H, W = im.shape
            for _ in range(windows_per_image):
                cy = rng.uniform(min(span / 2, H / 2), max(H - 1 - span / 2, H / 2))
                cx = rng.uniform(min(span / 2, W / 2), max(W - 1 - span / 2, W / 2))
                muy = cy - span / 2 + g * np.arange(n)
                mux = cx - span / 2 + g * np.arange(n)
                ref = _triangle_matrix(muy, g, H) @ im @ _triangle_matrix(mux, g, W).T
                pairs.append((muy, mux, im, ref))

        def mse(sig):
            tot = 0.0
            for muy, mux, im, ref in pairs:
                gl = _gauss_matrix(muy, sig, im.shape[0]) @ im @ _gauss_matrix(mux, sig, im.shape[1]).T
                tot += np.mean((gl - ref) ** 2)
            return tot / len(pairs)

        res = minimize_scalar(mse, bounds=(0.05, max(2.0, 2.0 * g)), method="bounded",
                              options={"xatol": 1e-4})
        targets.append(res.x)
    # widths never shrink as the stride grows; remove search jitter in the flat region
    order = np.argsort(strides)
    targets = np.asarray(targets)
    targets[order] = isotonic_regression(targets[order]).x
    basis = np.vander(strides, 5, increasing=True)
    coeffs, *_ = np.linalg.lstsq(basis, targets, rcond=None)
    poly = SigmaPolynomial(coeffs)
    return (poly, targets) if return_targets else poly
