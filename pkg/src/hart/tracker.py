"""Recurrent tracker: spatial attention -> appearance attention -> LSTM -> decoder.

Attention and box deltas are added in ``(center_x, center_y, span_x, span_y)``
coordinates.  The decoder's raw outputs are expressed in units of the current
attention span, which keeps the update scale independent of object size.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .appearance import AppearanceAttention, FilterBank, v1_preset
from .attention import BoundingBox, SigmaPolynomial, attention_to_boxes, boxes_to_attention, extract_glimpse
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import MLP, Linear, Module, orthogonal, param

log = logging.getLogger(__name__)

# fitted with `hart fit-sigma` on 256x256 textured synthetic frames, 28-point grids,
# strides 0.25..9.4 (see README); also shipped as configs/sigma_default.txt
DEFAULT_SIGMA = (0.3960615712293389, 0.03168875216172893, 0.12104772575486364, -0.01520603646874425,
                 0.0006726667639110936)

V1_PRESET_IDS = {"small": 0, "kitti_like": 1}


@dataclass
class ModelConfig:
    image_hw: tuple[int, int] = (96, 96)
    glimpse_hw: tuple[int, int] = (28, 28)
    v1_preset: str = "small"
    dropout: float = 0.25
    zoneout: float = 0.05
    lstm_units: int = 100
    app_dim: int = 64
    fuse_dim: int = 256
    decoder_hidden: int = 256
    c_init: float = 0.01
    use_location_map: bool = True
    sigma: tuple[float, ...] = DEFAULT_SIGMA
    seed: int = 0


class LSTMCell(Module):
    def __init__(self, rng, n_in: int, units: int):
        w_in = np.concatenate([orthogonal(rng, n_in, units) for _ in range(4)], axis=1)
        w_rec = np.concatenate([orthogonal(rng, units, units) for _ in range(4)], axis=1)
        self.w = param(np.concatenate([w_in, w_rec], axis=0))
        b = np.zeros(4 * units)
        b[units:2 * units] = 1.0  # forget gate
        self.b = param(b)
        self.units = units

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        z = ad.matmul(ad.concat([x, h], axis=-1), self.w) + self.b
        n = self.units
        i = ad.sigmoid(z[:, :n])
        f = ad.sigmoid(z[:, n:2 * n])
        o = ad.sigmoid(z[:, 2 * n:3 * n])
        g = ad.tanh(z[:, 3 * n:])
        c_new = f * c + i * g
        return o * ad.tanh(c_new), c_new


def zoneout(new: Tensor, old: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Keep each unit's previous value with probability ``p``; expectation in eval mode."""
    if p <= 0:
        return new
    if rng is None:
        return new * (1.0 - p) + old * p
    keep = (rng.random(new.shape) < p).astype(np.float64)
    return new * (1.0 - keep) + old * keep


@dataclass
class TrackerState:
    h: Tensor
    c: Tensor
    attention: Tensor      # (B, 4) in (cx, cy, sx, sy)
    appearance: Tensor     # (B, app_dim)


@dataclass
class StepOutput:
    bbox: Tensor               # (B, 4) predicted box, (x, y, w, h)
    attention: Tensor          # a_t used for this frame
    attention_next: Tensor     # a_{t+1}
    attention_update: Tensor   # tanh(c) * delta, before span clamping
    appearance_next: Tensor
    location_map: Tensor       # (B, h_v, w_v)
    glimpse: Tensor
    bank: FilterBank | None = field(default=None, repr=False)

    def boxes(self) -> list[BoundingBox]:
        return [BoundingBox.from_array(b) for b in self.bbox.data]


class HART(Module):
    """Hierarchical attentive recurrent tracker."""

    def __init__(self, config: ModelConfig | None = None):
        self.cfg = cfg = config or ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        self.sigma = SigmaPolynomial(cfg.sigma)
        v1 = v1_preset(cfg.v1_preset, tuple(cfg.glimpse_hw), cfg.dropout)
        self.appearance = AppearanceAttention(rng, v1, app_dim=cfg.app_dim, out_dim=cfg.fuse_dim)
        hv, wv, cv = v1.out_dims
        self.app_init = Linear(rng, cv, cfg.app_dim)
        self.state_init = Linear(rng, cfg.fuse_dim, 2 * cfg.lstm_units)
        self.lstm = LSTMCell(rng, cfg.fuse_dim, cfg.lstm_units)
        self.decoder = MLP(rng, cfg.lstm_units + hv * wv, cfg.decoder_hidden, cfg.app_dim + 8,
                           act="tanh", out_scale=0.1)
        # learnable offset on the initial attention, in units of the box size
        self.att_bias = param(np.zeros(4))
        self.update_scale = param(np.full(4, cfg.c_init))

    # --- helpers -------------------------------------------------------
    def _clamp_att(self, att: Tensor) -> Tensor:
        H, W = self.cfg.image_hw
        lo = np.array([-np.inf, -np.inf, 1.0, 1.0])
        hi = np.array([np.inf, np.inf, 2.0 * W, 2.0 * H])
        return ad.minimum(ad.maximum(att, lo), hi)

    def _glimpse(self, frames: Tensor, att: Tensor) -> Tensor:
        gh, gw = self.cfg.glimpse_hw
        return extract_glimpse(frames, att, gh, gw, self.sigma)

    @staticmethod
    def _span4(att: Tensor) -> Tensor:
        s = att[:, 2:]
        return ad.concat([s, s], axis=-1)

    # --- public API ----------------------------------------------------
    def active_parameters(self) -> list[Tensor]:
        """Parameters that take part in the forward pass.

        Without a location map the dorsal generator and its read-out are never
        used, so they are left out of weight decay as well.
        """
        if self.cfg.use_location_map:
            return self.parameters()
        unused = ("appearance.generator.", "appearance.head.")
        return [p for n, p in self.named_parameters() if not n.startswith(unused)]

    def init_state(self, frame, box, rng=None) -> TrackerState:
        """State from the first frame and its ground-truth box(es)."""
        frame = ad.as_tensor(frame)
        box = ad.as_tensor(box)
        if frame.ndim == 3:
            frame = ad.reshape(frame, (1,) + frame.shape)
        if box.ndim == 1:
            box = ad.reshape(box, (1, 4))
        w = ad.maximum(box[:, 2:], 1.0)
        box = ad.concat([box[:, :2], w], axis=-1)
        att = boxes_to_attention(box)
        size = ad.concat([att[:, 2:], att[:, 2:]], axis=-1)
        att = self._clamp_att(att + size * self.att_bias)
        g = self._glimpse(frame, att)
        feats = self.appearance.v1_forward(g, rng)
        app = ad.tanh(self.app_init(feats.mean(axis=(1, 2))))
        v, _, _, _ = self._appearance_from_features(feats, app)
        hc = ad.tanh(self.state_init(v))
        n = self.cfg.lstm_units
        return TrackerState(hc[:, :n], hc[:, n:], att, app)

    def _appearance_from_features(self, feats, app):
        nu = self.appearance.ventral_forward(feats)
        if self.cfg.use_location_map:
            bank = self.appearance.dorsal_filters(app)
            s = self.appearance.dorsal_forward(feats, bank)
        else:
            bank = None
            s = Tensor(np.ones(feats.shape[:3]))
        return self.appearance.fuse(nu, s), s, bank, nu

    def step(self, state: TrackerState, frame, rng=None, t: int | None = None) -> tuple[TrackerState, StepOutput]:
        frame = ad.as_tensor(frame)
        if frame.ndim == 3:
            frame = ad.reshape(frame, (1,) + frame.shape)
        if tuple(frame.shape[1:3]) != tuple(self.cfg.image_hw):
            raise ValueError(f"frame {frame.shape[1:3]} does not match configured image size {self.cfg.image_hw}")
        att = state.attention
        g = self._glimpse(frame, att)
        feats = self.appearance.v1_forward(g, rng)
        v, s, bank, _ = self._appearance_from_features(feats, state.appearance)
        h_new, c_new = self.lstm(v, state.h, state.c)
        o = h_new
        h = zoneout(h_new, state.h, self.cfg.zoneout, rng)
        c = zoneout(c_new, state.c, self.cfg.zoneout, rng)
        B = s.shape[0]
        out = self.decoder(ad.concat([o, ad.reshape(s, (B, -1))], axis=-1))
        k = self.cfg.app_dim
        app_next = out[:, :k]
        span4 = self._span4(att)
        update = ad.tanh(self.update_scale) * (out[:, k:k + 4] * span4)
        att_next = self._clamp_att(att + update)
        box_att = att + out[:, k + 4:k + 8] * span4
        bbox = attention_to_boxes(box_att)
        bbox = ad.concat([bbox[:, :2], ad.maximum(bbox[:, 2:], 1.0)], axis=-1)
        for name, val in (("bbox", bbox), ("attention", att_next), ("lstm state", h)):
            if not np.all(np.isfinite(val.data)):
                raise FloatingPointError(f"non-finite {name} at timestep {t}")
        new_state = TrackerState(h, c, att_next, app_next)
        return new_state, StepOutput(bbox, att, att_next, update, app_next, s, g, bank)

    def unroll(self, frames, box1, rng=None) -> list[StepOutput]:
        """Track a batch ``(B, T, H, W, C)`` from ground-truth boxes ``(B, 4)`` at t=1."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 4:
            frames = frames[None]
        if frames.shape[1] < 2:
            raise ValueError(f"need at least 2 frames, got {frames.shape[1]}")
        state = self.init_state(frames[:, 0], box1, rng)
        outputs = []
        for t in range(1, frames.shape[1]):
            state, out = self.step(state, frames[:, t], rng, t=t + 1)
            outputs.append(out)
        return outputs

    def track_sequence(self, frames: Sequence[np.ndarray], b1: BoundingBox) -> list[StepOutput]:
        """Single-sequence convenience; outputs cover frames 2..T."""
        with ad.no_grad():
            return self.unroll(np.stack([np.asarray(f, dtype=np.float64) for f in frames])[None],
                               b1.to_array()[None])

    # --- persistence ---------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        meta = {}
        for key, val in asdict(self.cfg).items():
            if key == "v1_preset":
                val = V1_PRESET_IDS[val]
            meta["meta." + key] = np.asarray(val, dtype=np.float64)
        return {**meta, **{name: p.data.copy() for name, p in self.named_parameters()}}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != model {p.shape}")
            p.data = arrays[name].copy()

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "HART":
        arrays = load_checkpoint(path)
        return cls.from_state_dict(arrays)

    @classmethod
    def from_state_dict(cls, arrays) -> "HART":
        ids = {v: k for k, v in V1_PRESET_IDS.items()}
        kwargs = {}
        for key, default in asdict(ModelConfig()).items():
            if "meta." + key not in arrays:
                continue
            val = arrays["meta." + key]
            if not isinstance(default, tuple):
                val = val.reshape(-1)[0]
            if key == "v1_preset":
                val = ids[int(val)]
            elif isinstance(default, bool):
                val = bool(val)
            elif isinstance(default, int):
                val = int(val)
            elif isinstance(default, float):
                val = float(val)
            elif isinstance(default, tuple):
                val = tuple(int(v) if key.endswith("_hw") else float(v) for v in val)
            kwargs[key] = val
        model = cls(ModelConfig(**kwargs))
        model.load_state_dict(arrays)
        return model
