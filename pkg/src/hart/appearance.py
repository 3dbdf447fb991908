"""Appearance attention: shared V1 trunk, ventral features, dorsal location map.

The dorsal stream is a dynamic filter network.  Its convolution kernels are
not parameters of the model; a small perceptron emits them from the
appearance vector at every timestep, so each sequence in a batch is filtered
by its own bank.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Conv2d, Module, dropout


@dataclass(frozen=True)
class V1Config:
    """Trunk layout: one ``(kernel, channels, pool_after)`` triple per conv layer."""

    name: str
    in_hw: tuple[int, int]
    in_channels: int
    layers: tuple[tuple[int, int, bool], ...]
    dropout: float = 0.25

    @property
    def out_dims(self) -> tuple[int, int, int]:
        h, w = self.in_hw
        for _, _, pool in self.layers:
            if pool:
                h, w = h // 2, w // 2
        return h, w, self.layers[-1][1]


V1_PRESETS = {
    # two conv/pool blocks, 28x28 -> 7x7x32
    "small": V1Config("small", (28, 28), 3, ((5, 16, True), (3, 32, True))),
    # first three AlexNet convs with stride 1, 56x56 -> 14x14x384
    "kitti_like": V1Config("kitti_like", (56, 56), 3, ((11, 96, True), (5, 256, True), (3, 384, False))),
}


def v1_preset(name: str, glimpse_hw: tuple[int, int] | None = None, dropout_p: float = 0.25) -> V1Config:
    try:
        base = V1_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown v1_preset {name!r}; choose from {sorted(V1_PRESETS)}") from None
    return V1Config(base.name, glimpse_hw or base.in_hw, base.in_channels, base.layers, dropout_p)


@dataclass
class FilterBank:
    """Per-sample dynamic kernels ``(B, kh, kw, cin, cout)`` and biases ``(B, cout)``."""

    kernels: list[Tensor]
    biases: list[Tensor]
    flat: Tensor = field(repr=False)

    @property
    def num_elements(self) -> int:
        return int(self.flat.shape[-1])


class AppearanceAttention(Module):
    def __init__(self, rng: np.random.Generator, v1: V1Config, app_dim: int = 64, ventral_maps: int = 5,
                 dorsal_maps: int = 5, dorsal_kernels: tuple[int, ...] = (1, 3), gen_hidden: int = 128,
                 fuse_hidden: int = 256, out_dim: int = 256):
        self.config = v1
        self.app_dim = app_dim
        c = v1.in_channels
        self.v1 = []
        for k, ch, _ in v1.layers:
            self.v1.append(Conv2d(rng, k, c, ch))
            c = ch
        hv, wv, cv = v1.out_dims
        self.ventral = Conv2d(rng, 1, cv, ventral_maps)
        self.bank_shapes = []
        c = cv
        for k in dorsal_kernels:
            self.bank_shapes.append((k, k, c, dorsal_maps))
            c = dorsal_maps
        n_bank = sum(k * k * ci * co + co for k, _, ci, co in self.bank_shapes)
        # final generator layer starts small so early banks are near zero
        self.generator = MLP(rng, app_dim, gen_hidden, n_bank, act="tanh", out_scale=0.1)
        self.head = Conv2d(rng, 1, dorsal_maps, 1)
        self.fuse_mlp = MLP(rng, hv * wv * ventral_maps, fuse_hidden, out_dim)
        self.out_dim = out_dim

    @property
    def map_dims(self) -> tuple[int, int]:
        hv, wv, _ = self.config.out_dims
        return hv, wv

    def v1_forward(self, glimpse: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """Glimpse ``(B, h, w, C)`` to trunk features; ``rng`` enables dropout."""
        if glimpse.ndim != 4 or tuple(glimpse.shape[1:3]) != tuple(self.config.in_hw) \
                or glimpse.shape[3] != self.config.in_channels:
            raise ValueError(f"v1_forward: glimpse shape {glimpse.shape} does not match "
                             f"{self.config.in_hw + (self.config.in_channels,)}")
        x = glimpse - 0.5
        for conv, (_, _, pool) in zip(self.v1, self.config.layers):
            x = ad.relu(conv(x))
            if pool:
                x = ad.max_pool2d(x, 2)
        return dropout(x, self.config.dropout, rng)

    def ventral_forward(self, features: Tensor) -> Tensor:
        return ad.relu(self.ventral(features))

    def dorsal_filters(self, app: Tensor) -> FilterBank:
        flat = self.generator(app)
        B = flat.shape[0]
        kernels, biases, pos = [], [], 0
        for kh, kw, ci, co in self.bank_shapes:
            n = kh * kw * ci * co
            kernels.append(ad.reshape(flat[:, pos:pos + n], (B, kh, kw, ci, co)))
            pos += n
            biases.append(flat[:, pos:pos + co])
            pos += co
        return FilterBank(kernels, biases, flat)

    def dorsal_forward(self, features: Tensor, bank: FilterBank) -> Tensor:
        """Location map ``(B, h_v, w_v)`` with entries in ``(0, 1)``."""
        x = features
        for k, b, shape in zip(bank.kernels, bank.biases, self.bank_shapes):
            if tuple(k.shape[1:]) != shape:
                raise ValueError(f"dorsal_forward: bank kernel {k.shape[1:]} != declared {shape}")
            x = ad.relu(ad.conv2d(x, k, b, padding="same"))
        logits = self.head(x)
        return ad.sigmoid(ad.reshape(logits, logits.shape[:3]))

    def fuse(self, ventral: Tensor, location_map: Tensor) -> Tensor:
        if ventral.shape[:3] != location_map.shape[:3]:
            raise ValueError(f"fuse: feature map {ventral.shape} and location map "
                             f"{location_map.shape} differ spatially")
        masked = ventral * ad.reshape(location_map, location_map.shape[:3] + (1,))
        return self.fuse_mlp(ad.reshape(masked, (masked.shape[0], -1)))

    def __call__(self, glimpse: Tensor, app: Tensor, rng=None, use_location_map: bool = True):
        """Full pass; returns ``(v, location_map, bank, features)``.

        With ``use_location_map=False`` the dorsal stream is bypassed and the
        features are fused under an all-ones mask.
        """
        feats = self.v1_forward(glimpse, rng)
        nu = self.ventral_forward(feats)
        if use_location_map:
            bank = self.dorsal_filters(app)
            s = self.dorsal_forward(feats, bank)
        else:
            bank = None
            s = Tensor(np.ones(feats.shape[:3]))
        return self.fuse(nu, s), s, bank, feats
