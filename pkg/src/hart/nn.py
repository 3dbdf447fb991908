"""Parameter containers and the handful of layers the tracker is built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Collects ``requires_grad`` tensors and child modules from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def orthogonal(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    a = rng.standard_normal((max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if n >= m else q.T


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, scale: float = 1.0, bias: float = 0.0):
        self.w = param(glorot(rng, n_in, n_out, (n_in, n_out)) * scale)
        self.b = param(np.full(n_out, bias))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class Conv2d(Module):
    """Same-padded convolution over NHWC with an optional fixed stride."""

    def __init__(self, rng, k: int, c_in: int, c_out: int, stride: int = 1):
        self.w = param(glorot(rng, k * k * c_in, k * k * c_out, (k, k, c_in, c_out)))
        self.b = param(np.zeros(c_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding="same")


class MLP(Module):
    """One hidden layer; ``act`` names the hidden nonlinearity."""

    def __init__(self, rng, n_in: int, n_hidden: int, n_out: int, act: str = "relu", out_scale: float = 1.0):
        self.hidden = Linear(rng, n_in, n_hidden)
        self.out = Linear(rng, n_hidden, n_out, scale=out_scale)
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        h = self.hidden(x)
        h = ad.tanh(h) if self.act == "tanh" else ad.relu(h)
        return self.out(h)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is ``None`` (eval mode)."""
    if rng is None or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep
