"""Parameter containers for convolution and fully connected layers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor


INIT_SCHEMES = ("he", "fan_in")


def _init_params(rng: np.random.Generator, shape: tuple, fan_in: int, scheme: str) -> tuple[Tensor, Tensor]:
    """(weight, bias). ``he``: U(+-sqrt(6/fan_in)) weights, zero bias;
    ``fan_in``: weights and bias from U(+-1/sqrt(fan_in))."""
    if scheme == "he":
        return E.he_uniform_init(rng, shape, fan_in), E.zeros((shape[0],), requires_grad=True)
    if scheme == "fan_in":
        return E.uniform_init(rng, shape, fan_in), E.uniform_init(rng, (shape[0],), fan_in)
    raise ValueError(f"init scheme must be one of {INIT_SCHEMES}, got {scheme!r}")


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor
    pad: int = 1
    pad_mode: str = "reflective"

    @classmethod
    def init(
        cls, rng: np.random.Generator, cin: int, cout: int, k: int = 3, pad_mode: str = "reflective", init: str = "he"
    ) -> Conv:
        weight, bias = _init_params(rng, (cout, cin, k, k), cin * k * k, init)
        return cls(weight, bias, pad=k // 2, pad_mode=pad_mode)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        mode = self.pad_mode
        # reflection is undefined once the map is no wider than the pad
        if mode == "reflective" and min(x.shape[2:]) <= self.pad:
            mode = "zero"
        return E.conv2d(x, self.weight, self.bias, stride=1, pad=self.pad, pad_mode=mode)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class Dense:
    weight: Tensor  # (out, in)
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, init: str = "he") -> Dense:
        return cls(*_init_params(rng, (n_out, n_in), n_in, init))

    def __call__(self, x: Tensor) -> Tensor:
        return E.linear(x, self.weight, self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}
