"""Small convolutional building blocks shared by the localization and classification networks."""

from __future__ import annotations

from typing import Dict

import numpy as np

from .core import Parameter, Tensor, conv2d, pool2d, relu, shift
from .netgeom import LayerSpec

INPUT_CHANNELS = 3
INPUT_MEAN = 0.5


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv:
    def __init__(self, name: str, cin: int, cout: int, kernel: int, rng, stride: int = 1, padding: int = 0):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.kernel = kernel
        self.w = Parameter(he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel), name=f"{name}.w")
        self.b = Parameter(np.zeros(cout), name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride, self.padding)

    def params(self) -> Dict[str, Parameter]:
        return {self.w.name: self.w, self.b.name: self.b}

    def spec(self) -> LayerSpec:
        return LayerSpec(self.name, self.kernel, self.stride, self.padding)


class Trunk:
    """Three conv+relu blocks; the first two end in 2x2 max pooling.

    On a 112x112 input the output map is 28x28 with jump 4. ``calls`` counts
    images pushed through the trunk.
    """

    def __init__(self, channels=(16, 32, 32), rng=None, name: str = "trunk"):
        rng = rng if rng is not None else np.random.default_rng(0)
        c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.conv1 = Conv(f"{name}.conv1", INPUT_CHANNELS, c1, 5, rng, padding=2)
        self.conv2 = Conv(f"{name}.conv2", c1, c2, 3, rng, padding=1)
        self.conv3 = Conv(f"{name}.conv3", c2, c3, 3, rng, padding=1)
        self.calls = 0

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def __call__(self, x: Tensor) -> Tensor:
        self.calls += x.shape[0]
        # images arrive in [0, 1]; centering them speeds up SGD considerably
        h = pool2d(relu(self.conv1(shift(x, -INPUT_MEAN))), "max", 2, 2)
        h = pool2d(relu(self.conv2(h)), "max", 2, 2)
        return relu(self.conv3(h))

    def layer_specs(self) -> list[LayerSpec]:
        return [
            self.conv1.spec(),
            LayerSpec("pool1", 2, 2, 0),
            self.conv2.spec(),
            LayerSpec("pool2", 2, 2, 0),
            self.conv3.spec(),
        ]

    def params(self) -> Dict[str, Parameter]:
        out = {}
        for conv in (self.conv1, self.conv2, self.conv3):
            out.update(conv.params())
        return out


def set_lr_mult(params: Dict[str, Parameter], mult: float) -> None:
    for p in params.values():
        p.lr_mult = float(mult)
