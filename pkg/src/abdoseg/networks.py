"""Encoder-decoder generator networks for 2D binary segmentation.

Three encoder families are available:

* ``basic32``: two 3x3 conv+ReLU layers at widths 32/64/128 (pool after
  each) plus a 256-wide central block, mirrored by a skip-connected decoder.
* ``vgg19``: conv groups 64x2, 128x2, 256x4, 512x4 and a single 512 conv,
  each followed by a 2x2 pool, with the three last 512-wide conv layers as
  the central block between contracting and expanding paths. The decoder
  mirrors the group pattern with 2x2 transposed convolutions and skip
  concatenations at every resolution.
* ``vgg16``: same layout with 3-conv groups (13 conv layers total).

All 3x3 convs use "same" padding so the output keeps the input resolution.
Inputs must be divisible by 2^(number of pools): 8 for basic32, 32 for the
VGG variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
from torch import nn


class ShapeError(ValueError):
    """A batch shape is incompatible with the network."""


# (width, conv count) per encoder group; each group is followed by a 2x2 pool.
# The center block sits below the last pool.
_SCHEDULES = {
    "basic32": {"groups": [(32, 2), (64, 2), (128, 2)], "center": (256, 2)},
    "vgg16": {
        "groups": [(64, 2), (128, 2), (256, 3), (512, 3), (512, 1)],
        "center": (512, 2),
    },
    "vgg19": {
        "groups": [(64, 2), (128, 2), (256, 4), (512, 4), (512, 1)],
        "center": (512, 3),
    },
}


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative description of one generator network."""

    encoder: str = "basic32"
    pretrained: bool = False
    final_activation: str = "sigmoid"
    in_channels: int = 3
    width_multiplier: float | Fraction = 1

    def __post_init__(self):
        if self.encoder not in _SCHEDULES:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.final_activation not in ("sigmoid", "linear"):
            raise ValueError(f"unknown final activation {self.final_activation!r}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        wm = float(self.width_multiplier)
        if not (wm > 0):
            raise ValueError("width_multiplier must be positive")
        if self.pretrained:
            if self.encoder not in ("vgg16", "vgg19"):
                raise ValueError("pretrained weights exist only for vgg16/vgg19 encoders")
            if wm != 1:
                raise ValueError("pretrained requires width_multiplier == 1")

    def scaled(self, width: int) -> int:
        return max(1, round(width * float(self.width_multiplier)))

    @property
    def pool_count(self) -> int:
        return len(_SCHEDULES[self.encoder]["groups"])

    @property
    def size_divisor(self) -> int:
        return 2 ** self.pool_count

    def encoder_widths(self) -> list[int]:
        """Scaled conv widths down the contracting path, central block included."""
        sched = _SCHEDULES[self.encoder]
        return [self.scaled(w) for w, _ in sched["groups"]] + [self.scaled(sched["center"][0])]


class _ConvBlock(nn.Module):
    """n_convs 3x3 same-padded convolutions, each followed by ReLU."""

    def __init__(self, in_channels: int, width: int, n_convs: int):
        super().__init__()
        convs = []
        c = in_channels
        for _ in range(n_convs):
            convs.append(nn.Conv2d(c, width, 3, padding=1))
            c = width
        self.convs = nn.ModuleList(convs)

    def forward(self, x):
        for conv in self.convs:
            x = torch.relu(conv(x))
        return x


def _he_uniform_(weight: torch.Tensor, g: torch.Generator) -> None:
    fan_in = int(np.prod(weight.shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    weight.uniform_(-bound, bound, generator=g)


def _init_module(module: nn.Module, g: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                _he_uniform_(m.weight, g)
                if m.bias is not None:
                    m.bias.zero_()


class SegGenerator(nn.Module):
    """Single-stage encoder-decoder mapping (B, C, H, W) -> (B, 1, H, W)."""

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        sched = _SCHEDULES[spec.encoder]
        groups = [(spec.scaled(w), n) for w, n in sched["groups"]]
        center_w, center_n = spec.scaled(sched["center"][0]), sched["center"][1]

        encoders = []
        c = spec.in_channels
        for width, n in groups:
            encoders.append(_ConvBlock(c, width, n))
            c = width
        self.encoders = nn.ModuleList(encoders)
        self.pool = nn.MaxPool2d(2)
        self.center = _ConvBlock(c, center_w, center_n)

        ups, decoders = [], []
        c = center_w
        for width, n in reversed(groups):
            ups.append(nn.ConvTranspose2d(c, width, 2, stride=2))
            decoders.append(_ConvBlock(2 * width, width, n))
            c = width
        self.ups = nn.ModuleList(ups)
        self.decoders = nn.ModuleList(decoders)
        self.head = nn.Conv2d(c, 1, 1)

        g = torch.Generator()
        g.manual_seed(seed)
        _init_module(self, g)

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"expected (B, {self.spec.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        div = self.spec.size_divisor
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(
                f"{self.spec.encoder} needs H and W divisible by {div} "
                f"({self.spec.pool_count} pooling stages), got {tuple(x.shape[2:])}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.center(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        x = self.head(x)
        if self.spec.final_activation == "sigmoid":
            x = torch.sigmoid(x)
        return x

    def encoder_layer_names(self) -> list[str]:
        """Loadable backbone conv layers in contracting order, center included."""
        names = []
        for gi, enc in enumerate(self.encoders, start=1):
            for ci in range(len(enc.convs)):
                names.append(f"enc{gi}.conv{ci + 1}")
        for ci in range(len(self.center.convs)):
            names.append(f"center.conv{ci + 1}")
        return names

    def encoder_conv(self, name: str) -> nn.Conv2d:
        block, conv = name.split(".")
        idx = int(conv.removeprefix("conv")) - 1
        if block == "center":
            return self.center.convs[idx]
        return self.encoders[int(block.removeprefix("enc")) - 1].convs[idx]


def build_generator(spec: NetworkSpec, seed: int = 0) -> SegGenerator:
    """Build a generator; the same (spec, seed) always yields identical weights."""
    return SegGenerator(spec, seed=seed)


def forward_batch(net, batch: np.ndarray) -> np.ndarray:
    """Run a channels-last (B, H, W, C) numpy batch; returns (B, H, W, 1)."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4:
        raise ShapeError(f"expected a (B, H, W, C) batch, got shape {batch.shape}")
    x = torch.from_numpy(batch).permute(0, 3, 1, 2)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            y = net(x)
    finally:
        net.train(was_training)
    if isinstance(y, tuple):
        y = y[-1]
    return y.permute(0, 2, 3, 1).numpy()


def _conv_params(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def parameter_count(spec: NetworkSpec) -> int:
    """Closed-form parameter count of ``build_generator(spec)``."""
    sched = _SCHEDULES[spec.encoder]
    groups = [(spec.scaled(w), n) for w, n in sched["groups"]]
    center_w, center_n = spec.scaled(sched["center"][0]), sched["center"][1]
    total = 0
    c = spec.in_channels
    for width, n in groups:
        for _ in range(n):
            total += _conv_params(c, width, 3)
            c = width
    for _ in range(center_n):
        total += _conv_params(c, center_w, 3)
        c = center_w
    for width, n in reversed(groups):
        total += _conv_params(c, width, 2)  # transposed conv, same formula
        c = 2 * width
        for _ in range(n):
            total += _conv_params(c, width, 3)
            c = width
    total += _conv_params(c, 1, 1)
    return total
