"""Pre-activation residual backbone and the FPN lateral/top-down pathways."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from apn import ops
from apn.nn import BatchNorm2d, Conv2d, Module
from apn.tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """A model or run configuration violates an invariant."""


@dataclass(frozen=True)
class BackboneSpec:
    stages: tuple[tuple[int, int], ...] = ((2, 64), (2, 128), (2, 256), (2, 512))
    lateral_width: int = 256
    stem_width: int = 64
    stem_kernel: int = 7
    in_channels: int = 3

    def __post_init__(self):
        if len(self.stages) < 2:
            raise ConfigError("backbone needs at least 2 stages")
        if self.lateral_width <= 0 or self.stem_width <= 0:
            raise ConfigError("widths must be positive")
        for blocks, width in self.stages:
            if blocks < 1 or width < 1:
                raise ConfigError(f"invalid stage ({blocks}, {width})")
        if self.stem_kernel % 2 != 1:
            raise ConfigError("stem kernel must be odd")

    @property
    def levels(self) -> int:
        return len(self.stages)

    @property
    def reduction(self) -> int:
        """Total downsampling of the coarsest level."""
        return 2 ** (self.levels + 1)

    def level_sizes(self, h: int, w: int) -> list[tuple[int, int]]:
        if h % self.reduction or w % self.reduction:
            raise ConfigError(f"input {h}x{w} must be divisible by {self.reduction} for {self.levels} levels")
        return [(h // 2 ** (l + 2), w // 2 ** (l + 2)) for l in range(self.levels)]


RESNET18 = BackboneSpec()
RESNET34 = BackboneSpec(stages=((3, 64), (4, 128), (6, 256), (3, 512)))


class PreActBlock(Module):
    """BN-ReLU-conv3x3 twice with an identity or 1x1 projection shortcut."""

    def __init__(self, cin: int, cout: int, stride: int):
        self.bn1 = BatchNorm2d(cin)
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.shortcut = Conv2d(cin, cout, 1, stride, 0, bias=False) if stride != 1 or cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        pre = ops.relu(self.bn1(x))
        skip = self.shortcut(pre) if self.shortcut is not None else x
        out = self.conv1(pre)
        out = self.conv2(ops.relu(self.bn2(out)))
        return ops.add(out, skip)

    def flops(self, h: int, w: int) -> tuple[int, int, int]:
        ho, wo = self.conv1.output_hw(h, w)
        total = self.conv1.flops(h, w) + self.conv2.flops(ho, wo)
        if self.shortcut is not None:
            total += self.shortcut.flops(h, w)
        return ho, wo, total


class Backbone(Module):
    def __init__(self, spec: BackboneSpec):
        self.spec = spec
        k = spec.stem_kernel
        self.stem = Conv2d(spec.in_channels, spec.stem_width, k, 2, k // 2, bias=False)
        self.stem_bn = BatchNorm2d(spec.stem_width)
        self.stages = []
        cin = spec.stem_width
        for i, (blocks, width) in enumerate(spec.stages):
            stage = []
            for b in range(blocks):
                stride = 2 if (i > 0 and b == 0) else 1
                stage.append(PreActBlock(cin, width, stride))
                cin = width
            self.stages.append(_Stage(stage))

    def forward(self, x: Tensor) -> list[Tensor]:
        """Return the output of every stage, finest first."""
        if x.data.ndim != 4 or x.dims[1] != self.spec.in_channels:
            raise ShapeError(f"backbone expects N x {self.spec.in_channels} x H x W, got {x.dims}")
        self.spec.level_sizes(x.dims[2], x.dims[3])
        out = ops.maxpool2d(ops.relu(self.stem_bn(self.stem(x))), 3, 2, 1)
        feats = []
        for stage in self.stages:
            out = stage(out)
            feats.append(out)
        return feats

    def flops(self, h: int, w: int) -> tuple[list[tuple[int, int]], int]:
        total = self.stem.flops(h, w)
        h, w = self.stem.output_hw(h, w)
        h, w = ops.conv_output_size(h, 3, 2, 1), ops.conv_output_size(w, 3, 2, 1)
        sizes = []
        for stage in self.stages:
            for block in stage.blocks:
                h, w, f = block.flops(h, w)
                total += f
            sizes.append((h, w))
        return sizes, total


class _Stage(Module):
    def __init__(self, blocks: list[PreActBlock]):
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def lateral(x: Tensor, conv: Conv2d) -> Tensor:
    """1x1 projection of a stage output to the pyramid width."""
    if conv.k != 1:
        raise ConfigError("lateral connections are 1x1 convolutions")
    return conv(x)


def top_down_upsample(p_next: Tensor, like: Tensor) -> Tensor:
    """Resize the coarser level output to the spatial dims of ``like``."""
    return ops.bilinear_resize(p_next, like.dims[2], like.dims[3])


def fpn_fuse(x_lat: Tensor, up: Optional[Tensor]) -> Tensor:
    """Element-wise sum of the lateral and top-down flows (top level: lateral only)."""
    if up is None:
        return x_lat
    if x_lat.dims != up.dims:
        raise ShapeError(f"fusion needs equal dims, got {x_lat.dims} and {up.dims}")
    return ops.add(x_lat, up)


def smooth(p: Tensor, conv: Conv2d) -> Tensor:
    return conv(p)


@dataclass
class PyramidFeatures:
    """Per-level tensors of one forward pass, finest level first."""

    x: list[Tensor] = field(default_factory=list)
    x_lat: list[Tensor] = field(default_factory=list)
    up: list[Optional[Tensor]] = field(default_factory=list)
    fused: list[Tensor] = field(default_factory=list)
    p: list[Tensor] = field(default_factory=list)


def level_param_counts(spec: BackboneSpec, smooth_top: bool = False) -> dict[str, int]:
    """Closed-form parameter counts of the lateral and smoothing convolutions."""
    c = spec.lateral_width
    lat = sum(width * c + c for _, width in spec.stages)
    n_smooth = spec.levels if smooth_top else spec.levels - 1
    return {"lateral": lat, "smooth": n_smooth * (9 * c * c + c)}
