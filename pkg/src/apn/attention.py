"""Competitive and spatial-collaborative attention for pyramid fusion.

Both attention types look at the lateral flow ``x_lat`` (detail-rich) and the
upsampled top-down flow ``up`` (semantically strong) jointly:

* competitive attention (CA) squeezes each flow to per-channel means, runs a
  shared bottleneck over their concatenation and emits one channel-weight
  vector per flow;
* spatial collaborative attention (SCA) squeezes each flow across channels
  (a plain mean for ``alpha``, learned 1x1 projections for ``theta`` and
  ``theta_plus``), downsamples with a stride-2 conv, returns to the level's
  resolution and emits one pixel mask per flow;
* CSCA multiplies the two into full ``N x C x H x W`` masks, refines each with
  a 1x1 conv and uses them to weight the flows before summing.

Every excitation ends in BatchNorm followed by a sigmoid.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from apn import ops
from apn.nn import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module
from apn.pyramid import ConfigError
from apn.rng import SplitMix64
from apn.tensor import ShapeError, Tensor


class Variant(str, enum.Enum):
    NONE = "none"
    CA = "ca"
    SCA_ALPHA = "sca"
    SCA_THETA = "sca-theta"
    SCA_THETA_PLUS = "sca-theta-plus"
    CSCA_ALPHA = "csca"
    CSCA_THETA = "csca-theta"
    CSCA_THETA_PLUS = "csca-theta-plus"

    @property
    def has_ca(self) -> bool:
        return self in (Variant.CA, Variant.CSCA_ALPHA, Variant.CSCA_THETA, Variant.CSCA_THETA_PLUS)

    @property
    def sca_kind(self) -> Optional[str]:
        return {
            Variant.SCA_ALPHA: "alpha",
            Variant.CSCA_ALPHA: "alpha",
            Variant.SCA_THETA: "theta",
            Variant.CSCA_THETA: "theta",
            Variant.SCA_THETA_PLUS: "theta_plus",
            Variant.CSCA_THETA_PLUS: "theta_plus",
        }.get(self)

    @property
    def combined(self) -> bool:
        return self.has_ca and self.sca_kind is not None

    @classmethod
    def parse(cls, name: str) -> "Variant":
        key = name.strip().lower().replace("_", "-")
        aliases = {"sca-alpha": "sca", "csca-alpha": "csca", "fpn": "none"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown attention variant {name!r}; valid: {valid}") from None


def _reduced(channels: int, ratio: int, what: str) -> int:
    if ratio < 1:
        raise ConfigError(f"{what} reduction ratio must be >= 1, got {ratio}")
    n = channels // ratio
    if n < 1:
        raise ConfigError(f"{what}: {channels} channels reduced by {ratio} leaves none")
    if channels % ratio:
        warnings.warn(f"{what}: {channels} not divisible by {ratio}; using {n} channels", stacklevel=3)
    return n


@dataclass(frozen=True)
class AttentionConfig:
    variant: Variant = Variant.CSCA_ALPHA
    channels: int = 256
    t: int = 16
    r: int = 8
    theta_plus_sigmoid: bool = True

    def __post_init__(self):
        if not isinstance(self.variant, Variant):
            object.__setattr__(self, "variant", Variant.parse(str(self.variant)))
        if self.channels < 1:
            raise ConfigError("attention needs at least one channel")
        if self.variant.has_ca:
            _reduced(2 * self.channels, self.t, "CA")
        if self.variant.sca_kind in ("theta", "theta_plus"):
            _reduced(self.channels, self.r, "SCA")

    @property
    def ca_hidden(self) -> int:
        return max(1, (2 * self.channels) // self.t)

    @property
    def squeezed(self) -> int:
        return max(1, self.channels // self.r)


# --------------------------------------------------------------------------
# competitive attention


class CompetitiveAttention(Module):
    def __init__(self, channels: int, t: int):
        c2 = 2 * channels
        hidden = _reduced(c2, t, "CA")
        self.channels = channels
        self.fc1 = Linear(c2, hidden)
        self.fc2 = Linear(hidden, c2)
        self.bn = BatchNorm2d(c2)

    def forward(self, x_lat: Tensor, up: Tensor) -> tuple[Tensor, Tensor]:
        return ca_forward(x_lat, up, self)

    def flops(self) -> int:
        return self.fc1.flops() + self.fc2.flops()


def ca_forward(x_lat: Tensor, up: Tensor, weights: CompetitiveAttention) -> tuple[Tensor, Tensor]:
    """Channel weights ``(S_spa, S_sem)``, each ``N x C x 1 x 1``, in (0, 1)."""
    if x_lat.dims != up.dims:
        raise ShapeError(f"CA needs equal flow dims, got {x_lat.dims} and {up.dims}")
    n, c = x_lat.dims[:2]
    desc = ops.concat([ops.global_avg_pool(x_lat), ops.global_avg_pool(up)], axis=1)
    hidden = ops.relu(weights.fc1(ops.reshape(desc, (n, 2 * c))))
    logits = ops.reshape(weights.fc2(hidden), (n, 2 * c, 1, 1))
    s = ops.sigmoid(weights.bn(logits))
    s_spa, s_sem = ops.split(s, [c, c], axis=1)
    return s_spa, s_sem


def ca_scale(x_lat: Tensor, up: Tensor, s_spa: Tensor, s_sem: Tensor) -> Tensor:
    """Weighted fusion ``S_spa * x_lat + S_sem * up``."""
    return ops.add(ops.mul(s_spa, x_lat), ops.mul(s_sem, up))


# --------------------------------------------------------------------------
# spatial collaborative attention


class SpatialCollaborativeAttention(Module):
    """Pixel masks for both flows; ``kind`` is alpha, theta or theta_plus."""

    def __init__(self, channels: int, kind: str = "alpha", r: int = 8, sigmoid: bool = True):
        if kind not in ("alpha", "theta", "theta_plus"):
            raise ConfigError(f"unknown SCA kind {kind!r}")
        self.kind = kind
        self.channels = channels
        self.sigmoid = sigmoid
        if kind == "alpha":
            self.squeeze_spa = self.squeeze_sem = None
            self.down = Conv2d(2, 2, 3, 2, 1)
            self.deconv = None
            self.excite = Conv2d(2, 2, 1)
        else:
            cr = _reduced(channels, r, "SCA")
            self.squeeze_spa = Conv2d(channels, cr, 1)
            self.squeeze_sem = Conv2d(channels, cr, 1)
            if kind == "theta":
                self.down = Conv2d(2 * cr, 2, 3, 2, 1)
                self.deconv = None
                self.excite = Conv2d(2, 2, 1)
            else:
                self.down = Conv2d(2 * cr, 2 * cr, 3, 2, 1)
                self.deconv = ConvTranspose2d(2 * cr, 2 * cr, 3, 2, 1)
                self.excite = Conv2d(2 * cr, 2, 1)
        self.bn = BatchNorm2d(2)

    def forward(self, x_lat: Tensor, up: Tensor) -> tuple[Tensor, Tensor]:
        if x_lat.dims != up.dims:
            raise ShapeError(f"SCA needs equal flow dims, got {x_lat.dims} and {up.dims}")
        if self.kind == "alpha":
            return sca_alpha_forward(x_lat, up, self)
        xs, us = sca_theta_squeeze(x_lat, up, self)
        if self.kind == "theta":
            return _sca_excite(ops.concat([xs, us], axis=1), x_lat.dims[2:], self)
        return sca_theta_plus_forward(xs, us, self)

    def flops(self, h: int, w: int) -> int:
        hd, wd = self.down.output_hw(h, w)
        total = self.down.flops(h, w) + self.excite.flops(h, w)
        if self.squeeze_spa is not None:
            total += self.squeeze_spa.flops(h, w) + self.squeeze_sem.flops(h, w)
        if self.deconv is not None:
            total += self.deconv.flops(hd, wd)
        return total


def _masks(logits: Tensor, weights: SpatialCollaborativeAttention) -> tuple[Tensor, Tensor]:
    out = weights.bn(logits)
    if weights.sigmoid:
        out = ops.sigmoid(out)
    xi1, xi2 = ops.split(out, [1, 1], axis=1)
    return xi1, xi2


def _sca_excite(stacked: Tensor, hw, weights: SpatialCollaborativeAttention) -> tuple[Tensor, Tensor]:
    eps = ops.relu(weights.down(stacked))
    e = ops.bilinear_resize(eps, hw[0], hw[1])
    return _masks(weights.excite(e), weights)


def sca_alpha_forward(x_lat: Tensor, up: Tensor, weights: SpatialCollaborativeAttention) -> tuple[Tensor, Tensor]:
    """Parameter-free squeeze: cross-channel means of both flows."""
    stacked = ops.concat([ops.channel_avg_pool(x_lat), ops.channel_avg_pool(up)], axis=1)
    return _sca_excite(stacked, x_lat.dims[2:], weights)


def sca_theta_squeeze(x_lat: Tensor, up: Tensor, weights: SpatialCollaborativeAttention) -> tuple[Tensor, Tensor]:
    """Learned 1x1 channel squeeze of each flow to ``C // r`` channels."""
    return weights.squeeze_spa(x_lat), weights.squeeze_sem(up)


def sca_theta_plus_forward(
    xs: Tensor, us: Tensor, weights: SpatialCollaborativeAttention
) -> tuple[Tensor, Tensor]:
    """Stride-2 conv, transposed conv back to ``H x W``, 1x1 conv to two masks."""
    hw = xs.dims[2:]
    eps = ops.relu(weights.down(ops.concat([xs, us], axis=1)))
    e = weights.deconv(eps, hw)
    if e.dims[2:] != hw:
        raise ConfigError(f"transposed conv produced {e.dims[2:]}, expected {hw}")
    return _masks(weights.excite(e), weights)


def csca_combine(
    x_lat: Tensor,
    up: Tensor,
    s_spa: Tensor,
    s_sem: Tensor,
    xi1: Tensor,
    xi2: Tensor,
    post_spa: Conv2d,
    post_sem: Conv2d,
) -> Tensor:
    """``post(xi * S)`` masks per flow, then the weighted sum of the flows."""
    m_spa = post_spa(ops.mul(xi1, s_spa))
    m_sem = post_sem(ops.mul(xi2, s_sem))
    return ops.add(ops.mul(m_spa, x_lat), ops.mul(m_sem, up))


# --------------------------------------------------------------------------
# per-level fusion module


class FusionAttention(Module):
    """Attention-weighted fusion of the two flows at one pyramid level.

    Set ``unit_masks`` to replace every channel weight and pixel mask with
    ones (the post 1x1 convs still run); ``record`` keeps the last masks in
    ``self.last`` for export.
    """

    def __init__(self, config: AttentionConfig):
        self.config = config
        v = config.variant
        c = config.channels
        self.ca = CompetitiveAttention(c, config.t) if v.has_ca else None
        kind = v.sca_kind
        self.sca = None
        if kind:
            use_sigmoid = config.theta_plus_sigmoid or kind != "theta_plus"
            self.sca = SpatialCollaborativeAttention(c, kind, config.r, use_sigmoid)
        if v.combined:
            self.post_spa = Conv2d(c, c, 1)
            self.post_sem = Conv2d(c, c, 1)
        else:
            self.post_spa = self.post_sem = None
        self.unit_masks = False
        self.record = False
        self.last: dict[str, np.ndarray] = {}

    def forward(self, x_lat: Tensor, up: Tensor) -> Tensor:
        if x_lat.dims != up.dims:
            raise ShapeError(f"fusion needs equal dims, got {x_lat.dims} and {up.dims}")
        n, c, h, w = x_lat.dims
        s_spa = s_sem = xi1 = xi2 = None
        if self.ca is not None:
            s_spa, s_sem = self.ca(x_lat, up)
            if self.unit_masks:
                s_spa = s_sem = Tensor(np.ones((n, c, 1, 1), dtype=x_lat.dtype))
        if self.sca is not None:
            xi1, xi2 = self.sca(x_lat, up)
            if self.unit_masks:
                xi1 = xi2 = Tensor(np.ones((n, 1, h, w), dtype=x_lat.dtype))
        if self.record:
            named = {"s_spa": s_spa, "s_sem": s_sem, "xi1": xi1, "xi2": xi2}
            self.last = {k: v.data.copy() for k, v in named.items() if v is not None}
        if self.config.variant.combined:
            return csca_combine(x_lat, up, s_spa, s_sem, xi1, xi2, self.post_spa, self.post_sem)
        if self.ca is not None:
            return ca_scale(x_lat, up, s_spa, s_sem)
        return ca_scale(x_lat, up, xi1, xi2)

    def flops(self, h: int, w: int) -> int:
        total = 0
        if self.ca is not None:
            total += self.ca.flops()
        if self.sca is not None:
            total += self.sca.flops(h, w)
        if self.post_spa is not None:
            total += self.post_spa.flops(h, w) + self.post_sem.flops(h, w)
        return total


def build_attention(config: AttentionConfig, seed: Optional[int] = None, prefix: str = "attn") -> Optional[FusionAttention]:
    """Allocate one level's attention; ``None`` for the plain FPN variant.

    With a ``seed`` the parameters are initialized from the stream named by
    each parameter's full name under ``prefix``.
    """
    if config.variant is Variant.NONE:
        return None
    module = FusionAttention(config)
    if seed is not None:
        root = SplitMix64(seed)
        for name, p in module.named_parameters(prefix):
            p.reset(root.split(name))
    module.assign_names()
    return module


def parameter_groups(module: FusionAttention) -> list[str]:
    """Named parameter groups: each conv/fc layer (weight with its bias), and
    BatchNorm scale and shift separately."""
    groups = []
    for name, p in module.named_parameters():
        layer, _, leaf = name.rpartition(".")
        if leaf == "bias":
            continue
        groups.append(name if leaf in ("gamma", "beta") else layer)
    return groups


def attention_param_count(config: AttentionConfig) -> int:
    """Closed-form parameter count of one level's attention module."""
    v, c = config.variant, config.channels
    total = 0
    if v.has_ca:
        h = (2 * c) // config.t
        total += (2 * c * h + h) + (h * 2 * c + 2 * c) + 2 * (2 * c)
    kind = v.sca_kind
    if kind == "alpha":
        total += (2 * 2 * 9 + 2) + (2 * 2 + 2) + 2 * 2
    elif kind == "theta":
        cr = c // config.r
        total += 2 * (c * cr + cr) + (2 * cr * 2 * 9 + 2) + (2 * 2 + 2) + 2 * 2
    elif kind == "theta_plus":
        cr = c // config.r
        c2 = 2 * cr
        total += 2 * (c * cr + cr) + 2 * (c2 * c2 * 9 + c2) + (c2 * 2 + 2) + 2 * 2
    if v.combined:
        total += 2 * (c * c + c)
    return total
