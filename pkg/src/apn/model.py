"""The attentional pyramid classifier and its complexity report."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from apn import checkpoint, ops
from apn.attention import AttentionConfig, FusionAttention, Variant, build_attention
from apn.nn import Conv2d, Linear, Module
from apn.pyramid import (
    RESNET18,
    RESNET34,
    Backbone,
    BackboneSpec,
    ConfigError,
    PyramidFeatures,
    fpn_fuse,
    lateral,
    smooth,
    top_down_upsample,
)
from apn.tensor import Tensor


@dataclass(frozen=True)
class ModelSpec:
    backbone: BackboneSpec = RESNET18
    attention: AttentionConfig = AttentionConfig()
    num_classes: int = 98
    smooth_top: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.attention.channels != self.backbone.lateral_width:
            object.__setattr__(
                self, "attention", dataclasses.replace(self.attention, channels=self.backbone.lateral_width)
            )

    @property
    def levels(self) -> int:
        return self.backbone.levels

    def to_dict(self) -> dict:
        b, a = self.backbone, self.attention
        return {
            "stages": [list(s) for s in b.stages],
            "lateral_width": b.lateral_width,
            "stem_width": b.stem_width,
            "stem_kernel": b.stem_kernel,
            "variant": a.variant.value,
            "t": a.t,
            "r": a.r,
            "theta_plus_sigmoid": a.theta_plus_sigmoid,
            "num_classes": self.num_classes,
            "smooth_top": self.smooth_top,
        }


class APN(Module):
    """Backbone, lateral 1x1s, attention-weighted top-down fusion, pooled head.

    Attention runs at levels ``1..L-1`` (finest first); the top level passes
    its lateral output straight through unless ``smooth_top`` is set.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        b = spec.backbone
        c = b.lateral_width
        self.backbone = Backbone(b)
        self.laterals = [Conv2d(width, c, 1) for _, width in b.stages]
        n_smooth = b.levels if spec.smooth_top else b.levels - 1
        self.smooths = [Conv2d(c, c, 3, 1, 1) for _ in range(n_smooth)]
        self.attention = []
        if spec.attention.variant is not Variant.NONE:
            self.attention = [FusionAttention(spec.attention) for _ in range(b.levels - 1)]
        # small head weights keep the initial softmax close to uniform
        self.fc = Linear(b.levels * c, spec.num_classes, init="small")
        self.assign_names()

    def pyramid(self, x: Tensor) -> PyramidFeatures:
        feats = PyramidFeatures()
        feats.x = self.backbone(x)
        L = len(feats.x)
        feats.x_lat = [lateral(xl, conv) for xl, conv in zip(feats.x, self.laterals)]
        feats.up = [None] * L
        feats.fused = [None] * L
        feats.p = [None] * L
        top = feats.x_lat[L - 1]
        feats.fused[L - 1] = top
        feats.p[L - 1] = smooth(top, self.smooths[L - 1]) if self.spec.smooth_top else top
        for l in range(L - 2, -1, -1):
            up = top_down_upsample(feats.p[l + 1], feats.x_lat[l])
            feats.up[l] = up
            if self.attention:
                fused = self.attention[l](feats.x_lat[l], up)
            else:
                fused = fpn_fuse(feats.x_lat[l], up)
            feats.fused[l] = fused
            feats.p[l] = smooth(fused, self.smooths[l])
        return feats

    def embed(self, x: Tensor) -> Tensor:
        feats = self.pyramid(x)
        pooled = ops.concat([ops.global_avg_pool(p) for p in feats.p], axis=1)
        return ops.flatten(pooled)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.embed(x))


def build_model(spec: ModelSpec, seed: Optional[int] = None, dtype=np.float32) -> APN:
    """Allocate an APN; with a ``seed`` its parameters are initialized."""
    model = APN(spec)
    if dtype != np.float32:
        model.to(dtype)
    if seed is not None:
        model.init_parameters(seed)
    return model


# --------------------------------------------------------------------------
# named architectures


TOY_BACKBONE = BackboneSpec(stages=((1, 8), (1, 16)), lateral_width=8, stem_width=8, stem_kernel=3)


def toy_spec(variant: Variant | str = Variant.CSCA_ALPHA, num_classes: int = 8, t: int = 2, r: int = 2) -> ModelSpec:
    return ModelSpec(
        backbone=TOY_BACKBONE,
        attention=AttentionConfig(Variant.parse(variant) if isinstance(variant, str) else variant, 8, t, r),
        num_classes=num_classes,
    )


_ARCH_RE = re.compile(r"^(fpn|apn-(?P<variant>[a-z-]+?))(?P<depth>18|34)$")


def arch_names() -> list[str]:
    names = []
    for depth in ("18", "34"):
        names.append(f"fpn{depth}")
        names += [f"apn-{v.value}{depth}" for v in Variant if v is not Variant.NONE]
    return names + ["toy", "toy-fpn"]


def arch_spec(name: str, num_classes: int = 98, t: int = 16, r: int = 8) -> ModelSpec:
    """Spec for a named architecture such as ``fpn18`` or ``apn-csca-theta34``."""
    key = name.strip().lower()
    if key == "toy":
        return toy_spec(Variant.CSCA_ALPHA)
    if key == "toy-fpn":
        return toy_spec(Variant.NONE)
    m = _ARCH_RE.match(key)
    if not m or key not in arch_names():
        raise ConfigError(f"unknown architecture {name!r}; valid: {', '.join(arch_names())}")
    variant = Variant.parse(m.group("variant")) if m.group("variant") else Variant.NONE
    backbone = RESNET18 if m.group("depth") == "18" else RESNET34
    return ModelSpec(backbone, AttentionConfig(variant, backbone.lateral_width, t, r), num_classes)


# --------------------------------------------------------------------------
# complexity


@dataclass
class ComplexityReport:
    total_params: int = 0
    total_flops: int = 0
    params: dict[str, int] = field(default_factory=dict)
    flops: dict[str, int] = field(default_factory=dict)
    input_size: Optional[tuple[int, int]] = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def to_text(self) -> str:
        rows = [f"{'module':<12}{'params':>14}{'flops':>18}"]
        for key in self.params:
            rows.append(f"{key:<12}{self.params[key]:>14,}{self.flops.get(key, 0):>18,}")
        rows.append(f"{'total':<12}{self.total_params:>14,}{self.total_flops:>18,}")
        rows.append(f"params {self.total_params / 1e6:.2f}M  FLOPs {self.total_flops / 1e9:.3f}e9")
        return "\n".join(rows)


_GROUPS = ("backbone", "lateral", "smooth", "attention", "head")


def _group_of(name: str) -> str:
    head = name.split(".", 1)[0]
    return {"laterals": "lateral", "smooths": "smooth", "fc": "head"}.get(head, head)


def count_params(model: APN) -> ComplexityReport:
    """Registered parameter scalars (BatchNorm running statistics excluded)."""
    report = ComplexityReport(params={g: 0 for g in _GROUPS})
    for name, p in model.named_parameters():
        report.params[_group_of(name)] += int(p.data.size)
    report.total_params = sum(report.params.values())
    return report


def count_flops(model: APN, input_dims: tuple[int, int]) -> ComplexityReport:
    """Multiply-adds of convolutions and fully connected layers for one image.

    Element-wise attention products, pooling and resizing are not counted.
    """
    h, w = input_dims
    model.spec.backbone.level_sizes(h, w)
    report = count_params(model)
    report.input_size = (h, w)
    sizes, backbone_flops = model.backbone.flops(h, w)
    report.flops = {g: 0 for g in _GROUPS}
    report.flops["backbone"] = backbone_flops
    report.flops["lateral"] = sum(conv.flops(*hw) for conv, hw in zip(model.laterals, sizes))
    report.flops["smooth"] = sum(conv.flops(*hw) for conv, hw in zip(model.smooths, sizes))
    report.flops["attention"] = sum(att.flops(*hw) for att, hw in zip(model.attention, sizes))
    report.flops["head"] = model.fc.flops()
    report.total_flops = sum(report.flops.values())
    return report


def complexity(model: APN, input_dims: tuple[int, int]) -> ComplexityReport:
    return count_flops(model, input_dims)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: APN, path) -> None:
    checkpoint.save_module(model, path)


def load_checkpoint(path, spec: ModelSpec, dtype=np.float32) -> APN:
    """Build a model for ``spec`` and fill it from ``path``."""
    model = build_model(spec, dtype=dtype)
    checkpoint.load_into(model, checkpoint.load(path))
    return model
