"""Run configuration: a strict JSON document validated before any work."""

from __future__ import annotations

import json
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from apn.attention import AttentionConfig, Variant
from apn.model import ModelSpec, arch_spec
from apn.pyramid import ConfigError
from apn.synth import SyntheticSpec
from apn.train import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    arch: str = "toy"
    variant: Optional[str] = None
    num_classes: Optional[int] = Field(default=None, ge=2)
    t: Optional[int] = Field(default=None, ge=1)
    r: Optional[int] = Field(default=None, ge=1)
    theta_plus_sigmoid: bool = True
    smooth_top: bool = False
    dtype: Literal["float32", "float64"] = "float32"


class TrainSection(_Strict):
    lr0: float = 0.02
    lr_decay_epochs: tuple[int, ...] = (100, 150)
    lr_decay_factor: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 200
    augment: bool = True
    eval_every: int = 1
    eval_scale: float = 1.0


class SyntheticSection(_Strict):
    image_size: int = 32
    species: int = 4
    classes_per_species: int = 2
    samples_per_class: int = 16
    val_per_class: int = 8
    noise: float = 0.05


class DataSection(_Strict):
    path: Optional[str] = None  # directory with manifest.tsv (training split)
    val_path: Optional[str] = None
    synthetic: Optional[SyntheticSection] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("data needs exactly one of 'path' or 'synthetic'")
        if self.val_path is not None and self.path is None:
            raise ValueError("'val_path' requires 'path'")
        return self


class RunConfig(_Strict):
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    data: DataSection = DataSection(synthetic=SyntheticSection())
    seed: int = Field(default=0, ge=0)
    out: str = "runs/default"

    @model_validator(mode="after")
    def _consistent(self):
        # build every derived object once so invariants fail here, not mid-run
        spec = self.model_spec()
        self.train_config()
        synth = self.synthetic_spec()
        if synth is not None and synth.num_classes != spec.num_classes:
            raise ValueError(
                f"synthetic data has {synth.num_classes} classes but the model predicts {spec.num_classes}"
            )
        return self

    def model_spec(self) -> ModelSpec:
        m = self.model
        base = arch_spec(m.arch)
        att = base.attention
        variant = Variant.parse(m.variant) if m.variant is not None else att.variant
        att = AttentionConfig(
            variant,
            att.channels,
            m.t if m.t is not None else att.t,
            m.r if m.r is not None else att.r,
            m.theta_plus_sigmoid,
        )
        num_classes = m.num_classes if m.num_classes is not None else base.num_classes
        return ModelSpec(base.backbone, att, num_classes, m.smooth_top)

    @property
    def dtype(self):
        return np.dtype(self.model.dtype)

    def train_config(self) -> TrainConfig:
        fields = self.train.model_dump()
        fields["lr_decay_epochs"] = tuple(fields["lr_decay_epochs"])
        return TrainConfig(seed=self.seed, **fields)

    def synthetic_spec(self) -> Optional[SyntheticSpec]:
        if self.data.synthetic is None:
            return None
        return SyntheticSpec(**self.data.synthetic.model_dump())

    def with_overrides(self, **kwargs) -> "RunConfig":
        """Copy with ``seed``/``out``/``variant``/``arch`` replaced where given."""
        doc = self.model_dump()
        for key in ("seed", "out"):
            if kwargs.get(key) is not None:
                doc[key] = kwargs[key]
        for key in ("variant", "arch"):
            if kwargs.get(key) is not None:
                doc["model"][key] = kwargs[key]
        return parse_config(doc)


def parse_config(doc: dict) -> RunConfig:
    """Validate a config mapping; every problem surfaces as ``ConfigError``."""
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path: Optional[str]) -> RunConfig:
    """Read a JSON config; ``None`` gives the default toy run."""
    if path is None:
        return parse_config({})
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(doc)


def _format(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def dump_config(config: RunConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True)

