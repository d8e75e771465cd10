"""Versioned JSON experiment configuration and named presets."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from qlens.errors import InputError, InvalidParameterError
from qlens.perturb import FixedL2, MatchQuantL2, MatchQuantVariance, parse_kind
from qlens.quant import QuantScheme, parse_granularity, parse_policy, parse_transform
from qlens.tensor import parse_dist
from qlens.toymodel import ModelConfig, OptimizerConfig, TaskSpec, parse_preset

SCHEMA_VERSION = 1

ExperimentKind = Literal["kernel-sweep", "scale-sweep", "perturb-compare", "quant-compare", "toy-train", "toy-eval"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class InputSource(_Strict):
    """A QTNS file or a seeded generator. Generator seeds are config-level,
    so inputs never depend on the trial seed."""

    label: Optional[str] = None
    path: Optional[str] = None
    dist: Optional[str] = None
    shape: Optional[list[int]] = None
    seed: int = 0

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.dist is None):
            raise ValueError("exactly one of 'path' or 'dist' is required")
        if self.dist is not None:
            parse_dist(self.dist)
            if not self.shape or any(s <= 0 for s in self.shape):
                raise ValueError("'shape' with positive extents is required for generated inputs")
        return self

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        return Path(self.path).stem if self.path else f"{self.dist}@{self.seed}"


class SchemeConfig(_Strict):
    bits: int = 8
    policy: str = "absmax"
    granularity: str = "per-tensor"
    transform: str = "identity"

    def build(self) -> QuantScheme:
        return QuantScheme(
            self.bits, parse_policy(self.policy), parse_granularity(self.granularity), parse_transform(self.transform)
        )

    @model_validator(mode="after")
    def _valid(self):
        self.build()
        return self


class ModelSection(_Strict):
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: Optional[int] = None
    vocab: int = 64
    context: int = 32
    init_seed: int = 0

    def build(self) -> ModelConfig:
        return ModelConfig(**self.model_dump())


class TaskSection(_Strict):
    kind: Literal["copy", "induction", "modadd"] = "copy"
    seq_len: int = 32
    modulus: int = 17

    def build(self) -> TaskSpec:
        return TaskSpec(self.kind, self.seq_len, self.modulus)


class TrainSection(_Strict):
    steps: int = Field(2000, ge=0)
    lr: float = Field(3e-4, gt=0)
    batch_size: int = Field(32, ge=1)
    seed: int = 7

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.lr, batch_size=self.batch_size)


class OutlierSection(_Strict):
    fraction: float = Field(0.01, gt=0, le=1)
    factor: float = Field(20.0, gt=0)
    seed: int = 3


class EvalSection(_Strict):
    n_batches: int = Field(8, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: int = 1234


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    experiment_id: str = "exp"
    kind: ExperimentKind
    preset: Optional[str] = None
    inputs: list[InputSource] = Field(default_factory=list)
    schemes: list[SchemeConfig] = Field(default_factory=list)
    alphas: list[str] = Field(default_factory=list)
    perturbations: list[str] = Field(default_factory=list)
    intensity: str = "match-l2"
    match_bits_w: int = Field(8, ge=2, le=8)
    match_bits_a: int = Field(8, ge=2, le=8)
    site_scope: Literal["all", "weights", "activations"] = "all"
    settings: list[str] = Field(default_factory=list)
    transforms: list[str] = Field(default_factory=lambda: ["identity"])
    metrics: list[str] = Field(default_factory=list)
    checkpoint: Optional[str] = None
    model: ModelSection = Field(default_factory=ModelSection)
    task: TaskSection = Field(default_factory=TaskSection)
    train: TrainSection = Field(default_factory=TrainSection)
    outliers: Optional[OutlierSection] = None
    eval: EvalSection = Field(default_factory=EvalSection)
    base_seed: int = 0
    n_seeds: int = Field(1, ge=1)
    output_dir: str = "results"
    parallelism: int = Field(1, ge=1)

    @field_validator("perturbations")
    @classmethod
    def _kinds(cls, v):
        for k in v:
            parse_kind(k)
        return v

    @field_validator("settings")
    @classmethod
    def _settings(cls, v):
        for s in v:
            parse_preset(s)
        return v

    @field_validator("transforms")
    @classmethod
    def _transforms(cls, v):
        if not v:
            raise ValueError("transforms must be non-empty")
        for t in v:
            parse_transform(t)
        return v

    @field_validator("metrics")
    @classmethod
    def _metrics(cls, v):
        allowed = set(TOY_METRICS) | set(TENSOR_METRICS)
        bad = [m for m in v if m not in allowed]
        if bad:
            raise ValueError(f"unknown metrics {bad}; allowed: {sorted(allowed)}")
        return v

    @model_validator(mode="after")
    def _grids(self):
        parse_intensity(self.intensity)
        kind = self.kind
        if kind in ("kernel-sweep", "scale-sweep") and not self.inputs:
            raise ValueError(f"{kind} needs at least one input")
        if kind == "kernel-sweep" and not self.schemes:
            raise ValueError("kernel-sweep needs a non-empty 'schemes' grid")
        if kind == "scale-sweep" and not self.alphas:
            raise ValueError("scale-sweep needs a non-empty 'alphas' grid")
        if kind == "perturb-compare" and not self.perturbations:
            raise ValueError("perturb-compare needs a non-empty 'perturbations' grid")
        if kind in ("quant-compare", "toy-eval") and not self.settings:
            raise ValueError(f"{kind} needs a non-empty 'settings' grid")
        return self


TOY_METRICS = ("accuracy", "perplexity", "ce_loss")
TENSOR_METRICS = ("l2_delta", "mean_abs_delta", "max_abs_delta", "clip_fraction", "spearman_abs")


def parse_intensity(text: str, scheme: Optional[QuantScheme] = None):
    """``match-l2`` | ``match-variance`` | ``fixed-l2:VALUE``."""
    key, _, arg = text.strip().lower().partition(":")
    scheme = scheme if scheme is not None else QuantScheme(8)
    if key == "match-l2":
        return MatchQuantL2(scheme)
    if key == "match-variance":
        return MatchQuantVariance(scheme)
    if key == "fixed-l2":
        try:
            return FixedL2(float(arg))
        except ValueError:
            raise InvalidParameterError("intensity", f"bad fixed-l2 value in {text!r}") from None
    raise InvalidParameterError("intensity", f"unknown intensity policy {text!r}")


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InvalidParameterError("config", f"invalid JSON in {path}: {exc}") from None
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise InvalidParameterError("config", str(exc)) from None


FIGURE2_KINDS = ["gaussian", "uniform", "rademacher", "mag-pos", "mag-neg", "clip:3"]


def preset_config(name: str, **overrides) -> ExperimentConfig:
    """Named experiment presets; ``overrides`` replace top-level fields."""
    presets = {
        # perturbation families at W8A8-matched intensity on an outlier-bearing model
        "figure2": dict(
            kind="perturb-compare",
            perturbations=FIGURE2_KINDS,
            n_seeds=4,
            metrics=["accuracy"],
            outliers=dict(fraction=0.01, factor=100.0),
        ),
        "figure3": dict(
            kind="perturb-compare",
            perturbations=["gaussian", "clip:3", "clip:5", "clip:10"],
            n_seeds=4,
            metrics=["perplexity"],
        ),
        "table1": dict(
            kind="quant-compare",
            settings=["fp", "w4a16", "w8a8", "w4a8"],
            transforms=["identity", "signed-power"],
            n_seeds=4,
            metrics=["perplexity", "accuracy"],
            outliers=dict(fraction=0.01, factor=20.0),
        ),
        "figure01": dict(
            kind="scale-sweep",
            inputs=[dict(dist="normal:0,1", shape=[100000], seed=0, label="gaussian-1e5")],
            schemes=[dict(bits=8)],
            alphas=["0.25x", "0.5x", "1x", "2x", "4x"],
            metrics=["l2_delta", "clip_fraction"],
        ),
        "kernels": dict(
            kind="kernel-sweep",
            inputs=[
                dict(dist="normal:0,1", shape=[256, 256], seed=0, label="gaussian"),
                dict(dist="outlier:0.001,100", shape=[256, 256], seed=1, label="outlier-mixture"),
            ],
            schemes=[
                dict(bits=b, granularity=g, transform=t)
                for b in (4, 8)
                for g in ("per-tensor", "per-channel:0")
                for t in ("identity", "signed-power")
            ],
            metrics=["l2_delta", "mean_abs_delta", "max_abs_delta", "clip_fraction"],
        ),
        "train-copy": dict(kind="toy-train", metrics=["accuracy", "perplexity"]),
    }
    if name not in presets:
        raise InvalidParameterError("preset", f"unknown preset {name!r}; choose from {sorted(presets)}")
    raw = {"experiment_id": name, "preset": name, **presets[name]}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(raw)
