"""Experiment configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import json
import math
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ConfigError

METHODS = ("ares", "ares_ms", "zoo_rgf", "zoo_spsa", "local_vr", "local_lp", "local_vr_lp",
           "zero_shot")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TaskSpec(_Strict):
    source_classes: int = Field(20, ge=2, le=64)
    target_classes: int = Field(5, ge=2, le=64)
    shared_labels: bool = False
    source_per_class: int = Field(100, ge=1)
    encoder_per_class: int = Field(20, ge=1)
    test_per_class: int = Field(200, ge=1)
    shots: int = Field(16, ge=1)
    image_size: int = Field(16, ge=1)
    canvas_size: int = Field(24, ge=1)
    channels: int = Field(1, ge=1)
    angle: float = 20.0
    sigma: float = Field(0.05, ge=0.0)
    phase_jitter: float = Field(math.pi, ge=0.0)
    aperture: Optional[tuple[int, int]] = (12, 24)
    brightness: float = 0.2
    contrast: float = 1.0
    extra_unlabeled_per_class: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.canvas_size < self.image_size:
            raise ValueError("canvas_size must be >= image_size")
        if self.shared_labels and self.target_classes != self.source_classes:
            raise ValueError("shared_labels needs target_classes == source_classes")
        if self.aperture is not None:
            lo, hi = self.aperture
            if not 1 <= lo <= hi <= self.canvas_size:
                raise ValueError("aperture must satisfy 1 <= lo <= hi <= canvas_size")
        return self


class ModelSpec(_Strict):
    service_hidden: tuple[int, ...] = (128, 128)
    encoder_hidden: tuple[int, ...] = (64,)
    epochs: int = Field(60, ge=0)
    lr: float = Field(3e-3, gt=0)
    batch_size: int = Field(64, ge=1)
    seed: Optional[int] = None  # defaults to the run seed


class PrimingSpec(_Strict):
    loss: Literal["kl", "l1_prob", "l2_prob", "l1_logit", "l2_logit"] = "kl"
    lr: float = Field(1e-2, gt=0)
    epochs: int = Field(300, ge=1)
    batch_size: int = Field(32, ge=1)


class VrSpec(_Strict):
    lr: float = Field(0.01, gt=0)
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(32, ge=1)
    refresh: int = Field(10, ge=1)
    prompt: Literal["padding", "watermark"] = "padding"
    label_map: Literal["blm", "flm", "identity"] = "blm"
    blm_alpha: float = Field(1.0, gt=0)


class ZooSpec(_Strict):
    q: int = Field(5, ge=1)
    mu: float = Field(0.01, gt=0)
    c0: float = Field(0.01, gt=0)
    a0: float = Field(0.01, gt=0)
    a_offset_frac: float = Field(0.1, ge=0)
    beta: float = Field(0.9, ge=0, lt=1)
    steps: int = Field(500, ge=1)
    batch_size: int = Field(16, ge=1)
    loss: Optional[Literal["focal", "cross_entropy"]] = None
    gamma: float = Field(2.0, ge=0)
    prompt: Optional[Literal["padding", "watermark"]] = None  # rgf: watermark, spsa: padding
    max_calls: Optional[int] = Field(None, ge=1)
    report_init: bool = False


class ApiSpec(_Strict):
    output_mode: Literal["full", "topk_soft", "topk_hard"] = "full"
    k: Optional[int] = Field(None, ge=1)
    robustness: Literal["none", "quantize"] = "none"
    levels: int = Field(8, ge=2)
    price_per_call: float = Field(1e-3, ge=0)
    debug_logits: bool = False


class SuiteSpec(_Strict):
    methods: tuple[str, ...] = ("ares", "zoo_spsa")
    seeds: tuple[int, ...] = (0, 1, 2)


class ExperimentConfig(_Strict):
    method: Literal["ares", "ares_ms", "zoo_rgf", "zoo_spsa", "local_vr", "local_lp",
                    "local_vr_lp", "zero_shot"] = "ares"
    seed: int = Field(0, ge=0)
    task: TaskSpec = TaskSpec()
    models: ModelSpec = ModelSpec()
    priming: PrimingSpec = PrimingSpec()
    vr: VrSpec = VrSpec()
    zoo: ZooSpec = ZooSpec()
    api: ApiSpec = ApiSpec()
    tau: float = Field(0.0, ge=0)
    select_holdout: float = Field(0.2, gt=0, lt=1)
    theory: bool = False
    suite: SuiteSpec = SuiteSpec()

    @model_validator(mode="after")
    def _check(self):
        if self.api.output_mode != "full":
            k = self.api.k
            if k is None:
                raise ValueError("top-k output modes need api.k")
            limit = self.task.source_classes - (self.api.output_mode == "topk_hard")
            if k > limit:
                raise ValueError(f"api.k={k} too large for {self.api.output_mode}")
        if self.theory and not self.api.debug_logits:
            raise ValueError("theory checks need api.debug_logits")
        for m in self.suite.methods:
            if m not in METHODS:
                raise ValueError(f"unknown suite method {m!r}")
        return self

    @property
    def model_seed(self) -> int:
        return self.seed if self.models.seed is None else self.models.seed

    def with_(self, **changes) -> "ExperimentConfig":
        """Copy with overrides; nested fields use ``section__field`` keys. Re-validated."""
        data = self.model_dump(mode="json")
        for key, value in changes.items():
            node = data
            *path, leaf = key.split("__")
            for p in path:
                node = node[p]
            node[leaf] = value
        return parse_config(data)


def parse_config(data) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data)
