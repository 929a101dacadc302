"""Run configuration: schema, loading, overrides and hashing."""
from __future__ import annotations

import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import BUCKETS, DatasetSpec, MaskSource
from .errors import ConfigurationError
from .model import AblationFlags, ModelSpec

OUTPUT_ROOT_ENV = "SAIR_OUTPUT_ROOT"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Strict):
    kind: Literal["toy", "celebahq", "ade20k"] = "toy"
    root: Optional[str] = None
    image_size: int = Field(32, ge=4)
    labels: bool = True
    toy_train_size: int = Field(32, ge=1)
    toy_test_size: int = Field(16, ge=1)
    label_names: Optional[list[str]] = None

    def spec(self, split: str, seed: int) -> DatasetSpec:
        return DatasetSpec(kind=self.kind, root=self.root, split=split, image_size=self.image_size,
                           labels=self.labels, seed=seed, toy_train_size=self.toy_train_size,
                           toy_test_size=self.toy_test_size)


class MaskConfig(_Strict):
    kind: Literal["synthetic", "file-corpus"] = "synthetic"
    corpus_dir: Optional[str] = None
    invert: bool = False
    train_buckets: list[str] = Field(default_factory=lambda: list(BUCKETS))
    test_buckets: list[str] = Field(default_factory=lambda: list(BUCKETS))

    @field_validator("train_buckets", "test_buckets")
    @classmethod
    def _known(cls, v):
        bad = [b for b in v if b not in BUCKETS]
        if bad or not v:
            raise ValueError(f"buckets must be a non-empty subset of {list(BUCKETS)}, got {v}")
        return v

    @model_validator(mode="after")
    def _corpus(self):
        if self.kind == "file-corpus" and not self.corpus_dir:
            raise ValueError("file-corpus masks need corpus_dir")
        return self

    def source(self, bucket: str, seed: int) -> MaskSource:
        return MaskSource(kind=self.kind, bucket=bucket, seed=seed, corpus_dir=self.corpus_dir, invert=self.invert)


class ModelConfig(_Strict):
    use_sir: bool = True
    use_appearance: bool = True
    use_semantic: bool = True
    encoder_variant: Literal["table3", "edsr-style"] = "table3"
    semantic_variant: Literal["surrogate", "clip-adapter"] = "surrogate"
    app_width: int = Field(64, ge=1)
    app_resblocks: int = Field(8, ge=0)
    sem_channels: int = Field(64, ge=1)
    sem_width: int = Field(64, ge=2)
    sem_context_layers: int = Field(4, ge=0)
    patch_factor: int = Field(4, ge=1)
    mlp_hidden: int = Field(256, ge=1)
    mlp_depth: int = Field(4, ge=1)
    clip_weights: Optional[str] = None
    clip_text_weights: Optional[str] = None
    freeze_semantic_encoder: bool = False

    @model_validator(mode="after")
    def _flags(self):
        if not (self.use_appearance or self.use_semantic):
            raise ValueError("at least one of use_appearance / use_semantic must be true")
        return self

    def flags(self) -> AblationFlags:
        return AblationFlags(self.use_sir, self.use_appearance, self.use_semantic,
                             self.encoder_variant, self.semantic_variant)

    def spec(self) -> ModelSpec:
        return ModelSpec(flags=self.flags(), app_width=self.app_width, app_resblocks=self.app_resblocks,
                         sem_channels=self.sem_channels, sem_width=self.sem_width,
                         sem_context_layers=self.sem_context_layers, patch_factor=self.patch_factor,
                         mlp_hidden=self.mlp_hidden, mlp_depth=self.mlp_depth, clip_weights=self.clip_weights,
                         freeze_semantic_encoder=self.freeze_semantic_encoder)


class OptimConfig(_Strict):
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    halve_every: int = Field(100, ge=1)
    query_count: int = Field(2048, ge=1)
    weight_decay: float = Field(0.0, ge=0)
    grad_clip: Optional[float] = None
    semantic_aux_weight: float = Field(0.0, ge=0)
    checkpoint_every: int = Field(10, ge=1)


class SemanticPretrainConfig(_Strict):
    """Aligns a surrogate encoder with its category anchors before SAIR training."""

    epochs: int = Field(0, ge=0)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(8, ge=1)
    temperature: float = Field(0.07, gt=0)


class EvalConfig(_Strict):
    figures: bool = False
    figure_count: int = Field(4, ge=1)
    lpips_backend: Literal["none", "lpips-alex", "lpips-vgg"] = "none"
    psnr_ceiling: float = Field(100.0, gt=0)
    probe_bucket: str = "40-60"


class RunConfig(_Strict):
    name: str = "run"
    seed: int = 0
    output_dir: Optional[str] = None
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    masks: MaskConfig = Field(default_factory=MaskConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    semantic_pretrain: SemanticPretrainConfig = Field(default_factory=SemanticPretrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def hash(self) -> str:
        return config_hash(self)

    def output_path(self) -> Path:
        root = self.output_dir or os.environ.get(OUTPUT_ROOT_ENV, "runs")
        return Path(root) / f"{self.name}-{self.hash()[:10]}"

    def replace(self, **overrides) -> "RunConfig":
        return apply_overrides(self, overrides)


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON form, excluding where outputs are written."""
    data = config.to_dict()
    data.pop("output_dir", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _yaml_line(text: str, loc) -> Optional[int]:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    line = None
    for key in loc:
        if not isinstance(node, yaml.MappingNode):
            break
        for k, v in node.value:
            if k.value == str(key):
                line = k.start_mark.line + 1
                node = v
                break
        else:
            break
    return line


def _format_errors(exc: ValidationError, text: Optional[str], source: str) -> str:
    lines = [f"invalid config {source}:"]
    for err in exc.errors():
        loc = [str(p) for p in err["loc"]]
        where = ".".join(loc) or "<root>"
        line = _yaml_line(text, loc) if text else None
        prefix = f"  line {line}: " if line else "  "
        lines.append(f"{prefix}{where}: {err['msg']}")
    return "\n".join(lines)


def parse_config(data: dict, text: Optional[str] = None, source: str = "<dict>") -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigurationError(_format_errors(exc, text, source)) from exc


def builtin_configs() -> list[str]:
    pkg = resources.files("sair") / "configs"
    return sorted(p.name[:-5] for p in pkg.iterdir() if p.name.endswith(".yaml"))


def load_config(path_or_name) -> RunConfig:
    """Load a YAML config from a path, or a bundled one by name (``desk_toy``)."""
    path = Path(str(path_or_name))
    if path.is_file():
        text = path.read_text()
        source = str(path)
    else:
        res = resources.files("sair") / "configs" / f"{path_or_name}.yaml"
        if not res.is_file():
            raise ConfigurationError(
                f"config {path_or_name!r} is neither a file nor a bundled config ({', '.join(builtin_configs())})"
            )
        text = res.read_text()
        source = f"builtin:{path_or_name}"
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {source}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError(f"{source}: top level must be a mapping")
    return parse_config(data, text, source)


def _coerce(value: str) -> Any:
    return yaml.safe_load(value)


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """Apply dotted-key overrides (``optim.epochs=3`` strings or a mapping)."""
    if not overrides:
        return config
    if not isinstance(overrides, dict):
        parsed = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigurationError(f"override {item!r} must look like key=value")
            key, value = item.split("=", 1)
            parsed[key.strip()] = _coerce(value)
        overrides = parsed
    data = config.to_dict()
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigurationError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return parse_config(data, source="<overrides>")
