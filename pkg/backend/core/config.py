# backend/core/config.py
# Run configuration: INI-style `key = value` sections validated with pydantic.

import configparser
import hashlib
import json
import logging
import typing
from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigError

logger = logging.getLogger(__name__)

RESOLVED_NAME = "resolved.cfg"


class RenderMode(str, Enum):
    PROBABILISTIC = "probabilistic"
    DETERMINISTIC = "deterministic"
    NONE = "none"


class ContextMode(str, Enum):
    FEATURES = "features"
    RAW_RGB = "raw_rgb"
    NONE = "none"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class StreamConfig(_Section):
    history_len: int = Field(10, ge=1)
    stride_options_train: list[int] = [1, 5, 10]
    stride: int = Field(1, ge=1)
    window: bool = False
    render_mode: RenderMode = RenderMode.PROBABILISTIC
    context_mode: ContextMode = ContextMode.FEATURES
    inference_steps: int = Field(10, ge=1)
    sampler: Literal["ddim", "ddpm"] = "ddim"
    resolution: int = Field(256, ge=8)
    input_camera: str = "front"
    novel_cameras: list[str] = ["left", "back", "right"]
    seed: int = Field(0, ge=0)
    eps_depth: float = Field(5e-3, gt=0)
    snapshot_every: int = Field(6, ge=0)
    standardize_features: bool = False
    features_from: Optional[str] = None
    save_frames: bool = True

    @field_validator("stride_options_train")
    @classmethod
    def _positive_strides(cls, v):
        if not v or any(k < 1 for k in v):
            raise ValueError("stride options must be positive")
        return v

    @field_validator("resolution")
    @classmethod
    def _divisible(cls, v):
        if v % 8:
            raise ValueError("resolution must be divisible by 8")
        return v

    @model_validator(mode="after")
    def _cameras(self):
        if self.input_camera in self.novel_cameras:
            raise ValueError("the input camera cannot also be a novel camera")
        if len(set(self.novel_cameras)) != len(self.novel_cameras):
            raise ValueError("novel camera names must be unique")
        return self


class DiffusionConfig(_Section):
    steps_train: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, ge=0)
    beta_end: float = Field(0.02, lt=1)

    @model_validator(mode="after")
    def _order(self):
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class TrainingConfig(_Section):
    steps: int = Field(300, ge=0)
    lr: float = Field(0.02, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    hidden: int = Field(64, ge=1)
    embed_dim: int = Field(16, ge=2)
    batch_size: int = Field(4, ge=1)
    seed: int = Field(1, ge=0)
    sequence: str = "armswing"
    frames: int = Field(24, ge=1)
    jitter: float = Field(0.0, ge=0)
    log_every: int = Field(100, ge=0)
    denoiser_params: Optional[str] = None
    decoder_params: Optional[str] = None


class SceneConfig(_Section):
    preset: Literal["stripes", "checker", "logo"] = "stripes"
    frames: int = Field(36, ge=1)
    seed: int = Field(0, ge=0)
    vertex_budget: int = Field(2000, ge=200)
    sequence: str = "turntable"
    jitter: float = Field(0.0, ge=0)
    background: float = Field(0.0, ge=0, le=1)


class RunConfig(_Section):
    stream: StreamConfig = StreamConfig()
    diffusion: DiffusionConfig = DiffusionConfig()
    training: TrainingConfig = TrainingConfig()
    scene: SceneConfig = SceneConfig()


SECTIONS = {"stream": StreamConfig, "diffusion": DiffusionConfig, "training": TrainingConfig, "scene": SceneConfig}


def _is_list(model, key):
    field = model.model_fields.get(key)
    return field is not None and typing.get_origin(field.annotation) is list


def _is_optional(model, key):
    field = model.model_fields.get(key)
    return field is not None and type(None) in typing.get_args(field.annotation)


def _coerce(model, key, value):
    if isinstance(value, str) and _is_list(model, key):
        return [v.strip() for v in value.split(",") if v.strip()]
    if isinstance(value, str) and _is_optional(model, key) and value.strip().lower() in ("none", ""):
        return None
    return value


def build_config(raw):
    """raw: {section: {key: value}} with string or typed values."""
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"Unknown config sections: {sorted(unknown)}")
    try:
        parts = {name: model(**{k: _coerce(model, k, v) for k, v in raw.get(name, {}).items()})
                 for name, model in SECTIONS.items()}
        return RunConfig(**parts)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_config(path=None, overrides=None):
    raw = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except configparser.Error as e:
            raise ConfigError(f"Malformed config file {path}: {e}") from e
        raw = {s: dict(parser.items(s)) for s in parser.sections()}
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"Override '{dotted}' must look like section.key")
        raw.setdefault(section, {})[key] = value
    return build_config(raw)


def dump_config(cfg):
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in getattr(cfg, name).model_dump(mode="json").items():
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg, out_dir):
    path = Path(out_dir) / RESOLVED_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path


def config_hash(cfg):
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
