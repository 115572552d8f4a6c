"""Run configuration: TOML file, ``section.key=value`` overrides, seed env var."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import tomli

from .data import CLIP_MEAN
from .errors import ValidationError
from .model import EncoderConfig, ModelConfig, PromptConfig
from .objectives import LossConfig
from .trainer import TrainConfig

SEED_ENV = "OPENDAS_SEED"


@dataclass
class ModelSection:
    """Flat model keys; ``d_v``/``d_t`` are the encoder widths."""
    depth_v: int = 2
    depth_t: int = 2
    width_v: int = 8
    width_t: int = 4
    d_v: int = 32
    d_t: int = 32
    logit_scale: float = 100.0
    layers_v: int = 2
    layers_t: int = 2
    heads_v: int = 4
    heads_t: int = 4
    patch_size: int = 8
    context_length: int = 8
    image_size: int = 32
    embed_dim: int = 32
    text_init: str = "phrase"
    init_std: float = 0.02

    def to_model_config(self, seed: int) -> ModelConfig:
        cfg = ModelConfig(
            vision=EncoderConfig(depth=self.layers_v, width=self.d_v, heads=self.heads_v,
                                 patch_size=self.patch_size),
            text=EncoderConfig(depth=self.layers_t, width=self.d_t, heads=self.heads_t,
                               context_length=self.context_length),
            prompt=PromptConfig(depth_v=self.depth_v, depth_t=self.depth_t,
                                width_v=self.width_v, width_t=self.width_t,
                                text_init=self.text_init, init_std=self.init_std),
            image_size=self.image_size, embed_dim=self.embed_dim,
            logit_scale=self.logit_scale, seed=seed)
        cfg.validate()
        return cfg


@dataclass
class DataSection:
    train_manifest: str = ""
    test_manifest: str = ""
    negatives: str = ""
    fill_color: list = field(default_factory=lambda: list(CLIP_MEAN))
    pad_fraction: float = 0.1


@dataclass
class EvalSection:
    averaging: str = "weighted"
    figures: bool = True


@dataclass
class SynthSection:
    num_classes: int = 8
    per_class: int = 100
    image_size: int = 64
    novel_fraction: float = 0.25
    test_fraction: float = 0.3


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSection = field(default_factory=SynthSection)
    base_dir: Optional[str] = field(default=None, repr=False, compare=False)

    SECTIONS = ("model", "train", "loss", "data", "eval", "synth")

    def validate(self, require_paths: Sequence[str] = ()) -> None:
        self.model.to_model_config(self.seed)
        self.train.validate()
        self.loss.validate()
        if len(self.data.fill_color) != 3:
            raise ValidationError("data.fill_color must have 3 components")
        if self.eval.averaging not in ("weighted", "macro"):
            raise ValidationError("eval.averaging must be 'weighted' or 'macro'")
        for key in require_paths:
            value = getattr(self.data, key)
            if not value:
                raise ValidationError(f"data.{key} is not set")
            if not self.path(value).exists():
                raise ValidationError(f"data.{key}: {self.path(value)} does not exist")

    def path(self, value: str) -> Path:
        """Resolve a config path relative to the config file's directory."""
        p = Path(value)
        if p.is_absolute() or self.base_dir is None:
            return p
        return Path(self.base_dir) / p

    def model_config(self) -> ModelConfig:
        return self.model.to_model_config(self.seed)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "out_dir": self.out_dir}
        for name in self.SECTIONS:
            d[name] = asdict(getattr(self, name))
        return d


def _section_types() -> dict:
    return {"model": ModelSection, "train": TrainConfig, "loss": LossConfig,
            "data": DataSection, "eval": EvalSection, "synth": SynthSection}


def _coerce(section: str, key: str, value, cls):
    names = {f.name: f for f in fields(cls)}
    if key not in names:
        raise ValidationError(f"unknown config key {section}.{key}")
    default = getattr(cls(), key)
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ValidationError(f"{section}.{key} must be a boolean")
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and not isinstance(default, bool) and not (
            isinstance(value, int) and not isinstance(value, bool)):
        raise ValidationError(f"{section}.{key} must be an integer, got {value!r}")
    if isinstance(default, str) and not isinstance(value, str):
        raise ValidationError(f"{section}.{key} must be a string, got {value!r}")
    return value


def from_dict(raw: dict, base_dir=None) -> RunConfig:
    cfg = RunConfig(base_dir=None if base_dir is None else str(base_dir))
    types = _section_types()
    for key, value in raw.items():
        if key in types:
            if not isinstance(value, dict):
                raise ValidationError(f"[{key}] must be a table")
            section = getattr(cfg, key)
            for k, v in value.items():
                setattr(section, k, _coerce(key, k, v, types[key]))
        elif key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValidationError("seed must be an integer")
            cfg.seed = value
        elif key == "out_dir":
            cfg.out_dir = str(value)
        else:
            raise ValidationError(f"unknown config key {key!r}")
    return cfg


def parse_override(text: str) -> tuple[list[str], object]:
    """``section.key=value`` with a TOML value; bare words are read as strings."""
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ValidationError(f"override {text!r} is not of the form key=value")
    try:
        parsed = tomli.loads(f"v = {value.strip()}")["v"]
    except tomli.TOMLDecodeError:
        parsed = value.strip()
    return key.strip().split("."), parsed


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides:
        keys, value = parse_override(text)
        if len(keys) > 2:
            raise ValidationError(f"override key {'.'.join(keys)!r} is nested too deeply")
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return raw


def load_config(path=None, overrides: Sequence[str] = (), env=None) -> RunConfig:
    """Read ``path`` (or defaults), apply overrides, then the seed env var."""
    raw, base_dir = {}, None
    if path is not None:
        path = Path(path)
        try:
            raw = tomli.loads(path.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        base_dir = path.resolve().parent
    raw = apply_overrides(raw, overrides)
    cfg = from_dict(raw, base_dir)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ValidationError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from exc
    cfg.train.seed = cfg.seed
    cfg.validate()
    return cfg


def _toml_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return json.dumps(value)


def dump_config(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    lines = [f"seed = {_toml_value(d.pop('seed'))}", f"out_dir = {_toml_value(d.pop('out_dir'))}"]
    for name in RunConfig.SECTIONS:
        lines.append("")
        lines.append(f"[{name}]")
        for k, v in d[name].items():
            if name == "train" and k == "seed":
                continue
            lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"
