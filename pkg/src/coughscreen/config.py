"""Pipeline configuration in a flat INI file with one section per stage.

Environment variables named ``COUGH_<SECTION>_<KEY>`` override file values,
e.g. ``COUGH_TRAIN_EPOCHS=10``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from typing import Optional

from .dsp import PreprocessConfig
from .features import FeatureConfig
from .model import ModelConfig, TrainConfig


@dataclass(frozen=True)
class PipelineSettings:
    aggregation: str = "mean"
    decision_threshold: float = 0.5
    gate_corpus_size: int = 500
    gate_epochs: int = 500
    gate_learning_rate: float = 0.5
    gate_threshold: float = 0.5
    split_fractions: tuple[float, ...] = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class Paths:
    manifest: str = ""
    bundle: str = ""
    output_dir: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    paths: Paths = field(default_factory=Paths)

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    def with_values(self, section: str, **kw) -> "PipelineConfig":
        if section == "augment":
            return self.replace(train=dataclasses.replace(self.train, augment=dataclasses.replace(self.train.augment, **kw)))
        return self.replace(**{section: dataclasses.replace(getattr(self, section), **kw)})

    @property
    def aggregation(self) -> str:
        return self.pipeline.aggregation


SECTIONS = ("preprocess", "features", "model", "train", "augment", "pipeline", "paths")


def _section_obj(cfg: PipelineConfig, name: str):
    return cfg.train.augment if name == "augment" else getattr(cfg, name)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        elem = like[0] if like else 0.0
        return tuple(_parse(p, elem) for p in text.split(",") if p.strip())
    return text


def to_ini(cfg: PipelineConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        obj = _section_obj(cfg, name)
        cp[name] = {
            f.name: _fmt(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _apply(cfg: PipelineConfig, section: str, key: str, text: str) -> PipelineConfig:
    obj = _section_obj(cfg, section)
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names:
        raise ValueError(f"unknown config key [{section}] {key}")
    return cfg.with_values(section, **{key: _parse(text, getattr(obj, key))})


def from_ini(text: str, env: Optional[dict] = None, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """Parse INI text on top of ``base`` (defaults), then apply env overrides."""
    cfg = base or PipelineConfig()
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    for section in cp.sections():
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for key, value in cp[section].items():
            cfg = _apply(cfg, section, key, value)
    return apply_env(cfg, os.environ if env is None else env)


def apply_env(cfg: PipelineConfig, env) -> PipelineConfig:
    for section in SECTIONS:
        obj = _section_obj(cfg, section)
        for f in dataclasses.fields(obj):
            var = f"COUGH_{section.upper()}_{f.name.upper()}"
            if var in env:
                cfg = _apply(cfg, section, f.name, env[var])
    return cfg


def load_config(path: Optional[str] = None, env: Optional[dict] = None) -> PipelineConfig:
    text = ""
    if path:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    return from_ini(text, env)


def effective_config_text(cfg: PipelineConfig) -> str:
    return to_ini(cfg)

