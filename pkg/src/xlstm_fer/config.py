"""INI-style run configuration: ``[model]``, ``[train]`` and ``[data]`` sections.

``[model]`` starts from ``preset`` (default ``desk-tiny``) and overrides any
:class:`~xlstm_fer.model.ModelConfig` field; ``image_size`` is written ``H,W``.
``[train]`` and ``[data]`` set :class:`~xlstm_fer.train.TrainConfig` fields.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from pathlib import Path

from .model import ModelConfig, preset
from .train import TrainConfig

OUT_DIR_ENV = "XLSTM_FER_OUT"
DEFAULT_OUT_DIR = "runs/xlstm-fer"


class ConfigError(ValueError):
    pass


def default_out_dir() -> str:
    return os.environ.get(OUT_DIR_ENV, DEFAULT_OUT_DIR)


def _coerce(raw: str, annotation, name: str):
    text = raw.strip()
    args = typing.get_args(annotation)
    if type(None) in args:
        if text.lower() in ("none", ""):
            return None
        annotation = next(a for a in args if a is not type(None))
    hint = annotation.__name__ if isinstance(annotation, type) else str(annotation)
    try:
        if "tuple" in hint:
            return tuple(int(v) for v in text.replace("x", ",").split(","))
        if annotation is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if annotation is float:
            return float(text)
        if annotation is int:
            return int(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {hint}") from None
    return text


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


MODEL_FIELD_TYPES = _field_types(ModelConfig)
TRAIN_FIELD_TYPES = _field_types(TrainConfig)

# [data] keys and the TrainConfig field each one sets
DATA_KEYS = {
    "train": "train_data",
    "eval": "eval_data",
    "label_map": "label_map",
    "normalization": "normalization",
    "synth_per_class": "synth_per_class",
    "synth_seed": "synth_seed",
    "synth_eval_seed": "synth_eval_seed",
    "synth_eval_per_class": "synth_eval_per_class",
    "synth_noise": "synth_noise",
}


def parse_config(text: str, preset_name: str | None = None) -> TrainConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown_sections = set(cp.sections()) - {"model", "train", "data"}
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")

    model_sec = dict(cp["model"]) if cp.has_section("model") else {}
    name = preset_name or model_sec.pop("preset", "desk-tiny")
    model_sec.pop("preset", None)
    overrides = {}
    for key, raw in model_sec.items():
        if key not in MODEL_FIELD_TYPES:
            raise ConfigError(f"[model] unknown key {key!r}")
        overrides[key] = _coerce(raw, MODEL_FIELD_TYPES[key], f"model.{key}")
    try:
        model = preset(name, **overrides)
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    kwargs = {"model": model, "out_dir": default_out_dir()}
    if cp.has_section("train"):
        for key, raw in cp["train"].items():
            if key not in TRAIN_FIELD_TYPES or key == "model" or key in DATA_KEYS.values():
                raise ConfigError(f"[train] unknown key {key!r}")
            kwargs[key] = _coerce(raw, TRAIN_FIELD_TYPES[key], f"train.{key}")
    if cp.has_section("data"):
        for key, raw in cp["data"].items():
            if key not in DATA_KEYS:
                raise ConfigError(f"[data] unknown key {key!r}")
            field = DATA_KEYS[key]
            kwargs[field] = _coerce(raw, TRAIN_FIELD_TYPES[field], f"data.{key}")
    return TrainConfig(**kwargs)


def load_config(path=None, preset_name: str | None = None) -> TrainConfig:
    if path is None:
        return parse_config("", preset_name)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, preset_name)
