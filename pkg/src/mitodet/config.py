"""YAML configuration for the pipeline.

The file mirrors the config dataclasses as nested key/value sections; every
stage constant (patch sizes, thresholds, learning rates, epoch counts) is a
named key whose default is the full-scale value. Unknown keys are rejected
rather than silently ignored.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping, get_args, get_origin

import yaml

from .pipeline import PipelineConfig

__all__ = ["load_pipeline_config", "save_pipeline_config", "pipeline_config_from_dict",
           "pipeline_config_to_dict", "default_config_yaml"]


def _coerce(value: Any, annotation: Any, where: str) -> Any:
    origin = get_origin(annotation)
    if dataclasses.is_dataclass(annotation):
        if not isinstance(value, Mapping):
            raise ValueError(f"{where}: expected a mapping, got {type(value).__name__}")
        return _dataclass_from_dict(annotation, value, where)
    if origin is tuple:
        item_types = get_args(annotation)
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{where}: expected a list, got {type(value).__name__}")
        elem = item_types[0] if item_types else float
        return tuple(elem(v) for v in value)
    if annotation is float:
        return float(value)
    if annotation is int:
        if isinstance(value, bool) or int(value) != value:
            raise ValueError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ValueError(f"{where}: expected a boolean, got {value!r}")
        return value
    return value


def _dataclass_from_dict(cls: type, data: Mapping, where: str = "") -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ValueError(f"{where or cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        annotation = f.type if not isinstance(f.type, str) else _resolve_annotation(cls, f.name)
        kwargs[name] = _coerce(value, annotation, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def _resolve_annotation(cls: type, field_name: str) -> Any:
    import typing

    hints = typing.get_type_hints(cls)
    ann = hints.get(field_name, Any)
    # unwrap Optional[X]
    if get_origin(ann) is typing.Union:
        args = [a for a in get_args(ann) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return ann


def pipeline_config_from_dict(data: Mapping) -> PipelineConfig:
    cfg = _dataclass_from_dict(PipelineConfig, data)
    cfg.validate()
    return cfg


def _to_plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


def pipeline_config_to_dict(cfg: PipelineConfig) -> dict:
    return _to_plain(cfg)


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ValueError(f"{path}: config root must be a mapping")
    return pipeline_config_from_dict(data)


def save_pipeline_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(default_config_yaml(cfg))


def default_config_yaml(cfg: PipelineConfig | None = None) -> str:
    cfg = cfg or PipelineConfig()
    return yaml.safe_dump(pipeline_config_to_dict(cfg), sort_keys=False)
