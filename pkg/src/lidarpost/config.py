"""Pipeline configuration: one block per module, JSON round-trippable.

Values are resolved with the precedence command-line override > config
file > built-in default. Overrides use dotted keys, e.g.
``{"rectify.beta": 2.0}``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .anchors import AnchorConfig
from .augment import FilterPolicy, GlobalAugParams, LocalAugParams
from .confidence import RectifyConfig
from .dinms import DiNmsConfig
from .evaluation import EvalConfig
from .synth import SynthConfig
from .voxelizer import ConfigError, VoxelConfig

__all__ = ["AugmentConfig", "PipelineConfig", "load_config", "deep_merge", "parse_override"]


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _generic_from_dict(cls, d: Mapping):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: _tuplify(v) for k, v in d.items()})


def _generic_to_dict(obj) -> dict:
    return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


@dataclass(frozen=True)
class AugmentConfig:
    """JSON keys: ``global``, ``local``, ``max_added``, ``filter``."""

    global_: GlobalAugParams = field(default_factory=GlobalAugParams)
    local: LocalAugParams = field(default_factory=LocalAugParams)
    max_added: Mapping[str, int] = field(default_factory=lambda: {"Car": 15})
    filter: FilterPolicy = field(default_factory=FilterPolicy)

    def to_dict(self) -> dict:
        return {
            "global": _generic_to_dict(self.global_),
            "local": _generic_to_dict(self.local),
            "max_added": dict(self.max_added),
            "filter": {
                "drop_unknown_difficulty": self.filter.drop_unknown_difficulty,
                "similar_classes": dict(self.filter.similar_classes),
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AugmentConfig":
        unknown = set(d) - {"global", "local", "max_added", "filter"}
        if unknown:
            raise ConfigError(f"unknown augment keys: {sorted(unknown)}")
        return cls(
            _generic_from_dict(GlobalAugParams, d.get("global", {})),
            _generic_from_dict(LocalAugParams, d.get("local", {})),
            {str(k): int(v) for k, v in d.get("max_added", {"Car": 15}).items()},
            FilterPolicy(**d.get("filter", {})),
        )


_BLOCKS = {
    "voxel": VoxelConfig,
    "anchor": AnchorConfig,
    "rectify": RectifyConfig,
    "dinms": DiNmsConfig,
    "eval": EvalConfig,
    "augment": AugmentConfig,
    "synth": SynthConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    rectify: RectifyConfig = field(default_factory=RectifyConfig)
    dinms: DiNmsConfig = field(default_factory=DiNmsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in _BLOCKS:
            block = getattr(self, name)
            out[name] = block.to_dict() if hasattr(block, "to_dict") else _generic_to_dict(block)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        unknown = set(d) - set(_BLOCKS)
        if unknown:
            raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
        kwargs = {}
        for name, block_cls in _BLOCKS.items():
            if name not in d:
                continue
            block = d[name]
            if not isinstance(block, Mapping):
                raise ConfigError(f"config block {name!r} must be an object")
            try:
                if hasattr(block_cls, "from_dict"):
                    kwargs[name] = block_cls.from_dict(block)
                else:
                    kwargs[name] = _generic_from_dict(block_cls, block)
            except ConfigError:
                raise
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid {name} block: {e}") from None
        return cls(**kwargs)


def deep_merge(base: Mapping, top: Mapping) -> dict:
    out = dict(base)
    for k, v in top.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[str, Any]:
    """Split ``block.key=value``; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _nest(overrides: Mapping[str, Any]) -> dict:
    out: dict = {}
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) < 2:
            raise ConfigError(f"override key {dotted!r} needs a block prefix")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Defaults, then the JSON file at ``path``, then dotted ``overrides``."""
    merged = PipelineConfig().to_dict()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        merged = deep_merge(merged, doc)
    if overrides:
        merged = deep_merge(merged, _nest(overrides))
    for v in _walk(merged):
        if isinstance(v, float) and not math.isfinite(v):
            raise ConfigError("config values must be finite")
    return PipelineConfig.from_dict(merged)


def _walk(node):
    if isinstance(node, Mapping):
        for v in node.values():
            yield from _walk(v)
    elif isinstance(node, (list, tuple)):
        for v in node:
            yield from _walk(v)
    else:
        yield node
