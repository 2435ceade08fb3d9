"""Engine configuration and the flat ``key = value`` config file.

Example file::

    # comments start with '#' or ';'
    alpha = 0.5
    node_threshold = 0.7
    client_mode = mock
    fixtures = data/flights

Keys are the field names of :class:`EngineConfig` and of
:class:`~multirag.confidence.ConfidenceConfig`. Precedence is command-line
flag, then config file, then built-in default.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .confidence import ConfidenceConfig
from .errors import ConfigError
from .ingest import DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE

MODES = ("full", "no_mka", "no_graph_level", "no_node_level", "no_mcc")


@dataclass(frozen=True)
class EngineConfig:
    confidence: ConfidenceConfig = field(default_factory=ConfidenceConfig)
    chunk_size: int = DEFAULT_CHUNK_SIZE
    chunk_overlap: int = DEFAULT_CHUNK_OVERLAP
    min_sources: int = 2
    hub_cap: int = 10_000
    promote_threshold: int = 2
    related_limit: int = 20
    predicate_aliases: Mapping[str, str] = field(default_factory=dict)
    client_mode: str = "mock"
    fixtures: str | None = None
    endpoint: str | None = None
    model: str | None = None
    budget: int | None = None
    seed: int = 0
    workers: int = 0  # 0 = one per logical core
    mode: str = "full"

    def __post_init__(self):
        if self.client_mode not in ("mock", "live"):
            raise ConfigError(f"client_mode must be 'mock' or 'live', got {self.client_mode!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.chunk_size <= 0 or not 0 <= self.chunk_overlap < self.chunk_size:
            raise ConfigError("need chunk_size > 0 and 0 <= chunk_overlap < chunk_size")
        if self.min_sources < 1:
            raise ConfigError("min_sources must be >= 1")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0 (0 = logical cores)")

    def validate_client(self) -> None:
        if self.client_mode == "mock" and not self.fixtures:
            raise ConfigError("mock mode requires a fixtures path")
        if self.client_mode == "live" and not self.endpoint:
            if not os.environ.get("MULTIRAG_ENDPOINT"):
                raise ConfigError("live mode requires an endpoint")

    def with_overrides(self, overrides: Mapping[str, Any]) -> "EngineConfig":
        """Apply flat overrides; ``None`` values are ignored."""
        engine_keys = {f.name: f for f in fields(EngineConfig) if f.name != "confidence"}
        conf_keys = {f.name: f for f in fields(ConfidenceConfig)}
        eng, conf = {}, {}
        for key, raw in overrides.items():
            if raw is None:
                continue
            if key in conf_keys:
                conf[key] = _coerce(conf_keys[key], raw, key)
            elif key in engine_keys:
                eng[key] = _coerce(engine_keys[key], raw, key)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            confidence = replace(self.confidence, **conf)
            return replace(self, confidence=confidence, **eng)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_flat(self) -> dict[str, Any]:
        out = dataclasses.asdict(self.confidence)
        for f in fields(self):
            if f.name != "confidence":
                out[f.name] = getattr(self, f.name)
        out["predicate_aliases"] = dict(self.predicate_aliases)
        return out


def _coerce(f: dataclasses.Field, raw: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    kind = str(f.type)
    try:
        if "Mapping" in kind:
            return json.loads(raw)
        if "int" in kind and "None" in kind:
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if "None" in kind and raw.lower() in ("", "none"):
            return None
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def read_config_file(path: str | Path) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string("[engine]\n" + text)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return dict(parser["engine"])


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> EngineConfig:
    cfg = EngineConfig()
    if path is not None:
        cfg = cfg.with_overrides(read_config_file(path))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
