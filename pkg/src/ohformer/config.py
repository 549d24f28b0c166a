"""
Run configuration.

Sources, lowest precedence first: schema defaults, a config file, then
command-line overrides. A config file is either line-oriented
``key = value`` text (``#`` comments) or, for ``.yaml``/``.yml``/``.json``
files, a mapping. Everything is validated against ``RUN_CONFIG_SCHEMA``.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import jsonschema
import yaml

from ohformer.errors import ConfigurationError, OutputError
from ohformer.tensor.parallel import THREADS_ENV

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RESOLVED_NAME = "config.resolved"

RUN_CONFIG_SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "ohformer run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "default": 0},
        "threads": {"type": "integer", "minimum": 1, "default": 1},
        "data": {"type": "string", "default": "data"},
        "out": {"type": "string", "default": "run"},
        "steps": {"type": "integer", "minimum": 1, "default": 500},
        "p_ids": {"type": "integer", "minimum": 2, "default": 4},
        "k_per_id": {"type": "integer", "minimum": 2, "default": 4},
        "margin": {"type": "number", "minimum": 0, "default": 0.3},
        "lr": {"type": "number", "exclusiveMinimum": 0, "default": 0.01},
        "momentum": {"type": "number", "minimum": 0, "maximum": 1, "default": 0.9},
        "weight_decay": {"type": "number", "minimum": 0, "default": 0.0001},
        "bn_momentum": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 0.1},
        "flip": {"type": "boolean", "default": True},
        "erase": {"type": "boolean", "default": True},
        "input_h": {"type": "integer", "minimum": 10, "default": 60},
        "input_w": {"type": "integer", "minimum": 10, "default": 30},
        "stack": {"type": "string", "default": "[H_2^{1},H_3^{2}]"},
        "layers": {"type": ["integer", "null"], "minimum": 1, "default": None},
        "width": {"type": "integer", "minimum": 1, "default": 64},
        "heads": {"type": "integer", "minimum": 1, "default": 4},
        "parts": {"type": "integer", "minimum": 1, "default": 4},
        "mode": {"type": "string", "enum": ["full", "shared"], "default": "full"},
        "prior_mixing": {"type": "boolean", "default": True},
        "prior_axis": {"type": "string", "enum": ["key", "query", "elementwise"], "default": "key"},
        "lrp": {"type": "string", "default": "DWC+DFC"},
        "deform_depthwise": {"type": "boolean", "default": False},
        "tie_vk": {"type": "boolean", "default": False},
        "mlp_ratio": {"type": "integer", "minimum": 1, "default": 4},
        "save_every": {"type": "integer", "minimum": 0, "default": 100},
        "log_every": {"type": "integer", "minimum": 1, "default": 50},
        "holdout_every": {"type": "integer", "minimum": 0, "default": 4},
        "occlude": {"type": "number", "minimum": 0, "maximum": 1, "default": 0.0},
        "ids": {"type": "integer", "minimum": 1, "default": 8},
        "cams": {"type": "integer", "minimum": 1, "default": 2},
        "per_id": {"type": "integer", "minimum": 1, "default": 10},
        "direction": {"type": "string", "enum": ["down", "up", "both"], "default": "down"},
        "per_head": {"type": "boolean", "default": False},
    },
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    threads: int
    data: str
    out: str
    steps: int
    p_ids: int
    k_per_id: int
    margin: float
    lr: float
    momentum: float
    weight_decay: float
    bn_momentum: float
    flip: bool
    erase: bool
    input_h: int
    input_w: int
    stack: str
    layers: Optional[int]
    width: int
    heads: int
    parts: int
    mode: str
    prior_mixing: bool
    prior_axis: str
    lrp: str
    deform_depthwise: bool
    tie_vk: bool
    mlp_ratio: int
    save_every: int
    log_every: int
    holdout_every: int
    occlude: float
    ids: int
    cams: int
    per_id: int
    direction: str
    per_head: bool

    @property
    def input_size(self):
        return self.input_h, self.input_w

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


KEYS = tuple(f.name for f in fields(RunConfig))


def _property(key: str) -> Dict[str, Any]:
    try:
        return RUN_CONFIG_SCHEMA["properties"][key]
    except KeyError:
        raise ConfigurationError(f"unknown config key {key!r}") from None


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_value(key: str, raw: str) -> Any:
    """Type a raw text value by the schema type of ``key``."""
    kind = _property(key)["type"]
    raw = raw.strip()
    if kind == "string":
        return raw
    if kind == "integer":
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(f"{key} must be an integer, got {raw!r}") from None
    if kind == "number":
        try:
            return float(raw)
        except ValueError:
            raise ConfigurationError(f"{key} must be a number, got {raw!r}") from None
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse value of {key}: {e}") from e


def parse_key_value_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """
    Parse ``key = value`` lines.

    Raises:
        ConfigurationError: malformed line, unknown key, or a key given twice
    """
    values: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise ConfigurationError(f"{source}:{number}: expected 'key = value', got {line.strip()!r}")
        key = normalize_key(key)
        if key not in RUN_CONFIG_SCHEMA["properties"]:
            raise ConfigurationError(f"{source}:{number}: unknown config key {key!r}")
        if key in values:
            raise ConfigurationError(f"{source}:{number}: {key} given twice")
        values[key] = parse_value(key, raw)
    return values


def load_config_file(file_path: PathLike) -> Dict[str, Any]:
    """
    Load a config file (``key = value`` text, YAML or JSON).

    Args:
        file_path: Path to the config file

    Returns:
        The raw key/value mapping, not yet validated
    """
    path = Path(file_path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    ext = path.suffix.lower()
    if ext in (".yaml", ".yml", ".json"):
        try:
            loaded = yaml.safe_load(text) if ext != ".json" else json.loads(text)
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot parse config {path}: {e}") from e
        if loaded is None:
            return {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config {path} must hold a mapping")
        return {normalize_key(str(k)): v for k, v in loaded.items()}
    return parse_key_value_text(text, str(path))


def schema_defaults() -> Dict[str, Any]:
    defaults = {key: spec["default"] for key, spec in RUN_CONFIG_SCHEMA["properties"].items()}
    env_threads = os.environ.get(THREADS_ENV)
    if env_threads:
        try:
            defaults["threads"] = max(1, int(env_threads))
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", THREADS_ENV, env_threads)
    return defaults


def validate_config(values: Mapping[str, Any]) -> None:
    """
    Raises:
        ConfigurationError: listing every schema violation
    """
    validator = jsonschema.Draft7Validator(RUN_CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(dict(values)), key=lambda e: list(e.path))
    if errors:
        details = "; ".join(
            f"{'.'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors
        )
        raise ConfigurationError(f"invalid configuration: {details}")


def build_config(*layers: Optional[Mapping[str, Any]]) -> RunConfig:
    """Merge mappings over the schema defaults (later wins), validate, build."""
    values = schema_defaults()
    for layer in layers:
        if layer:
            values.update({normalize_key(k): v for k, v in layer.items()})
    validate_config(values)
    return RunConfig(**values)


def resolve_config(path: Optional[PathLike] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    file_values = load_config_file(path) if path else {}
    return build_config(file_values, overrides)


def _format_value(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value) if not isinstance(value, float) else repr(value)


def format_config(config: RunConfig) -> str:
    """``key = value`` lines, keys sorted; parsing them back gives the same config."""
    values = config.to_dict()
    return "".join(f"{key} = {_format_value(values[key])}\n" for key in sorted(values))


def write_resolved(config: RunConfig, directory: PathLike) -> Path:
    path = Path(directory) / RESOLVED_NAME
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_config(config), encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    return path
