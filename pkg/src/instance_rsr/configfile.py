"""
Loads the YAML configuration files used by the ``degrade`` and ``train``
commands onto frozen dataclasses. Files must declare ``schema_version`` and
may only contain keys the target dataclass knows about, so a typo can never
silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, TypeVar

import yaml

from instance_rsr.exceptions import ConfigError

SCHEMA_VERSION = 1

_T = TypeVar("_T")


def load_config(path: str | Path, cls: type[_T]) -> _T:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"Cannot read config file '{path}': {exc}") from exc
    return parse_config(text, cls, source=str(path))


def parse_config(text: str, cls: type[_T], source: str = "<string>") -> _T:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source} must contain a mapping at the top level")

    data = dict(data)
    version = data.pop("schema_version", None)
    if version is None:
        raise ConfigError(f"{source} is missing 'schema_version'")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"{source} has schema_version {version!r}, expected {SCHEMA_VERSION}"
        )
    return from_dict(cls, data, prefix="")


def from_dict(cls: type[_T], data: dict[str, Any], prefix: str = "") -> _T:
    if not dataclasses.is_dataclass(cls):  # pragma: no cover
        raise TypeError(f"{cls!r} is not a dataclass")
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix.rstrip('.')}' must be a mapping")

    hints = typing.get_type_hints(cls)
    fields = {field.name for field in dataclasses.fields(cls) if field.init}
    unknown = sorted(set(data) - fields)
    if unknown:
        raise ConfigError(
            "Unknown config key(s): " + ", ".join(prefix + key for key in unknown)
        )

    kwargs = {
        name: _coerce(hints[name], value, prefix + name)
        for name, value in data.items()
    }
    try:
        return cls(**kwargs)  # type: ignore [call-arg]
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"Invalid config{' for ' + prefix if prefix else ''}: {exc}")


def _coerce(hint: Any, value: Any, key: str) -> Any:
    if dataclasses.is_dataclass(hint) and isinstance(hint, type):
        return from_dict(hint, value, prefix=key + ".")

    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if value is None:
        return None
    if origin is tuple and isinstance(value, list):
        inner = args[0] if args else Any
        return tuple(_coerce(inner, item, key) for item in value)
    if origin is not None and type(None) in args:
        # X | None
        (inner,) = [arg for arg in args if arg is not type(None)]
        return _coerce(inner, value, key)
    if hint is float and isinstance(value, (int, str)) and not isinstance(value, bool):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"'{key}' must be a number, got {value!r}")
    if hint is int and isinstance(value, str):
        raise ConfigError(f"'{key}' must be an integer, got {value!r}")
    return value


def dump_config(obj: Any) -> str:
    data = {"schema_version": SCHEMA_VERSION, **_plain(dataclasses.asdict(obj))}
    return yaml.safe_dump(data, sort_keys=True)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value
