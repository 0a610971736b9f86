"""
Flat ``key = value`` experiment configs.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Values are parsed according to the target dataclass field annotations.
Unknown keys, duplicate keys and unparsable values raise ``ConfigError``
naming the key and the line.
"""

import dataclasses
import typing
from typing import Any, Dict, Type, TypeVar

from .errors import ConfigError

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(raw: str, annotation: Any, key: str, line: int) -> Any:
    try:
        if annotation is bool:
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if typing.get_origin(annotation) is tuple:
            item_type = typing.get_args(annotation)[0]
            return tuple(_parse_value(part.strip(), item_type, key, line)
                         for part in raw.split(",") if part.strip())
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse '{raw}' as {getattr(annotation, '__name__', annotation)}",
                          key=key, line=line)


def parse_config_text(text: str, cls: Type[T], source: str = "<config>") -> T:
    """Build a ``cls`` instance from config text; unspecified fields keep defaults."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    values: Dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"{source}: expected 'key = value'", line=line_no, key=content)
        key, raw = (part.strip() for part in content.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}: unknown key", key=key, line=line_no)
        if key in values:
            raise ConfigError(f"{source}: duplicate key", key=key, line=line_no)
        values[key] = _parse_value(raw, hints[key], key, line_no)
    instance = cls(**values)
    validate = getattr(instance, "validate", None)
    if callable(validate):
        validate()
    return instance


def load_config(path: str, cls: Type[T]) -> T:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}")
    return parse_config_text(text, cls, source=path)


def format_config(instance: Any) -> str:
    """Serialize a config dataclass back to ``key = value`` lines."""
    lines = []
    for field in dataclasses.fields(instance):
        value = getattr(instance, field.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{field.name} = {value}")
    return "\n".join(lines) + "\n"
