"""
Flat key=value configuration files.

Files are parsed with python-dotenv (comments, quoting and blank lines behave
exactly as in a .env file). Keys are namespaced with dots, e.g.
``dgp.kappa=0.6`` or ``group.female.w_sd=1.0``, and every value is coerced to
the type declared on the target dataclass field. Unknown keys are errors.
"""

import dataclasses
import math
import typing
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Tuple, Type, TypeVar, Union

from dotenv import dotenv_values

from errors import ConfigError

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_conf(path: Union[str, Path]) -> Dict[str, str]:
    """Read a key=value file into an ordered dict of raw strings"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = dotenv_values(path, encoding="utf-8")
    values: Dict[str, str] = {}
    for key, value in raw.items():
        if value is None:
            raise ConfigError(f"{path}: key '{key}' has no value")
        values[key.strip()] = value.strip()
    return values


def _coerce(raw: Any, annotation: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(annotation)
    try:
        if annotation is bool:
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            return raw
        if origin in (tuple, Tuple):
            args = [a for a in typing.get_args(annotation) if a is not Ellipsis]
            item_type = args[0] if args else str
            items = [item.strip() for item in raw.split(",") if item.strip()]
            return tuple(_coerce(item, item_type, key) for item in items)
    except ValueError as e:
        raise ConfigError(f"bad value for '{key}': {e}") from e
    raise ConfigError(f"unsupported field type for '{key}': {annotation}")


def update_dataclass(obj: T, values: Mapping[str, Any], prefix: str = "") -> T:
    """Return a copy of ``obj`` with fields replaced from ``values``.

    ``values`` maps bare field names to raw strings (or already typed values).
    ``prefix`` is only used to build readable error messages.
    """
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for name, raw in values.items():
        if name not in names:
            raise ConfigError(f"unknown config key '{prefix}{name}'")
        changes[name] = _coerce(raw, hints[name], prefix + name)
    return dataclasses.replace(obj, **changes)


def dataclass_from_conf(cls: Type[T], values: Mapping[str, Any], prefix: str = "") -> T:
    return update_dataclass(cls(), values, prefix)


def split_namespace(values: Mapping[str, str], namespace: str) -> Dict[str, str]:
    """Pick out ``namespace.*`` keys, stripping the namespace"""
    head = namespace + "."
    return {key[len(head):]: value for key, value in values.items() if key.startswith(head)}


def check_known_namespaces(values: Mapping[str, str], namespaces: Iterable[str]) -> None:
    known = tuple(ns + "." for ns in namespaces)
    for key in values:
        if not key.startswith(known):
            raise ConfigError(f"unknown config key '{key}'")


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def to_conf_lines(obj: Any, prefix: str) -> List[str]:
    """Serialize a config dataclass back to ``prefix.field=value`` lines"""
    return [f"{prefix}.{f.name}={format_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]


def require_finite(obj: Any, label: str) -> None:
    """Reject NaN/inf in every float (or float tuple) field of a dataclass"""
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        items = value if isinstance(value, tuple) else (value,)
        for item in items:
            if isinstance(item, float) and not math.isfinite(item):
                raise ConfigError(f"{label}.{f.name} must be finite, got {item}")
