#!/usr/bin/env python3
"""
Tests for key=value config parsing and dataclass coercion
"""

import sys
from dataclasses import dataclass
from typing import Tuple

import pytest

from config import (
    check_known_namespaces,
    format_value,
    read_conf,
    require_finite,
    split_namespace,
    to_conf_lines,
    update_dataclass,
)
from errors import ConfigError


@dataclass(frozen=True)
class Knobs:
    count: int = 3
    rate: float = 0.5
    enabled: bool = False
    name: str = "base"
    dims: Tuple[int, ...] = (1, 2)
    tags: Tuple[str, ...] = ()


def test_read_conf_handles_comments_and_quotes(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# header\nknobs.count=7\n\nknobs.name=\"two words\"\nknobs.rate=0.25  # trailing\n")
    values = read_conf(path)
    assert values == {"knobs.count": "7", "knobs.name": "two words", "knobs.rate": "0.25"}


def test_read_conf_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        read_conf(tmp_path / "nope.conf")


def test_update_dataclass_coerces_types():
    knobs = update_dataclass(Knobs(), {"count": "9", "rate": "1e-3", "enabled": "yes",
                                       "dims": "3, 4,5", "tags": "a,b"})
    assert knobs == Knobs(count=9, rate=1e-3, enabled=True, dims=(3, 4, 5), tags=("a", "b"))


def test_empty_tuple_value():
    assert update_dataclass(Knobs(), {"dims": ""}).dims == ()


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="knobs.colour"):
        update_dataclass(Knobs(), {"colour": "red"}, "knobs.")


def test_bad_values():
    with pytest.raises(ConfigError, match="knobs.count"):
        update_dataclass(Knobs(), {"count": "many"}, "knobs.")
    with pytest.raises(ConfigError):
        update_dataclass(Knobs(), {"enabled": "maybe"})
    # ConfigError is also a ValueError
    with pytest.raises(ValueError):
        update_dataclass(Knobs(), {"rate": "fast"})


def test_namespaces():
    values = {"a.x": "1", "a.y": "2", "b.x": "3"}
    assert split_namespace(values, "a") == {"x": "1", "y": "2"}
    check_known_namespaces(values, ("a", "b"))
    with pytest.raises(ConfigError, match="b.x"):
        check_known_namespaces(values, ("a",))


def test_conf_lines_round_trip():
    knobs = Knobs(count=4, rate=0.1, enabled=True, name="x", dims=(5, 6), tags=("p",))
    lines = to_conf_lines(knobs, "knobs")
    values = dict(line.split("=", 1) for line in lines)
    assert update_dataclass(Knobs(), split_namespace(values, "knobs")) == knobs
    assert format_value(0.1) == "0.1"
    assert format_value(False) == "false"


def test_require_finite():
    require_finite(Knobs(), "knobs")
    with pytest.raises(ConfigError, match="knobs.rate"):
        require_finite(Knobs(rate=float("inf")), "knobs")


if __name__ == "__main__":
    print("🧪 Testing config parsing")
    print("=" * 50)
    sys.exit(pytest.main([__file__, "-v"]))
