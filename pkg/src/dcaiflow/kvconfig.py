"""Plain-text ``key = value`` documents.

One assignment per line, ``#`` starts a comment, blank lines are ignored and
keys are dotted paths (``cost.analyze.dc``). Every value remembers its line so
that semantic errors downstream can point at the offending line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*(\.[A-Za-z_][A-Za-z0-9_\-]*)*$")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line
        self.source = source


@dataclass(frozen=True)
class Entry:
    key: str
    value: str
    line: int


class KVDocument:
    def __init__(self, entries: list[Entry], source: str = "<config>"):
        self.source = source
        self._entries: dict[str, Entry] = {}
        for e in entries:
            if e.key in self._entries:
                raise ConfigError(
                    f"duplicate key {e.key!r} (first set on line {self._entries[e.key].line})",
                    e.line,
                    source,
                )
            self._entries[e.key] = e
        self._used: set[str] = set()

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "KVDocument":
        entries = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
            if not _KEY.match(key):
                raise ConfigError(f"invalid key {key!r}", lineno, source)
            if not value:
                raise ConfigError(f"empty value for {key!r}", lineno, source)
            entries.append(Entry(key, value, lineno))
        return cls(entries, source)

    @classmethod
    def load(cls, path: str | Path) -> "KVDocument":
        path = Path(path)
        return cls.parse(path.read_text(), str(path))

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __iter__(self) -> Iterator[Entry]:
        return iter(self._entries.values())

    def entry(self, key: str) -> Entry:
        try:
            e = self._entries[key]
        except KeyError:
            raise ConfigError(f"missing required key {key!r}", None, self.source) from None
        self._used.add(key)
        return e

    def get(self, key: str, default: str | None = None) -> str | None:
        if key not in self._entries:
            return default
        return self.entry(key).value

    def error(self, key: str, message: str) -> ConfigError:
        line = self._entries[key].line if key in self._entries else None
        return ConfigError(message, line, self.source)

    def number(self, key: str, default=None, *, kind=float):
        if key not in self._entries:
            if default is None:
                raise ConfigError(f"missing required key {key!r}", None, self.source)
            return default
        e = self.entry(key)
        try:
            if kind is int:
                value = Fraction(e.value)
                if value.denominator != 1:
                    raise ValueError
                return int(value)
            if kind is Fraction:
                return Fraction(e.value)
            return kind(e.value)
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"{key}: expected {kind.__name__}, got {e.value!r}", e.line, self.source) from None

    def with_prefix(self, prefix: str) -> list[Entry]:
        return [e for e in self._entries.values() if e.key.startswith(prefix)]

    def unused(self) -> list[Entry]:
        return [e for k, e in self._entries.items() if k not in self._used]

    def reject_unused(self) -> None:
        left = self.unused()
        if left:
            raise ConfigError(f"unknown key {left[0].key!r}", left[0].line, self.source)
