"""Append-only run logs: one line-delimited JSON file per run."""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Any


class SimulatedCrash(RuntimeError):
    """Raised by a store armed with a kill point, right after a write lands."""


def dumps(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class RunStore:
    """Run logs under *root*; with ``root=None`` the logs live in memory.

    ``crash_after_writes=k`` makes the k-th append raise
    :class:`SimulatedCrash` after the line is durable, which is how tests
    place kill points between persistence and the next engine step.
    """

    def __init__(self, root: str | Path | None = None, *, fsync: bool = False, crash_after_writes: int | None = None):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self.crash_after_writes = crash_after_writes
        self.writes = 0
        self._mem: dict[str, list[str]] = {}
        self._lock = threading.Lock()

    def path(self, run_id: str) -> Path:
        if self.root is None:
            raise ValueError("in-memory store has no paths")
        return self.root / f"{run_id}.jsonl"

    def append(self, run_id: str, record: dict[str, Any]) -> None:
        line = dumps(record)
        with self._lock:
            if self.root is None:
                self._mem.setdefault(run_id, []).append(line)
            else:
                with open(self.path(run_id), "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
                    if self.fsync:
                        fh.flush()
                        os.fsync(fh.fileno())
            self.writes += 1
            if self.crash_after_writes is not None and self.writes >= self.crash_after_writes:
                self.crash_after_writes = None
                raise SimulatedCrash(f"kill point after write {self.writes}")

    def lines(self, run_id: str) -> list[str]:
        if self.root is None:
            return list(self._mem.get(run_id, []))
        return self.path(run_id).read_text(encoding="utf-8").splitlines()

    def read(self, run_id: str) -> list[dict[str, Any]]:
        return [json.loads(line) for line in self.lines(run_id) if line.strip()]

    def run_ids(self) -> list[str]:
        if self.root is None:
            return sorted(self._mem)
        return sorted(p.stem for p in self.root.glob("*.jsonl"))

    def text(self, run_id: str) -> str:
        return "".join(line + "\n" for line in self.lines(run_id))
