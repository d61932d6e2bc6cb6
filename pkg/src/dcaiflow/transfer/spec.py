"""Transfer requests and reports shared by the real and simulated services."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from pathlib import PurePosixPath
from typing import Any, Iterable, Mapping

KiB = 1024
MiB = 1024 * KiB
MIN_CHUNK_BYTES = 4 * KiB
DEFAULT_CHUNK_BYTES = 4 * MiB
MAX_AUTO_CC = 8
PARTIAL_SUFFIX = ".part"
REPORT_CSV_HEADER = "cc,bytes,seconds,throughput_bps"


class TransferError(Exception):
    pass


class TransferSpecError(TransferError, ValueError):
    pass


class UnknownEndpoint(TransferError, LookupError):
    pass


class TransferNotFound(TransferError, KeyError):
    pass


def auto_cc(file_count: int) -> int:
    return max(1, min(file_count, MAX_AUTO_CC))


@dataclass(frozen=True)
class TransferSpec:
    """What to move. ``dst_paths`` defaults to the source paths.

    ``sizes`` and ``duration_s`` only apply to the simulated service: the
    first gives the virtual file sizes, the second replaces the link model
    with a fixed duration.
    """

    src_endpoint: str
    paths: tuple[str, ...]
    dst_endpoint: str
    dst_paths: tuple[str, ...] | None = None
    cc: int | None = None
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    verify: bool = True
    sizes: tuple[int, ...] | None = None
    duration_s: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "paths", tuple(self.paths))
        if self.dst_paths is not None:
            object.__setattr__(self, "dst_paths", tuple(self.dst_paths))
        if self.sizes is not None:
            object.__setattr__(self, "sizes", tuple(self.sizes))

    @property
    def destinations(self) -> tuple[str, ...]:
        return self.dst_paths if self.dst_paths is not None else self.paths

    @property
    def concurrency(self) -> int:
        return self.cc if self.cc is not None else auto_cc(len(self.paths))

    def validate(self) -> "TransferSpec":
        if self.cc is not None and (isinstance(self.cc, bool) or not isinstance(self.cc, int) or self.cc < 1):
            raise TransferSpecError(f"cc must be an integer >= 1, got {self.cc!r}")
        if not isinstance(self.chunk_bytes, int) or self.chunk_bytes < MIN_CHUNK_BYTES:
            raise TransferSpecError(f"chunk_bytes must be >= {MIN_CHUNK_BYTES}")
        if self.dst_paths is not None and len(self.dst_paths) != len(self.paths):
            raise TransferSpecError("dst_paths must map one-to-one onto paths")
        if not self.paths and self.sizes is None and self.duration_s is None:
            raise TransferSpecError("nothing to transfer: empty path list")
        seen: set[str] = set()
        for p in self.destinations:
            norm = str(PurePosixPath(p))
            if norm in seen:
                raise TransferSpecError(f"destination collision on {p!r}")
            seen.add(norm)
        if self.sizes is not None:
            if len(self.sizes) != len(self.paths):
                raise TransferSpecError("sizes must give one size per path")
            if any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in self.sizes):
                raise TransferSpecError("sizes must be non-negative integers")
        if self.duration_s is not None and self.duration_s < 0:
            raise TransferSpecError("duration_s must be >= 0")
        return self

    def to_doc(self) -> dict[str, Any]:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_params(cls, params: Mapping[str, Any]) -> "TransferSpec":
        """Build from a flow action's parameter document.

        Accepts ``src``, ``dst``, ``paths`` (or ``path``), ``dst_paths``,
        ``cc``, ``chunk_bytes``, ``verify``, ``sizes``, ``duration_s`` and the
        shorthand ``bytes`` + ``files`` which spreads a byte count evenly
        over that many virtual files.
        """
        known = {"src", "dst", "paths", "path", "dst_paths", "dst_path", "cc", "chunk_bytes", "verify", "sizes", "duration_s", "bytes", "files"}
        extra = set(params) - known
        if extra:
            raise TransferSpecError(f"unknown transfer parameter {sorted(extra)[0]!r}")
        paths = params.get("paths")
        if paths is None and "path" in params:
            paths = [params["path"]]
        dst_paths = params.get("dst_paths")
        if dst_paths is None and "dst_path" in params:
            dst_paths = [params["dst_path"]]
        sizes = params.get("sizes")
        if "bytes" in params:
            if sizes is not None:
                raise TransferSpecError("give sizes or bytes, not both")
            sizes = split_bytes(int(params["bytes"]), int(params.get("files", 1)))
        if sizes is not None and paths is None:
            paths = [f"part-{i:05d}" for i in range(len(sizes))]
        if paths is None:
            paths = []
        if isinstance(paths, str):
            raise TransferSpecError("paths must be a list")
        try:
            src, dst = params["src"], params["dst"]
        except KeyError as exc:
            raise TransferSpecError(f"transfer needs {exc.args[0]!r}") from None
        return cls(
            src_endpoint=src,
            paths=tuple(paths),
            dst_endpoint=dst,
            dst_paths=tuple(dst_paths) if dst_paths is not None else None,
            cc=params.get("cc"),
            chunk_bytes=params.get("chunk_bytes", DEFAULT_CHUNK_BYTES),
            verify=bool(params.get("verify", True)),
            sizes=tuple(sizes) if sizes is not None else None,
            duration_s=params.get("duration_s"),
        ).validate()


def split_bytes(total: int, files: int) -> list[int]:
    """Spread *total* bytes as evenly as possible over *files* files."""
    if total < 0 or files < 0:
        raise TransferSpecError("bytes and files must be >= 0")
    if files == 0:
        if total:
            raise TransferSpecError("bytes need at least one file")
        return []
    q, r = divmod(total, files)
    return [q + (1 if i < r else 0) for i in range(files)]


class TransferOutcome(enum.Enum):
    ACTIVE = "Active"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    CANCELLED = "Cancelled"


class FileState(enum.Enum):
    PENDING = "pending"
    ACTIVE = "active"
    DONE = "done"
    FAILED = "failed"
    PARTIAL = "partial"  # left behind by a cancel; never at the final name


@dataclass
class FileReport:
    src: str
    dst: str
    bytes: int = 0
    bytes_moved: int = 0  # monotone: includes re-sent chunks
    start_ns: int | None = None
    end_ns: int | None = None
    checksum: str | None = None
    dst_checksum: str | None = None
    retries: int = 0
    state: FileState = FileState.PENDING
    error: str | None = None

    @property
    def duration_ns(self) -> int | None:
        if self.start_ns is None or self.end_ns is None:
            return None
        return self.end_ns - self.start_ns


@dataclass
class TransferReport:
    transfer_id: str
    concurrency: int
    files: list[FileReport] = field(default_factory=list)
    outcome: TransferOutcome = TransferOutcome.ACTIVE
    submitted_ns: int = 0
    start_ns: int | None = None
    end_ns: int | None = None
    idempotency_key: str | None = None
    error: str | None = None

    @property
    def total_bytes(self) -> int:
        return sum(f.bytes for f in self.files)

    @property
    def span_ns(self) -> int | None:
        starts = [f.start_ns for f in self.files if f.start_ns is not None]
        ends = [f.end_ns for f in self.files if f.end_ns is not None]
        if not starts or not ends:
            return None
        return max(ends) - min(starts)

    @property
    def throughput_bps(self) -> float | None:
        span = self.span_ns
        if not span:
            return None
        return self.total_bytes * 1e9 / span

    @property
    def terminal(self) -> bool:
        return self.outcome is not TransferOutcome.ACTIVE

    def to_doc(self) -> dict[str, Any]:
        d = asdict(self)
        d["outcome"] = self.outcome.value
        for f in d["files"]:
            f["state"] = f["state"].value
        d["total_bytes"] = self.total_bytes
        d["throughput_bps"] = self.throughput_bps
        return d


@dataclass(frozen=True)
class BenchRow:
    cc: int
    bytes: int
    seconds: float
    throughput_bps: float


def report_csv(rows: Iterable[BenchRow]) -> str:
    lines = [REPORT_CSV_HEADER]
    lines += [f"{r.cc},{r.bytes},{r.seconds!r},{r.throughput_bps!r}" for r in rows]
    return "\n".join(lines) + "\n"


def bench_row(report: TransferReport) -> BenchRow:
    span = report.span_ns or 0
    return BenchRow(report.concurrency, report.total_bytes, span / 1e9, report.throughput_bps or 0.0)

