"""Real-mode transfer service: threads, streams, chunk retries, verification.

Destination files are assembled in ``<name>.part`` with positional writes,
so chunks may land in any order. A file only appears under its final name
after its digest matches the source's; a mismatch resends the whole file
once, then fails it.
"""

from __future__ import annotations

import collections
import copy
import logging
import os
import random
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from dcaiflow.timebase import Clock, WallClock
from dcaiflow.transfer.endpoints import DEFAULT_DIGEST, LocalEndpoint, RemoteEndpoint, SourceSession, StreamBroken, file_digest
from dcaiflow.transfer.spec import (
    PARTIAL_SUFFIX,
    FileReport,
    FileState,
    TransferError,
    TransferNotFound,
    TransferOutcome,
    TransferReport,
    TransferSpec,
    TransferSpecError,
    UnknownEndpoint,
)

log = logging.getLogger(__name__)

MAX_CHUNK_RETRIES = 8
MAX_FILE_RETRIES = 1

Endpoint = LocalEndpoint | RemoteEndpoint


class FaultPlan:
    """Seeded stream faults: *kill* writes part of a chunk and drops the stream,
    *corrupt* flips one byte of a chunk before it is written."""

    def __init__(self, seed: int = 0, kill_probability: float = 0.0, corrupt_probability: float = 0.0, max_faults: int | None = None):
        self._rng = random.Random(seed)
        self.kill_probability = kill_probability
        self.corrupt_probability = corrupt_probability
        self.max_faults = max_faults
        self.injected: collections.Counter[str] = collections.Counter()
        self._lock = threading.Lock()

    def draw(self) -> tuple[str | None, float]:
        with self._lock:
            if self.max_faults is not None and sum(self.injected.values()) >= self.max_faults:
                return None, 0.0
            u, where = self._rng.random(), self._rng.random()
            if u < self.kill_probability:
                self.injected["kill"] += 1
                return "kill", where
            if u < self.kill_probability + self.corrupt_probability:
                self.injected["corrupt"] += 1
                return "corrupt", where
            return None, where


@dataclass
class _File:
    report: FileReport
    final: Path | None = None
    part: Path | None = None
    fd: int | None = None
    chunks_left: int = 0
    file_retries: int = 0
    dead: bool = False
    # held around every use of fd, so nothing is written after (or during) a close
    io: threading.Lock = field(default_factory=threading.Lock)


class _Abandoned(Exception):
    """The chunk's file failed while the chunk was in flight."""


class _Transfer:
    def __init__(self, report: TransferReport, spec: TransferSpec):
        self.report = report
        self.spec = spec
        self.files: list[_File] = []
        self.queue: collections.deque[tuple[int, int, int]] = collections.deque()
        self.inflight = 0
        self.attempts: collections.Counter[tuple[int, int]] = collections.Counter()
        self.cv = threading.Condition()
        self.cancelled = False
        self.done = threading.Event()


class TransferService:
    def __init__(
        self,
        endpoints: Mapping[str, Endpoint],
        *,
        clock: Clock | None = None,
        digest: str = DEFAULT_DIGEST,
        faults: FaultPlan | None = None,
        id_factory: Callable[[], str] | None = None,
    ):
        self.endpoints = dict(endpoints)
        self.clock = clock if clock is not None else WallClock()
        if self.clock.virtual:
            raise ValueError("the real transfer service needs a wall clock; use SimulatedTransferService")
        self.digest = digest
        self.faults = faults
        self._new_id = id_factory or (lambda: uuid.uuid4().hex)
        self._transfers: dict[str, _Transfer] = {}
        self._by_key: dict[str, str] = {}
        self._lock = threading.Lock()

    def _endpoint(self, name: str) -> Endpoint:
        try:
            return self.endpoints[name]
        except KeyError:
            raise UnknownEndpoint(f"unknown endpoint {name!r}") from None

    # -- public surface -----------------------------------------------------

    def submit(self, spec: TransferSpec, idempotency_key: str | None = None) -> str:
        spec.validate()
        if spec.sizes is not None or spec.duration_s is not None:
            raise TransferSpecError("sizes and duration_s are simulated-mode parameters")
        src = self._endpoint(spec.src_endpoint)
        dst = self._endpoint(spec.dst_endpoint)
        if not isinstance(dst, LocalEndpoint):
            raise TransferSpecError("the destination must be a local endpoint of this service")
        with self._lock:
            if idempotency_key is not None and idempotency_key in self._by_key:
                return self._by_key[idempotency_key]
            tid = self._new_id()
            report = TransferReport(tid, spec.concurrency, submitted_ns=self.clock.now_ns(), idempotency_key=idempotency_key)
            report.files = [FileReport(s, d) for s, d in zip(spec.paths, spec.destinations)]
            t = _Transfer(report, spec)
            self._transfers[tid] = t
            if idempotency_key is not None:
                self._by_key[idempotency_key] = tid
        threading.Thread(target=self._coordinate, args=(t, src, dst), name=f"transfer-{tid[:8]}", daemon=True).start()
        return tid

    def status(self, transfer_id: str) -> TransferReport:
        t = self._get(transfer_id)
        with t.cv:
            return copy.deepcopy(t.report)

    def wait(self, transfer_id: str, timeout: float | None = None) -> TransferReport:
        t = self._get(transfer_id)
        if not t.done.wait(timeout):
            raise TimeoutError(f"transfer {transfer_id} still active")
        return self.status(transfer_id)

    def cancel(self, transfer_id: str) -> TransferReport:
        t = self._get(transfer_id)
        with t.cv:
            if not t.report.terminal:
                t.cancelled = True
                t.cv.notify_all()
        t.done.wait()
        return self.status(transfer_id)

    def _get(self, transfer_id: str) -> _Transfer:
        with self._lock:
            try:
                return self._transfers[transfer_id]
            except KeyError:
                raise TransferNotFound(transfer_id) from None

    # -- coordinator ----------------------------------------------------------

    def _coordinate(self, t: _Transfer, src: Endpoint, dst: LocalEndpoint) -> None:
        session: SourceSession | None = None
        try:
            session = src.open_session(t.report.transfer_id, list(t.spec.paths))
            self._prepare(t, session, dst)
            workers = [
                threading.Thread(target=self._worker, args=(t, session), daemon=True)
                for _ in range(t.report.concurrency)
            ]
            for w in workers:
                w.start()
            for w in workers:
                w.join()
        except Exception as exc:
            log.exception("transfer %s aborted", t.report.transfer_id)
            with t.cv:
                t.report.error = str(exc)
                for f in t.files:
                    if f.report.state in (FileState.PENDING, FileState.ACTIVE):
                        self._fail_file(f, str(exc))
                for fr in t.report.files[len(t.files):]:
                    fr.state, fr.error = FileState.FAILED, str(exc)
        finally:
            if session is not None:
                session.close()
            self._conclude(t)

    def _prepare(self, t: _Transfer, session: SourceSession, dst: LocalEndpoint) -> None:
        empty: list[int] = []
        with t.cv:
            t.report.start_ns = self.clock.now_ns()
            for i, (info, fr) in enumerate(zip(session.files, t.report.files)):
                f = _File(fr)
                t.files.append(f)
                if "error" in info:
                    fr.state, fr.error = FileState.FAILED, info["error"]
                    f.dead = True
                    continue
                fr.bytes = info["size"]
                f.final = dst.resolve(fr.dst)
                f.part = f.final.with_name(f.final.name + PARTIAL_SUFFIX)
                f.final.parent.mkdir(parents=True, exist_ok=True)
                f.fd = os.open(f.part, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
                os.ftruncate(f.fd, fr.bytes)
                self._enqueue_file(t, i)
                if f.chunks_left == 0:
                    empty.append(i)
        for i in empty:
            self._finalize(t, session, i)

    def _enqueue_file(self, t: _Transfer, index: int) -> None:
        f = t.files[index]
        size, chunk = f.report.bytes, t.spec.chunk_bytes
        offsets = range(0, size, chunk)
        f.chunks_left = len(offsets)
        t.queue.extend((index, off, min(chunk, size - off)) for off in offsets)

    def _next_chunk(self, t: _Transfer) -> tuple[int, int, int] | None:
        with t.cv:
            while True:
                if t.cancelled:
                    return None
                while t.queue:
                    item = t.queue.popleft()
                    if not t.files[item[0]].dead:
                        t.inflight += 1
                        return item
                if t.inflight == 0:
                    return None
                t.cv.wait()

    def _worker(self, t: _Transfer, session: SourceSession) -> None:
        stream = session.stream()
        try:
            while (item := self._next_chunk(t)) is not None:
                index, offset, length = item
                f = t.files[index]
                with t.cv:
                    if f.report.start_ns is None:
                        f.report.start_ns = self.clock.now_ns()
                        f.report.state = FileState.ACTIVE
                try:
                    data = stream.read(index, offset, length)
                    self._write(f, data, offset)
                except _Abandoned:
                    with t.cv:
                        t.inflight -= 1
                        t.cv.notify_all()
                    continue
                except (StreamBroken, OSError, TransferError) as exc:
                    stream.close()
                    stream = session.stream()
                    self._chunk_failed(t, item, exc)
                    continue
                except Exception as exc:  # a bug must fail the file, not wedge the transfer
                    log.exception("chunk %s of transfer %s", item, t.report.transfer_id)
                    with t.cv:
                        t.inflight -= 1
                        if not f.dead:
                            self._fail_file(f, f"internal error: {exc!r}")
                        t.cv.notify_all()
                    continue
                finished = False
                with t.cv:
                    if not f.dead:
                        f.report.bytes_moved += length
                        f.chunks_left -= 1
                        finished = f.chunks_left == 0
                    if not finished:
                        t.inflight -= 1
                        t.cv.notify_all()
                if finished:
                    # Stay counted as in flight so idle workers do not exit
                    # before a possible resend is queued.
                    try:
                        self._finalize(t, session, index)
                    finally:
                        with t.cv:
                            t.inflight -= 1
                            t.cv.notify_all()
        finally:
            stream.close()

    def _write(self, f: _File, data: bytes, offset: int) -> None:
        fault, where = self.faults.draw() if self.faults is not None else (None, 0.0)
        if fault == "corrupt" and data:
            pos = int(len(data) * where) % len(data)
            data = data[:pos] + bytes([data[pos] ^ 0xFF]) + data[pos + 1:]
        with f.io:
            if f.fd is None:
                raise _Abandoned()
            if fault == "kill":
                cut = int(len(data) * where)
                os.pwrite(f.fd, data[:cut], offset)
                raise StreamBroken(f"stream killed after {cut} of {len(data)} bytes")
            os.pwrite(f.fd, data, offset)

    def _chunk_failed(self, t: _Transfer, item: tuple[int, int, int], exc: Exception) -> None:
        index = item[0]
        with t.cv:
            t.inflight -= 1
            f = t.files[index]
            f.report.retries += 1
            t.attempts[item[:2]] += 1
            if f.dead:
                pass
            elif t.attempts[item[:2]] > MAX_CHUNK_RETRIES:
                self._fail_file(f, f"chunk at {item[1]} failed {t.attempts[item[:2]]} times: {exc}")
            else:
                t.queue.appendleft(item)
            t.cv.notify_all()

    def _finalize(self, t: _Transfer, session: SourceSession, index: int) -> None:
        f = t.files[index]
        verify = t.spec.verify
        try:
            src_digest = session.digest(index, self.digest) if verify else None
            os.fsync(f.fd)
            dst_digest = file_digest(f.part, self.digest) if verify else None
        except (OSError, TransferError) as exc:
            with t.cv:
                self._fail_file(f, f"verification failed: {exc}")
                t.cv.notify_all()
            return
        with t.cv:
            f.report.checksum, f.report.dst_checksum = src_digest, dst_digest
            if src_digest == dst_digest:
                with f.io:
                    os.close(f.fd)
                    f.fd = None
                os.replace(f.part, f.final)
                f.report.state = FileState.DONE
                f.report.end_ns = self.clock.now_ns()
                if f.report.start_ns is None:
                    f.report.start_ns = f.report.end_ns
            elif f.file_retries < MAX_FILE_RETRIES:
                f.file_retries += 1
                f.report.retries += 1
                self._enqueue_file(t, index)
            else:
                self._fail_file(f, "digest mismatch after resend")
            t.cv.notify_all()

    def _fail_file(self, f: _File, error: str) -> None:
        f.dead = True
        f.report.state = FileState.FAILED
        f.report.error = error
        f.report.end_ns = self.clock.now_ns()
        with f.io:
            if f.fd is not None:
                os.close(f.fd)
                f.fd = None
        if f.part is not None and f.part.exists():
            f.part.unlink()

    def _conclude(self, t: _Transfer) -> None:
        with t.cv:
            for f in t.files:
                with f.io:
                    if f.fd is not None:
                        os.close(f.fd)
                        f.fd = None
                if f.report.state in (FileState.PENDING, FileState.ACTIVE):
                    f.report.state = FileState.PARTIAL
                    f.report.end_ns = f.report.end_ns or self.clock.now_ns()
            states = {fr.state for fr in t.report.files}
            if t.cancelled:
                t.report.outcome = TransferOutcome.CANCELLED
            elif states <= {FileState.DONE}:
                t.report.outcome = TransferOutcome.SUCCEEDED
            else:
                t.report.outcome = TransferOutcome.FAILED
            t.report.end_ns = self.clock.now_ns()
        t.done.set()
