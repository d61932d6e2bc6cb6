"""Simulated transfers: a processor-sharing fluid model in exact time.

A link caps each stream at ``per_stream_bps`` and all streams on it together
at ``aggregate_bps``; active streams share the aggregate equally. Internal
time is an exact :class:`~fractions.Fraction` of nanoseconds; only the
instants handed to the virtual clock are rounded up, so a lone transfer of
``B`` bytes at rate ``v`` finishes at ``t0 + ceil(S + files*per_file + B/v)``
nanoseconds, the same rounding the cost model applies.
"""

from __future__ import annotations

import collections
import copy
import itertools
import math
import uuid
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

from dcaiflow.costmodel.model import LinkModel
from dcaiflow.timebase import NS_PER_S, TimerHandle, VirtualClock, exact
from dcaiflow.transfer.spec import (
    DEFAULT_CHUNK_BYTES,
    BenchRow,
    FileReport,
    FileState,
    TransferNotFound,
    TransferOutcome,
    TransferReport,
    TransferSpec,
    TransferSpecError,
    UnknownEndpoint,
    bench_row,
)

SiteLink = tuple[str, str]


@dataclass(frozen=True)
class SimLink:
    per_stream_bps: Fraction
    aggregate_bps: Fraction
    startup_s: Fraction = Fraction(0)
    per_file_overhead: Fraction = Fraction(0)
    rtt: Fraction = Fraction(0)

    def __post_init__(self) -> None:
        for name in ("per_stream_bps", "aggregate_bps", "startup_s", "per_file_overhead", "rtt"):
            object.__setattr__(self, name, exact(getattr(self, name)))
        if self.per_stream_bps <= 0 or self.aggregate_bps <= 0:
            raise ValueError("link rates must be > 0")
        if min(self.startup_s, self.per_file_overhead, self.rtt) < 0:
            raise ValueError("link delays must be >= 0")

    @classmethod
    def from_model(cls, link: LinkModel) -> "SimLink":
        """Single-rate link equivalent to a cost-model link (one stream suffices)."""
        return cls(link.rate_v, link.rate_v, link.startup_s, link.per_file_overhead, link.rtt)

    def setup_s(self, files: int) -> Fraction:
        return self.startup_s + files * self.per_file_overhead

    def ideal_throughput(self, cc: int) -> Fraction:
        return min(cc * self.per_stream_bps, self.aggregate_bps)


@dataclass
class LinkCounters:
    injected: Fraction = Fraction(0)
    delivered: Fraction = Fraction(0)
    dropped: Fraction = Fraction(0)


@dataclass
class _Stream:
    transfer: "_SimTransfer"
    sid: int
    file_index: int = -1
    length: int = 0
    progress: Fraction = Fraction(0)

    @property
    def remaining(self) -> Fraction:
        return self.length - self.progress


@dataclass
class _SimTransfer:
    report: TransferReport
    spec: TransferSpec
    key: SiteLink | None
    link: SimLink | None
    start_exact: Fraction
    ready_at: Fraction | None = None  # setup finished; streams start
    finish_at: Fraction | None = None  # fixed-duration transfers
    queue: collections.deque = field(default_factory=collections.deque)
    chunks_left: list[int] = field(default_factory=list)
    streams: list[_Stream] = field(default_factory=list)
    started: bool = False


def _ceil(t: Fraction) -> int:
    return math.ceil(t)


class SimulatedTransferService:
    """Transfers between endpoints placed at sites, timed on a virtual clock."""

    def __init__(
        self,
        clock: VirtualClock,
        links: Mapping[SiteLink, SimLink],
        endpoint_sites: Mapping[str, str] | None = None,
        *,
        symmetric: bool = True,
        id_factory: Callable[[], str] | None = None,
    ):
        if not clock.virtual:
            raise ValueError("the simulated transfer service needs a virtual clock")
        self.clock = clock
        self.links: dict[SiteLink, SimLink] = dict(links)
        if symmetric:
            for (a, b), link in list(self.links.items()):
                self.links.setdefault((b, a), link)
        self.endpoint_sites = dict(endpoint_sites) if endpoint_sites is not None else None
        self.counters: dict[SiteLink, LinkCounters] = {k: LinkCounters() for k in self.links}
        self._new_id = id_factory or (lambda: uuid.uuid4().hex)
        self._transfers: dict[str, _SimTransfer] = {}
        self._order: list[_SimTransfer] = []
        self._by_key: dict[str, str] = {}
        self._now = Fraction(clock.now_ns())
        self._timer: TimerHandle | None = None
        self._sid = itertools.count()

    # -- public surface -----------------------------------------------------

    def site_of(self, endpoint: str) -> str:
        if self.endpoint_sites is None:
            return endpoint
        try:
            return self.endpoint_sites[endpoint]
        except KeyError:
            raise UnknownEndpoint(f"unknown endpoint {endpoint!r}") from None

    def submit(self, spec: TransferSpec, idempotency_key: str | None = None) -> str:
        spec.validate()
        if idempotency_key is not None and idempotency_key in self._by_key:
            return self._by_key[idempotency_key]
        key = (self.site_of(spec.src_endpoint), self.site_of(spec.dst_endpoint))
        link = self.links.get(key)
        if spec.duration_s is None:
            if link is None:
                raise UnknownEndpoint(f"no link from site {key[0]!r} to {key[1]!r}")
            if spec.sizes is None:
                raise TransferSpecError("simulated transfers need file sizes (or a fixed duration_s)")
        self._sync()
        tid = self._new_id()
        now_ns = self.clock.now_ns()
        sizes = spec.sizes if spec.sizes is not None else (0,) * len(spec.paths)
        report = TransferReport(tid, spec.concurrency, submitted_ns=now_ns, start_ns=now_ns, idempotency_key=idempotency_key)
        report.files = [FileReport(s, d, bytes=n) for s, d, n in zip(spec.paths, spec.destinations, sizes)]
        t = _SimTransfer(report, spec, key if link else None, link, Fraction(now_ns))
        if spec.duration_s is not None:
            t.finish_at = t.start_exact + exact(spec.duration_s) * NS_PER_S
        elif not sizes:
            self._complete(t, t.start_exact)
        else:
            t.ready_at = t.start_exact + link.setup_s(len(sizes)) * NS_PER_S
            for i, n in enumerate(sizes):
                offsets = range(0, n, spec.chunk_bytes)
                t.chunks_left.append(len(offsets))
                t.queue.extend((i, min(spec.chunk_bytes, n - off)) for off in offsets)
        self._transfers[tid] = t
        self._order.append(t)
        if idempotency_key is not None:
            self._by_key[idempotency_key] = tid
        self._sync()
        return tid

    def status(self, transfer_id: str) -> TransferReport:
        t = self._get(transfer_id)
        self._sync()
        report = copy.deepcopy(t.report)
        for s in t.streams:
            if s.file_index >= 0:
                report.files[s.file_index].bytes_moved += int(s.progress)
        return report

    def cancel(self, transfer_id: str) -> TransferReport:
        t = self._get(transfer_id)
        self._sync()
        if not t.report.terminal:
            for s in t.streams:
                self._drop(s)
            t.streams.clear()
            t.queue.clear()
            for f in t.report.files:
                if f.state in (FileState.PENDING, FileState.ACTIVE):
                    f.state = FileState.PARTIAL
            t.report.outcome = TransferOutcome.CANCELLED
            t.report.end_ns = self.clock.now_ns()
            self._sync()
        return self.status(transfer_id)

    def kill_stream(self, link: SiteLink | None = None, pick: int = 0) -> bool:
        """Kill one in-flight chunk on *link* (any link if None); it is resent."""
        self._sync()
        victims = [s for t in self._order for s in t.streams if s.file_index >= 0 and (link is None or t.key == link)]
        if not victims:
            return False
        s = victims[pick % len(victims)]
        t = s.transfer
        t.report.files[s.file_index].retries += 1
        t.queue.appendleft((s.file_index, s.length))
        self._drop(s)
        s.file_index, s.length, s.progress = -1, 0, Fraction(0)
        self._assign(t, s)
        self._sync()
        return True

    def active(self) -> list[str]:
        return [t.report.transfer_id for t in self._order if not t.report.terminal]

    def in_flight(self, key: SiteLink) -> Fraction:
        return sum((s.progress for t in self._order if t.key == key for s in t.streams), Fraction(0))

    def conservation(self, key: SiteLink) -> tuple[Fraction, Fraction, Fraction, Fraction]:
        """``(injected, delivered, in_flight, dropped)`` for one directed link."""
        self._sync()
        c = self.counters[key]
        return c.injected, c.delivered, self.in_flight(key), c.dropped

    def _get(self, transfer_id: str) -> _SimTransfer:
        try:
            return self._transfers[transfer_id]
        except KeyError:
            raise TransferNotFound(transfer_id) from None

    # -- fluid model ----------------------------------------------------------

    def _rates(self) -> dict[SiteLink, Fraction]:
        active: collections.Counter[SiteLink] = collections.Counter()
        for t in self._order:
            for s in t.streams:
                if s.file_index >= 0:
                    active[t.key] += 1
        return {
            k: min(self.links[k].per_stream_bps, self.links[k].aggregate_bps / n) / NS_PER_S for k, n in active.items()
        }

    def _advance(self, until: Fraction) -> None:
        dt = until - self._now
        if dt > 0:
            rates = self._rates()
            for t in self._order:
                for s in t.streams:
                    if s.file_index >= 0:
                        moved = rates[t.key] * dt
                        s.progress += moved
                        self.counters[t.key].injected += moved
        self._now = max(self._now, until)

    def _next_event(self) -> Fraction | None:
        rates = self._rates()
        times = []
        for t in self._order:
            if t.report.terminal:
                continue
            if t.finish_at is not None:
                times.append(t.finish_at)
            if t.ready_at is not None and not t.started:
                times.append(t.ready_at)
            for s in t.streams:
                if s.file_index >= 0:
                    times.append(self._now + s.remaining / rates[t.key])
        return min(times) if times else None

    def _sync(self) -> None:
        """Process every internal event up to the clock's current instant."""
        horizon = Fraction(self.clock.now_ns())
        while (nxt := self._next_event()) is not None and nxt <= horizon:
            self._advance(nxt)
            self._fire(nxt)
        self._advance(horizon)
        self._reschedule()

    def _fire(self, now: Fraction) -> None:
        for t in list(self._order):
            if t.report.terminal:
                continue
            if t.finish_at is not None and t.finish_at <= now:
                self._complete(t, t.finish_at)
                continue
            if not t.started and t.ready_at is not None and t.ready_at <= now:
                t.started = True
                for i, n in enumerate(t.chunks_left):
                    if n == 0:
                        self._file_done(t, i, now)
                t.streams = [_Stream(t, next(self._sid)) for _ in range(min(t.report.concurrency, max(len(t.queue), 1)))]
                for s in t.streams:
                    self._assign(t, s)
            for s in t.streams:
                if s.file_index >= 0 and s.remaining == 0:
                    self.counters[t.key].delivered += s.length
                    f = t.report.files[s.file_index]
                    f.bytes_moved += s.length
                    t.chunks_left[s.file_index] -= 1
                    if t.chunks_left[s.file_index] == 0:
                        self._file_done(t, s.file_index, now)
                    s.file_index, s.length, s.progress = -1, 0, Fraction(0)
                    self._assign(t, s)
            if t.started and not t.queue and all(s.file_index < 0 for s in t.streams):
                self._complete(t, now)

    def _assign(self, t: _SimTransfer, s: _Stream) -> None:
        if t.queue:
            s.file_index, s.length = t.queue.popleft()
            s.progress = Fraction(0)
            f = t.report.files[s.file_index]
            if f.start_ns is None:
                f.start_ns = _ceil(self._now)
                f.state = FileState.ACTIVE

    def _drop(self, s: _Stream) -> None:
        if s.file_index >= 0:
            self.counters[s.transfer.key].dropped += s.progress

    def _file_done(self, t: _SimTransfer, index: int, now: Fraction) -> None:
        f = t.report.files[index]
        f.end_ns = _ceil(now)
        if f.start_ns is None:
            f.start_ns = f.end_ns
        f.state = FileState.DONE

    def _complete(self, t: _SimTransfer, at: Fraction) -> None:
        end = _ceil(at)
        for f in t.report.files:
            if f.state is not FileState.DONE:
                f.start_ns = _ceil(t.start_exact) if f.start_ns is None else f.start_ns
                f.end_ns = end
                f.bytes_moved = max(f.bytes_moved, f.bytes)
                f.state = FileState.DONE
        t.streams.clear()
        t.report.outcome = TransferOutcome.SUCCEEDED
        t.report.end_ns = end

    def _reschedule(self) -> None:
        nxt = self._next_event()
        when = _ceil(nxt) if nxt is not None else None
        if self._timer is not None and not self._timer.cancelled and self._timer.t_ns == when:
            return
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        if when is not None:
            self._timer = self.clock.call_at(max(when, self.clock.now_ns()), self._sync)


def benchmark(
    link: SimLink,
    cc_values: Iterable[int],
    *,
    files: int = 8,
    file_bytes: int = 128 * 1024 * 1024,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
) -> list[BenchRow]:
    """Throughput per concurrency level, each on a private virtual clock."""
    cc_values = list(cc_values)
    if not cc_values:
        raise ValueError("cc_values must be non-empty")
    rows = []
    for cc in cc_values:
        clock = VirtualClock()
        service = SimulatedTransferService(clock, {("a", "b"): link}, id_factory=lambda: "bench")
        paths = tuple(f"payload-{i:03d}" for i in range(files))
        spec = TransferSpec("a", paths, "b", cc=cc, chunk_bytes=chunk_bytes, sizes=(file_bytes,) * files)
        tid = service.submit(spec)
        clock.run()
        rows.append(bench_row(service.status(tid)))
    return rows


def ideal_rows(link: SimLink, cc_values: Sequence[int]) -> dict[int, float]:
    return {cc: float(link.ideal_throughput(cc)) for cc in cc_values}


_LINK_KEYS = {"between", "per_stream_bps", "aggregate_bps", "rate_bps", "startup_s", "per_file_overhead", "rtt", "symmetric"}


def link_from_doc(doc: Mapping[str, object]) -> tuple[SiteLink, SimLink, bool]:
    """``{"between": [a, b], "per_stream_bps", "aggregate_bps" | "rate_bps", ...}``.

    ``rate_bps`` sets both caps. Without ``startup_s`` the one-way latency
    ``rtt / 2`` is used as the per-transfer startup.
    """
    extra = set(doc) - _LINK_KEYS
    if extra:
        raise ValueError(f"unknown link field {sorted(extra)[0]!r}")
    between = doc.get("between")
    if not isinstance(between, (list, tuple)) or len(between) != 2 or not all(isinstance(s, str) for s in between):
        raise ValueError("link 'between' must name two sites")
    rate = doc.get("rate_bps")
    per_stream = doc.get("per_stream_bps", rate)
    aggregate = doc.get("aggregate_bps", rate if rate is not None else per_stream)
    if per_stream is None or aggregate is None:
        raise ValueError("link needs rate_bps or per_stream_bps/aggregate_bps")
    rtt = exact(doc.get("rtt", 0))
    startup = doc.get("startup_s")
    link = SimLink(
        per_stream_bps=exact(per_stream),
        aggregate_bps=exact(aggregate),
        startup_s=exact(startup) if startup is not None else rtt / 2,
        per_file_overhead=exact(doc.get("per_file_overhead", 0)),
        rtt=rtt,
    )
    return (between[0], between[1]), link, bool(doc.get("symmetric", True))
