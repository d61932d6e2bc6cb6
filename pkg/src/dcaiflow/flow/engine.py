"""Orchestration runtime: drives flow states through providers.

Every state change is appended to the run's log *before* it is applied in
memory, and the in-memory record is rebuilt from the same records on
recovery, so a restarted engine resumes exactly where the log ends. Each
attempt carries an idempotency key ``<run>/<state>/<attempt>``; providers
deduplicate on it, which makes re-dispatch after a crash safe.
"""

from __future__ import annotations

import copy
import enum
import logging
import threading
import uuid
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol

from dcaiflow.flow.definition import ActionKind, ActionSpec, FlowDefinition, flow_from_doc, render
from dcaiflow.flow.store import RunStore, SimulatedCrash
from dcaiflow.timebase import Clock, WallClock, s_to_ns

log = logging.getLogger(__name__)


class ActionState(enum.Enum):
    PENDING = "Pending"
    DISPATCHED = "Dispatched"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    CANCELLED = "Cancelled"


class RunStatus(enum.Enum):
    ACTIVE = "Active"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    CANCELLED = "Cancelled"


S = ActionState
LEGAL_TRANSITIONS = frozenset(
    {
        (None, S.PENDING),
        (S.PENDING, S.DISPATCHED),
        (S.DISPATCHED, S.RUNNING),
        (S.DISPATCHED, S.FAILED),  # provider unreachable at dispatch
        (S.RUNNING, S.SUCCEEDED),
        (S.RUNNING, S.FAILED),
        (S.RUNNING, S.CANCELLED),
        (S.PENDING, S.CANCELLED),
        (S.DISPATCHED, S.CANCELLED),
        (S.FAILED, S.DISPATCHED),  # retry; only while attempts < max_retries
    }
)
FINAL_ACTION_STATES = (S.SUCCEEDED, S.FAILED, S.CANCELLED)


class EngineError(Exception):
    pass


class RunNotFound(EngineError, KeyError):
    pass


class MissingInput(EngineError, ValueError):
    pass


class UnknownProvider(EngineError, ValueError):
    pass


class EngineDeadlock(EngineError, RuntimeError):
    pass


class ProviderUnavailable(Exception):
    """The provider could not be reached; treated as a retriable failure."""


@dataclass
class ProviderStatus:
    state: str  # "active" | "succeeded" | "failed"
    output: dict[str, Any] | None = None
    error: str | None = None


class ActionProvider(Protocol):
    def dispatch(self, kind: ActionKind, params: Mapping[str, Any], idempotency_key: str) -> str: ...

    def poll(self, handle: str) -> ProviderStatus: ...

    def cancel(self, handle: str) -> None: ...


@dataclass
class ActionLog:
    state: str
    attempt: int
    kind: str
    role: str | None
    idempotency_key: str
    action_state: ActionState = ActionState.PENDING
    start_ns: int | None = None
    end_ns: int | None = None
    handle: str | None = None
    output: dict[str, Any] | None = None
    error: str | None = None
    history: list[tuple[str | None, str, int]] = field(default_factory=list)

    @property
    def duration_ns(self) -> int:
        if self.start_ns is None or self.end_ns is None:
            return 0
        return self.end_ns - self.start_ns


@dataclass
class DelayLog:
    after: str | None
    reason: str
    ns: int


@dataclass
class RunRecord:
    run_id: str
    flow_id: str
    input: dict[str, Any]
    created_ns: int
    idempotency_key: str | None = None
    status: RunStatus = RunStatus.ACTIVE
    ended_ns: int | None = None
    actions: list[ActionLog] = field(default_factory=list)
    delays: list[DelayLog] = field(default_factory=list)
    outputs: dict[str, Any] = field(default_factory=dict)
    current: str | RunStatus = ""
    cancel_requested: bool = False

    @property
    def terminal(self) -> bool:
        return self.status is not RunStatus.ACTIVE

    @property
    def end_to_end_ns(self) -> int | None:
        if self.ended_ns is None:
            return None
        return self.ended_ns - self.created_ns

    def attempts(self, state: str) -> list[ActionLog]:
        return [a for a in self.actions if a.state == state]

    def seconds_by_role(self) -> dict[str, int]:
        """Attempt durations (ns) summed per role label."""
        out: dict[str, int] = {}
        for a in self.actions:
            if a.role:
                out[a.role] = out.get(a.role, 0) + a.duration_ns
        return out

    def failed_state(self) -> str | None:
        for a in reversed(self.actions):
            if a.action_state is ActionState.FAILED:
                return a.state
        return None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["status"] = self.status.value
        d["current"] = self.current.value if isinstance(self.current, RunStatus) else self.current
        for a in d["actions"]:
            a["action_state"] = a["action_state"].value
        d["end_to_end_ns"] = self.end_to_end_ns
        return d


@dataclass(frozen=True)
class CancelAck:
    run_id: str
    status: RunStatus
    noop: bool


def _successor(spec: ActionSpec, output: Mapping[str, Any] | None) -> str | RunStatus:
    if spec.kind is ActionKind.CHOICE:
        return output["branch"]
    return spec.next if spec.next is not None else RunStatus.SUCCEEDED


class _Run:
    def __init__(self, record: RunRecord, flow: FlowDefinition):
        self.record = record
        self.flow = flow
        self.lock = threading.RLock()
        self.seq = 0
        self.wake_at: int | None = None
        self.delayed_to = 0  # time up to which gaps are already logged as delays


class Engine:
    def __init__(
        self,
        providers: Mapping[str, ActionProvider],
        store: RunStore | None = None,
        clock: Clock | None = None,
        *,
        orchestration_overhead_ns: int = 0,
        id_factory: Callable[[], str] | None = None,
    ):
        self.providers = dict(providers)
        self.store = store if store is not None else RunStore()
        self.clock = clock if clock is not None else WallClock()
        self.orchestration_overhead_ns = orchestration_overhead_ns
        self._new_id = id_factory or (lambda: uuid.uuid4().hex)
        self._runs: dict[str, _Run] = {}
        self._by_key: dict[str, str] = {}
        self._lock = threading.RLock()

    # -- persistence --------------------------------------------------------

    def _emit(self, run: _Run, record: dict[str, Any], t_ns: int | None = None) -> None:
        t_ns = self.clock.now_ns() if t_ns is None else t_ns
        record = {"run_id": run.record.run_id, "seq": run.seq, "t_ns": t_ns, **record}
        self.store.append(run.record.run_id, record)
        self._apply(run, record)

    def _apply(self, run: _Run, r: dict[str, Any]) -> None:
        rec = run.record
        run.seq = r["seq"] + 1
        event = r["event"]
        if event == "transition":
            spec = run.flow.states[r["state"]]
            entry = next((a for a in rec.actions if a.state == r["state"] and a.attempt == r["attempt"]), None)
            if entry is None:
                entry = ActionLog(r["state"], r["attempt"], spec.kind.value, spec.role, r["idempotency_key"])
                rec.actions.append(entry)
            to = ActionState(r["to"])
            entry.history.append((r["from"], r["to"], r["t_ns"]))
            entry.action_state = to
            if to is S.DISPATCHED:
                entry.start_ns = r["t_ns"]
            if "handle" in r:
                entry.handle = r["handle"]
            if to in FINAL_ACTION_STATES:
                entry.end_ns = r["t_ns"]
                entry.output = r.get("output")
                entry.error = r.get("error")
                if entry.start_ns is None:
                    entry.start_ns = r["t_ns"]
            if to is S.SUCCEEDED:
                rec.outputs[r["state"]] = entry.output
                rec.current = _successor(spec, entry.output)
            elif to is S.FAILED and entry.attempt >= spec.max_retries:
                rec.current = spec.on_failure if spec.on_failure is not None else RunStatus.FAILED
        elif event == "delay":
            rec.delays.append(DelayLog(r["after"], r["reason"], r["ns"]))
            run.delayed_to = r["t_ns"]
        elif event == "cancel_requested":
            rec.cancel_requested = True
        elif event == "run_finished":
            rec.status = RunStatus(r["status"])
            rec.ended_ns = r["ended_ns"]
        elif event != "run_created":
            raise EngineError(f"unknown log event {event!r}")

    def recover(self) -> list[str]:
        """Rebuild every run found in the store; returns the run ids."""
        recovered = []
        for run_id in self.store.run_ids():
            records = self.store.read(run_id)
            if not records or records[0]["event"] != "run_created":
                log.warning("skipping malformed run log %s", run_id)
                continue
            head = records[0]
            flow = flow_from_doc(head["flow"])
            rec = RunRecord(run_id, head["flow_id"], head["input"], head["t_ns"], head.get("idempotency_key"), current=flow.start)
            run = _Run(rec, flow)
            for r in records:
                self._apply(run, r)
            with self._lock:
                self._runs[run_id] = run
                if rec.idempotency_key:
                    self._by_key[rec.idempotency_key] = run_id
            recovered.append(run_id)
        return recovered

    # -- control surface ----------------------------------------------------

    def start_run(self, flow: FlowDefinition, inputs: Mapping[str, Any], idempotency_key: str | None = None) -> str:
        with self._lock:
            if idempotency_key is not None and idempotency_key in self._by_key:
                return self._by_key[idempotency_key]
            missing = sorted(flow.input_keys() - set(inputs))
            if missing:
                raise MissingInput(f"input document lacks {', '.join(missing)}")
            for name in flow.reachable():
                spec = flow.states[name]
                if spec.provider is not None and spec.provider not in self.providers:
                    raise UnknownProvider(f"state {name!r} names unknown provider {spec.provider!r}")
            run_id = self._new_id()
            now = self.clock.now_ns()
            rec = RunRecord(run_id, flow.flow_id, dict(inputs), now, idempotency_key, current=flow.start)
            run = _Run(rec, flow)
            self._runs[run_id] = run
            if idempotency_key is not None:
                self._by_key[idempotency_key] = run_id
            self._emit(
                run,
                {
                    "event": "run_created",
                    "flow_id": flow.flow_id,
                    "flow": dict(flow.document),
                    "input": dict(inputs),
                    "idempotency_key": idempotency_key,
                },
                now,
            )
            return run_id

    def _run(self, run_id: str) -> _Run:
        with self._lock:
            try:
                return self._runs[run_id]
            except KeyError:
                raise RunNotFound(run_id) from None

    def get_status(self, run_id: str) -> RunRecord:
        run = self._run(run_id)
        with run.lock:
            return copy.deepcopy(run.record)

    def list_runs(self) -> list[str]:
        with self._lock:
            return list(self._runs)

    def active_runs(self) -> list[str]:
        with self._lock:
            return [rid for rid, r in self._runs.items() if not r.record.terminal]

    def cancel(self, run_id: str) -> CancelAck:
        run = self._run(run_id)
        with run.lock:
            if run.record.terminal:
                return CancelAck(run_id, run.record.status, noop=True)
            self._emit(run, {"event": "cancel_requested"})
            self._apply_cancel(run)
            return CancelAck(run_id, run.record.status, noop=False)

    def _apply_cancel(self, run: _Run) -> None:
        rec = run.record
        for entry in rec.actions:
            if entry.action_state in (S.PENDING, S.DISPATCHED, S.RUNNING):
                spec = run.flow.states[entry.state]
                if entry.handle is not None and spec.provider is not None:
                    try:
                        self.providers[spec.provider].cancel(entry.handle)
                    except Exception as exc:  # best effort
                        log.warning("cancel of %s failed: %s", entry.handle, exc)
                self._transition(run, entry.state, entry.attempt, entry.action_state, S.CANCELLED, spec)
        self._finish(run, RunStatus.CANCELLED)

    # -- stepping -------------------------------------------------------------

    def advance(self, run_id: str) -> RunRecord:
        """Make all progress possible at the current instant."""
        run = self._run(run_id)
        with run.lock:
            if not run.record.terminal:
                if run.record.cancel_requested:
                    self._apply_cancel(run)
                else:
                    while not run.record.terminal and self._step(run):
                        pass
            return copy.deepcopy(run.record)

    def _transition(
        self, run: _Run, state: str, attempt: int, frm: ActionState | None, to: ActionState, spec: ActionSpec, t_ns: int | None = None, **extra: Any
    ) -> None:
        rec = {
            "event": "transition",
            "state": state,
            "attempt": attempt,
            "from": frm.value if frm is not None else None,
            "to": to.value,
            "idempotency_key": f"{run.record.run_id}/{state}/{attempt}",
        }
        rec.update({k: v for k, v in extra.items() if v is not None})
        self._emit(run, rec, t_ns)

    def _finish(self, run: _Run, status: RunStatus) -> None:
        self._emit(run, {"event": "run_finished", "status": status.value, "ended_ns": self._last_mark(run.record)})

    def _last_mark(self, rec: RunRecord) -> int:
        ends = [a.end_ns for a in rec.actions if a.end_ns is not None]
        return max(ends) if ends else rec.created_ns

    def _not_before(self, run: _Run, spec: ActionSpec, attempts: list[ActionLog]) -> int:
        mark = self._last_mark(run.record)
        if attempts:
            return mark + s_to_ns(spec.retry_backoff) * 2 ** (len(attempts) - 1)
        return mark + self.orchestration_overhead_ns

    def _step(self, run: _Run) -> bool:
        rec = run.record
        if isinstance(rec.current, RunStatus):
            self._finish(run, rec.current)
            return False
        name = rec.current
        spec = run.flow.states[name]
        if spec.kind is ActionKind.SUCCEED:
            self._finish(run, RunStatus.SUCCEEDED)
            return False
        if spec.kind is ActionKind.FAIL:
            self._finish(run, RunStatus.FAILED)
            return False

        attempts = rec.attempts(name)
        last = attempts[-1] if attempts else None
        now = self.clock.now_ns()

        if last is None or last.action_state is S.FAILED:
            not_before = self._not_before(run, spec, attempts)
            if now < not_before:
                if self.clock.virtual and run.wake_at != not_before:
                    run.wake_at = not_before
                    self.clock.call_at(not_before, lambda: None)
                return False
            # the delay and the dispatch share one timestamp so no time slips between them
            reason = "backoff" if attempts else "orchestration"
            self._log_gap(run, now, reason)
            if last is None:
                self._transition(run, name, 1, None, S.PENDING, spec, now)
                attempt, frm = 1, S.PENDING
            else:
                attempt, frm = last.attempt + 1, S.FAILED
            self._transition(run, name, attempt, frm, S.DISPATCHED, spec, now)
            return self._dispatch(run, spec, attempt)

        if last.action_state in (S.PENDING, S.DISPATCHED):
            # Recovered mid-dispatch: repeat with the same key; the provider dedups.
            if last.action_state is S.PENDING:
                self._log_gap(run, now, "recovery")
                self._transition(run, name, last.attempt, S.PENDING, S.DISPATCHED, spec, now)
            return self._dispatch(run, spec, last.attempt)

        if last.action_state is S.RUNNING:
            return self._poll(run, spec, last)

        return False

    def _log_gap(self, run: _Run, now: int, reason: str) -> None:
        gap = now - max(self._last_mark(run.record), run.delayed_to)
        if gap > 0:
            attempts = [a for a in run.record.actions if a.end_ns is not None]
            after = attempts[-1].state if attempts else None
            self._emit(run, {"event": "delay", "after": after, "reason": reason, "ns": gap}, now)

    def _dispatch(self, run: _Run, spec: ActionSpec, attempt: int) -> bool:
        rec = run.record
        key = f"{rec.run_id}/{spec.name}/{attempt}"
        if spec.kind is ActionKind.CHOICE:
            try:
                branch = spec.choice.evaluate(rec.outputs)
            except (LookupError, TypeError) as exc:
                self._transition(run, spec.name, attempt, S.DISPATCHED, S.FAILED, spec, error=str(exc))
                return True
            self._transition(run, spec.name, attempt, S.DISPATCHED, S.RUNNING, spec)
            self._transition(run, spec.name, attempt, S.RUNNING, S.SUCCEEDED, spec, output={"branch": branch})
            return True
        provider = self.providers[spec.provider]
        try:
            params = render(spec.params, rec.input)
            handle = provider.dispatch(spec.kind, params, key)
        except SimulatedCrash:
            raise
        except Exception as exc:
            self._transition(run, spec.name, attempt, S.DISPATCHED, S.FAILED, spec, error=f"dispatch: {exc}")
            return True
        self._transition(run, spec.name, attempt, S.DISPATCHED, S.RUNNING, spec, handle=handle)
        return True

    def _poll(self, run: _Run, spec: ActionSpec, entry: ActionLog) -> bool:
        try:
            status = self.providers[spec.provider].poll(entry.handle)
        except SimulatedCrash:
            raise
        except Exception as exc:
            status = ProviderStatus("failed", error=f"poll: {exc}")
        if status.state == "active":
            return False
        if status.state == "succeeded":
            self._transition(run, spec.name, entry.attempt, S.RUNNING, S.SUCCEEDED, spec, output=status.output or {})
        else:
            self._transition(run, spec.name, entry.attempt, S.RUNNING, S.FAILED, spec, error=status.error or status.state)
        return True

    # -- drivers ----------------------------------------------------------------

    def run_to_completion(self, run_id: str, *, max_idle: int | None = None) -> RunRecord:
        """Advance until terminal; with a virtual clock, deadlock is an error."""
        idles = 0
        while True:
            rec = self.advance(run_id)
            if rec.terminal:
                return rec
            if not self.clock.idle():
                raise EngineDeadlock(f"run {run_id} is stuck at {rec.current!r} with no pending events")
            idles += 1
            if max_idle is not None and idles > max_idle:
                raise TimeoutError(f"run {run_id} did not finish")

    def run_all(self, run_ids: Iterable[str] | None = None) -> list[RunRecord]:
        ids = list(run_ids) if run_ids is not None else self.list_runs()
        while True:
            records = [self.advance(rid) for rid in ids]
            if all(r.terminal for r in records):
                return records
            if not self.clock.idle():
                stuck = {r.run_id: r.current for r in records if not r.terminal}
                raise EngineDeadlock(f"no pending events but runs are active: {stuck}")

    def drive_forever(self, stop: threading.Event, poll_interval_s: float = 0.05) -> None:
        while not stop.is_set():
            for rid in self.active_runs():
                try:
                    self.advance(rid)
                except Exception:
                    log.exception("advancing run %s", rid)
            stop.wait(poll_interval_s)
