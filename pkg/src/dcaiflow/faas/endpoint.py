"""A function-serving endpoint: register bodies, invoke, poll.

Bodies are either an external command template or a simulated duration.
Command templates are split with shell rules first and each token is then
filled with ``str.format``, so an argument can never inject extra tokens.
At most ``capacity`` tasks run at once; the rest wait in FIFO order.
"""

from __future__ import annotations

import collections
import copy
import enum
import json
import logging
import os
import shlex
import string
import subprocess
import tempfile
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from dcaiflow.timebase import Clock, TimerHandle, WallClock, s_to_ns

log = logging.getLogger(__name__)

OUTPUT_LIMIT = 64 * 1024
STREAM_TAIL = 4 * 1024


class EndpointError(Exception):
    pass


class RegistrationError(EndpointError, ValueError):
    pass


class InvocationError(EndpointError, ValueError):
    pass


class FunctionNotFound(EndpointError, KeyError):
    pass


class TaskNotFound(EndpointError, KeyError):
    pass


class EndpointUnavailable(EndpointError, ConnectionError):
    pass


class TaskState(enum.Enum):
    QUEUED = "Queued"
    RUNNING = "Running"
    DONE = "Done"
    ERROR = "Error"


@dataclass(frozen=True)
class FunctionBody:
    command: str | None = None
    cwd: str | None = None
    duration_ns: int | None = None
    outputs: tuple[str, ...] = ()
    result: Mapping[str, Any] | None = None
    timeout_s: float | None = None

    @classmethod
    def simulated(cls, seconds: float | int | str, result: Mapping[str, Any] | None = None) -> "FunctionBody":
        return cls(duration_ns=s_to_ns(seconds), result=result)

    def placeholders(self) -> set[str]:
        if self.command is None:
            return set()
        names: set[str] = set()
        for token in [*shlex.split(self.command), *self.outputs]:
            names |= _fields(token)
        return names

    def validate(self) -> None:
        if (self.command is None) == (self.duration_ns is None):
            raise RegistrationError("a body is either a command or a simulated duration")
        if self.duration_ns is not None:
            if isinstance(self.duration_ns, bool) or not isinstance(self.duration_ns, int) or self.duration_ns < 0:
                raise RegistrationError("simulated duration must be a non-negative integer of ns")
            return
        try:
            argv = shlex.split(self.command)
        except ValueError as exc:
            raise RegistrationError(f"command does not parse: {exc}") from None
        if not argv:
            raise RegistrationError("empty command")
        for token in [*argv, *self.outputs]:
            _fields(token)

    def to_doc(self) -> dict[str, Any]:
        d = {k: v for k, v in asdict(self).items() if v not in (None, ())}
        if self.outputs:
            d["outputs"] = list(self.outputs)
        return d

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "FunctionBody":
        allowed = {"command", "cwd", "duration_ns", "duration_s", "outputs", "result", "timeout_s"}
        extra = set(doc) - allowed - {"name"}
        if extra:
            raise RegistrationError(f"unknown body field {sorted(extra)[0]!r}")
        duration = doc.get("duration_ns")
        if "duration_s" in doc:
            if duration is not None:
                raise RegistrationError("give duration_s or duration_ns, not both")
            duration = s_to_ns(doc["duration_s"])
        outputs = doc.get("outputs", ())
        if isinstance(outputs, str) or not all(isinstance(o, str) for o in outputs):
            raise RegistrationError("outputs must be a list of paths")
        body = cls(
            command=doc.get("command"),
            cwd=doc.get("cwd"),
            duration_ns=duration,
            outputs=tuple(outputs),
            result=doc.get("result"),
            timeout_s=doc.get("timeout_s"),
        )
        body.validate()
        return body


def _fields(token: str) -> set[str]:
    names = set()
    try:
        parsed = list(string.Formatter().parse(token))
    except ValueError as exc:
        raise RegistrationError(f"malformed template {token!r}: {exc}") from None
    for _, name, _, _ in parsed:
        if name is None:
            continue
        if not name.isidentifier():
            raise RegistrationError(f"placeholder {{{name}}} must be a plain name")
        names.add(name)
    return names


@dataclass(frozen=True)
class FunctionRegistration:
    function_id: str
    body: FunctionBody
    name: str | None = None


@dataclass
class TaskRecord:
    task_id: str
    function_id: str
    args: dict[str, Any]
    state: TaskState = TaskState.QUEUED
    idempotency_key: str | None = None
    queued_ns: int = 0
    start_ns: int | None = None
    end_ns: int | None = None
    exit_code: int | None = None
    error: str | None = None
    output: dict[str, Any] | None = None

    @property
    def duration_ns(self) -> int | None:
        if self.start_ns is None or self.end_ns is None:
            return None
        return self.end_ns - self.start_ns

    def to_doc(self) -> dict[str, Any]:
        d = asdict(self)
        d["state"] = self.state.value
        d["duration_ns"] = self.duration_ns
        return d


@dataclass(frozen=True)
class EndpointInfo:
    endpoint_id: str
    capacity: int
    mode: str
    site: str


@dataclass(frozen=True)
class CapacityReport:
    info: EndpointInfo
    running: int
    queued: int

    def to_doc(self) -> dict[str, Any]:
        return {**asdict(self.info), "running": self.running, "queued": self.queued}


@dataclass(frozen=True)
class TaskEvent:
    t_ns: int
    task_id: str
    frm: str | None
    to: str


def _tail(text: bytes) -> str:
    return text[-STREAM_TAIL:].decode("utf-8", errors="replace")


def _last_json(stdout: bytes) -> Any:
    lines = [ln for ln in stdout.decode("utf-8", errors="replace").splitlines() if ln.strip()]
    if not lines:
        return None
    try:
        return json.loads(lines[-1])
    except json.JSONDecodeError:
        return None


def cap_document(doc: dict[str, Any], limit: int = OUTPUT_LIMIT) -> dict[str, Any]:
    """Drop the bulkiest fields until the encoded document fits in *limit*."""
    def size(d: dict[str, Any]) -> int:
        return len(json.dumps(d, sort_keys=True).encode())

    if size(doc) <= limit:
        return doc
    doc = dict(doc, truncated=True)
    for key in ("result", "stdout", "stderr", "outputs"):
        if key in doc:
            doc.pop(key)
            if size(doc) <= limit:
                break
    return doc


class FunctionEndpoint:
    """An endpoint with a persistent function registry and a FIFO task queue.

    With a :class:`~dcaiflow.timebase.VirtualClock` the endpoint is in
    simulated mode: bodies are simulated durations and an invocation costs no
    virtual time. With a wall clock, command bodies run as subprocesses on a
    pool of ``capacity`` threads.
    """

    def __init__(
        self,
        endpoint_id: str = "endpoint",
        *,
        site: str = "dc",
        capacity: int = 1,
        clock: Clock | None = None,
        registry_path: str | Path | None = None,
        id_factory: Callable[[], str] | None = None,
        mode: str | None = None,
        listener: Callable[[TaskEvent], None] | None = None,
    ):
        if isinstance(capacity, bool) or not isinstance(capacity, int) or capacity < 1:
            raise ValueError("capacity W must be an integer >= 1")
        self.clock = clock if clock is not None else WallClock()
        mode = mode or ("simulated" if self.clock.virtual else "real")
        if mode not in ("real", "simulated") or (mode == "real" and self.clock.virtual):
            raise ValueError(f"mode must be 'real' (wall clock) or 'simulated', not {mode!r}")
        self.info = EndpointInfo(endpoint_id, capacity, mode, site)
        self.registry_path = Path(registry_path) if registry_path is not None else None
        self._new_id = id_factory or (lambda: str(uuid.uuid4()))
        self._lock = threading.RLock()
        self._functions: dict[str, FunctionRegistration] = {}
        self._tasks: dict[str, TaskRecord] = {}
        self._by_key: dict[str, str] = {}
        self._queue: collections.deque[str] = collections.deque()
        self._running: set[str] = set()
        self._timers: dict[str, TimerHandle] = {}
        self._generation: dict[str, int] = {}
        self._down_until: int | None = None
        self.events: list[TaskEvent] = []
        self.listener = listener
        self._pool: ThreadPoolExecutor | None = None
        if self.registry_path is not None and self.registry_path.exists():
            self._load_registry()

    # -- registry -----------------------------------------------------------

    def _load_registry(self) -> None:
        doc = json.loads(self.registry_path.read_text())
        for item in doc.get("functions", []):
            body = FunctionBody.from_doc(item["body"])
            self._functions[item["function_id"]] = FunctionRegistration(item["function_id"], body, item.get("name"))

    def _save_registry(self) -> None:
        if self.registry_path is None:
            return
        doc = {
            "functions": [
                {"function_id": r.function_id, "name": r.name, "body": r.body.to_doc()} for r in self._functions.values()
            ]
        }
        self.registry_path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.registry_path.parent, prefix=".registry-")
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
        os.replace(tmp, self.registry_path)

    def register(self, body: FunctionBody | Mapping[str, Any], name: str | None = None) -> str:
        if not isinstance(body, FunctionBody):
            name = name or body.get("name")
            body = FunctionBody.from_doc(body)
        body.validate()
        with self._lock:
            fid = self._new_id()
            self._functions[fid] = FunctionRegistration(fid, body, name)
            self._save_registry()
            return fid

    def functions(self) -> list[FunctionRegistration]:
        with self._lock:
            return list(self._functions.values())

    def resolve(self, ref: str) -> str:
        """Map a function id or registered name to an id (latest name wins)."""
        with self._lock:
            if ref in self._functions:
                return ref
            named = [r.function_id for r in self._functions.values() if r.name == ref]
            if named:
                return named[-1]
        raise FunctionNotFound(ref)

    # -- tasks ----------------------------------------------------------------

    def _check_up(self) -> None:
        if self._down_until is not None:
            if self.clock.now_ns() < self._down_until:
                raise EndpointUnavailable(f"endpoint {self.info.endpoint_id} is down")
            self._down_until = None

    def invoke(self, function_id: str, args: Mapping[str, Any] | None = None, idempotency_key: str | None = None) -> str:
        args = dict(args or {})
        with self._lock:
            self._check_up()
            if idempotency_key is not None and idempotency_key in self._by_key:
                return self._by_key[idempotency_key]
            fid = self.resolve(function_id)
            body = self._functions[fid].body
            missing = sorted(body.placeholders() - set(args))
            if missing:
                raise InvocationError(f"arguments lack placeholder(s): {', '.join(missing)}")
            if body.command is not None and self.info.mode == "simulated":
                raise InvocationError("command bodies need a real-mode endpoint")
            tid = self._new_id()
            self._tasks[tid] = TaskRecord(tid, fid, args, idempotency_key=idempotency_key, queued_ns=self.clock.now_ns())
            if idempotency_key is not None:
                self._by_key[idempotency_key] = tid
            self._event(tid, None, TaskState.QUEUED)
            self._queue.append(tid)
            self._pump()
            return tid

    def poll(self, task_id: str) -> TaskRecord:
        with self._lock:
            self._check_up()
            try:
                return copy.deepcopy(self._tasks[task_id])
            except KeyError:
                raise TaskNotFound(task_id) from None

    def purge(self, task_id: str) -> None:
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                raise TaskNotFound(task_id)
            if task.state in (TaskState.QUEUED, TaskState.RUNNING):
                raise EndpointError("cannot purge an unfinished task")
            del self._tasks[task_id]

    def capacity_report(self) -> CapacityReport:
        with self._lock:
            return CapacityReport(self.info, len(self._running), len(self._queue))

    def _event(self, tid: str, frm: TaskState | None, to: TaskState) -> None:
        event = TaskEvent(self.clock.now_ns(), tid, frm.value if frm else None, to.value)
        self.events.append(event)
        if self.listener is not None:
            self.listener(event)

    def _pump(self) -> None:
        while self._queue and len(self._running) < self.info.capacity:
            tid = self._queue.popleft()
            task = self._tasks[tid]
            task.state = TaskState.RUNNING
            task.start_ns = self.clock.now_ns()
            self._running.add(tid)
            self._event(tid, TaskState.QUEUED, TaskState.RUNNING)
            gen = self._generation[tid] = self._generation.get(tid, 0) + 1
            body = self._functions[task.function_id].body
            if body.duration_ns is not None:
                output = {"duration_ns": body.duration_ns}
                if body.result is not None:
                    output["result"] = copy.deepcopy(dict(body.result))
                self._timers[tid] = self.clock.call_later(
                    body.duration_ns, lambda tid=tid, gen=gen, out=output: self._complete(tid, gen, 0, None, out)
                )
            else:
                if self._pool is None:
                    self._pool = ThreadPoolExecutor(self.info.capacity, thread_name_prefix=f"fn-{self.info.endpoint_id}")
                self._pool.submit(self._execute, tid, gen, body, dict(task.args))

    def _execute(self, tid: str, gen: int, body: FunctionBody, args: dict[str, Any]) -> None:
        try:
            argv = [tok.format(**args) for tok in shlex.split(body.command)]
            cwd = body.cwd.format(**args) if body.cwd else None
            proc = subprocess.run(argv, cwd=cwd, capture_output=True, timeout=body.timeout_s)
        except subprocess.TimeoutExpired:
            self._complete(tid, gen, None, f"timed out after {body.timeout_s} s", None)
            return
        except (OSError, KeyError, IndexError, ValueError) as exc:
            self._complete(tid, gen, None, f"could not start: {exc}", None)
            return
        base = Path(cwd) if cwd else Path.cwd()
        outputs = [str(base / o.format(**args)) for o in body.outputs]
        doc: dict[str, Any] = {
            "exit_code": proc.returncode,
            "stdout": _tail(proc.stdout),
            "stderr": _tail(proc.stderr),
            "outputs": outputs,
        }
        result = _last_json(proc.stdout)
        if result is not None:
            doc["result"] = result
        doc = cap_document(doc)
        error = None
        if proc.returncode != 0:
            error = f"exit code {proc.returncode}"
        else:
            missing = [o for o in outputs if not Path(o).exists()]
            if missing:
                error = f"declared output missing: {missing[0]}"
        self._complete(tid, gen, proc.returncode, error, doc)

    def _complete(self, tid: str, gen: int, exit_code: int | None, error: str | None, output: dict[str, Any] | None) -> None:
        with self._lock:
            task = self._tasks.get(tid)
            if task is None or task.state is not TaskState.RUNNING or self._generation.get(tid) != gen:
                return  # superseded by a crash
            task.end_ns = self.clock.now_ns()
            task.exit_code = exit_code
            task.output = output
            task.error = error
            task.state = TaskState.ERROR if error else TaskState.DONE
            self._running.discard(tid)
            self._timers.pop(tid, None)
            self._event(tid, TaskState.RUNNING, task.state)
            self._pump()

    # -- faults and lifecycle ---------------------------------------------------

    def crash(self, down_ns: int = 0) -> None:
        """Lose every queued and running task; refuse requests for *down_ns*."""
        with self._lock:
            now = self.clock.now_ns()
            for tid in [*self._running, *self._queue]:
                task = self._tasks[tid]
                frm = task.state
                if frm is TaskState.RUNNING:
                    self._event(tid, frm, TaskState.ERROR)
                else:
                    # Queued tasks never ran; record a zero-length run so the log stays legal.
                    task.start_ns = now
                    self._event(tid, TaskState.QUEUED, TaskState.RUNNING)
                    self._event(tid, TaskState.RUNNING, TaskState.ERROR)
                task.state = TaskState.ERROR
                task.end_ns = now
                task.error = "endpoint crashed"
                self._generation[tid] = self._generation.get(tid, 0) + 1
                timer = self._timers.pop(tid, None)
                if timer is not None:
                    timer.cancel()
            self._running.clear()
            self._queue.clear()
            self._down_until = now + down_ns if down_ns > 0 else None

    def shutdown(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
