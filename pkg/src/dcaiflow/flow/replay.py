"""Independent auditor for persisted run logs.

It re-derives each action's state from the raw records (it does not reuse
the engine's reducer) and reports anything the state machine forbids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from dcaiflow.flow.definition import flow_from_doc
from dcaiflow.flow.engine import LEGAL_TRANSITIONS, ActionState
from dcaiflow.flow.store import RunStore


@dataclass
class AuditReport:
    run_id: str
    violations: list[str] = field(default_factory=list)
    transitions: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


def audit_records(run_id: str, records: list[dict[str, Any]]) -> AuditReport:
    report = AuditReport(run_id)
    bad = report.violations.append
    if not records:
        bad("empty log")
        return report
    head = records[0]
    if head.get("event") != "run_created":
        bad("log does not open with run_created")
        return report
    flow = flow_from_doc(head["flow"])
    created = head["t_ns"]

    current: dict[tuple[str, int], ActionState] = {}
    starts: dict[tuple[str, int], int] = {}
    intervals: list[tuple[int, int, str]] = []
    succeeded: set[str] = set()
    delays = 0
    last_t = created
    finished = None

    for i, r in enumerate(records):
        if r.get("seq") != i:
            bad(f"record {i}: sequence number {r.get('seq')!r}")
        if r["t_ns"] < last_t:
            bad(f"record {i}: time went backwards")
        last_t = r["t_ns"]
        if finished is not None:
            bad(f"record {i}: written after run_finished")
        ev = r["event"]
        if ev == "delay":
            delays += r["ns"]
            if r["ns"] <= 0:
                bad(f"record {i}: non-positive delay")
        elif ev == "run_finished":
            finished = r
        elif ev == "transition":
            report.transitions += 1
            name, attempt = r["state"], r["attempt"]
            key = (name, attempt)
            frm = ActionState(r["from"]) if r["from"] is not None else None
            to = ActionState(r["to"])
            if (frm, to) not in LEGAL_TRANSITIONS:
                bad(f"record {i}: illegal {r['from']} -> {r['to']} on {name}#{attempt}")
            if r.get("idempotency_key") != f"{run_id}/{name}/{attempt}":
                bad(f"record {i}: idempotency key {r.get('idempotency_key')!r}")
            if key not in current:
                if attempt == 1:
                    if frm is not None:
                        bad(f"record {i}: first attempt of {name} does not start from nothing")
                else:
                    prev = current.get((name, attempt - 1))
                    if frm is not ActionState.FAILED or prev is not ActionState.FAILED:
                        bad(f"record {i}: attempt {attempt} of {name} without a failed predecessor")
                    spec = flow.states.get(name)
                    if spec is not None and attempt > spec.max_retries:
                        bad(f"record {i}: attempt {attempt} of {name} exceeds max_retries={spec.max_retries}")
            elif current[key] != frm:
                bad(f"record {i}: {name}#{attempt} is {current[key].value}, record claims {r['from']}")
            current[key] = to
            if to is ActionState.DISPATCHED:
                starts[key] = r["t_ns"]
            if to in (ActionState.SUCCEEDED, ActionState.FAILED, ActionState.CANCELLED):
                intervals.append((starts.get(key, r["t_ns"]), r["t_ns"], f"{name}#{attempt}"))
            if to is ActionState.SUCCEEDED:
                if name in succeeded:
                    bad(f"record {i}: {name} succeeded twice")
                succeeded.add(name)

    prev_end = created
    for start, end, label in intervals:
        if start < prev_end:
            bad(f"{label} overlaps the previous action")
        prev_end = end
    if finished is not None:
        e2e = finished["ended_ns"] - created
        busy = sum(end - start for start, end, _ in intervals)
        if e2e != busy + delays:
            bad(f"end-to-end {e2e} ns != actions {busy} ns + delays {delays} ns")
    return report


def audit_store(store: RunStore) -> list[AuditReport]:
    return [audit_records(rid, store.read(rid)) for rid in store.run_ids()]


def audit_directory(root: str | Path) -> list[AuditReport]:
    return audit_store(RunStore(root))


def violations(reports: Iterable[AuditReport]) -> list[str]:
    return [f"{r.run_id}: {v}" for r in reports for v in r.violations]
