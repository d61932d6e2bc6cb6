"""Execute scenarios in virtual time and report per-role time breakdowns."""

from __future__ import annotations

import io
import json
import random
import uuid
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable, Mapping

from dcaiflow.costmodel.model import OperationKind
from dcaiflow.costmodel.plans import Plan, PlanQuery, training_count
from dcaiflow.faas.endpoint import FunctionBody, FunctionEndpoint
from dcaiflow.flow.engine import Engine, RunRecord, RunStatus
from dcaiflow.flow.providers import ComputeProvider, TransferProvider
from dcaiflow.flow.store import RunStore
from dcaiflow.flow.definition import flow_from_doc
from dcaiflow.simnet.scenario import (
    TRANSFER_PROVIDER,
    EndpointPlacement,
    FunctionDecl,
    RunDecl,
    Scenario,
    Topology,
)
from dcaiflow.timebase import VirtualClock, ceil_ns, format_seconds
from dcaiflow.transfer.sim import SimLink, SimulatedTransferService
from dcaiflow.transfer.spec import MIN_CHUNK_BYTES

BREAKDOWN_HEADER = "mode,network,data_transfer_s,train_s,model_transfer_s,end_to_end_s"
BREAKDOWN_ROLES = ("data_transfer", "train", "model_transfer")


class ScenarioDeadlock(RuntimeError):
    pass


class ComparisonError(RuntimeError):
    def __init__(self, remote: str, local: str):
        super().__init__(f"both scenarios must succeed (remote: {remote}, local: {local})")
        self.remote = remote
        self.local = local


@dataclass(frozen=True)
class TimelineEvent:
    t_ns: int
    seq: int
    entity: str
    kind: str
    payload: Mapping[str, Any]

    def to_json(self) -> str:
        return json.dumps(
            {"t_ns": self.t_ns, "seq": self.seq, "entity": self.entity, "kind": self.kind, "payload": self.payload},
            sort_keys=True,
            separators=(",", ":"),
        )


@dataclass
class RunBreakdown:
    label: str
    mode: str
    network: str
    record: RunRecord

    @property
    def status(self) -> RunStatus:
        return self.record.status

    @property
    def end_to_end_ns(self) -> int:
        return self.record.end_to_end_ns

    def role_ns(self, role: str) -> int | None:
        roles = self.record.seconds_by_role()
        return roles.get(role)

    def csv_row(self) -> str:
        cells = [self.mode, self.network]
        for role in BREAKDOWN_ROLES:
            ns = self.role_ns(role)
            cells.append("NA" if ns is None else format_seconds(ns))
        cells.append(format_seconds(self.end_to_end_ns))
        return ",".join(cells)


@dataclass
class Timeline:
    events: list[TimelineEvent] = field(default_factory=list)
    runs: list[RunBreakdown] = field(default_factory=list)
    store: RunStore | None = None

    def record(self, t_ns: int, entity: str, kind: str, payload: Mapping[str, Any]) -> None:
        self.events.append(TimelineEvent(t_ns, len(self.events), entity, kind, dict(payload)))

    def jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)

    def breakdown_csv(self) -> str:
        return "\n".join([BREAKDOWN_HEADER, *(r.csv_row() for r in self.runs)]) + "\n"

    def run(self, label: str) -> RunBreakdown:
        for r in self.runs:
            if r.label == label:
                return r
        raise KeyError(label)


class _RecordingStore(RunStore):
    def __init__(self, timeline: Timeline):
        super().__init__()
        self._timeline = timeline

    def append(self, run_id: str, record: dict[str, Any]) -> None:
        super().append(run_id, record)
        payload = {k: v for k, v in record.items() if k not in ("flow", "t_ns")}
        self._timeline.record(record["t_ns"], f"run:{run_id}", record["event"], payload)


def _seeded_ids(rng: random.Random) -> Callable[[], str]:
    return lambda: uuid.UUID(int=rng.getrandbits(128), version=4).hex


def run_scenario(scenario: Scenario, *, store: RunStore | None = None) -> Timeline:
    """Run every flow of *scenario* to a terminal state on a fresh virtual clock.

    ``store`` receives a copy of every run log (handy for auditing).
    """
    clock = VirtualClock()
    timeline = Timeline()
    rng = random.Random(scenario.seed)
    new_id = _seeded_ids(rng)
    topo = scenario.topology

    endpoints: dict[str, FunctionEndpoint] = {}
    for e in topo.endpoints:
        if e.kind != "faas":
            continue
        listener = lambda ev, eid=e.endpoint_id: timeline.record(
            ev.t_ns, f"endpoint:{eid}", "task", {"task_id": ev.task_id, "from": ev.frm, "to": ev.to}
        )
        endpoints[e.endpoint_id] = FunctionEndpoint(
            e.endpoint_id, site=e.site, capacity=e.capacity, clock=clock, id_factory=new_id, listener=listener
        )
    for fn in scenario.functions:
        endpoints[fn.endpoint].register(FunctionBody(duration_ns=fn.duration_ns, result=fn.result), name=fn.name)

    transfer_sites = {e.endpoint_id: e.site for e in topo.endpoints if e.kind == "transfer"}
    service = SimulatedTransferService(clock, topo.links, transfer_sites, symmetric=False, id_factory=new_id)
    providers: dict[str, Any] = {eid: ComputeProvider(ep) for eid, ep in endpoints.items()}
    providers[TRANSFER_PROVIDER] = TransferProvider(service)

    run_store = _RecordingStore(timeline)
    engine = Engine(
        providers,
        run_store,
        clock,
        orchestration_overhead_ns=scenario.orchestration_overhead_ns,
        id_factory=new_id,
    )

    started: dict[int, str] = {}

    def start(i: int, decl: RunDecl) -> None:
        started[i] = engine.start_run(decl.flow, decl.input)

    for i, decl in enumerate(scenario.runs):
        clock.call_at(decl.start_ns, lambda i=i, decl=decl: start(i, decl))

    def fire(fault) -> None:
        if fault.kind == "stream_kill":
            hit = service.kill_stream(fault.link, pick=rng.randrange(1 << 16))
            timeline.record(clock.now_ns(), "link:" + ("->".join(fault.link) if fault.link else "*"), "stream_kill", {"hit": hit})
        else:
            endpoints[fault.endpoint].crash(fault.down_ns)
            timeline.record(clock.now_ns(), f"endpoint:{fault.endpoint}", "crash", {"down_ns": fault.down_ns})

    for fault in scenario.faults:
        clock.call_at(fault.at_ns, lambda fault=fault: fire(fault))

    while True:
        for rid in engine.active_runs():
            engine.advance(rid)
        if len(started) == len(scenario.runs) and not engine.active_runs():
            break
        if not clock.step():
            stuck = {rid: engine.get_status(rid).current for rid in engine.active_runs()}
            raise ScenarioDeadlock(f"no events remain but runs are active: {stuck}")

    for i, decl in enumerate(scenario.runs):
        timeline.runs.append(RunBreakdown(decl.label, decl.mode, decl.network, engine.get_status(started[i])))
    if store is not None:
        for rid in run_store.run_ids():
            for rec in run_store.read(rid):
                store.append(rid, rec)
    timeline.store = run_store
    return timeline


def compare_modes(remote: Scenario | Timeline, local: Scenario | Timeline) -> Fraction:
    """End-to-end ratio local / remote of the first run of each scenario."""
    r = remote if isinstance(remote, Timeline) else run_scenario(remote)
    loc = local if isinstance(local, Timeline) else run_scenario(local)
    r_run, l_run = r.runs[0], loc.runs[0]
    if r_run.status is not RunStatus.SUCCEEDED or l_run.status is not RunStatus.SUCCEEDED:
        raise ComparisonError(r_run.status.value, l_run.status.value)
    if r_run.end_to_end_ns == 0:
        return Fraction(1) if l_run.end_to_end_ns == 0 else Fraction(10**18)
    return Fraction(l_run.end_to_end_ns, r_run.end_to_end_ns)


# --- scenarios built from cost-model queries ----------------------------------


def _compute_ns(q: PlanQuery, kind: OperationKind, site: str, count: int) -> int:
    unit = q.costs.lookup(kind, site)
    return ceil_ns((Fraction(unit.per_datum_us) * count + Fraction(unit.fixed_us)) / 1_000_000)


def scenario_from_plan(q: PlanQuery, plan: Plan) -> Scenario:
    """A two-site scenario that executes *plan* for *q* step by step.

    Transfers go over a link built from the query's link model and compute
    steps are simulated functions whose durations come from the cost table.
    """
    ex, dc = q.experiment_site, q.datacenter_site
    ds, n = q.dataset, q.dataset.count_n
    steps: list[tuple[str, str, str, dict[str, Any]]] = []
    functions: list[FunctionDecl] = []

    def compute(name: str, kind: OperationKind, site: str, count: int) -> None:
        functions.append(FunctionDecl(name, f"{site}-faas", _compute_ns(q, kind, site, count)))
        steps.append((name, "compute", f"{site}-faas", {"function": name}))

    def transfer(name: str, src: str, dst: str, nbytes: int, files: int) -> None:
        # one chunk per file: a lone stream finishes at the same instant, with far fewer events
        chunk = max(MIN_CHUNK_BYTES, -(-nbytes // max(files, 1)))
        params = {"src": f"{src}-dtn", "dst": f"{dst}-dtn", "bytes": nbytes, "files": files, "cc": 1, "chunk_bytes": chunk}
        steps.append((name, "transfer", TRANSFER_PROVIDER, params))

    if plan is Plan.CONVENTIONAL:
        transfer("data_transfer", ex, dc, n * ds.datum_bytes, ds.file_count)
        compute("analyze", OperationKind.ANALYZE, dc, n)
        transfer("result_transfer", dc, ex, n * ds.result_bytes, 1 if n else 0)
    elif plan is Plan.LOCAL_ANALYSIS:
        compute("analyze", OperationKind.ANALYZE, ex, n)
    else:
        n_train = training_count(q)
        files = -(-ds.file_count * q.p.numerator // q.p.denominator)  # ceil(p * F)
        transfer("data_transfer", ex, dc, n_train * ds.datum_bytes, files)
        compute("analyze", OperationKind.ANALYZE, dc, n_train)
        compute("train", OperationKind.TRAIN, dc, 0)
        transfer("model_transfer", dc, ex, n_train * ds.result_bytes + ds.model_bytes, 1)
        compute("estimate", OperationKind.ESTIMATE, ex, n - n_train)

    states = {}
    for i, (name, kind, provider, params) in enumerate(steps):
        states[name] = {
            "kind": kind,
            "provider": provider,
            "params": params,
            "next": steps[i + 1][0] if i + 1 < len(steps) else None,
            "role": name,
            "max_retries": 1,
        }
    flow = flow_from_doc({"flow_id": f"plan-{plan.value}", "start": steps[0][0], "states": states})
    link = SimLink.from_model(q.link)
    topology = Topology(
        sites=(ex, dc),
        links={(ex, dc): link, (dc, ex): link},
        endpoints=(
            EndpointPlacement(f"{ex}-faas", "faas", ex),
            EndpointPlacement(f"{dc}-faas", "faas", dc),
            EndpointPlacement(f"{ex}-dtn", "transfer", ex),
            EndpointPlacement(f"{dc}-dtn", "transfer", dc),
        ),
    )
    run = RunDecl(flow, plan.value, plan.value, "simulated", {})
    return Scenario(topology, tuple(functions), (run,), name=f"plan-{plan.value}")


def scenarios_csv(timelines: Iterable[Timeline]) -> str:
    out = io.StringIO()
    out.write(BREAKDOWN_HEADER + "\n")
    for t in timelines:
        for r in t.runs:
            out.write(r.csv_row() + "\n")
    return out.getvalue()
