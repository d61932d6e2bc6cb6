"""Scenario documents for the discrete-event harness.

A scenario is JSON::

    {
      "seed": 7,
      "sites": ["slac", "alcf"],
      "links": [{"between": ["slac", "alcf"], "rate_bps": 1.25e10, "rtt": 0.048}],
      "endpoints": [
        {"id": "cerebras", "kind": "faas", "site": "alcf", "capacity": 1},
        {"id": "slac-dtn", "kind": "transfer", "site": "slac"},
        {"id": "alcf-dtn", "kind": "transfer", "site": "alcf"}
      ],
      "functions": [{"name": "train", "endpoint": "cerebras", "duration_s": 19}],
      "flows": [{"definition": {...}, "runs": [
          {"label": "braggnn", "mode": "remote", "network": "cerebras",
           "input": {}, "start_s": 0}]}],
      "faults": [
        {"kind": "stream_kill", "at_s": 1.5, "link": ["slac", "alcf"]},
        {"kind": "endpoint_crash", "at_s": 3, "endpoint": "cerebras", "down_s": 2}
      ],
      "orchestration_overhead_s": 0
    }

Flows address compute endpoints by their id and transfers through the
provider named ``transfer``, whose ``src``/``dst`` parameters are transfer
endpoint ids. ``definition`` may be replaced by ``path`` (relative to the
scenario file).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from dcaiflow.flow.definition import FlowDefinition, FlowParseError, flow_from_doc
from dcaiflow.timebase import s_to_ns
from dcaiflow.transfer.sim import SimLink, SiteLink, link_from_doc

TRANSFER_PROVIDER = "transfer"


class ScenarioError(ValueError):
    def __init__(self, message: str, location: str = ""):
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location


@dataclass(frozen=True)
class EndpointPlacement:
    endpoint_id: str
    kind: str  # "faas" | "transfer"
    site: str
    capacity: int = 1


@dataclass(frozen=True)
class FunctionDecl:
    name: str
    endpoint: str
    duration_ns: int
    result: Mapping[str, Any] | None = None


@dataclass(frozen=True)
class RunDecl:
    flow: FlowDefinition
    label: str
    mode: str
    network: str
    input: Mapping[str, Any]
    start_ns: int = 0


@dataclass(frozen=True)
class FaultDecl:
    kind: str  # "stream_kill" | "endpoint_crash"
    at_ns: int
    link: SiteLink | None = None
    endpoint: str | None = None
    down_ns: int = 0


@dataclass(frozen=True)
class Topology:
    sites: tuple[str, ...]
    links: Mapping[SiteLink, SimLink]
    endpoints: tuple[EndpointPlacement, ...]

    def site_of(self, endpoint_id: str) -> str:
        for e in self.endpoints:
            if e.endpoint_id == endpoint_id:
                return e.site
        raise KeyError(endpoint_id)


@dataclass(frozen=True)
class Scenario:
    topology: Topology
    functions: tuple[FunctionDecl, ...]
    runs: tuple[RunDecl, ...]
    faults: tuple[FaultDecl, ...] = ()
    seed: int = 0
    orchestration_overhead_ns: int = 0
    name: str = "scenario"
    document: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)


def _number(value: Any, where: str, *, minimum: float | None = 0) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError("expected a number", where)
    if minimum is not None and value < minimum:
        raise ScenarioError(f"must be >= {minimum}", where)
    return value


def _list(doc: Mapping[str, Any], key: str) -> list[Any]:
    value = doc.get(key, [])
    if not isinstance(value, list):
        raise ScenarioError("expected a list", key)
    return value


def scenario_from_doc(doc: Mapping[str, Any], base: Path | None = None) -> Scenario:
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario must be an object")
    allowed = {"seed", "sites", "links", "endpoints", "functions", "flows", "faults", "orchestration_overhead_s", "name", "comment"}
    extra = set(doc) - allowed
    if extra:
        raise ScenarioError(f"unknown field {sorted(extra)[0]!r}")

    sites = _list(doc, "sites")
    if not sites:
        raise ScenarioError("topology needs at least one site", "sites")
    if len(set(sites)) != len(sites) or not all(isinstance(s, str) and s for s in sites):
        raise ScenarioError("site ids must be unique non-empty strings", "sites")

    links: dict[SiteLink, SimLink] = {}
    for i, raw in enumerate(_list(doc, "links")):
        where = f"links[{i}]"
        try:
            key, link, symmetric = link_from_doc(raw)
        except (ValueError, TypeError) as exc:
            raise ScenarioError(str(exc), where) from None
        for s in key:
            if s not in sites:
                raise ScenarioError(f"unknown site {s!r}", where)
        pairs = [key, (key[1], key[0])] if symmetric else [key]
        for k in pairs:
            if k in links:
                raise ScenarioError(f"duplicate link {k[0]} -> {k[1]}", where)
            links[k] = link

    endpoints: list[EndpointPlacement] = []
    for i, raw in enumerate(_list(doc, "endpoints")):
        where = f"endpoints[{i}]"
        if not isinstance(raw, Mapping):
            raise ScenarioError("endpoint must be an object", where)
        eid, kind, site = raw.get("id"), raw.get("kind"), raw.get("site")
        if not isinstance(eid, str) or not eid:
            raise ScenarioError("endpoint needs an id", where)
        if eid == TRANSFER_PROVIDER or any(e.endpoint_id == eid for e in endpoints):
            raise ScenarioError(f"endpoint id {eid!r} is reserved or duplicated", where)
        if kind not in ("faas", "transfer"):
            raise ScenarioError("kind must be 'faas' or 'transfer'", where)
        if site not in sites:
            raise ScenarioError(f"unknown site {site!r}", where)
        capacity = raw.get("capacity", 1)
        if isinstance(capacity, bool) or not isinstance(capacity, int) or capacity < 1:
            raise ScenarioError("capacity must be an integer >= 1", where)
        endpoints.append(EndpointPlacement(eid, kind, site, capacity))
    topology = Topology(tuple(sites), links, tuple(endpoints))
    faas_ids = {e.endpoint_id for e in endpoints if e.kind == "faas"}

    functions = []
    for i, raw in enumerate(_list(doc, "functions")):
        where = f"functions[{i}]"
        if not isinstance(raw, Mapping) or not isinstance(raw.get("name"), str):
            raise ScenarioError("function needs a name", where)
        if raw.get("endpoint") not in faas_ids:
            raise ScenarioError(f"unknown faas endpoint {raw.get('endpoint')!r}", where)
        if "duration_ns" in raw:
            duration = raw["duration_ns"]
            if isinstance(duration, bool) or not isinstance(duration, int) or duration < 0:
                raise ScenarioError("duration_ns must be an integer >= 0", where)
        else:
            duration = s_to_ns(_number(raw.get("duration_s"), f"{where}.duration_s"))
        functions.append(FunctionDecl(raw["name"], raw["endpoint"], duration, raw.get("result")))

    runs = []
    provider_ids = faas_ids | {TRANSFER_PROVIDER}
    for i, raw in enumerate(_list(doc, "flows")):
        where = f"flows[{i}]"
        if not isinstance(raw, Mapping):
            raise ScenarioError("flow entry must be an object", where)
        if "definition" in raw:
            flow_doc = raw["definition"]
        elif "path" in raw:
            path = Path(raw["path"])
            if base is not None and not path.is_absolute():
                path = base / path
            try:
                flow_doc = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ScenarioError(f"cannot read flow: {exc}", where) from None
        else:
            raise ScenarioError("flow entry needs 'definition' or 'path'", where)
        try:
            flow = flow_from_doc(flow_doc)
        except FlowParseError as exc:
            raise ScenarioError(str(exc), f"{where}.definition") from None
        for name in flow.reachable():
            spec = flow.states[name]
            if spec.provider is not None and spec.provider not in provider_ids:
                raise ScenarioError(f"state {name!r} uses unknown provider {spec.provider!r}", where)
        for j, r in enumerate(raw.get("runs", [{}])):
            rwhere = f"{where}.runs[{j}]"
            if not isinstance(r, Mapping):
                raise ScenarioError("run must be an object", rwhere)
            start = _number(r.get("start_s", 0), f"{rwhere}.start_s")
            runs.append(
                RunDecl(
                    flow=flow,
                    label=str(r.get("label", flow.flow_id)),
                    mode=str(r.get("mode", "remote")),
                    network=str(r.get("network", "")),
                    input=dict(r.get("input", {})),
                    start_ns=s_to_ns(start),
                )
            )
    if not runs:
        raise ScenarioError("scenario has no runs", "flows")

    faults = []
    endpoint_ids = {e.endpoint_id for e in endpoints}
    for i, raw in enumerate(_list(doc, "faults")):
        where = f"faults[{i}]"
        if not isinstance(raw, Mapping):
            raise ScenarioError("fault must be an object", where)
        at = _number(raw.get("at_s"), f"{where}.at_s", minimum=None)
        if at < 0:
            raise ScenarioError("fault time must be >= 0", f"{where}.at_s")
        kind = raw.get("kind")
        if kind == "stream_kill":
            link = raw.get("link")
            key = tuple(link) if link is not None else None
            if key is not None and key not in links:
                raise ScenarioError(f"unknown link {link!r}", where)
            faults.append(FaultDecl(kind, s_to_ns(at), link=key))
        elif kind == "endpoint_crash":
            endpoint = raw.get("endpoint")
            if endpoint not in endpoint_ids or endpoint not in faas_ids:
                raise ScenarioError(f"unknown faas endpoint {endpoint!r}", where)
            down = _number(raw.get("down_s", 0), f"{where}.down_s")
            faults.append(FaultDecl(kind, s_to_ns(at), endpoint=endpoint, down_ns=s_to_ns(down)))
        else:
            raise ScenarioError(f"unknown fault kind {kind!r}", where)

    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ScenarioError("seed must be an integer", "seed")
    overhead = s_to_ns(_number(doc.get("orchestration_overhead_s", 0), "orchestration_overhead_s"))
    return Scenario(
        topology=topology,
        functions=tuple(functions),
        runs=tuple(runs),
        faults=tuple(faults),
        seed=seed,
        orchestration_overhead_ns=overhead,
        name=str(doc.get("name", "scenario")),
        document=json.loads(json.dumps(doc)),
    )


def parse_scenario(text: str, base: Path | None = None) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return scenario_from_doc(doc, base)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), path.parent)
