"""Adapters that expose endpoints and transfer services as action providers."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

from dcaiflow.faas.endpoint import FunctionEndpoint, TaskState
from dcaiflow.faas.server import EndpointClient
from dcaiflow.flow.definition import ActionKind
from dcaiflow.flow.engine import ProviderStatus, ProviderUnavailable
from dcaiflow.timebase import Clock
from dcaiflow.transfer.endpoints import DEFAULT_DIGEST, LocalEndpoint, RemoteEndpoint
from dcaiflow.transfer.service import TransferService
from dcaiflow.transfer.sim import SimulatedTransferService, link_from_doc
from dcaiflow.transfer.spec import TransferOutcome, TransferSpec


class ComputeProvider:
    """Compute actions on a function endpoint (local object or socket client).

    Parameters: ``function`` (id or registered name) and ``args``.
    """

    def __init__(self, endpoint: Any):
        self.endpoint = endpoint

    def dispatch(self, kind: ActionKind, params: Mapping[str, Any], idempotency_key: str) -> str:
        if kind is not ActionKind.COMPUTE:
            raise ValueError(f"a compute provider cannot run {kind.value} actions")
        try:
            return self.endpoint.invoke(params["function"], params.get("args") or {}, idempotency_key)
        except ConnectionError as exc:
            raise ProviderUnavailable(str(exc)) from exc

    def poll(self, handle: str) -> ProviderStatus:
        task = self.endpoint.poll(handle)
        if task.state in (TaskState.QUEUED, TaskState.RUNNING):
            return ProviderStatus("active")
        output = dict(task.output or {})
        output["duration_ns"] = task.duration_ns
        if task.state is TaskState.DONE:
            return ProviderStatus("succeeded", output)
        return ProviderStatus("failed", output, task.error)

    def cancel(self, handle: str) -> None:
        """Endpoints have no cancel; the task runs out and its result is ignored."""


class TransferProvider:
    """Transfer actions on a real or simulated transfer service."""

    def __init__(self, service: Any):
        self.service = service

    def dispatch(self, kind: ActionKind, params: Mapping[str, Any], idempotency_key: str) -> str:
        if kind is not ActionKind.TRANSFER:
            raise ValueError(f"a transfer provider cannot run {kind.value} actions")
        return self.service.submit(TransferSpec.from_params(params), idempotency_key)

    def poll(self, handle: str) -> ProviderStatus:
        report = self.service.status(handle)
        if report.outcome is TransferOutcome.ACTIVE:
            return ProviderStatus("active")
        output = {
            "bytes": report.total_bytes,
            "files": len(report.files),
            "concurrency": report.concurrency,
            "throughput_bps": report.throughput_bps,
        }
        if report.outcome is TransferOutcome.SUCCEEDED:
            return ProviderStatus("succeeded", output)
        failed = [f"{f.src}: {f.error}" for f in report.files if f.error]
        return ProviderStatus("failed", output, report.error or "; ".join(failed) or report.outcome.value)

    def cancel(self, handle: str) -> None:
        self.service.cancel(handle)


def providers_from_doc(doc: Mapping[str, Any], clock: Clock, base: Path | None = None) -> dict[str, Any]:
    """Build providers from a JSON document keyed by provider id.

    * ``{"type": "faas", "address": "host:port"}`` talks to a running endpoint.
    * ``{"type": "faas", "capacity": 2, "functions": {name: body}}`` runs an
      in-process endpoint with the given bodies (commands or ``duration_s``).
    * ``{"type": "transfer", "endpoints": {id: {"root": dir} | {"address": a}}}``
      is the real transfer service; the destination must be a ``root``.
    * ``{"type": "transfer-simulated", "links": [...], "endpoints": {id: site}}``
      needs a virtual clock.
    """
    providers: dict[str, Any] = {}
    for pid, cfg in doc.items():
        kind = cfg.get("type")
        if kind == "faas":
            if "address" in cfg:
                providers[pid] = ComputeProvider(EndpointClient(cfg["address"]))
                continue
            ep = FunctionEndpoint(pid, capacity=int(cfg.get("capacity", 1)), clock=clock, site=cfg.get("site", "dc"))
            for name, body in cfg.get("functions", {}).items():
                ep.register(body, name=name)
            providers[pid] = ComputeProvider(ep)
        elif kind == "transfer":
            endpoints: dict[str, Any] = {}
            for eid, e in cfg.get("endpoints", {}).items():
                if "address" in e:
                    endpoints[eid] = RemoteEndpoint(e["address"])
                else:
                    root = Path(e["root"])
                    endpoints[eid] = LocalEndpoint(base / root if base is not None and not root.is_absolute() else root)
            providers[pid] = TransferProvider(TransferService(endpoints, clock=clock, digest=cfg.get("digest", DEFAULT_DIGEST)))
        elif kind == "transfer-simulated":
            if not clock.virtual:
                raise ValueError(f"provider {pid!r}: simulated transfers need --virtual")
            links = {}
            for raw in cfg.get("links", []):
                key, link, symmetric = link_from_doc(raw)
                links[key] = link
                if symmetric:
                    links.setdefault((key[1], key[0]), link)
            providers[pid] = TransferProvider(SimulatedTransferService(clock, links, cfg.get("endpoints"), symmetric=False))
        else:
            raise ValueError(f"provider {pid!r}: unknown type {kind!r}")
    return providers
