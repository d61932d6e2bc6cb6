"""Socket surface for an endpoint, its client, and the endpoint config file.

Messages (JSON headers, see :mod:`dcaiflow.wire`):

* ``REGISTER {body, name?}`` -> ``REGISTERED {function_id}``
* ``INVOKE {function_id, args, idempotency_key?}`` -> ``INVOKED {task_id}``
* ``POLL {task_id}`` -> ``TASK {task}`` where ``task`` is a task document
* ``CAPACITY {}`` -> ``CAPACITY {endpoint_id, site, capacity, mode, running, queued}``

Failures come back as ``ERROR {error, message}``.

The config file is key/value text::

    endpoint_id = dc-cerebras
    site = dc
    W = 4
    mode = real          # or simulated
    listen = 127.0.0.1:7010
    registry = /var/lib/dcaiflow/registry.json   # optional
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from dcaiflow.faas.endpoint import (
    EndpointInfo,
    EndpointUnavailable,
    FunctionEndpoint,
    FunctionNotFound,
    InvocationError,
    RegistrationError,
    TaskNotFound,
    TaskRecord,
    TaskState,
    CapacityReport,
)
from dcaiflow.kvconfig import KVDocument
from dcaiflow.wire import Client, MessageServer, RemoteError


def _handler(endpoint: FunctionEndpoint):
    def handle(msg: dict[str, Any], payload: bytes | None) -> dict[str, Any]:
        kind = msg["kind"]
        if kind == "REGISTER":
            return {"kind": "REGISTERED", "function_id": endpoint.register(msg["body"], msg.get("name"))}
        if kind == "INVOKE":
            tid = endpoint.invoke(msg["function_id"], msg.get("args") or {}, msg.get("idempotency_key"))
            return {"kind": "INVOKED", "task_id": tid}
        if kind == "POLL":
            return {"kind": "TASK", "task": endpoint.poll(msg["task_id"]).to_doc()}
        if kind == "CAPACITY":
            return {"kind": "CAPACITY", **endpoint.capacity_report().to_doc()}
        raise ValueError(f"unknown message kind {kind!r}")

    return handle


def serve_endpoint(endpoint: FunctionEndpoint, listen: str = "127.0.0.1:0") -> MessageServer:
    return MessageServer(listen, _handler(endpoint)).start()


_ERRORS = {
    cls.__name__: cls
    for cls in (EndpointUnavailable, FunctionNotFound, InvocationError, RegistrationError, TaskNotFound)
}


def task_from_doc(doc: Mapping[str, Any]) -> TaskRecord:
    fields = {k: v for k, v in doc.items() if k != "duration_ns"}
    fields["state"] = TaskState(fields["state"])
    return TaskRecord(**fields)


class EndpointClient:
    """Remote endpoint with the same call surface as :class:`FunctionEndpoint`."""

    def __init__(self, address: str, timeout: float = 30.0):
        self.address = address
        self._client = Client(address, timeout=timeout)

    def _call(self, kind: str, **fields: Any) -> dict[str, Any]:
        try:
            return self._client.call(kind, **fields)
        except RemoteError as exc:
            cls = _ERRORS.get(exc.error)
            if cls is not None:
                raise cls(exc.message) from None
            raise
        except OSError as exc:
            raise EndpointUnavailable(f"{self.address}: {exc}") from None

    def register(self, body: Mapping[str, Any], name: str | None = None) -> str:
        return self._call("REGISTER", body=dict(body), name=name)["function_id"]

    def invoke(self, function_id: str, args: Mapping[str, Any] | None = None, idempotency_key: str | None = None) -> str:
        return self._call("INVOKE", function_id=function_id, args=dict(args or {}), idempotency_key=idempotency_key)["task_id"]

    def poll(self, task_id: str) -> TaskRecord:
        return task_from_doc(self._call("POLL", task_id=task_id)["task"])

    def capacity_report(self) -> CapacityReport:
        d = self._call("CAPACITY")
        info = EndpointInfo(d["endpoint_id"], d["capacity"], d["mode"], d["site"])
        return CapacityReport(info, d["running"], d["queued"])

    def close(self) -> None:
        self._client.close()


@dataclass(frozen=True)
class EndpointConfig:
    endpoint_id: str
    site: str
    capacity: int
    mode: str
    listen: str
    registry: Path | None


def parse_endpoint_config(text: str, source: str = "<endpoint config>") -> EndpointConfig:
    doc = KVDocument.parse(text, source)
    mode = doc.get("mode", "real")
    if mode not in ("real", "simulated"):
        raise doc.error("mode", "mode must be 'real' or 'simulated'")
    capacity = doc.number("W", 1, kind=int)
    if capacity < 1:
        raise doc.error("W", "W must be >= 1")
    listen = doc.get("listen", "127.0.0.1:0")
    if ":" not in listen:
        raise doc.error("listen", "listen must be host:port")
    registry = doc.get("registry", None)
    cfg = EndpointConfig(
        endpoint_id=doc.get("endpoint_id", "endpoint"),
        site=doc.get("site", "dc"),
        capacity=capacity,
        mode=mode,
        listen=listen,
        registry=Path(registry) if registry else None,
    )
    doc.reject_unused()
    return cfg


def load_endpoint_config(path: str | Path) -> EndpointConfig:
    return parse_endpoint_config(Path(path).read_text(), str(path))
