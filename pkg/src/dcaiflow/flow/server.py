"""Engine control surface over a local socket.

* ``START {flow, input, idempotency_key?}`` -> ``STARTED {run_id}``
* ``STATUS {run_id}`` -> ``RUN {run}`` (a run record document)
* ``CANCEL {run_id}`` -> ``CANCELLED {run_id, status, noop}``
* ``LIST {}`` -> ``RUNS {run_ids}``
"""

from __future__ import annotations

import threading
from typing import Any, Mapping

from dcaiflow.flow.definition import FlowParseError, flow_from_doc
from dcaiflow.flow.engine import Engine, MissingInput, RunNotFound, UnknownProvider
from dcaiflow.wire import Client, MessageServer, RemoteError


class EngineServer:
    """Serves an engine and drives its active runs from a background thread."""

    def __init__(self, engine: Engine, listen: str = "127.0.0.1:0", poll_interval_s: float = 0.05):
        self.engine = engine
        self.poll_interval_s = poll_interval_s
        self.server = MessageServer(listen, self._handle)
        self._stop = threading.Event()
        self._driver = threading.Thread(target=engine.drive_forever, args=(self._stop, poll_interval_s), daemon=True)

    @property
    def address(self) -> str:
        return self.server.address

    def start(self) -> "EngineServer":
        self.engine.recover()
        self.server.start()
        self._driver.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self.server.stop()
        self._driver.join(timeout=5)

    def _handle(self, msg: dict[str, Any], payload: bytes | None) -> dict[str, Any]:
        kind = msg["kind"]
        if kind == "START":
            flow = flow_from_doc(msg["flow"])
            run_id = self.engine.start_run(flow, msg.get("input") or {}, msg.get("idempotency_key"))
            self.engine.advance(run_id)
            return {"kind": "STARTED", "run_id": run_id}
        if kind == "STATUS":
            return {"kind": "RUN", "run": self.engine.get_status(msg["run_id"]).to_dict()}
        if kind == "CANCEL":
            ack = self.engine.cancel(msg["run_id"])
            return {"kind": "CANCELLED", "run_id": ack.run_id, "status": ack.status.value, "noop": ack.noop}
        if kind == "LIST":
            return {"kind": "RUNS", "run_ids": self.engine.list_runs()}
        raise ValueError(f"unknown message kind {kind!r}")


_ERRORS = {cls.__name__: cls for cls in (FlowParseError, MissingInput, RunNotFound, UnknownProvider)}


class EngineClient:
    def __init__(self, address: str, timeout: float = 30.0):
        self._client = Client(address, timeout=timeout)

    def _call(self, kind: str, **fields: Any) -> dict[str, Any]:
        try:
            return self._client.call(kind, **fields)
        except RemoteError as exc:
            cls = _ERRORS.get(exc.error)
            if cls is not None:
                raise cls(exc.message) from None
            raise

    def start_run(self, flow_doc: Mapping[str, Any], inputs: Mapping[str, Any], idempotency_key: str | None = None) -> str:
        return self._call("START", flow=dict(flow_doc), input=dict(inputs), idempotency_key=idempotency_key)["run_id"]

    def get_status(self, run_id: str) -> dict[str, Any]:
        return self._call("STATUS", run_id=run_id)["run"]

    def cancel(self, run_id: str) -> dict[str, Any]:
        return self._call("CANCEL", run_id=run_id)

    def list_runs(self) -> list[str]:
        return self._call("LIST")["run_ids"]

    def close(self) -> None:
        self._client.close()
