"""Where bytes come from: a local directory or a remote transfer daemon.

A source is opened per transfer (a *session*) and then read through any
number of independent streams, one per concurrent worker.
"""

from __future__ import annotations

import hashlib
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

from dcaiflow.transfer.spec import TransferError
from dcaiflow.wire import Client, MessageServer, ProtocolError, RemoteError

DIGEST_BLOCK = 1 << 20
DEFAULT_DIGEST = "sha256"


def file_digest(path: str | Path, algorithm: str = DEFAULT_DIGEST) -> str:
    h = hashlib.new(algorithm)
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(DIGEST_BLOCK), b""):
            h.update(block)
    return h.hexdigest()


class StreamBroken(TransferError, ConnectionError):
    """A data stream died mid-chunk; the chunk is retried on a fresh stream."""


@dataclass(frozen=True)
class WanEmulation:
    """In-process WAN shaping applied per stream: rate cap and per-request latency."""

    rate_bps: float | None = None
    latency_s: float = 0.0

    def delay(self, nbytes: int) -> None:
        wait = self.latency_s + (nbytes / self.rate_bps if self.rate_bps else 0.0)
        if wait > 0:
            time.sleep(wait)


class SourceStream(Protocol):
    def read(self, index: int, offset: int, length: int) -> bytes: ...

    def close(self) -> None: ...


class SourceSession(Protocol):
    files: list[dict[str, Any]]  # {"path", "size"} or {"path", "error"}

    def stream(self) -> SourceStream: ...

    def digest(self, index: int, algorithm: str) -> str: ...

    def close(self) -> None: ...


class LocalEndpoint:
    """A directory tree; relative paths resolve under *root* and may not escape it."""

    def __init__(self, root: str | Path, *, wan: WanEmulation | None = None):
        self.root = Path(root).resolve()
        self.wan = wan

    def resolve(self, path: str) -> Path:
        p = (self.root / path).resolve()
        if p != self.root and self.root not in p.parents:
            raise TransferError(f"path {path!r} escapes endpoint root")
        return p

    def open_session(self, transfer_id: str, paths: list[str]) -> "LocalSession":
        return LocalSession(self, paths)


class LocalSession:
    def __init__(self, endpoint: LocalEndpoint, paths: list[str]):
        self.endpoint = endpoint
        self._paths: list[Path | None] = []
        self.files = []
        for p in paths:
            try:
                real = endpoint.resolve(p)
                size = real.stat().st_size
                if not real.is_file():
                    raise IsADirectoryError(p)
            except (OSError, TransferError) as exc:
                self._paths.append(None)
                self.files.append({"path": p, "error": f"missing source: {exc}"})
            else:
                self._paths.append(real)
                self.files.append({"path": p, "size": size})

    def path(self, index: int) -> Path:
        p = self._paths[index]
        if p is None:
            raise TransferError(self.files[index]["error"])
        return p

    def stream(self) -> "LocalStream":
        return LocalStream(self)

    def digest(self, index: int, algorithm: str) -> str:
        return file_digest(self.path(index), algorithm)

    def close(self) -> None:
        pass


class LocalStream:
    def __init__(self, session: LocalSession):
        self.session = session
        self._fds: dict[int, int] = {}

    def read(self, index: int, offset: int, length: int) -> bytes:
        fd = self._fds.get(index)
        if fd is None:
            fd = self._fds[index] = os.open(self.session.path(index), os.O_RDONLY)
        data = os.pread(fd, length, offset)
        if len(data) != length:
            raise StreamBroken(f"short read at {offset}: {len(data)}/{length}")
        if self.session.endpoint.wan is not None:
            self.session.endpoint.wan.delay(length)
        return data

    def close(self) -> None:
        for fd in self._fds.values():
            os.close(fd)
        self._fds.clear()


# --- remote sources over the wire -------------------------------------------
#
# Control messages (pull model; the destination drives):
#   OFFER {transfer_id, paths}                 -> OFFER {transfer_id, files}
#   CHUNK-REQ {transfer_id, file_index, offset, length}
#                                              -> CHUNK-DATA {..same fields..} + payload
#   DIGEST {transfer_id, file_index, algorithm} -> DIGEST {digest}
#   DONE {transfer_id}                         -> DONE {}
# Each data stream is its own connection issuing CHUNK-REQ.


class TransferDaemon:
    """Serves one :class:`LocalEndpoint` as a transfer source."""

    def __init__(self, endpoint: LocalEndpoint, listen: str = "127.0.0.1:0"):
        self.endpoint = endpoint
        self._sessions: dict[str, LocalSession] = {}
        self._lock = threading.Lock()
        self.server = MessageServer(listen, self._handle)

    @property
    def address(self) -> str:
        return self.server.address

    def start(self) -> "TransferDaemon":
        self.server.start()
        return self

    def stop(self) -> None:
        self.server.stop()

    def _session(self, transfer_id: str) -> LocalSession:
        with self._lock:
            try:
                return self._sessions[transfer_id]
            except KeyError:
                raise TransferError(f"no offer for transfer {transfer_id!r}") from None

    def _handle(self, msg: dict[str, Any], payload: bytes | None):
        kind = msg["kind"]
        tid = msg.get("transfer_id")
        if kind == "OFFER":
            session = self.endpoint.open_session(tid, list(msg["paths"]))
            with self._lock:
                self._sessions[tid] = session
            return {"kind": "OFFER", "transfer_id": tid, "files": session.files}
        if kind == "CHUNK-REQ":
            session = self._session(tid)
            stream = session.stream()
            try:
                data = stream.read(msg["file_index"], msg["offset"], msg["length"])
            finally:
                stream.close()
            header = {k: msg[k] for k in ("transfer_id", "file_index", "offset", "length")}
            return {"kind": "CHUNK-DATA", **header}, data
        if kind == "DIGEST":
            digest = self._session(tid).digest(msg["file_index"], msg.get("algorithm", DEFAULT_DIGEST))
            return {"kind": "DIGEST", "transfer_id": tid, "file_index": msg["file_index"], "digest": digest}
        if kind == "DONE":
            with self._lock:
                self._sessions.pop(tid, None)
            return {"kind": "DONE", "transfer_id": tid}
        raise ValueError(f"unknown message kind {kind!r}")


class RemoteEndpoint:
    def __init__(self, address: str, timeout: float = 30.0):
        self.address = address
        self.timeout = timeout

    def open_session(self, transfer_id: str, paths: list[str]) -> "RemoteSession":
        return RemoteSession(self, transfer_id, paths)


class RemoteSession:
    def __init__(self, endpoint: RemoteEndpoint, transfer_id: str, paths: list[str]):
        self.endpoint = endpoint
        self.transfer_id = transfer_id
        self._control = Client(endpoint.address, timeout=endpoint.timeout)
        try:
            self.files = self._control.call("OFFER", transfer_id=transfer_id, paths=paths)["files"]
        except (OSError, ProtocolError, RemoteError) as exc:
            self._control.close()
            raise TransferError(f"offer to {endpoint.address} failed: {exc}") from None
        self._lock = threading.Lock()

    def stream(self) -> "RemoteStream":
        return RemoteStream(self)

    def digest(self, index: int, algorithm: str) -> str:
        with self._lock:
            return self._control.call("DIGEST", transfer_id=self.transfer_id, file_index=index, algorithm=algorithm)["digest"]

    def close(self) -> None:
        try:
            with self._lock:
                self._control.call("DONE", transfer_id=self.transfer_id)
        except (OSError, ProtocolError, RemoteError):
            pass
        finally:
            self._control.close()


class RemoteStream:
    def __init__(self, session: RemoteSession):
        self.session = session
        self._client = Client(session.endpoint.address, timeout=session.endpoint.timeout)

    def read(self, index: int, offset: int, length: int) -> bytes:
        req = {"kind": "CHUNK-REQ", "transfer_id": self.session.transfer_id, "file_index": index, "offset": offset, "length": length}
        try:
            reply, data = self._client.request(req)
        except (OSError, ProtocolError) as exc:
            raise StreamBroken(str(exc)) from None
        if reply["kind"] != "CHUNK-DATA" or data is None or len(data) != length:
            raise StreamBroken(f"bad chunk reply {reply.get('kind')}: {reply.get('message', '')}")
        return data

    def close(self) -> None:
        self._client.close()
