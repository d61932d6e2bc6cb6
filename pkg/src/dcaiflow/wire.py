"""Length-prefixed framing shared by every socket surface.

A message is one frame holding a UTF-8 JSON header object, optionally
followed by a second frame with raw payload bytes when the header carries a
``payload_bytes`` field. Each frame is a 4-byte big-endian length and then
that many bytes.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
from typing import Any, Callable, Optional

HEADER = struct.Struct("!I")
MAX_FRAME = 64 * 1024 * 1024


class ProtocolError(Exception):
    pass


class ConnectionClosed(ProtocolError):
    pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionClosed(f"peer closed after {len(buf)}/{n} bytes")
        buf += chunk
    return bytes(buf)


def send_frame(sock: socket.socket, data: bytes) -> None:
    if len(data) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(data)} bytes exceeds {MAX_FRAME}")
    sock.sendall(HEADER.pack(len(data)) + data)


def recv_frame(sock: socket.socket) -> bytes:
    (n,) = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if n > MAX_FRAME:
        raise ProtocolError(f"announced frame of {n} bytes exceeds {MAX_FRAME}")
    return _recv_exact(sock, n)


def encode(header: dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def send_msg(sock: socket.socket, header: dict[str, Any], payload: bytes | None = None) -> None:
    if payload is not None:
        header = {**header, "payload_bytes": len(payload)}
        send_frame(sock, encode(header))
        send_frame(sock, payload)
    else:
        send_frame(sock, encode(header))


def recv_msg(sock: socket.socket) -> tuple[dict[str, Any], bytes | None]:
    raw = recv_frame(sock)
    try:
        header = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed header: {exc}") from None
    if not isinstance(header, dict) or "kind" not in header:
        raise ProtocolError("header must be an object with a 'kind' field")
    payload = None
    if "payload_bytes" in header:
        payload = recv_frame(sock)
        if len(payload) != header["payload_bytes"]:
            raise ProtocolError("payload length mismatch")
    return header, payload


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.strip().rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


class Client:
    """Blocking request/response client over one persistent connection."""

    def __init__(self, address: str | tuple[str, int], timeout: float = 30.0):
        self.address = parse_address(address) if isinstance(address, str) else address
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
        return self._sock

    def request(self, header: dict[str, Any], payload: bytes | None = None) -> tuple[dict[str, Any], bytes | None]:
        sock = self._connect()
        try:
            send_msg(sock, header, payload)
            return recv_msg(sock)
        except (OSError, ProtocolError):
            self.close()
            raise

    def call(self, kind: str, **fields: Any) -> dict[str, Any]:
        reply, _ = self.request({"kind": kind, **fields})
        if reply["kind"] == "ERROR":
            raise RemoteError(reply.get("error", "Error"), reply.get("message", ""))
        return reply

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


class RemoteError(Exception):
    """An ERROR reply; ``error`` names the server-side exception class."""

    def __init__(self, error: str, message: str):
        super().__init__(f"{error}: {message}")
        self.error = error
        self.message = message


def error_reply(exc: BaseException) -> dict[str, Any]:
    return {"kind": "ERROR", "error": type(exc).__name__, "message": str(exc)}


Handler = Callable[[dict[str, Any], Optional[bytes]], "tuple[dict[str, Any], Optional[bytes]] | dict[str, Any]"]


class MessageServer(socketserver.ThreadingTCPServer):
    """Threaded server calling ``handler(header, payload)`` per message.

    The handler returns a reply header, or ``(header, payload)``. Exceptions
    become ERROR replies and the connection stays open.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: str | tuple[str, int], handler: Handler):
        self.handler = handler
        addr = parse_address(address) if isinstance(address, str) else address
        super().__init__(addr, _Connection)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "MessageServer":
        threading.Thread(target=self.serve_forever, name=f"serve-{self.address}", daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class _Connection(socketserver.BaseRequestHandler):
    server: MessageServer

    def handle(self) -> None:
        while True:
            try:
                header, payload = recv_msg(self.request)
            except (ConnectionClosed, OSError):
                return
            except ProtocolError as exc:
                send_msg(self.request, error_reply(exc))
                return
            try:
                out = self.server.handler(header, payload)
            except Exception as exc:
                out = error_reply(exc)
            reply, data = out if isinstance(out, tuple) else (out, None)
            try:
                send_msg(self.request, reply, data)
            except OSError:
                return
