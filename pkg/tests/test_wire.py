import socket
import struct

import pytest

from dcaiflow.wire import (
    MAX_FRAME,
    Client,
    ConnectionClosed,
    MessageServer,
    ProtocolError,
    RemoteError,
    parse_address,
    recv_frame,
    recv_msg,
    send_frame,
    send_msg,
)


@pytest.fixture
def pair():
    a, b = socket.socketpair()
    yield a, b
    a.close()
    b.close()


def test_message_with_payload_roundtrips(pair):
    a, b = pair
    send_msg(a, {"kind": "DATA", "offset": 4}, b"\x00\xffbytes")
    header, payload = recv_msg(b)
    assert header == {"kind": "DATA", "offset": 4, "payload_bytes": 7}
    assert payload == b"\x00\xffbytes"


def test_header_only_message(pair):
    a, b = pair
    send_msg(a, {"kind": "PING"})
    assert recv_msg(b) == ({"kind": "PING"}, None)


def test_headers_must_be_objects_with_a_kind(pair):
    a, b = pair
    send_frame(a, b"[1, 2]")
    with pytest.raises(ProtocolError, match="kind"):
        recv_msg(b)
    send_frame(a, b"{not json")
    with pytest.raises(ProtocolError, match="malformed"):
        recv_msg(b)


def test_oversized_frames_are_refused(pair):
    a, b = pair
    a.sendall(struct.pack("!I", MAX_FRAME + 1))
    with pytest.raises(ProtocolError, match="exceeds"):
        recv_frame(b)


def test_truncated_frame(pair):
    a, b = pair
    a.sendall(struct.pack("!I", 10) + b"abc")
    a.close()
    with pytest.raises(ConnectionClosed, match="3/10"):
        recv_frame(b)


@pytest.mark.parametrize("text", ["localhost", ":80", "host:port", ""])
def test_bad_addresses(text):
    with pytest.raises(ValueError):
        parse_address(text)


def test_parse_address():
    assert parse_address(" 127.0.0.1:7010 ") == ("127.0.0.1", 7010)


def handler(header, payload):
    if header["kind"] == "ECHO":
        return {"kind": "OK", "n": len(payload or b"")}, (payload or b"")[::-1]
    if header["kind"] == "BOOM":
        raise KeyError("nothing here")
    return {"kind": "OK"}


def test_server_replies_and_survives_handler_errors():
    server = MessageServer(("127.0.0.1", 0), handler).start()
    try:
        with Client(server.address, timeout=5) as client:
            reply, data = client.request({"kind": "ECHO"}, b"abc")
            assert reply["n"] == 3 and data == b"cba"
            with pytest.raises(RemoteError) as info:
                client.call("BOOM")
            assert info.value.error == "KeyError"
            # the connection is still usable after an error reply
            assert client.call("PING") == {"kind": "OK"}
    finally:
        server.stop()


def test_malformed_request_gets_an_error_reply():
    server = MessageServer("127.0.0.1:0", handler).start()
    try:
        with socket.create_connection(parse_address(server.address), timeout=5) as sock:
            send_frame(sock, b'{"no": "kind"}')
            header, _ = recv_msg(sock)
            assert header["kind"] == "ERROR" and header["error"] == "ProtocolError"
    finally:
        server.stop()
