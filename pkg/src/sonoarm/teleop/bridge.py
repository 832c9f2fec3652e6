"""Minimal WebSocket endpoint for the browser console.

Implements just enough of RFC 6455 for line-delimited JSON text frames:
the HTTP upgrade handshake, masked client-to-server frames, unmasked
server-to-client frames, ping/pong and close. No extensions, no
fragmentation of outgoing messages.
"""

from __future__ import annotations

import base64
import hashlib
import os
import socket
import struct

from ..errors import ProtocolError

_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA


def _accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n > 0:
        data = sock.recv(n)
        if not data:
            raise ConnectionError("socket closed mid-frame")
        chunks.append(data)
        n -= len(data)
    return b"".join(chunks)


def _read_http_request(sock: socket.socket) -> dict:
    raw = b""
    while b"\r\n\r\n" not in raw:
        data = sock.recv(4096)
        if not data:
            raise ConnectionError("socket closed during handshake")
        raw += data
        if len(raw) > 65536:
            raise ProtocolError("oversized handshake request")
    head = raw.split(b"\r\n\r\n", 1)[0].decode("latin-1")
    lines = head.split("\r\n")
    headers = {}
    for line in lines[1:]:
        key, _, val = line.partition(":")
        headers[key.strip().lower()] = val.strip()
    headers["_request"] = lines[0]
    return headers


def server_handshake(sock: socket.socket) -> None:
    headers = _read_http_request(sock)
    key = headers.get("sec-websocket-key")
    if headers.get("upgrade", "").lower() != "websocket" or not key:
        sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        raise ProtocolError("not a websocket upgrade request")
    response = (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {_accept_key(key)}\r\n\r\n"
    )
    sock.sendall(response.encode("ascii"))


def client_handshake(sock: socket.socket, host: str, port: int, path: str = "/") -> None:
    key = base64.b64encode(os.urandom(16)).decode("ascii")
    request = (
        f"GET {path} HTTP/1.1\r\n"
        f"Host: {host}:{port}\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\n"
        "Sec-WebSocket-Version: 13\r\n\r\n"
    )
    sock.sendall(request.encode("ascii"))
    raw = b""
    while b"\r\n\r\n" not in raw:
        data = sock.recv(4096)
        if not data:
            raise ConnectionError("socket closed during handshake")
        raw += data
    status = raw.split(b"\r\n", 1)[0]
    if b"101" not in status:
        raise ProtocolError(f"websocket upgrade refused: {status!r}")
    head = raw.split(b"\r\n\r\n", 1)[0].decode("latin-1")
    for line in head.split("\r\n")[1:]:
        k, _, v = line.partition(":")
        if k.strip().lower() == "sec-websocket-accept" and v.strip() != _accept_key(key):
            raise ProtocolError("bad Sec-WebSocket-Accept")


def send_message(sock: socket.socket, data: bytes | str, *, mask: bool = False,
                 opcode: int | None = None) -> None:
    if isinstance(data, str):
        payload = data.encode("utf-8")
        op = OP_TEXT if opcode is None else opcode
    else:
        payload = data
        op = OP_BINARY if opcode is None else opcode
    head = bytearray([0x80 | op])
    n = len(payload)
    mask_bit = 0x80 if mask else 0
    if n < 126:
        head.append(mask_bit | n)
    elif n < 65536:
        head.append(mask_bit | 126)
        head += struct.pack(">H", n)
    else:
        head.append(mask_bit | 127)
        head += struct.pack(">Q", n)
    if mask:
        key = os.urandom(4)
        head += key
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    sock.sendall(bytes(head) + payload)


def recv_message(sock: socket.socket):
    """Receive one complete message; answers pings transparently.

    Returns (opcode, payload) where opcode is OP_TEXT/OP_BINARY/OP_CLOSE.
    """
    fragments = []
    first_op = None
    while True:
        b0, b1 = _read_exact(sock, 2)
        fin = bool(b0 & 0x80)
        op = b0 & 0x0F
        masked = bool(b1 & 0x80)
        length = b1 & 0x7F
        if length == 126:
            (length,) = struct.unpack(">H", _read_exact(sock, 2))
        elif length == 127:
            (length,) = struct.unpack(">Q", _read_exact(sock, 8))
        key = _read_exact(sock, 4) if masked else None
        payload = _read_exact(sock, length) if length else b""
        if key:
            payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
        if op == OP_PING:
            send_message(sock, payload, opcode=OP_PONG)
            continue
        if op == OP_PONG:
            continue
        if op == OP_CLOSE:
            return OP_CLOSE, payload
        if op in (OP_TEXT, OP_BINARY):
            first_op = op
        fragments.append(payload)
        if fin:
            return first_op, b"".join(fragments)


def send_close(sock: socket.socket, *, mask: bool = False) -> None:
    try:
        send_message(sock, b"", mask=mask, opcode=OP_CLOSE)
    except OSError:
        pass


class WebSocketClient:
    """Blocking text-frame client used by tests and the CLI."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        client_handshake(self.sock, host, port)

    def send_text(self, text: str) -> None:
        send_message(self.sock, text, mask=True)

    def recv_text(self) -> str | None:
        op, payload = recv_message(self.sock)
        if op == OP_CLOSE:
            return None
        return payload.decode("utf-8")

    def close(self) -> None:
        send_close(self.sock, mask=True)
        self.sock.close()
