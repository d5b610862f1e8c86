"""Byte-stream links between the host and a virtual plug.

``InProcessLink`` passes frames straight to a plug in the same process.
``serve``/``TcpLink`` carry the same frames over a localhost socket; the
server advances the plug's virtual clock by ``step_us`` before each line so
a remote client sees fresh measurements without a clock verb on the wire.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading

from .. import wire
from ..device import Mode, VirtualPlug

log = logging.getLogger(__name__)

DEFAULT_STEP_US = 100_000


class InProcessLink:
    def __init__(self, plug: VirtualPlug):
        self.plug = plug
        self._rx = wire.LineBuffer()

    def send_bytes(self, data: bytes) -> bytes:
        return self.plug.feed(data, self._rx)

    def request(self, payload: str) -> str:
        reply = self.send_bytes(wire.encode_frame(payload))
        return wire.decode_frame(reply)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv = self.server
        rx = wire.LineBuffer()
        while True:
            data = self.rfile.readline(wire.MAX_BUFFER + 1)
            if not data:
                return
            try:
                with srv.lock:
                    frames = rx.feed(data)
                    replies = b""
                    for frame in frames:
                        plug = srv.plug
                        if plug.mode is Mode.DATA:
                            plug.tick(plug.clock_us + srv.step_us)
                        replies += wire.encode_frame(plug.handle_line(frame))
            except wire.FrameError as exc:
                replies = wire.encode_frame(f"ERROR frame {exc}")
            self.wfile.write(replies)


class PlugServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, plug: VirtualPlug, address=("127.0.0.1", 0), step_us: int = DEFAULT_STEP_US):
        self.plug = plug
        self.step_us = int(step_us)
        self.lock = threading.Lock()
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


class TcpLink:
    def __init__(self, address: str, timeout: float = 5.0):
        self._sock = socket.create_connection(parse_address(address), timeout=timeout)
        self._file = self._sock.makefile("rb")

    def request(self, payload: str) -> str:
        self._sock.sendall(wire.encode_frame(payload))
        line = self._file.readline(wire.MAX_BUFFER + 1)
        if not line:
            raise ConnectionError("plug closed the connection")
        return wire.decode_frame(line)

    def close(self):
        self._file.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
