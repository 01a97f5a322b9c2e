"""TCP transport: length-delimited frames over loopback or LAN sockets.

One listener thread accepts connections; each link gets a reader thread
that slices the stream into whole frames (header carries the body length)
and posts them onto the owning executor thread, so all kernel logic stays
single-threaded.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from typing import Callable, Optional

from .errors import ListenFailed
from .runtime import Executor, Future
from .transport import Link, ProtocolId, Transport
from .wire import HEADER_LEN, TRAILER_LEN, peek_body_length

log = logging.getLogger(__name__)

_HARD_FRAME_CAP = 8 * 1024 * 1024


def parse_hostport(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


class TcpLink(Link):
    def __init__(self, executor: Executor, sock: socket.socket):
        self.executor = executor
        self.sock = sock
        self.closed = False
        self._write_lock = threading.Lock()
        self.on_frame = lambda raw: None
        self.on_close = lambda: None
        self._reader = threading.Thread(target=self._read_loop, daemon=True)

    def start(self) -> None:
        self._reader.start()

    def send(self, frame_bytes: bytes) -> None:
        if self.closed:
            return
        try:
            with self._write_lock:
                self.sock.sendall(frame_bytes)
        except OSError:
            self.close()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    def _read_exact(self, n: int) -> Optional[bytes]:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError:
                return None
            if not chunk:
                return None
            buf.extend(chunk)
        return bytes(buf)

    def _read_loop(self) -> None:
        while not self.closed:
            header = self._read_exact(HEADER_LEN)
            if header is None:
                break
            try:
                body_len = peek_body_length(header)
            except Exception:
                break  # stream desynced; drop the connection
            if body_len > _HARD_FRAME_CAP:
                break
            rest = self._read_exact(body_len + TRAILER_LEN)
            if rest is None:
                break
            frame = header + rest
            self.executor.post(self._dispatch, frame)
        was_closed = self.closed
        self.close()
        if not was_closed:
            self.executor.post(self._dispatch_close)

    def _dispatch(self, frame: bytes) -> None:
        self.on_frame(frame)

    def _dispatch_close(self) -> None:
        self.on_close()


class TcpTransport(Transport):
    protocol = ProtocolId.TCP

    def __init__(self, executor: Executor):
        self.executor = executor
        self._server: Optional[socket.socket] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._links: list[TcpLink] = []
        self._stopping = False
        self.bound_port: Optional[int] = None

    def listen(self, address: str, on_link: Callable[[Link], None]) -> None:
        host, port = parse_hostport(address)
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            server.bind((host, port))
            server.listen(64)
        except OSError as exc:
            server.close()
            raise ListenFailed("%s: %s" % (address, exc)) from exc
        self._server = server
        self.bound_port = server.getsockname()[1]

        def accept_loop() -> None:
            while not self._stopping:
                try:
                    sock, _ = server.accept()
                except OSError:
                    return
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                link = TcpLink(self.executor, sock)
                self._links.append(link)
                self.executor.post(self._hand_over, link, on_link)

        self._accept_thread = threading.Thread(target=accept_loop, daemon=True)
        self._accept_thread.start()

    def _hand_over(self, link: TcpLink, on_link: Callable[[Link], None]) -> None:
        on_link(link)
        link.start()

    def connect(self, address: str) -> Future:
        f = Future()
        host, port = parse_hostport(address)

        def dial() -> None:
            try:
                sock = socket.create_connection((host, port), timeout=5.0)
            except OSError as exc:
                self.executor.post(f.fail, exc)
                return
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            link = TcpLink(self.executor, sock)
            self._links.append(link)

            def resolve() -> None:
                f.ok(link)
                link.start()

            self.executor.post(resolve)

        threading.Thread(target=dial, daemon=True).start()
        return f

    def stop(self) -> None:
        self._stopping = True
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass
        for link in self._links:
            link.close()
