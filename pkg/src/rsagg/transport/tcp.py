"""TCP driver for the sans-IO nodes.

The server accepts one connection per client. A reader thread per
connection feeds decoded envelopes into a single queue; the main loop hands
them to the server node and closes a phase either when every expected
message is buffered or when the wall-clock deadline passes.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from typing import Protocol

from ..errors import FramingError
from .wire import BROADCAST, HEADER_SIZE, Envelope, parse_header

log = logging.getLogger(__name__)

DEFAULT_DEADLINE_S = 5.0


def recv_exact(sock: socket.socket, size: int) -> bytes:
    buf = bytearray()
    while len(buf) < size:
        chunk = sock.recv(size - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def read_envelope(sock: socket.socket) -> Envelope:
    head = recv_exact(sock, HEADER_SIZE)
    plen = parse_header(head)[5]
    return Envelope.decode(head + recv_exact(sock, plen))


def send_envelope(sock: socket.socket, env: Envelope, lock: threading.Lock | None = None) -> None:
    data = env.encode()
    if lock is None:
        sock.sendall(data)
    else:
        with lock:
            sock.sendall(data)


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


class _ServerNode(Protocol):
    done: bool
    time_ms: float

    def handle(self, env: Envelope) -> list[Envelope]: ...

    def on_deadline(self) -> list[Envelope]: ...

    def expected(self) -> int | None: ...

    def buffered(self) -> int: ...

    def after_step(self, time_ms: float) -> None: ...


class _Conn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.lock = threading.Lock()
        self.client_id: int | None = None
        self.alive = True


class TcpServer:
    """Serve one protocol run; :meth:`run` returns when the server node is done."""

    def __init__(
        self,
        node: _ServerNode,
        host: str = "127.0.0.1",
        port: int = 0,
        *,
        deadline_s: float = DEFAULT_DEADLINE_S,
        register_timeout_s: float = 60.0,
    ):
        self.node = node
        self.deadline_s = deadline_s
        self.register_timeout_s = register_timeout_s
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()[:2]
        self._inbox: queue.Queue = queue.Queue()
        self._conns: list[_Conn] = []
        self._by_id: dict[int, _Conn] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._t0 = time.perf_counter()

    def _accept_loop(self) -> None:
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock)
            with self._lock:
                self._conns.append(conn)
            threading.Thread(target=self._reader, args=(conn,), daemon=True).start()

    def _reader(self, conn: _Conn) -> None:
        while not self._stop.is_set():
            try:
                env = read_envelope(conn.sock)
            except FramingError as exc:
                log.warning("dropping connection after framing error: %s", exc)
                break
            except (ConnectionError, OSError):
                break
            self._inbox.put((conn, env))
        conn.alive = False

    def _deliver(self, envs: list[Envelope]) -> None:
        for env in envs:
            if env.receiver == BROADCAST:
                with self._lock:
                    targets = [c for c in self._conns if c.client_id is not None]
            else:
                c = self._by_id.get(env.receiver)
                targets = [c] if c is not None else []
            for c in targets:
                if not c.alive:
                    continue
                try:
                    send_envelope(c.sock, env, c.lock)
                except OSError:
                    c.alive = False

    def _now_ms(self) -> float:
        return (time.perf_counter() - self._t0) * 1e3

    def run(self) -> None:
        threading.Thread(target=self._accept_loop, daemon=True).start()
        node = self.node
        try:
            timeout = self.register_timeout_s
            deadline = time.monotonic() + timeout
            while not node.done:
                want = node.expected()
                if want is not None and node.buffered() >= want:
                    self._close_phase()
                    deadline = time.monotonic() + self.deadline_s
                    continue
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._close_phase()
                    deadline = time.monotonic() + self.deadline_s
                    continue
                try:
                    conn, env = self._inbox.get(timeout=remaining)
                except queue.Empty:
                    continue
                if conn.client_id is None and env.sender != BROADCAST:
                    conn.client_id = env.sender
                    self._by_id[env.sender] = conn
                elif env.sender != conn.client_id:
                    log.warning("connection for %s sent as %s; ignored", conn.client_id, env.sender)
                    continue
                node.time_ms = self._now_ms()
                self._deliver(node.handle(env))
                node.after_step(self._now_ms())
        finally:
            time.sleep(0.05)
            self.close()

    def _close_phase(self) -> None:
        self.node.time_ms = self._now_ms()
        out = self.node.on_deadline()
        self.node.after_step(self._now_ms())
        self._deliver(out)

    def close(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.sock.close()


class _ClientNode(Protocol):
    finished: bool

    def start(self) -> list[Envelope]: ...

    def handle(self, env: Envelope) -> list[Envelope]: ...


def run_client(node: _ClientNode, host: str, port: int, *, connect_timeout_s: float = 30.0) -> None:
    """Connect, register, and answer messages until the final round result."""
    end = time.monotonic() + connect_timeout_s
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=connect_timeout_s)
            break
        except OSError:
            if time.monotonic() > end:
                raise
            time.sleep(0.05)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    try:
        for env in node.start():
            send_envelope(sock, env)
        while not node.finished:
            try:
                env = read_envelope(sock)
            except (ConnectionError, OSError):
                break
            for out in node.handle(env):
                send_envelope(sock, out)
    finally:
        sock.close()
