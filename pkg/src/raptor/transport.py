"""TCP implementation of the flight transport, plus the listener that feeds it."""

from __future__ import annotations

import logging
import queue
import socket
import socketserver
import threading
from typing import Any

from .errors import BindFailure, WireError
from .flight import Message
from .wire import read_message, write_message

log = logging.getLogger(__name__)


def split_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"endpoint {endpoint!r} is not host:port")
    return host.strip("[]") or "127.0.0.1", int(port)


class TcpTransport:
    """Best effort: one short-lived connection per message, no retries."""

    def __init__(self, connect_timeout: float = 1.0):
        self.connect_timeout = connect_timeout
        self.sent = 0
        self._lock = threading.Lock()

    def send(self, endpoint: str, message: Message) -> bool:
        try:
            with socket.create_connection(split_endpoint(endpoint), timeout=self.connect_timeout) as s:
                write_message(s, message)
        except (OSError, ValueError) as exc:
            log.debug("send to %s failed: %s", endpoint, exc)
            return False
        with self._lock:
            self.sent += 1
        return True

    def reachable(self, endpoint: str) -> bool:
        try:
            with socket.create_connection(split_endpoint(endpoint), timeout=self.connect_timeout):
                return True
        except (OSError, ValueError):
            return False


class NullTransport:
    """Transport for members that must not talk to anyone."""

    sent = 0

    def send(self, endpoint: str, message: Message) -> bool:
        return False

    def reachable(self, endpoint: str) -> bool:
        return False


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        hub: PeerHub = self.server.hub  # type: ignore[attr-defined]
        self.request.settimeout(30)
        while True:
            try:
                msg = read_message(self.request)
            except (WireError, OSError) as exc:
                log.warning("dropping peer connection: %s", exc)
                return
            if msg is None:
                return
            hub.route(msg)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class PeerHub:
    """Accepts peer connections and hands each message to its activation's queue."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        try:
            self._server = _Server((host, port), _Handler)
        except OSError as exc:
            raise BindFailure(f"peer port {host}:{port}: {exc}") from exc
        self._server.hub = self  # type: ignore[attr-defined]
        self._queues: dict[str, queue.Queue[Any]] = {}
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self.received = 0
        self.dropped = 0

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]  # type: ignore[return-value]

    def start(self) -> PeerHub:
        self._thread = threading.Thread(target=self._server.serve_forever, name="peer-hub", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def register(self, activation_id: str, q: queue.Queue[Any]) -> bool:
        with self._lock:
            if activation_id in self._queues:
                return False
            self._queues[activation_id] = q
            return True

    def unregister(self, activation_id: str) -> None:
        with self._lock:
            self._queues.pop(activation_id, None)

    def route(self, msg: Message) -> None:
        with self._lock:
            q = self._queues.get(msg.activation_id)
            self.received += 1
            if q is None:
                self.dropped += 1
        if q is None:
            log.debug("no activation %s here; dropping %s", msg.activation_id, type(msg).__name__)
            return
        q.put(("msg", msg))
