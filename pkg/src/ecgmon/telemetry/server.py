"""Threaded TCP ingestion service.

Each connection gets its own :class:`FrameScanner`; decoded frames are
appended to the log of their (device, session) pair. The session registry
is the only state shared between connections and is guarded by a lock.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from dataclasses import dataclass
from pathlib import Path

from ..errors import StartupError
from .frame import MAX_FRAME_SIZE, FrameScanner
from .session import DeviceSession

log = logging.getLogger(__name__)

POLL_INTERVAL_S = 0.2


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 0
    storage_dir: str = "sessions"
    max_sessions: int = 64
    max_frame_size: int = MAX_FRAME_SIZE


class _Handler(socketserver.BaseRequestHandler):
    server: "_TCPServer"

    def handle(self):
        ingest = self.server.ingest
        scanner = FrameScanner(max_frame_size=ingest.config.max_frame_size)
        sock: socket.socket = self.request
        sock.settimeout(POLL_INTERVAL_S)
        refused = 0
        while True:
            try:
                chunk = sock.recv(65536)
            except socket.timeout:
                if ingest.stopping.is_set():
                    break
                continue
            except OSError:
                break
            frames = scanner.finish() if not chunk else scanner.feed(chunk)
            for frame, raw in frames:
                session = ingest.session_for(frame.device_id, frame.session_id)
                if session is None:
                    refused += 1
                    continue
                session.append(frame, raw)
            if not chunk:
                break
        ingest.record_connection(scanner.stats, refused)


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(self, addr, ingest: "IngestServer"):
        self.ingest = ingest
        super().__init__(addr, _Handler)


class IngestServer:
    """Handle for a running ingestion service.

    Use as a context manager, or call :meth:`start` and :meth:`stop`.
    """

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.storage = Path(config.storage_dir)
        self.stopping = threading.Event()
        self._lock = threading.Lock()
        self._sessions: dict[tuple[bytes, bytes], DeviceSession] = {}
        self._totals = {"connections": 0, "frames": 0, "corrupt": 0, "malformed": 0, "skipped_bytes": 0, "refused": 0}
        self._server: _TCPServer | None = None
        self._thread: threading.Thread | None = None

    def start(self) -> "IngestServer":
        self.storage.mkdir(parents=True, exist_ok=True)
        try:
            self._server = _TCPServer((self.config.host, self.config.port), self)
        except OSError as exc:
            raise StartupError(f"cannot bind {self.config.host}:{self.config.port}: {exc}") from exc
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        log.info("ingest listening on %s:%d", *self.address)
        return self

    @property
    def address(self) -> tuple[str, int]:
        if self._server is None:
            raise StartupError("service not started")
        host, port = self._server.server_address[:2]
        return host, port

    def session_for(self, device_id: bytes, session_id: bytes) -> DeviceSession | None:
        key = (device_id, session_id)
        with self._lock:
            s = self._sessions.get(key)
            if s is None:
                if len(self._sessions) >= self.config.max_sessions:
                    return None
                s = DeviceSession(device_id, session_id, self.storage)
                self._sessions[key] = s
            return s

    def record_connection(self, stats, refused: int) -> None:
        with self._lock:
            t = self._totals
            t["connections"] += 1
            t["frames"] += stats.frames
            t["corrupt"] += stats.corrupt
            t["malformed"] += stats.malformed
            t["skipped_bytes"] += stats.skipped_bytes
            t["refused"] += refused

    def stats(self) -> dict:
        with self._lock:
            out = dict(self._totals)
            out["sessions"] = len(self._sessions)
        out["rejected"] = out["corrupt"] + out["malformed"]
        return out

    def sessions(self) -> list[DeviceSession]:
        with self._lock:
            return list(self._sessions.values())

    def stop(self) -> None:
        """Stop accepting, let handlers drain, then flush every session log."""
        if self._server is None:
            return
        self.stopping.set()
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()
        for s in self.sessions():
            s.close()
        self._server = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_ingest(config: ServiceConfig) -> IngestServer:
    return IngestServer(config).start()
