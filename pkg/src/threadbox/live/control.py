"""Control channel: the four endpoints a program writes to sandbox itself.

The kernel-based variant of this model exposes four virtual files
(sandbox_ps, promises, debug, complain); here the same four endpoints live
behind a unix stream socket whose path reaches the child via the
THREADBOX_CTRL environment variable.

Wire format, one request per line, UTF-8:

    <endpoint> <tid> <tgid>[ <payload>]\\n

and one response line per request:

    ok[ note=<code>]\\n
    err <code> <detail>\\n

Clients keep a single connection per process and serialize writes on it, so
declared threads only ever issue read/write on an already-open descriptor
(ungated by any promise) when talking to the supervisor.
"""

from __future__ import annotations

import socket
import struct
import threading
from typing import Callable, Optional

from ..errors import ControlProtocolError

CTRL_ENV = "THREADBOX_CTRL"

ENDPOINT_SANDBOX_PS = "sandbox_ps"
ENDPOINT_PROMISES = "promises"
ENDPOINT_DEBUG = "debug"
ENDPOINT_COMPLAIN = "complain"

ENDPOINTS = (
    ENDPOINT_SANDBOX_PS,
    ENDPOINT_PROMISES,
    ENDPOINT_DEBUG,
    ENDPOINT_COMPLAIN,
)


def parse_request(line: str) -> tuple[str, int, int, str]:
    """Split a request line into (endpoint, tid, tgid, payload)."""
    parts = line.rstrip("\n").split(" ", 3)
    if len(parts) < 3:
        raise ControlProtocolError(f"short request: {line!r}")
    endpoint = parts[0]
    if endpoint not in ENDPOINTS:
        raise ControlProtocolError(f"unknown endpoint: {endpoint!r}")
    try:
        tid = int(parts[1])
        tgid = int(parts[2])
    except ValueError:
        raise ControlProtocolError(f"bad tid/tgid in request: {line!r}")
    if tid < 1 or tgid < 1:
        raise ControlProtocolError(f"tid/tgid must be >= 1: {line!r}")
    payload = parts[3] if len(parts) == 4 else ""
    return endpoint, tid, tgid, payload


def format_request(endpoint: str, tid: int, tgid: int, payload: str = "") -> str:
    if payload:
        return f"{endpoint} {tid} {tgid} {payload}\n"
    return f"{endpoint} {tid} {tgid}\n"


Handler = Callable[[str, int, int, str, Optional[int]], str]


class ControlServer:
    """Unix-socket server multiplexing the four control endpoints.

    The handler receives (endpoint, tid, tgid, payload, peer_pid) and
    returns the response line (without newline). Runs its accept loop and
    per-connection readers on daemon threads; never touches ptrace.
    """

    def __init__(self, path: str, handler: Handler):
        self.path = path
        self._handler = handler
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.bind(path)
        self._sock.listen(64)
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="threadbox-ctrl", daemon=True
        )
        self._closed = threading.Event()

    def start(self) -> None:
        self._accept_thread.start()

    def close(self) -> None:
        self._closed.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(
                target=self._serve, args=(conn,), daemon=True
            ).start()

    def _peer_pid(self, conn: socket.socket) -> Optional[int]:
        try:
            cred = conn.getsockopt(
                socket.SOL_SOCKET, socket.SO_PEERCRED, struct.calcsize("3i")
            )
            pid, _, _ = struct.unpack("3i", cred)
            return pid
        except OSError:
            return None

    def _serve(self, conn: socket.socket) -> None:
        peer_pid = self._peer_pid(conn)
        buf = b""
        with conn:
            while True:
                try:
                    chunk = conn.recv(4096)
                except OSError:
                    return
                if not chunk:
                    return
                buf += chunk
                while b"\n" in buf:
                    raw, buf = buf.split(b"\n", 1)
                    try:
                        line = raw.decode("utf-8")
                        endpoint, tid, tgid, payload = parse_request(line + "\n")
                        response = self._handler(endpoint, tid, tgid, payload, peer_pid)
                    except ControlProtocolError as exc:
                        response = f"err bad-request {exc}"
                    except Exception as exc:  # handler bug: fail loudly
                        response = f"err internal {exc}"
                    try:
                        conn.sendall(response.encode("utf-8") + b"\n")
                    except OSError:
                        return
