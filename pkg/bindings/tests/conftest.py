import os
import socket
import tempfile
import threading

import pytest

import threadbox_bindings


class MockChannel:
    """Stand-in supervisor endpoint: records raw request lines and answers
    with write-once and registration semantics faithful to the real one."""

    def __init__(self, path: str):
        self.path = path
        self.raw: list[bytes] = []
        self.registered: set[int] = set()
        self.declared: set[tuple[int, int]] = set()
        self.responder = None  # optional override: line -> response str
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.bind(path)
        self._sock.listen(16)
        self._closing = False
        self._conns: list[socket.socket] = []
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def close(self):
        self._closing = True
        self._sock.close()
        for conn in self._conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
                conn.close()
            except OSError:
                pass

    def lines(self) -> list[str]:
        return [raw.decode() for raw in self.raw]

    def _respond(self, line: str) -> str:
        if self.responder is not None:
            custom = self.responder(line)
            if custom is not None:
                return custom
        parts = line.split(" ", 3)
        endpoint, tid, tgid = parts[0], int(parts[1]), int(parts[2])
        if endpoint == "sandbox_ps":
            self.registered.add(tgid)
            return "ok"
        if endpoint in ("debug", "complain"):
            return "ok"
        if endpoint == "promises":
            if tgid not in self.registered:
                return "err unregistered-process write sandbox_ps first"
            if (tgid, tid) in self.declared:
                return "ok note=write-once"
            self.declared.add((tgid, tid))
            return "ok"
        return "err bad-request unknown endpoint"

    def _accept_loop(self):
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            self._conns.append(conn)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn):
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
                    self.raw.append(raw)
                    response = self._respond(raw.decode())
                    try:
                        conn.sendall(response.encode() + b"\n")
                    except OSError:
                        return


@pytest.fixture
def mock_channel(monkeypatch):
    tmp = tempfile.TemporaryDirectory(prefix="threadbox-mock-")
    path = os.path.join(tmp.name, "ctrl.sock")
    channel = MockChannel(path)
    monkeypatch.setenv("THREADBOX_CTRL", path)
    monkeypatch.delenv("THREADBOX_PERMISSIVE", raising=False)
    # fresh client state per test: the module keeps one channel per process
    monkeypatch.setattr(threadbox_bindings, "_channel", threadbox_bindings._Channel())
    yield channel
    channel.close()
    tmp.cleanup()


@pytest.fixture
def no_channel(monkeypatch):
    monkeypatch.delenv("THREADBOX_CTRL", raising=False)
    monkeypatch.delenv("THREADBOX_PERMISSIVE", raising=False)
    monkeypatch.setattr(threadbox_bindings, "_channel", threadbox_bindings._Channel())

