"""Loopback TCP link between the coordinator and an EMT engine.

Every message is a 12-byte header (kind, float count, text length; little-endian
uint32) followed by that many little-endian float64 values and a UTF-8 text
block.  Complex arrays travel as interleaved (real, imag) pairs.  The EMT
engine runs in a server thread that owns the circuit; the client implements the
same submit/collect interface as the in-process endpoint.
"""
from __future__ import annotations

import json
import socket
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .signals import EventSignal

HANDSHAKE = 1
INJECTION_FRAME = 2
THEVENIN_UPDATE = 3
EVENT_SIGNAL = 4
SWITCH_NOTICE = 5
SHUTDOWN = 6
KINDS = {HANDSHAKE: "HANDSHAKE", INJECTION_FRAME: "INJECTION_FRAME", THEVENIN_UPDATE: "THEVENIN_UPDATE",
         EVENT_SIGNAL: "EVENT_SIGNAL", SWITCH_NOTICE: "SWITCH_NOTICE", SHUTDOWN: "SHUTDOWN"}
VERSION = 1
_HEADER = struct.Struct("<III")


class ProtocolError(RuntimeError):
    pass


@dataclass
class Message:
    kind: int
    values: np.ndarray
    text: str = ""


def encode(kind: int, values=(), text: str = "") -> bytes:
    arr = np.ascontiguousarray(np.asarray(values, dtype="<f8").ravel())
    raw = text.encode("utf-8")
    return _HEADER.pack(kind, arr.size, len(raw)) + arr.tobytes() + raw


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-message")
        buf += chunk
    return bytes(buf)


def receive(sock: socket.socket) -> Message:
    kind, n, m = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if kind not in KINDS:
        raise ProtocolError(f"unknown message kind {kind}")
    values = np.frombuffer(_recv_exact(sock, 8 * n), dtype="<f8") if n else np.zeros(0)
    text = _recv_exact(sock, m).decode("utf-8") if m else ""
    return Message(kind, values.astype(float), text)


def pack_complex(x) -> np.ndarray:
    x = np.asarray(x, dtype=complex).ravel()
    return np.column_stack([x.real, x.imag]).ravel()


def unpack_complex(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1, 2)
    return v[:, 0] + 1j * v[:, 1]


# --------------------------------------------------------------------------
# EMT side

class EmtServer:
    """Serves one EmtCircuit over a loopback socket in a background thread."""

    def __init__(self, ckt, host: str = "127.0.0.1"):
        self.ckt = ckt
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.bind((host, 0))
        self.sock.listen(1)
        self.address = self.sock.getsockname()
        self.error: BaseException | None = None
        self.thread = threading.Thread(target=self._serve, name="emt-server", daemon=True)
        self.thread.start()

    def _serve(self):
        from .coordinator import emt_report
        try:
            conn, _ = self.sock.accept()
            with conn:
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                ckt = self.ckt
                meta = {"boundary": list(ckt.boundary), "buses": [b.id for b in ckt.net.buses],
                        "motors": [s.id for s in ckt.motor_specs]}
                while True:
                    msg = receive(conn)
                    if msg.kind == HANDSHAKE:
                        conn.sendall(encode(HANDSHAKE, [VERSION, ckt.dt, ckt.f0], json.dumps(meta)))
                    elif msg.kind == THEVENIN_UPDATE:
                        m3 = 3 * len(ckt.boundary)
                        n = int(msg.values[0])
                        v_th = unpack_complex(msg.values[1:1 + 2 * m3])
                        z_th = unpack_complex(msg.values[1 + 2 * m3:]).reshape(m3, m3)
                        ckt.set_boundary(v_th, z_th, window=n)
                        ckt.run(n)
                        rep = emt_report(ckt)
                        for sig in rep.signals:
                            conn.sendall(encode(EVENT_SIGNAL, [sig.t_emt], json.dumps(
                                [sig.target, sig.kind, sig.phase, sig.value, sig.source])))
                        conn.sendall(encode(INJECTION_FRAME, _frame_values(rep, meta)))
                    elif msg.kind == SWITCH_NOTICE:
                        continue
                    elif msg.kind == SHUTDOWN:
                        return
        except BaseException as e:      # surfaced to the client on its next receive
            self.error = e
        finally:
            self.sock.close()


def _frame_values(rep, meta) -> np.ndarray:
    parts = [np.array([rep.sample, rep.t, rep.t_center], dtype=float)]
    parts += [pack_complex(rep.injections[b]) for b in meta["boundary"]]
    parts += [pack_complex(rep.voltages[b]) for b in meta["buses"]]
    parts.append(np.array([1.0 if rep.motor_status[m] == "running" else 0.0 for m in meta["motors"]]))
    parts.append(np.array([rep.motor_speed[m] for m in meta["motors"]], dtype=float))
    return np.concatenate(parts)


def _frame_report(values, meta, signals):
    from .coordinator import EmtReport
    sample, t, t_center = values[:3]
    k = 3
    inj, volt = {}, {}
    for b in meta["boundary"]:
        inj[b] = unpack_complex(values[k:k + 6])
        k += 6
    for b in meta["buses"]:
        volt[b] = unpack_complex(values[k:k + 6])
        k += 6
    nm = len(meta["motors"])
    status = {m: ("running" if values[k + j] > 0.5 else "stalled") for j, m in enumerate(meta["motors"])}
    speed = {m: float(values[k + nm + j]) for j, m in enumerate(meta["motors"])}
    return EmtReport(int(sample), float(t), float(t_center), inj, volt, signals, status, speed)


# --------------------------------------------------------------------------
# Coordinator side

class TcpEmt:
    """Client endpoint; starts a loopback server for ``ckt`` and talks to it."""

    def __init__(self, ckt, timeout: float = 600.0):
        self.server = EmtServer(ckt)
        self.sock = socket.create_connection(self.server.address, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.sendall(encode(HANDSHAKE, [VERSION]))
        reply = self._receive()
        if reply.kind != HANDSHAKE or int(reply.values[0]) != VERSION:
            raise ProtocolError("handshake failed")
        self.dt, self.f0 = float(reply.values[1]), float(reply.values[2])
        self.meta = json.loads(reply.text)
        self.messages = {k: 0 for k in KINDS}

    def _receive(self) -> Message:
        try:
            return receive(self.sock)
        except (ProtocolError, OSError) as e:
            if self.server.error is not None:
                raise ProtocolError(f"EMT server failed: {self.server.error!r}") from self.server.error
            raise ProtocolError(str(e)) from e

    def submit(self, v_th, z_th, n: int):
        vals = np.concatenate([[float(n)], pack_complex(v_th), pack_complex(z_th)])
        self.sock.sendall(encode(THEVENIN_UPDATE, vals))
        self.messages[THEVENIN_UPDATE] += 1

    def collect(self):
        signals = []
        while True:
            msg = self._receive()
            self.messages[msg.kind] += 1
            if msg.kind == EVENT_SIGNAL:
                target, kind, phase, value, source = json.loads(msg.text)
                signals.append(EventSignal(float(msg.values[0]), target, kind, phase, value, source))
            elif msg.kind == INJECTION_FRAME:
                return _frame_report(msg.values, self.meta, signals)
            else:
                raise ProtocolError(f"unexpected {KINDS[msg.kind]} while waiting for a frame")

    def advance(self, v_th, z_th, n: int):
        self.submit(v_th, z_th, n)
        return self.collect()

    def notify_switch(self, t: float):
        self.sock.sendall(encode(SWITCH_NOTICE, [t]))

    def close(self):
        if self.sock is None:
            return
        try:
            self.sock.sendall(encode(SHUTDOWN))
        except OSError:
            pass
        self.sock.close()
        self.sock = None
        self.server.thread.join(timeout=10)
