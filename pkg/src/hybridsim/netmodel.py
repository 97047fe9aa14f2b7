"""Static network model: buses, branches, devices, admittance matrices.

All quantities are per unit on the system MVA base.  Three-phase quantities use
a per-phase base (S_base / 3), so a balanced set has the same per-unit value in
every phase as its positive-sequence component.

Symmetrical components are ordered (zero, positive, negative) internally.
Exchange records and user-facing code use the "120" naming (s1, s2, s0).
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

ALPHA = cmath.exp(2j * math.pi / 3)

# abc = FORTESCUE @ [s0, s1, s2]
FORTESCUE = np.array([[1, 1, 1],
                      [1, ALPHA**2, ALPHA],
                      [1, ALPHA, ALPHA**2]], dtype=complex)
FORTESCUE_INV = FORTESCUE.conj().T / 3.0


class TopologyError(Exception):
    """Raised for disconnected, singular or non-separable topologies."""


class Representation(str, Enum):
    POSITIVE_SEQUENCE = "positive_sequence"
    THREE_SEQUENCE = "three_sequence"
    THREE_PHASE = "three_phase"

    @property
    def width(self) -> int:
        return 1 if self is Representation.POSITIVE_SEQUENCE else 3


@dataclass(frozen=True)
class SequencePhasor:
    s1: complex = 0j
    s2: complex = 0j
    s0: complex = 0j

    def as_012(self) -> np.ndarray:
        return np.array([self.s0, self.s1, self.s2], dtype=complex)

    @classmethod
    def from_012(cls, v) -> "SequencePhasor":
        return cls(s1=complex(v[1]), s2=complex(v[2]), s0=complex(v[0]))


@dataclass(frozen=True)
class ThreePhasePhasor:
    a: complex = 0j
    b: complex = 0j
    c: complex = 0j

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c], dtype=complex)

    @classmethod
    def from_array(cls, v) -> "ThreePhasePhasor":
        return cls(complex(v[0]), complex(v[1]), complex(v[2]))

    @classmethod
    def balanced(cls, v1: complex) -> "ThreePhasePhasor":
        return cls.from_array(FORTESCUE @ np.array([0, v1, 0]))


def seq_to_phase(s: SequencePhasor) -> ThreePhasePhasor:
    return ThreePhasePhasor.from_array(FORTESCUE @ s.as_012())


def phase_to_seq(p: ThreePhasePhasor) -> SequencePhasor:
    return SequencePhasor.from_012(FORTESCUE_INV @ p.as_array())


def seq_block_to_abc(y012: np.ndarray) -> np.ndarray:
    """Similarity transform of a (3m x 3m) bus-interleaved 012 matrix to abc."""
    m = y012.shape[0] // 3
    t = np.kron(np.eye(m), FORTESCUE)
    ti = np.kron(np.eye(m), FORTESCUE_INV)
    return t @ y012 @ ti


def abc_block_to_seq(yabc: np.ndarray) -> np.ndarray:
    m = yabc.shape[0] // 3
    t = np.kron(np.eye(m), FORTESCUE)
    ti = np.kron(np.eye(m), FORTESCUE_INV)
    return ti @ yabc @ t


# --------------------------------------------------------------------------
# Data model

BUS_KINDS = ("load", "generator", "boundary", "dummy")
CONNECTIONS = ("yg-yg", "d-yg", "yg-d", "d-d")


@dataclass(frozen=True)
class Bus:
    id: str
    base_kv: float
    kind: str = "load"
    subsystem: str = "external"
    pf_type: str = "pq"          # slack | pv | pq
    v_set: float = 1.0
    p_gen: float = 0.0
    shunt: complex = 0j          # positive/negative sequence shunt admittance
    shunt0: complex = 0j         # zero sequence shunt admittance

    def __post_init__(self):
        if not self.base_kv > 0:
            raise ValueError(f"bus {self.id}: base_kv must be positive")
        if self.kind not in BUS_KINDS:
            raise ValueError(f"bus {self.id}: unknown kind {self.kind!r}")

    @property
    def z_base_ohm(self) -> float:
        return self.base_kv**2 / 100.0


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    z1: complex = 0j
    z0: complex | None = None
    z2: complex | None = None
    b1: float = 0.0
    b0: float | None = None
    tap: float = 1.0
    conn: str = "yg-yg"
    status: str = "closed"
    is_virtual_breaker: bool = False

    def __post_init__(self):
        if self.conn not in CONNECTIONS:
            raise ValueError(f"branch {self.id}: unknown connection {self.conn!r}")
        if self.status not in ("closed", "open"):
            raise ValueError(f"branch {self.id}: bad status {self.status!r}")
        if self.status == "closed" and not self.is_virtual_breaker and abs(self.z1) == 0:
            raise ValueError(f"branch {self.id}: zero impedance is only allowed for virtual breakers")
        if self.z2 is None:
            object.__setattr__(self, "z2", self.z1)
        if self.z0 is None:
            object.__setattr__(self, "z0", self.z1)
        if self.b0 is None:
            object.__setattr__(self, "b0", self.b1)

    @property
    def closed(self) -> bool:
        return self.status == "closed"

    @property
    def shift(self) -> complex:
        """Positive-sequence voltage ratio to/from introduced by the winding connection."""
        if self.conn == "d-yg":
            return cmath.exp(1j * math.pi / 6)
        if self.conn == "yg-d":
            return cmath.exp(-1j * math.pi / 6)
        return 1.0 + 0j

    def sequence_stamp(self, seq: int) -> np.ndarray:
        """2x2 nodal admittance of the branch in sequence ``seq`` (0, 1 or 2)."""
        z = {0: self.z0, 1: self.z1, 2: self.z2}[seq]
        b = self.b0 if seq == 0 else self.b1
        y = 1.0 / z
        a = 1.0 / self.tap
        if seq == 0:
            from_grounded = self.conn in ("yg-yg", "yg-d")
            to_grounded = self.conn in ("yg-yg", "d-yg")
            out = np.zeros((2, 2), dtype=complex)
            if from_grounded and to_grounded:
                out[:] = y * np.array([[a * a, -a], [-a, 1.0]])
            elif to_grounded:
                out[1, 1] = y
            elif from_grounded:
                out[0, 0] = y * a * a
        else:
            t = self.shift if seq == 1 else self.shift.conjugate()
            out = y * np.array([[a * a, -a * t.conjugate()], [-a * t, 1.0]])
        out[0, 0] += 0.5j * b
        out[1, 1] += 0.5j * b
        return out


@dataclass(frozen=True)
class Machine:
    """Two-axis synchronous machine with a first-order exciter."""
    id: str
    bus: str
    H: float
    xd: float
    xdp: float
    xq: float
    xqp: float
    Td0p: float
    Tq0p: float = 0.0
    D: float = 0.0
    KA: float = 20.0
    TA: float = 0.2
    x2: float | None = None
    x0: float | None = None

    @property
    def one_axis(self) -> bool:
        return self.Tq0p <= 0.0

    @property
    def xqp_eff(self) -> float:
        return self.xq if self.one_axis else self.xqp

    @property
    def x_neg(self) -> float:
        return self.x2 if self.x2 is not None else 0.5 * (self.xdp + self.xqp_eff)

    @property
    def x_zero(self) -> float:
        return self.x0 if self.x0 is not None else 0.5 * self.xdp


@dataclass(frozen=True)
class Load:
    """Static load on each listed phase.

    ``p``/``q`` are per-phase pu.  The power flow treats them as constant
    power; the dynamic engines convert them to the constant impedance that
    draws this power at the power-flow voltage (``admittance`` is the value at
    1 pu voltage).
    """
    id: str
    bus: str
    p: float
    q: float
    phases: str = "abc"
    grounded: bool = True

    @property
    def admittance(self) -> complex:
        return complex(self.p, -self.q)


@dataclass(frozen=True)
class MotorSpec:
    """Single-phase A/C motor group connected phase-to-neutral.

    Electrical parameters are per unit on the motor's own rating; ``p0`` is the
    running active draw at 1 pu voltage on the system per-phase base, which
    fixes the rating.
    """
    id: str
    bus: str
    phase: str
    p0: float
    rs: float = 0.04
    xls: float = 0.08
    xm: float = 2.0
    rr: float = 0.05
    xlr: float = 0.08
    H: float = 0.04
    t_load: float = 0.9            # load torque at synchronous speed (own pu)
    c0: float = 0.6                # constant fraction of the load torque
    stall_speed: float = 0.5
    v_stall: float = 0.55
    t_stall: float = 2.0 / 60.0
    emt_id: str | None = None

    def __post_init__(self):
        if self.phase not in ("a", "b", "c", "abc"):
            raise ValueError(f"motor {self.id}: phase must be a, b, c or abc")

    @property
    def phase_index(self) -> int:
        return "abc".index(self.phase) if self.phase != "abc" else -1


@dataclass(frozen=True)
class FaultSpec:
    bus: str
    kind: str = "SLG"
    phases: str = "a"
    r_fault: float = 0.0          # ohm
    t_on: float = 0.0
    t_off: float = 0.0

    def __post_init__(self):
        if self.kind not in ("SLG", "LL", "LLG", "3phase"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if not self.t_off > self.t_on:
            raise ValueError("fault t_off must exceed t_on")
        expected = {"SLG": 1, "LL": 2, "LLG": 2, "3phase": 3}[self.kind]
        if len(self.phases) != expected:
            raise ValueError(f"{self.kind} fault needs {expected} phase(s), got {self.phases!r}")

    def shunt_abc(self, z_base_ohm: float) -> np.ndarray:
        """3x3 phase-coordinate shunt admittance of the fault at a bus."""
        r = max(self.r_fault / z_base_ohm, 1e-6)
        g = 1.0 / r
        idx = ["abc".index(p) for p in self.phases]
        y = np.zeros((3, 3), dtype=complex)
        if self.kind in ("SLG", "LLG", "3phase"):
            for i in idx:
                y[i, i] += g
        else:
            i, j = idx
            y[i, i] += g
            y[j, j] += g
            y[i, j] -= g
            y[j, i] -= g
        return y


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    machines: tuple[Machine, ...] = ()
    loads: tuple[Load, ...] = ()
    motors: tuple[MotorSpec, ...] = ()
    s_base: float = 100.0
    name: str = "net"
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bus id")
        object.__setattr__(self, "_index", {b: i for i, b in enumerate(ids)})
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in self._index:
                    raise ValueError(f"branch {br.id}: unknown bus {end}")
        for dev in (*self.machines, *self.loads, *self.motors):
            if dev.bus not in self._index:
                raise ValueError(f"{dev.id}: unknown bus {dev.bus}")

    @property
    def n(self) -> int:
        return len(self.buses)

    def index(self, bus_id: str) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise KeyError(f"unknown bus {bus_id!r}") from None

    def bus(self, bus_id: str) -> Bus:
        return self.buses[self.index(bus_id)]

    def with_branch_status(self, branch_id: str, status: str) -> "NetworkModel":
        brs = tuple(replace(b, status=status) if b.id == branch_id else b for b in self.branches)
        return replace(self, branches=brs, _index=None)


@dataclass(frozen=True)
class SequenceYbus:
    y0: sp.csc_matrix
    y1: sp.csc_matrix
    y2: sp.csc_matrix

    def __getitem__(self, seq: int) -> sp.csc_matrix:
        return (self.y0, self.y1, self.y2)[seq]

    def interleaved(self) -> sp.csc_matrix:
        """3n x 3n matrix with per-bus (0, 1, 2) ordering."""
        n = self.y1.shape[0]
        out = sp.lil_matrix((3 * n, 3 * n), dtype=complex)
        for s, ys in enumerate((self.y0, self.y1, self.y2)):
            coo = ys.tocoo()
            for i, j, v in zip(coo.row, coo.col, coo.data):
                out[3 * i + s, 3 * j + s] = v
        return out.tocsc()


def _seq_matrix(net: NetworkModel, seq: int) -> sp.csc_matrix:
    rows, cols, vals = [], [], []
    for br in net.branches:
        if not br.closed or br.is_virtual_breaker:
            continue
        i, j = net.index(br.from_bus), net.index(br.to_bus)
        st = br.sequence_stamp(seq)
        for (a, p), (b, q) in ((x, y) for x in ((0, i), (1, j)) for y in ((0, i), (1, j))):
            rows.append(p)
            cols.append(q)
            vals.append(st[a, b])
    for k, bus in enumerate(net.buses):
        y = bus.shunt0 if seq == 0 else bus.shunt
        if y != 0:
            rows.append(k)
            cols.append(k)
            vals.append(y)
    return sp.csc_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(net.n, net.n))


def build_ybus(net: NetworkModel, rep: Representation | str):
    """Network admittance matrix (branches and bus shunts only).

    positive_sequence -> n x n sparse matrix; three_sequence -> SequenceYbus with
    one n x n matrix per sequence; three_phase -> 3n x 3n sparse matrix with
    per-bus (a, b, c) ordering, obtained from sequence data by a per-branch
    similarity transform.
    """
    rep = Representation(rep)
    if rep is Representation.POSITIVE_SEQUENCE:
        return _seq_matrix(net, 1)
    if rep is Representation.THREE_SEQUENCE:
        return SequenceYbus(_seq_matrix(net, 0), _seq_matrix(net, 1), _seq_matrix(net, 2))
    n = net.n
    out = sp.lil_matrix((3 * n, 3 * n), dtype=complex)
    for br in net.branches:
        if not br.closed or br.is_virtual_breaker:
            continue
        ends = (net.index(br.from_bus), net.index(br.to_bus))
        y012 = np.zeros((6, 6), dtype=complex)
        for s in range(3):
            st = br.sequence_stamp(s)
            for a in range(2):
                for b in range(2):
                    y012[3 * a + s, 3 * b + s] = st[a, b]
        yabc = seq_block_to_abc(y012)
        for a in range(2):
            for b in range(2):
                ra, rb = 3 * ends[a], 3 * ends[b]
                out[ra:ra + 3, rb:rb + 3] = out[ra:ra + 3, rb:rb + 3].toarray() + yabc[3 * a:3 * a + 3, 3 * b:3 * b + 3]
    for k, bus in enumerate(net.buses):
        if bus.shunt != 0 or bus.shunt0 != 0:
            blk = seq_block_to_abc(np.diag([bus.shunt0, bus.shunt, bus.shunt]))
            out[3 * k:3 * k + 3, 3 * k:3 * k + 3] = out[3 * k:3 * k + 3, 3 * k:3 * k + 3].toarray() + blk
    return out.tocsc()


def branch_incidence_abc(br: Branch) -> tuple[np.ndarray, np.ndarray]:
    """Real incidence matrix C (k x 6) and coupled leg impedance Z (k x k).

    Branch leg voltages are u = C @ [v_from_abc, v_to_abc] and the leg currents
    satisfy u = Z i.  Node injections into the branch are C.T @ i.  Line
    charging is not included.
    """
    a = 1.0 / br.tap
    s3 = 1.0 / math.sqrt(3.0)
    if br.conn == "yg-yg":
        c = np.hstack([a * np.eye(3), -np.eye(3)])
        z = seq_block_to_abc(np.diag([br.z0, br.z1, br.z2]))
        return c, z
    delta = s3 * np.array([[1, -1, 0], [0, 1, -1], [-1, 0, 1]], dtype=float)
    if br.conn == "d-yg":
        c = np.hstack([a * delta, -np.eye(3)])
    elif br.conn == "yg-d":
        c = np.hstack([a * np.eye(3), -delta])
    else:
        raise ValueError(f"branch {br.id}: d-d connection has no phase-coordinate model")
    if br.z0 != br.z1:
        raise ValueError(f"branch {br.id}: delta-wye legs need z0 == z1")
    return c, br.z1 * np.eye(3, dtype=complex)


def components(n: int, edges) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=int)
    rows = [e[0] for e in edges]
    cols = [e[1] for e in edges]
    g = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return connected_components(g, directed=False)[1]


# --------------------------------------------------------------------------
# Splitting

@dataclass(frozen=True)
class SplitResult:
    detailed: NetworkModel
    external: NetworkModel
    breakers: tuple[tuple[str, str], ...]

    def side_of(self, bus_id: str) -> str:
        if bus_id in self.detailed._index:
            return "detailed"
        if bus_id in self.external._index:
            return "external"
        raise KeyError(bus_id)


def dummy_id(bus_id: str) -> str:
    return f"{bus_id}d"


def split_network(net: NetworkModel, boundary_buses) -> SplitResult:
    """Split at boundary buses into detailed and external subsystems.

    Each boundary bus keeps its own subsystem assignment; a dummy bus is created
    on the opposite side and every branch reaching the boundary bus from that
    side is reconnected to the dummy.  The (boundary, dummy) pairs are the
    virtual breakers.
    """
    boundary = list(boundary_buses)
    if not boundary:
        raise ValueError("boundary bus list is empty")
    side = {b.id: b.subsystem for b in net.buses}
    for b in boundary:
        if b not in side:
            raise KeyError(f"unknown boundary bus {b!r}")
    for b, s in side.items():
        if s not in ("detailed", "external"):
            raise ValueError(f"bus {b}: subsystem must be detailed or external, got {s!r}")

    crossing = []
    placed: dict[str, list[Branch]] = {"detailed": [], "external": []}
    for br in net.branches:
        f, t = br.from_bus, br.to_bus
        sf, st = side[f], side[t]
        if sf == st:
            placed[sf].append(br)
            continue
        if t in boundary and f not in boundary:
            placed[sf].append(replace(br, to_bus=dummy_id(t)))
        elif f in boundary and t not in boundary:
            placed[st].append(replace(br, from_bus=dummy_id(f)))
        else:
            crossing.append(br.id)
    if crossing:
        raise TopologyError("boundary set does not separate the network; crossing branches: "
                            + ", ".join(crossing))

    parts = {}
    for name in ("detailed", "external"):
        buses = [b for b in net.buses if side[b.id] == name]
        for b in boundary:
            if side[b] != name:
                src = net.bus(b)
                buses.append(Bus(dummy_id(b), src.base_kv, kind="dummy", subsystem=name))
        ids = {b.id for b in buses}
        parts[name] = NetworkModel(
            buses=tuple(buses),
            branches=tuple(placed[name]),
            machines=tuple(m for m in net.machines if m.bus in ids),
            loads=tuple(ld for ld in net.loads if ld.bus in ids),
            motors=tuple(m for m in net.motors if m.bus in ids),
            s_base=net.s_base,
            name=f"{net.name}:{name}",
        )
        sub = parts[name]
        edges = [(sub.index(br.from_bus), sub.index(br.to_bus)) for br in sub.branches]
        labels = components(sub.n, edges)
        if sub.n and labels.max() > 0:
            raise TopologyError(f"{name} subsystem is not connected")
    breakers = tuple((b, dummy_id(b)) for b in boundary)
    return SplitResult(parts["detailed"], parts["external"], breakers)
