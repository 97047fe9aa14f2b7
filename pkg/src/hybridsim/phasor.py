"""Phasor-domain dynamic simulation.

Machines are two-axis models with a first-order exciter, solved with an
implicit trapezoidal rule alternated with the network solution.  Each
subsystem keeps one factorized admittance matrix in its own representation
(positive sequence, interleaved three-sequence or three-phase); subsystems are
coupled through link branches by a multi-area Thevenin solve.
"""
from __future__ import annotations

import cmath
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .motor import MotorRating, rate_motor
from .netmodel import (
    FORTESCUE, FORTESCUE_INV, FaultSpec, Machine, MotorSpec, NetworkModel, Representation,
    TopologyError, build_ybus,
)
from .signals import EventSignal

log = logging.getLogger(__name__)

W0 = 2.0 * math.pi * 60.0
NET_TOL = 1e-10
NET_MAX_ITER = 20
STEP_TOL = 1e-8
STEP_MAX_ITER = 20
# zero-sequence shunt placed at buses whose zero-sequence network floats
ZERO_SEQ_REG = 1e-3


class NetworkDivergence(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


# --------------------------------------------------------------------------
# Power flow

@dataclass
class PowerFlowResult:
    v: np.ndarray                # positive-sequence bus voltages
    s_gen: dict                  # bus id -> complex generation
    iterations: int
    mismatch: float
    net: NetworkModel

    def voltage(self, bus) -> complex:
        return complex(self.v[self.net.index(bus)])


def _bus_demand(net: NetworkModel, ratings: dict):
    """Constant and voltage-dependent parts of the positive-sequence demand.

    Returns (s_const, quad): the reactive motor demand at bus k is
    quad[k] @ (v^2, v, 1).
    """
    n = net.n
    s_const = np.zeros(n, dtype=complex)
    quad = np.zeros((n, 3))
    for ld in net.loads:
        s_const[net.index(ld.bus)] += complex(ld.p, ld.q) * len(ld.phases) / 3.0
    for m in net.motors:
        r = ratings[m.id]
        k = net.index(m.bus)
        share = 1.0 if m.phase == "abc" else 1.0 / 3.0
        s_const[k] += r.p0 * share
        quad[k] += share * r.q0 * np.array(r.q_coeffs)
    return s_const, quad


def power_flow(net: NetworkModel, tol: float = 1e-10, max_iter: int = 30,
               ratings: dict | None = None) -> PowerFlowResult:
    """Newton-Raphson power flow on the positive-sequence network (polar form)."""
    ratings = ratings if ratings is not None else {m.id: rate_motor(m) for m in net.motors}
    y = build_ybus(net, "positive_sequence").tocsr()
    kinds = [b.pf_type for b in net.buses]
    slack = [i for i, k in enumerate(kinds) if k == "slack"]
    if len(slack) != 1:
        raise ValueError(f"power flow needs exactly one slack bus, found {len(slack)}")
    pv = [i for i, k in enumerate(kinds) if k == "pv"]
    pq = [i for i, k in enumerate(kinds) if k == "pq"]
    pvpq = pv + pq
    vm = np.array([b.v_set if b.pf_type in ("slack", "pv") else 1.0 for b in net.buses])
    va = _shift_angles(net, slack[0])
    p_sched = np.array([b.p_gen for b in net.buses])
    s_const, quad = _bus_demand(net, ratings)

    def demand(vm):
        return s_const + 1j * (quad[:, 0] * vm**2 + quad[:, 1] * vm + quad[:, 2])

    def d_demand(vm):
        return 1j * (2 * quad[:, 0] * vm + quad[:, 1])

    mis = math.inf
    for it in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        ibus = y @ v
        s_calc = v * np.conj(ibus)
        s_spec = p_sched - demand(vm)
        dS = s_calc - s_spec
        f = np.concatenate([dS.real[pvpq], dS.imag[pq]])
        mis = float(np.max(np.abs(f))) if f.size else 0.0
        if mis < tol:
            break
        if it == max_iter:
            raise RuntimeError(f"power flow did not converge, max mismatch {mis:.3e}")
        dva, dvm = _ds_dv(y, v)
        dvm = dvm + sp.diags(d_demand(vm))
        j11 = dva[pvpq][:, pvpq].real
        j12 = dvm[pvpq][:, pq].real
        j21 = dva[pq][:, pvpq].imag
        j22 = dvm[pq][:, pq].imag
        jac = sp.bmat([[j11, j12], [j21, j22]], format="csc")
        dx = spla.spsolve(jac, -f)
        va[pvpq] += dx[:len(pvpq)]
        vm[pq] += dx[len(pvpq):]
    v = vm * np.exp(1j * va)
    s_inj = v * np.conj(y @ v) + demand(vm)
    s_gen = {net.buses[i].id: complex(s_inj[i]) for i in slack + pv}
    return PowerFlowResult(v, s_gen, it, mis, net)


def _shift_angles(net: NetworkModel, root: int) -> np.ndarray:
    """Starting angles that carry transformer phase shifts outward from the slack."""
    va = np.zeros(net.n)
    adj = {i: [] for i in range(net.n)}
    for br in net.branches:
        if br.closed and not br.is_virtual_breaker:
            f, t = net.index(br.from_bus), net.index(br.to_bus)
            a = cmath.phase(br.shift)
            adj[f].append((t, a))
            adj[t].append((f, -a))
    seen = {root}
    todo = [root]
    while todo:
        k = todo.pop()
        for j, a in adj[k]:
            if j not in seen:
                seen.add(j)
                va[j] = va[k] + a
                todo.append(j)
    return va


def _ds_dv(y, v):
    """Partial derivatives of bus injections S = V conj(Y V) (polar)."""
    ibus = y @ v
    dv = sp.diags(v)
    di = sp.diags(ibus)
    dvn = sp.diags(v / np.abs(v))
    ds_dvm = dv @ np.conj(y @ dvn) + np.conj(di) @ dvn
    ds_dva = 1j * dv @ np.conj(di - y @ dv)
    return sp.csr_matrix(ds_dva), sp.csr_matrix(ds_dvm)


def normalize_loads(net: NetworkModel, pf: PowerFlowResult) -> NetworkModel:
    """Replace load powers by the values their constant impedance draws at 1 pu."""
    out = []
    for ld in net.loads:
        vm = abs(pf.v[pf.net.index(ld.bus)]) if ld.bus in pf.net._index else 1.0
        out.append(replace(ld, p=ld.p / vm**2, q=ld.q / vm**2))
    return replace(net, loads=tuple(out), _index=None)


# --------------------------------------------------------------------------
# Machines

@dataclass
class MachineState:
    delta: float
    omega: float
    eqp: float
    edp: float
    efd: float
    pm: float
    vref: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.omega, self.eqp, self.edp, self.efd])

    def set_array(self, x):
        self.delta, self.omega, self.eqp, self.edp, self.efd = (float(v) for v in x)


def _to_dq(v: complex, delta: float) -> complex:
    """Network phasor -> (d + j q) in the rotor frame."""
    return v * cmath.exp(-1j * (delta - math.pi / 2))


def _from_dq(x: complex, delta: float) -> complex:
    return x * cmath.exp(1j * (delta - math.pi / 2))


def machine_current(m: Machine, st: MachineState, v: complex) -> complex:
    """Stator current injected into the network (positive sequence)."""
    vdq = _to_dq(v, st.delta)
    vd, vq = vdq.real, vdq.imag
    i_d = (st.eqp - vq) / m.xdp
    i_q = (vd - st.edp) / m.xqp_eff
    return _from_dq(complex(i_d, i_q), st.delta)


def machine_init(m: Machine, v: complex, s: complex) -> MachineState:
    i = np.conj(s / v)
    eq = v + 1j * m.xq * i
    delta = cmath.phase(eq)
    idq = _to_dq(i, delta)
    vdq = _to_dq(v, delta)
    i_d, i_q = idq.real, idq.imag
    vd, vq = vdq.real, vdq.imag
    eqp = vq + m.xdp * i_d
    edp = 0.0 if m.one_axis else vd - m.xqp * i_q
    efd = eqp + (m.xd - m.xdp) * i_d
    pm = vd * i_d + vq * i_q
    return MachineState(delta, 1.0, eqp, edp, efd, pm, abs(v) + efd / m.KA)


def machine_derivatives(m: Machine, st: MachineState, v: complex, w_base: float = W0) -> np.ndarray:
    vdq = _to_dq(v, st.delta)
    vd, vq = vdq.real, vdq.imag
    i_d = (st.eqp - vq) / m.xdp
    i_q = (vd - st.edp) / m.xqp_eff
    pe = vd * i_d + vq * i_q
    d_delta = w_base * (st.omega - 1.0)
    d_omega = (st.pm - pe - m.D * (st.omega - 1.0)) / (2.0 * m.H)
    d_eqp = (st.efd - st.eqp - (m.xd - m.xdp) * i_d) / m.Td0p
    d_edp = 0.0 if m.one_axis else (-st.edp + (m.xq - m.xqp) * i_q) / m.Tq0p
    d_efd = (m.KA * (st.vref - abs(v)) - st.efd) / m.TA
    return np.array([d_delta, d_omega, d_eqp, d_edp, d_efd])


def machine_pe(m: Machine, st: MachineState, v: complex) -> float:
    return float((v * np.conj(machine_current(m, st, v))).real)


# --------------------------------------------------------------------------
# A/C motor performance model

V_BREAK = 0.7


@dataclass
class ACMotorPerf:
    """Two-state performance model of one motor group.

    Running: P = p0 and Q = q0 (a v^2 + b v + c) down to ``V_BREAK``; below it
    the draw scales as v^2 so the curve stays bounded.  Stalled: constant
    locked-rotor admittance.
    """
    id: str
    bus: str
    phase: str
    p0: float
    q0: float
    q_coeffs: tuple
    y_stall: complex
    v_stall: float = 0.55
    t_stall: float = 2.0 / 60.0
    status: str = "running"
    override_active: bool = False
    commanded: str | None = None
    below_time: float = 0.0
    stall_time: float | None = None
    emt_id: str | None = None

    @classmethod
    def from_spec(cls, spec: MotorSpec, rating: MotorRating | None = None) -> "ACMotorPerf":
        r = rating or rate_motor(spec)
        return cls(spec.id, spec.bus, spec.phase, r.p0, r.q0, r.q_coeffs, r.y_stall,
                   spec.v_stall, spec.t_stall, emt_id=spec.emt_id or spec.id)

    def running_q(self, v: float) -> float:
        a, b, c = self.q_coeffs
        return self.q0 * (a * v * v + b * v + c)


def acmotor_pq(m: ACMotorPerf, v_mag: float) -> tuple[float, float]:
    if v_mag < 0:
        raise ValueError("voltage magnitude must be non-negative")
    if m.status == "stalled":
        s = v_mag * v_mag * np.conj(m.y_stall)
        return float(s.real), float(s.imag)
    if v_mag >= V_BREAK:
        return m.p0, m.running_q(v_mag)
    k = (v_mag / V_BREAK) ** 2
    return m.p0 * k, m.running_q(V_BREAK) * k


def apply_override(m: ACMotorPerf, signal: EventSignal) -> bool:
    """Apply an externally commanded status; returns True if the status changed.

    A stalled motor stays stalled (no restart model), so a later run command
    is recorded but has no effect.
    """
    if signal.kind not in ("motor_stall", "motor_run"):
        raise ValueError(f"signal kind {signal.kind!r} does not apply to motors")
    value = "stalled" if signal.kind == "motor_stall" else "running"
    if signal.value in ("stalled", "running"):
        value = signal.value
    m.override_active = True
    m.commanded = value
    if value == "stalled" and m.status != "stalled":
        m.status = "stalled"
        m.stall_time = signal.t_emt
        return True
    return False


# --------------------------------------------------------------------------
# Representation helpers

_E1 = FORTESCUE[:, 1]


def vec_from_abc(rep: Representation, x_abc) -> np.ndarray:
    x_abc = np.asarray(x_abc, dtype=complex)
    if rep is Representation.THREE_PHASE:
        return x_abc
    s = FORTESCUE_INV @ x_abc
    return s[1:2] if rep is Representation.POSITIVE_SEQUENCE else s


def abc_from_vec(rep: Representation, x) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    if rep is Representation.THREE_PHASE:
        return x
    if rep is Representation.POSITIVE_SEQUENCE:
        return _E1 * x[0]
    return FORTESCUE @ x


def seq012_from_vec(rep: Representation, x) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    if rep is Representation.THREE_PHASE:
        return FORTESCUE_INV @ x
    if rep is Representation.POSITIVE_SEQUENCE:
        return np.array([0.0, x[0], 0.0], dtype=complex)
    return x


def vec_from_seq012(rep: Representation, s) -> np.ndarray:
    s = np.asarray(s, dtype=complex)
    if rep is Representation.THREE_PHASE:
        return FORTESCUE @ s
    if rep is Representation.POSITIVE_SEQUENCE:
        return s[1:2]
    return s


def block_from_abc(rep: Representation, y_abc) -> np.ndarray:
    y_abc = np.asarray(y_abc, dtype=complex)
    if rep is Representation.THREE_PHASE:
        return y_abc
    y = FORTESCUE_INV @ y_abc @ FORTESCUE
    return y[1:2, 1:2] if rep is Representation.POSITIVE_SEQUENCE else y


def block_from_seq(rep: Representation, y0, y1, y2) -> np.ndarray:
    d = np.diag([y0, y1, y2]).astype(complex)
    if rep is Representation.THREE_PHASE:
        return FORTESCUE @ d @ FORTESCUE_INV
    if rep is Representation.POSITIVE_SEQUENCE:
        return d[1:2, 1:2]
    return d


# --------------------------------------------------------------------------
# Subsystem

class SubsystemSim:
    """One network partition with its devices, admittance matrix and voltages."""

    def __init__(self, net: NetworkModel, rep, pf: PowerFlowResult, name: str | None = None,
                 ratings: dict | None = None):
        self.rep = Representation(rep)
        self.w = self.rep.width
        self.name = name or net.name
        self.net = normalize_loads(net, pf)
        self.n = self.net.n
        ratings = ratings or {m.id: rate_motor(m) for m in net.motors}
        self.machines = list(self.net.machines)
        self.mstates = []
        for m in self.machines:
            self.mstates.append(machine_init(m, pf.voltage(m.bus), pf.s_gen[m.bus]))
        self.motors = [ACMotorPerf.from_spec(s, ratings[s.id]) for s in self.net.motors]
        self.motor_index = {m.id: k for k, m in enumerate(self.motors)}
        for m in self.motors:
            if m.emt_id:
                self.motor_index.setdefault(m.emt_id, self.motor_index[m.id])
        self.faults: dict = {}
        self.norton = None            # (bus, y_abc 3x3, i_abc 3)
        self.injections: dict = {}    # bus -> abc current injected into the bus
        self.topology_version = 0
        self._base = None
        self._fault_shunt_cache = {}
        self.V = np.zeros(self.n * self.w, dtype=complex)
        self.link_inj = np.zeros(self.n * self.w, dtype=complex)
        for k, b in enumerate(self.net.buses):
            v1 = pf.voltage(b.id) if b.id in pf.net._index else pf.voltage(b.id[:-1])
            self.V[self._sl(k)] = vec_from_seq012(self.rep, [0.0, v1, 0.0])
        self.rebuild()

    # -- indexing ---------------------------------------------------------------
    def _sl(self, k: int) -> slice:
        return slice(self.w * k, self.w * k + self.w)

    def bus_index(self, bus) -> int:
        return self.net.index(bus)

    def voltage_abc(self, bus) -> np.ndarray:
        return abc_from_vec(self.rep, self.V[self._sl(self.net.index(bus))])

    def voltage_012(self, bus) -> np.ndarray:
        return seq012_from_vec(self.rep, self.V[self._sl(self.net.index(bus))])

    def v1(self, bus) -> complex:
        return complex(self.voltage_012(bus)[1])

    def injection_012(self, bus) -> np.ndarray:
        """Current injected into ``bus`` from outside the subsystem (sources and links)."""
        out = seq012_from_vec(self.rep, self.link_inj[self._sl(self.net.index(bus))])
        if bus in self.injections:
            out = out + FORTESCUE_INV @ self.injections[bus]
        return out

    # -- admittance ---------------------------------------------------------------
    def _device_blocks(self):
        """Constant (linear) device admittances, bus index -> w x w block."""
        rep = self.rep
        blocks: dict[int, np.ndarray] = {}

        def add(k, blk):
            blocks[k] = blocks.get(k, 0) + blk

        for ld in self.net.loads:
            y = np.zeros((3, 3), dtype=complex)
            for ph in ld.phases:
                y["abc".index(ph), "abc".index(ph)] += ld.admittance
            add(self.net.index(ld.bus), block_from_abc(rep, y))
        for m in self.machines:
            y_avg = 1.0 / (0.5j * (m.xdp + m.xqp_eff))
            add(self.net.index(m.bus), block_from_seq(rep, 0.0, y_avg, 1.0 / (1j * m.x_neg)))
        for m in self.motors:
            y = np.zeros((3, 3), dtype=complex)
            ym = m.y_stall if m.status == "stalled" else complex(m.p0, -m.q0)
            for ph in (m.phase if m.phase != "abc" else "abc"):
                y["abc".index(ph), "abc".index(ph)] += ym
            add(self.net.index(m.bus), block_from_abc(rep, y))
        for spec in self.faults.values():
            add(self.net.index(spec.bus), self._fault_block(spec))
        if self.norton is not None:
            bus, y_abc, _ = self.norton
            add(self.net.index(bus), block_from_abc(rep, y_abc))
        return blocks

    def _fault_block(self, spec: FaultSpec) -> np.ndarray:
        zb = self.net.bus(spec.bus).z_base_ohm
        if self.rep is not Representation.POSITIVE_SEQUENCE:
            return block_from_abc(self.rep, spec.shunt_abc(zb))
        return np.array([[self._positive_fault_shunt(spec)]])

    def _positive_fault_shunt(self, spec: FaultSpec) -> complex:
        """Positive-sequence shunt equivalent of an unbalanced fault.

        Uses the negative and zero-sequence driving-point impedances at the
        fault bus, the classical sequence-network interconnection.
        """
        key = (spec.bus, spec.kind, spec.r_fault)
        if key in self._fault_shunt_cache:
            return self._fault_shunt_cache[key]
        rf = spec.r_fault / self.net.bus(spec.bus).z_base_ohm
        k = self.net.index(spec.bus)
        seq = build_ybus(self.net, "three_sequence")
        y0, y2 = seq.y0.tolil(), seq.y2.tolil()
        for ld in self.net.loads:
            i = self.net.index(ld.bus)
            share = len(ld.phases) / 3.0
            y0[i, i] += ld.admittance * share
            y2[i, i] += ld.admittance * share
        for m in self.machines:
            i = self.net.index(m.bus)
            y2[i, i] += 1.0 / (1j * m.x_neg)
        for m in self.motors:
            i = self.net.index(m.bus)
            share = 1.0 if m.phase == "abc" else 1.0 / 3.0
            y0[i, i] += m.y_stall * share
            y2[i, i] += m.y_stall * share
        for i in range(self.n):
            if abs(y0[i, i]) < 1e-12:
                y0[i, i] = ZERO_SEQ_REG
        e = np.zeros(self.n, dtype=complex)
        e[k] = 1.0
        z2 = spla.spsolve(y2.tocsc(), e)[k]
        z0 = spla.spsolve(y0.tocsc(), e)[k]
        if spec.kind == "SLG":
            y = 1.0 / (z2 + z0 + 3 * rf)
        elif spec.kind == "LL":
            y = 1.0 / (z2 + rf)
        elif spec.kind == "LLG":
            y = 1.0 / (z2 * (z0 + 3 * rf) / (z2 + z0 + 3 * rf))
        else:
            y = 1.0 / max(rf, 1e-6)
        self._fault_shunt_cache[key] = y
        return y

    def rebuild(self):
        """Assemble and factorize the admittance matrix."""
        if self._base is None:
            base = build_ybus(self.net, self.rep)
            if self.rep is Representation.THREE_SEQUENCE:
                base = base.interleaved()
            self._base = sp.csc_matrix(base)
        y = self._base.tolil(copy=True)
        for k, blk in self._device_blocks().items():
            sl = self._sl(k)
            y[sl, sl] = y[sl, sl].toarray() + blk
        if self.rep is not Representation.POSITIVE_SEQUENCE:
            for k in range(self.n):
                sl = self._sl(k)
                blk = y[sl, sl].toarray()
                y0 = (FORTESCUE_INV @ blk @ FORTESCUE)[0, 0] if self.rep is Representation.THREE_PHASE else blk[0, 0]
                if abs(y0) < 1e-12:
                    y[sl, sl] = blk + block_from_seq(self.rep, ZERO_SEQ_REG, 0.0, 0.0)
        self.Y = y.tocsc()
        try:
            with np.errstate(all="ignore"):
                self.lu = spla.splu(self.Y)
            probe = self.lu.solve(np.ones(self.Y.shape[0], dtype=complex))
            if not np.all(np.isfinite(probe)):
                raise RuntimeError
        except RuntimeError:
            raise TopologyError(f"subsystem {self.name}: singular admittance matrix; "
                                f"isolated islands: {self._islands()}") from None
        self.topology_version += 1

    def _islands(self):
        edges = [(self.net.index(b.from_bus), self.net.index(b.to_bus)) for b in self.net.branches if b.closed]
        from .netmodel import components
        labels = components(self.n, edges)
        groups = {}
        for k, lab in enumerate(labels):
            groups.setdefault(int(lab), []).append(self.net.buses[k].id)
        return list(groups.values())

    def sequence_admittance(self):
        """(y0, y1, y2) of a three-sequence subsystem, devices included."""
        if self.rep is not Representation.THREE_SEQUENCE:
            y = self.Y.toarray()
            n = self.n
            out = [np.zeros((n, n), dtype=complex) for _ in range(3)]
            for i in range(n):
                for j in range(n):
                    blk = y[self._sl(i), self._sl(j)]
                    if self.rep is Representation.THREE_PHASE:
                        blk = FORTESCUE_INV @ blk @ FORTESCUE
                        for s in range(3):
                            out[s][i, j] = blk[s, s]
                    else:
                        out[1][i, j] = blk[0, 0]
            return tuple(sp.csc_matrix(o) for o in out)
        return tuple(sp.csc_matrix(self.Y[s::3, s::3]) for s in range(3))

    # -- nonlinear injections -------------------------------------------------------
    def currents(self, V: np.ndarray) -> np.ndarray:
        """Right-hand side I(x, V) of Y V = I."""
        rep = self.rep
        out = np.zeros_like(V)
        for m, st in zip(self.machines, self.mstates):
            k = self.net.index(m.bus)
            v = V[self._sl(k)]
            v1 = v[0] if rep is Representation.POSITIVE_SEQUENCE else seq012_from_vec(rep, v)[1]
            y_avg = 1.0 / (0.5j * (m.xdp + m.xqp_eff))
            i1 = machine_current(m, st, v1) + y_avg * v1
            out[self._sl(k)] += vec_from_seq012(rep, [0.0, i1, 0.0])
        for m in self.motors:
            if m.status == "stalled":
                continue
            k = self.net.index(m.bus)
            vabc = abc_from_vec(rep, V[self._sl(k)])
            iabc = np.zeros(3, dtype=complex)
            yc = complex(m.p0, -m.q0)
            for ph in (m.phase if m.phase != "abc" else "abc"):
                j = "abc".index(ph)
                vk = vabc[j]
                p, q = acmotor_pq(m, abs(vk))
                load = np.conj(complex(p, q) / vk) if vk != 0 else 0.0
                iabc[j] = yc * vk - load
            out[self._sl(k)] += vec_from_abc(rep, iabc)
        if self.norton is not None:
            bus, _, i_abc = self.norton
            out[self._sl(self.net.index(bus))] += vec_from_abc(rep, i_abc)
        for bus, i_abc in self.injections.items():
            out[self._sl(self.net.index(bus))] += vec_from_abc(rep, i_abc)
        return out

    def residual(self, V=None) -> float:
        V = self.V if V is None else V
        return float(np.max(np.abs(self.Y @ V - self.currents(V) - self.link_inj)))

    def network_solve(self, V0=None) -> np.ndarray:
        """Fixed-point solution of Y V = I(x, V) for this subsystem alone."""
        solve_networks([self], None)
        return self.V

    # -- dynamics -----------------------------------------------------------------
    def machine_state_array(self) -> np.ndarray:
        if not self.mstates:
            return np.zeros(0)
        return np.concatenate([st.as_array() for st in self.mstates])

    def set_machine_states(self, x):
        for k, st in enumerate(self.mstates):
            st.set_array(x[5 * k:5 * k + 5])

    def derivatives(self) -> np.ndarray:
        out = []
        for m, st in zip(self.machines, self.mstates):
            out.append(machine_derivatives(m, st, self.v1(m.bus)))
        return np.concatenate(out) if out else np.zeros(0)

    def update_discrete(self, dt: float, t: float) -> list[str]:
        """Autonomous stall triggers after an accepted step; returns stalled ids."""
        changed = []
        for m in self.motors:
            if m.status == "stalled" or m.override_active:
                continue
            vabc = self.voltage_abc(m.bus)
            phases = m.phase if m.phase != "abc" else "abc"
            v = min(abs(vabc["abc".index(ph)]) for ph in phases)
            if v < m.v_stall:
                m.below_time += dt
                if m.below_time >= m.t_stall - 1e-9:
                    m.status = "stalled"
                    m.stall_time = t
                    changed.append(m.id)
            else:
                m.below_time = 0.0
        return changed

    def motor(self, ident) -> ACMotorPerf:
        try:
            return self.motors[self.motor_index[ident]]
        except KeyError:
            raise KeyError(f"no motor {ident!r} in subsystem {self.name}") from None

    def motor_status(self) -> dict:
        return {m.id: m.status for m in self.motors}

    # -- events ---------------------------------------------------------------------
    def apply_fault(self, spec: FaultSpec, fid=None):
        fid = fid if fid is not None else len(self.faults)
        self.net.index(spec.bus)
        self.faults[fid] = spec
        self.rebuild()
        return fid

    def clear_fault(self, fid):
        del self.faults[fid]
        self.rebuild()

    def set_norton(self, bus, y_abc, i_abc):
        y_abc = np.asarray(y_abc, dtype=complex)
        changed = self.norton is None or self.norton[0] != bus or not np.array_equal(self.norton[1], y_abc)
        self.norton = (bus, y_abc, np.asarray(i_abc, dtype=complex))
        if changed:
            self.rebuild()

    def clear_norton(self):
        if self.norton is not None:
            self.norton = None
            self.rebuild()


# --------------------------------------------------------------------------
# Links (multi-area Thevenin equivalent)

@dataclass
class Link:
    id: str
    sub_a: int
    bus_a: str
    sub_b: int
    bus_b: str
    z: complex = 0j
    closed: bool = True


class LinkSystem:
    """Link branches between subsystems; link current flows from a to b."""

    def __init__(self, subs: list[SubsystemSim], links: list[Link]):
        self.subs = subs
        self.links = list(links)
        self.width = 1 if any(s.rep is Representation.POSITIVE_SEQUENCE for s in subs) else 3
        self.current = np.zeros(len(self.links) * self.width, dtype=complex)
        self._key = None

    def _select(self, sub: SubsystemSim, bus) -> np.ndarray:
        """Map a subsystem bus block to link coordinates (abc or positive sequence)."""
        w = self.width
        eye = np.eye(sub.w, dtype=complex)
        cols = np.array([abc_from_vec(sub.rep, eye[:, j]) if w == 3 else
                         seq012_from_vec(sub.rep, eye[:, j])[1:2] for j in range(sub.w)]).T
        return cols.reshape(w, sub.w)

    def _inject(self, sub: SubsystemSim) -> np.ndarray:
        w = self.width
        eye = np.eye(w, dtype=complex)
        if w == 3:
            cols = [vec_from_abc(sub.rep, eye[:, j]) for j in range(3)]
        else:
            cols = [vec_from_seq012(sub.rep, [0.0, 1.0, 0.0])]
        return np.array(cols).T.reshape(sub.w, w)

    def refresh(self):
        key = tuple(s.topology_version for s in self.subs) + tuple(l.closed for l in self.links)
        if key == self._key:
            return
        w = self.width
        nl = len(self.links)
        self.S, self.N, self.YiN = [], [], []
        m = np.zeros((nl * w, nl * w), dtype=complex)
        for l, ln in enumerate(self.links):
            if ln.closed:
                m[l * w:(l + 1) * w, l * w:(l + 1) * w] += ln.z * np.eye(w)
            else:
                m[l * w:(l + 1) * w, l * w:(l + 1) * w] = np.eye(w)
        for si, sub in enumerate(self.subs):
            s_mat = np.zeros((nl * w, sub.n * sub.w), dtype=complex)
            n_mat = np.zeros((sub.n * sub.w, nl * w), dtype=complex)
            for l, ln in enumerate(self.links):
                if not ln.closed:
                    continue
                for owner, bus, sign in ((ln.sub_a, ln.bus_a, 1.0), (ln.sub_b, ln.bus_b, -1.0)):
                    if owner != si:
                        continue
                    k = sub.net.index(bus)
                    s_mat[l * w:(l + 1) * w, sub._sl(k)] += sign * self._select(sub, bus)
                    n_mat[sub._sl(k), l * w:(l + 1) * w] += -sign * self._inject(sub)
            yin = sub.lu.solve(n_mat) if nl else n_mat
            self.S.append(s_mat)
            self.N.append(n_mat)
            self.YiN.append(yin)
            m -= s_mat @ yin
        self.M = m
        try:
            self._mlu = np.linalg.inv(m) if nl else m
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("singular link impedance matrix") from None
        if nl and np.linalg.cond(m) > 1e14:
            raise np.linalg.LinAlgError("singular link impedance matrix")
        self._key = key

    def mate_solve(self, v_open: list[np.ndarray]) -> list[np.ndarray]:
        """Correct open-link subsystem voltages by the link currents."""
        self.refresh()
        if not self.links:
            return v_open
        rhs = sum(s @ v for s, v in zip(self.S, v_open))
        i = self._mlu @ rhs
        for l, ln in enumerate(self.links):
            if not ln.closed:
                i[l * self.width:(l + 1) * self.width] = 0.0
        self.current = i
        for sub, n_mat in zip(self.subs, self.N):
            sub.link_inj = n_mat @ i
        return [v + yin @ i for v, yin in zip(v_open, self.YiN)]


def mate_solve(subs: list[SubsystemSim], links: LinkSystem, v_open=None) -> list[np.ndarray]:
    if v_open is None:
        v_open = [s.lu.solve(s.currents(s.V)) for s in subs]
    return links.mate_solve(v_open)


def solve_networks(subs: list[SubsystemSim], links: LinkSystem | None,
                   tol: float = 1e-11, max_iter: int = NET_MAX_ITER):
    """Fixed-point solve of all subsystems (with link coupling) for given states."""
    err = math.inf
    for _ in range(max_iter):
        v_open = [s.lu.solve(s.currents(s.V)) for s in subs]
        vs = links.mate_solve(v_open) if links is not None else v_open
        err = max(float(np.max(np.abs(v - s.V))) if v.size else 0.0 for v, s in zip(vs, subs))
        for v, s in zip(vs, subs):
            s.V = v
        if err < tol:
            return
    raise NetworkDivergence("network solution did not converge", err)


def step(subs: list[SubsystemSim], links: LinkSystem | None, dt: float, t_next: float,
         tol: float = STEP_TOL * 1e-2, max_iter: int = STEP_MAX_ITER) -> int:
    """Advance all subsystems one step with the partitioned trapezoidal rule.

    Returns the number of integration/network iterations used.
    """
    x_n = [s.machine_state_array() for s in subs]
    f_n = [s.derivatives() for s in subs]
    x = [a + dt * b for a, b in zip(x_n, f_n)]
    it = 0
    for it in range(1, max_iter + 1):
        for s, xs in zip(subs, x):
            s.set_machine_states(xs)
        solve_networks(subs, links)
        f = [s.derivatives() for s in subs]
        x_new = [a + 0.5 * dt * (b + c) for a, b, c in zip(x_n, f_n, f)]
        dx = max((float(np.max(np.abs(a - b))) if a.size else 0.0) for a, b in zip(x_new, x))
        x = x_new
        if dx < tol:
            break
    else:
        log.warning("t=%.4f: integration did not converge in %d iterations", t_next, max_iter)
    for s, xs in zip(subs, x):
        s.set_machine_states(xs)
    solve_networks(subs, links)
    changed = False
    for s in subs:
        if s.update_discrete(dt, t_next):
            s.rebuild()
            changed = True
    if changed:
        solve_networks(subs, links)
    return it
