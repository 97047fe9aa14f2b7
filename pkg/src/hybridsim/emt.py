"""Fixed-step EMT engine for the detailed system.

Nodal formulation with trapezoidal companion models.  Every linear element is a
"branch row" with leg voltage u = C v - e and companion current i = G u + h;
the history term is advanced as h <- P u + Q i.  All branch rows are stacked so
that one step costs a handful of small dense products.

Quantities are instantaneous per unit on a peak base (1 pu phasor <-> 1 pu
amplitude sinusoid).  Inductances are X / w0, capacitances B / w0.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .motor import MotorParams, MotorRating, W_BASE, electrical_torque, rate_motor, steady_state
from .netmodel import (
    FaultSpec, NetworkModel, TopologyError, ThreePhasePhasor,
    branch_incidence_abc, seq_block_to_abc,
)
from .signals import EventSignal

log = logging.getLogger(__name__)

PHASES = "abc"


def samples_per_cycle(f0: float, dt: float) -> int:
    return int(round(1.0 / (f0 * dt)))


# --------------------------------------------------------------------------
# Single-phase induction motors

@dataclass
class SpimState:
    """State of one motor group as seen by callers of :func:`spim_step`."""
    speed: float
    fluxes: np.ndarray
    load_torque_coeff: float
    status: str = "running"
    stall_speed: float = 0.5
    connected_phase: str = "a"
    below_samples: int = 0
    torque: float = 0.0
    v_prev: float = 0.0


class SpimBank:
    """Vectorised trapezoidal integration of several motor groups.

    Electrical states use the previous-step speed inside the step (speed is
    advanced after the electrical solution), the usual partitioned treatment
    of the slow mechanical loop.
    """

    def __init__(self, params: list[MotorParams], scales, dt: float, f0: float = 60.0,
                 stall_speed=0.5):
        k = len(params)
        self.params = params
        self.dt = dt
        self.h = W_BASE * dt / 2.0
        self.scale = np.asarray(scales, dtype=float).reshape(k)
        self.linv = np.array([np.linalg.inv(p.inductance) for p in params]).reshape(k, 3, 3)
        self.rl = np.array([p.resistance @ np.linalg.inv(p.inductance) for p in params]).reshape(k, 3, 3)
        self.xm = np.array([p.xm for p in params], dtype=float)
        self.H = np.array([p.H for p in params], dtype=float)
        self.t_load = np.array([p.t_load for p in params], dtype=float)
        self.c0 = np.array([p.c0 for p in params], dtype=float)
        self.stall_speed = np.broadcast_to(np.asarray(stall_speed, dtype=float), (k,)).copy()
        self.hold = samples_per_cycle(f0, dt)
        self.psi = np.zeros((k, 3))
        self.speed = np.ones(k)
        self.te = np.zeros(k)
        self.v_prev = np.zeros(k)
        self.stalled = np.zeros(k, dtype=bool)
        self.below = np.zeros(k, dtype=int)
        self._x0 = None
        self._xe = None

    def __len__(self):
        return len(self.params)

    def _w(self):
        w = np.zeros((len(self), 3, 3))
        w[:, 1, 2] = self.speed
        w[:, 2, 1] = -self.speed
        return w

    def load_torque(self, speed):
        return self.t_load * (self.c0 + (1.0 - self.c0) * speed * speed)

    def predict(self):
        """Companion (g, eta) in system pu: i_motor = g v + eta."""
        eye = np.eye(3)
        m = self.rl + self._w()
        a = eye + self.h * m
        b = eye - self.h * m
        rhs = np.empty((len(self), 3, 2))
        rhs[:, :, 0] = np.einsum("kij,kj->ki", b, self.psi)
        rhs[:, 0, 0] += self.h * self.v_prev
        rhs[:, :, 1] = 0.0
        rhs[:, 0, 1] = self.h
        x = np.linalg.solve(a, rhs)
        self._x0 = x[:, :, 0]
        self._xe = x[:, :, 1]
        row = self.linv[:, 0, :]
        g = np.einsum("kj,kj->k", row, self._xe)
        eta = np.einsum("kj,kj->k", row, self._x0)
        return self.scale * g, self.scale * eta

    def commit(self, v, n: int) -> list[int]:
        """Accept terminal voltages of step ``n``; returns indices that just stalled."""
        self.psi = self._x0 + self._xe * v[:, None]
        cur = np.einsum("kij,kj->ki", self.linv, self.psi)
        te = -2.0 * self.xm * cur[:, 0] * cur[:, 2]
        acc = (0.5 * (te + self.te) - self.load_torque(self.speed)) / (2.0 * self.H)
        self.speed = np.clip(self.speed + self.dt * acc, 0.0, 1.2)
        self.te = te
        self.v_prev = v.copy()
        below = self.speed < self.stall_speed
        self.below = np.where(below, self.below + 1, 0)
        new = np.flatnonzero(~self.stalled & (self.below >= self.hold))
        self.stalled[new] = True
        return list(new)

    def current(self) -> np.ndarray:
        cur = np.einsum("kij,kj->ki", self.linv, self.psi)
        return self.scale * cur[:, 0]

    def init_steady(self, idx: int, v_phasor: complex, speed: float, t_prev: float, w0: float):
        """Place motor ``idx`` on its constant-speed sinusoidal steady state."""
        p = self.params[idx]
        psi, _, torque = steady_state(p, speed, v_phasor)
        rot = np.exp(1j * w0 * t_prev)
        self.psi[idx] = (psi * rot).real
        self.speed[idx] = speed
        self.v_prev[idx] = (v_phasor * rot).real
        self.te[idx] = electrical_torque(p, self.psi[idx])


def spim_step(m: SpimState, params: MotorParams, v_terminal: float, dt: float,
              scale: float = 1.0, f0: float = 60.0) -> tuple[SpimState, float]:
    """Advance a single motor by one step under a prescribed terminal voltage.

    Returns the new state and the instantaneous stator current (system pu).
    """
    bank = SpimBank([params], [scale], dt, f0, m.stall_speed)
    bank.psi[0] = m.fluxes
    bank.speed[0] = m.speed
    bank.te[0] = m.torque
    bank.v_prev[0] = m.v_prev
    bank.below[0] = m.below_samples
    bank.stalled[0] = m.status == "stalled"
    bank.predict()
    bank.commit(np.array([v_terminal]), 0)
    status = "stalled" if bank.stalled[0] else "running"
    new = SpimState(float(bank.speed[0]), bank.psi[0].copy(), m.load_torque_coeff, status,
                    m.stall_speed, m.connected_phase, int(bank.below[0]), float(bank.te[0]),
                    float(v_terminal))
    return new, float(bank.current()[0])


# --------------------------------------------------------------------------
# Boundary source

@dataclass
class BoundarySource:
    """Three-phase Thevenin source at one or more boundary buses.

    Magnitude and phase are ramped linearly from the previous to the new target
    across each interaction window.
    """
    v_thevenin: np.ndarray            # (3m,) complex, target at window end
    z_thevenin: np.ndarray            # (3m, 3m) complex
    v_start: np.ndarray = None
    window_start: int = 0
    window_len: int = 1

    def __post_init__(self):
        if self.v_start is None:
            self.v_start = self.v_thevenin.copy()

    def emf(self, samples: np.ndarray, dt: float, w0: float) -> np.ndarray:
        """Instantaneous emf for sample indices ``samples``: shape (len, 3m)."""
        tau = np.clip((samples - self.window_start) / self.window_len, 0.0, 1.0)[:, None]
        m0, m1 = np.abs(self.v_start), np.abs(self.v_thevenin)
        a0 = np.angle(self.v_start)
        da = np.angle(self.v_thevenin * np.conj(self.v_start))
        da = np.where((m0 == 0) | (m1 == 0), np.angle(self.v_thevenin) - a0, da)
        mag = m0 + (m1 - m0) * tau
        ang = a0 + da * tau
        t = samples[:, None] * dt
        return mag * np.cos(w0 * t + ang)


# --------------------------------------------------------------------------
# Circuit

class _RowBuilder:
    """Collects branch rows with trapezoidal (g, p, q) and backward-Euler
    (gb, pb, qb) companions; the latter damp the step after a discontinuity."""

    def __init__(self, n_nodes, w0):
        self.n = n_nodes
        self.w0 = w0
        self.c, self.g, self.p, self.q = [], [], [], []
        self.gb, self.pb, self.qb = [], [], []
        self.tags = []
        self.blocks = []      # (slice, tag, phasor admittance)
        self._k = 0

    def add(self, inc, g, p, q, tag, yph, be):
        k = inc.shape[0]
        self.c.append(inc)
        for lst, x in zip((self.g, self.p, self.q), (g, p, q)):
            lst.append(np.atleast_2d(x))
        for lst, x in zip((self.gb, self.pb, self.qb), be):
            lst.append(np.atleast_2d(x))
        self.tags.extend([tag] * k)
        self.blocks.append((slice(self._k, self._k + k), tag, np.asarray(yph, dtype=complex)))
        self._k += k

    def rl(self, inc, r, l, dt, tag):
        g = np.linalg.inv(r + 2.0 * l / dt)
        gb = np.linalg.inv(r + l / dt)
        k = inc.shape[0]
        self.add(inc, g, g, g @ (2.0 * l / dt - r), tag, np.linalg.inv(r + 1j * self.w0 * l),
                 (gb, np.zeros((k, k)), gb @ l / dt))

    def cap(self, inc, cmat, dt, tag):
        g = 2.0 * cmat / dt
        k = inc.shape[0]
        self.add(inc, g, -g, -np.eye(k), tag, 1j * self.w0 * cmat,
                 (cmat / dt, -cmat / dt, np.zeros((k, k))))

    def res(self, inc, gmat, tag):
        k = inc.shape[0]
        z = np.zeros((k, k))
        self.add(inc, gmat, z, z, tag, gmat, (gmat, z, z))

    def build(self):
        from scipy.linalg import block_diag
        c = np.vstack(self.c) if self.c else np.zeros((0, self.n))
        mats = [block_diag(*x) for x in (self.g, self.p, self.q, self.gb, self.pb, self.qb)]
        return (c, *mats)


class EmtCircuit:
    """EMT model of a detailed subsystem with Thevenin boundary sources.

    ``net`` is the detailed NetworkModel (after splitting); ``boundary`` lists
    its buses that face the external system (the dummy buses).
    """

    def __init__(self, net: NetworkModel, boundary, dt: float = 20e-6, f0: float = 60.0,
                 z_thevenin: np.ndarray | None = None, motor_ids: dict | None = None):
        self.net = net
        self.boundary = list(boundary)
        self.dt = dt
        self.f0 = f0
        self.w0 = 2.0 * math.pi * f0
        self.n_cycle = samples_per_cycle(f0, dt)
        self.node = {(b.id, ph): 3 * k + j for k, b in enumerate(net.buses) for j, ph in enumerate(PHASES)}
        self.n_nodes = 3 * net.n
        self.sample = 0
        self.events: list[tuple[int, str]] = []
        self.signals: list[EventSignal] = []
        self._faults: dict[int, FaultSpec] = {}
        self._schedule: list[tuple[int, int, str, FaultSpec]] = []
        self._next_fault_id = 0

        m = len(self.boundary)
        if z_thevenin is None:
            z_thevenin = 1e-3j * np.eye(3 * m)
        self.source = BoundarySource(np.zeros(3 * m, dtype=complex), np.asarray(z_thevenin, dtype=complex))

        rows = _RowBuilder(self.n_nodes, self.w0)
        self._bnd_inc = np.zeros((3 * m, self.n_nodes))
        for j, b in enumerate(self.boundary):
            for k in range(3):
                self._bnd_inc[3 * j + k, self.node[(b, PHASES[k])]] = 1.0
        rows.rl(self._bnd_inc, self.source.z_thevenin.real, self.source.z_thevenin.imag / self.w0, dt, "boundary")
        self._lin_rows = _RowBuilder(self.n_nodes, self.w0)
        for br in net.branches:
            if not br.closed or br.is_virtual_breaker:
                continue
            c_abc, z = branch_incidence_abc(br)
            inc = np.zeros((c_abc.shape[0], self.n_nodes))
            for side, bus in enumerate((br.from_bus, br.to_bus)):
                for k in range(3):
                    inc[:, self.node[(bus, PHASES[k])]] += c_abc[:, 3 * side + k]
            rows.rl(inc, z.real, z.imag / self.w0, dt, f"branch:{br.id}")
            if br.b1 or br.b0:
                bmat = seq_block_to_abc(np.diag([br.b0, br.b1, br.b1]).astype(complex)).real
                for bus in (br.from_bus, br.to_bus):
                    rows.cap(self._bus_inc(bus), 0.5 * bmat / self.w0, dt, f"charging:{br.id}")
        for ld in net.loads:
            phases = [PHASES.index(p) for p in ld.phases]
            inc = self._bus_inc(ld.bus)[phases]
            if ld.p:
                rows.res(inc, ld.p * np.eye(len(phases)), f"load:{ld.id}")
            if ld.q > 0:
                l = 1.0 / (self.w0 * ld.q)
                rows.rl(inc, np.zeros((len(phases),) * 2), l * np.eye(len(phases)), dt, f"load:{ld.id}")
            elif ld.q < 0:
                rows.cap(inc, (-ld.q / self.w0) * np.eye(len(phases)), dt, f"load:{ld.id}")
        for bus in net.buses:
            if bus.shunt or bus.shunt0:
                yabc = seq_block_to_abc(np.diag([bus.shunt0, bus.shunt, bus.shunt]))
                if np.any(yabc.real):
                    rows.res(self._bus_inc(bus.id), yabc.real, f"shunt:{bus.id}")
                if not np.any(yabc.imag):
                    continue
                if np.all(np.linalg.eigvalsh(yabc.imag) >= 0):
                    rows.cap(self._bus_inc(bus.id), yabc.imag / self.w0, dt, f"shunt:{bus.id}")
                else:
                    raise ValueError(f"bus {bus.id}: inductive shunts are not supported in EMT")
        self.C, self.G, self.P, self.Q, self.Gb, self.Pb, self.Qb = rows.build()
        self._damp_next = 0
        self.tags = rows.tags
        self.blocks = rows.blocks
        self.n_rows = self.C.shape[0]
        self.h = np.zeros(self.n_rows)
        self.i = np.zeros(self.n_rows)
        self.u = np.zeros(self.n_rows)
        self._erows = np.arange(3 * m)

        specs = list(net.motors)
        self.motor_specs = specs
        self.motor_ratings: list[MotorRating] = [rate_motor(s) for s in specs]
        self.motor_ids = [s.emt_id or s.id for s in specs]
        self.motors = SpimBank([MotorParams.from_spec(s) for s in specs],
                               [r.scale for r in self.motor_ratings], dt, f0,
                               [s.stall_speed for s in specs]) if specs else None
        self._mnodes = np.array([self.node[(s.bus, s.phase)] for s in specs], dtype=int)
        self._g_ref = None
        self._refactor()

        self._ring_len = self.n_cycle
        self._ring_i = np.zeros((self._ring_len, 3 * m))
        self._ring_v = np.zeros((self._ring_len, self.n_nodes))
        self._ring_n = np.full(self._ring_len, -1, dtype=np.int64)
        self._filled = 0
        self._wave_sink = None

    # -- construction helpers ------------------------------------------------
    def _bus_inc(self, bus_id):
        inc = np.zeros((3, self.n_nodes))
        for k in range(3):
            inc[k, self.node[(bus_id, PHASES[k])]] = 1.0
        return inc

    def _fault_matrix(self):
        y = np.zeros((self.n_nodes, self.n_nodes))
        for spec in self._faults.values():
            b = self.net.bus(spec.bus)
            blk = spec.shunt_abc(b.z_base_ohm).real
            idx = [self.node[(spec.bus, p)] for p in PHASES]
            y[np.ix_(idx, idx)] += blk
        return y

    def _factor(self, gmat):
        y = self.C.T @ gmat @ self.C + self._fault_matrix()
        if self.motors is not None:
            y[self._mnodes, self._mnodes] += self._g_ref
        try:
            yinv = np.linalg.inv(y)
        except np.linalg.LinAlgError:
            raise TopologyError("singular EMT conductance matrix (floating node)") from None
        if not np.all(np.isfinite(yinv)) or np.linalg.cond(y) > 1e14:
            raise TopologyError("singular EMT conductance matrix (floating node)")
        if self.motors is None:
            return yinv, self.C.T @ gmat, None, None
        return yinv, self.C.T @ gmat, yinv[np.ix_(self._mnodes, self._mnodes)], yinv[:, self._mnodes]

    def _refactor(self):
        if self.motors is not None:
            g, _ = self.motors.predict()
            self._g_ref = g.copy()
        self.Ct = self.C.T
        self.yinv, self.CtG, self._zmm, self._ycol = self._factor(self.G)
        self._be = self._factor(self.Gb)

    # -- boundary --------------------------------------------------------------
    def set_boundary(self, v_th, z_th=None, window: int | None = None):
        """New Thevenin target reached at the end of the next ``window`` samples."""
        v_th = np.asarray(v_th.as_array() if isinstance(v_th, ThreePhasePhasor) else v_th, dtype=complex)
        src = self.source
        src.v_start = src.v_thevenin.copy()
        src.v_thevenin = v_th.copy()
        src.window_start = self.sample
        src.window_len = window or 1
        if z_th is not None and not np.array_equal(np.asarray(z_th), src.z_thevenin):
            self._replace_boundary_impedance(np.asarray(z_th, dtype=complex))

    def hold_boundary(self, v_th):
        v_th = np.asarray(v_th, dtype=complex)
        self.source.v_start = v_th.copy()
        self.source.v_thevenin = v_th.copy()

    def _replace_boundary_impedance(self, z):
        m3 = len(self._erows)
        r, l = z.real, z.imag / self.w0
        g = np.linalg.inv(r + 2.0 * l / self.dt)
        sl = slice(0, m3)
        self.G[sl, sl] = g
        self.P[sl, sl] = g
        self.Q[sl, sl] = g @ (2.0 * l / self.dt - r)
        gb = np.linalg.inv(r + l / self.dt)
        self.Gb[sl, sl] = gb
        self.Pb[sl, sl] = 0.0
        self.Qb[sl, sl] = gb @ l / self.dt
        self.source.z_thevenin = z
        self.blocks[0] = (self.blocks[0][0], "boundary", np.linalg.inv(z))
        self.events.append((self.sample, "boundary impedance updated"))
        self._refactor()
        self._damp_next = 2

    # -- faults ----------------------------------------------------------------
    def schedule_fault(self, spec: FaultSpec):
        if spec.bus not in self.net._index:
            raise KeyError(f"unknown fault bus {spec.bus!r}")
        fid = self._next_fault_id
        self._next_fault_id += 1
        on = int(round(spec.t_on / self.dt))
        off = int(round(spec.t_off / self.dt))
        self._schedule.extend([(on, fid, "apply", spec), (off, fid, "clear", spec)])
        self._schedule.sort(key=lambda x: (x[0], x[1]))
        return on, off

    def apply_fault(self, spec: FaultSpec, fid: int | None = None):
        if spec.bus not in self.net._index:
            raise KeyError(f"unknown fault bus {spec.bus!r}")
        if fid is None:
            fid = self._next_fault_id
            self._next_fault_id += 1
        if fid in self._faults:
            raise ValueError("fault already active")
        self._faults[fid] = spec
        self.events.append((self.sample, f"fault on {spec.kind} bus {spec.bus} phases {spec.phases}"))
        self._refactor()
        self._damp_next = 2
        return fid

    def clear_fault(self, spec: FaultSpec, fid: int | None = None):
        if fid is None:
            matches = [k for k, v in self._faults.items() if v == spec]
            if not matches:
                raise ValueError("fault is not active")
            fid = matches[0]
        if fid not in self._faults:
            raise ValueError("fault is not active")
        del self._faults[fid]
        self.events.append((self.sample, f"fault cleared {spec.kind} bus {spec.bus}"))
        self._refactor()
        self._damp_next = 2

    # -- initialisation --------------------------------------------------------
    def energize(self, bus_voltages: dict, v_th, motor_status=None, motor_speed=None):
        """Put every element on the sinusoidal steady state of a phasor snapshot.

        ``bus_voltages`` maps bus id -> abc phasors; ``v_th`` is the boundary
        Thevenin emf.  Motors start at their running equilibrium for their
        terminal voltage unless ``motor_speed`` overrides it.
        """
        from .motor import running_speed
        vn = np.zeros(self.n_nodes, dtype=complex)
        for bus, vabc in bus_voltages.items():
            if bus not in self.net._index:
                continue
            vabc = vabc.as_array() if isinstance(vabc, ThreePhasePhasor) else np.asarray(vabc)
            for k in range(3):
                vn[self.node[(bus, PHASES[k])]] = vabc[k]
        v_th = np.asarray(v_th, dtype=complex)
        self.hold_boundary(v_th)
        e = np.zeros(self.n_rows, dtype=complex)
        e[self._erows] = v_th
        u = self.C @ vn - e
        # phasor companion of each row: i = Y(jw) u, recovered from (G, P, Q) structure by tag type
        i = self._row_phasor_currents(u)
        t_prev = self.sample * self.dt
        rot = np.exp(1j * self.w0 * t_prev)
        self.u = (u * rot).real
        self.i = (i * rot).real
        self.h = self.P @ self.u + self.Q @ self.i
        if self.motors is not None:
            for k, spec in enumerate(self.motor_specs):
                vm = vn[self._mnodes[k]]
                stalled = motor_status is not None and motor_status.get(spec.id) == "stalled"
                if motor_speed is not None and spec.id in motor_speed:
                    w = motor_speed[spec.id]
                elif stalled:
                    w = 0.0
                else:
                    w = running_speed(self.motors.params[k], abs(vm))
                    if w is None:
                        w = 0.0
                self.motors.init_steady(k, vm, w, t_prev, self.w0)
                self.motors.stalled[k] = stalled
                self.motors.below[k] = 0
            self._refactor()
        self._filled = 0
        self._ring_n[:] = -1

    def _row_phasor_currents(self, u):
        """Sinusoidal steady-state row currents for row phasor voltages ``u``."""
        out = np.zeros_like(u)
        for sl, _, y in self.blocks:
            out[sl] = y @ u[sl]
        return out

    # -- stepping --------------------------------------------------------------
    def run(self, n_steps: int, record: bool = True):
        """Advance ``n_steps`` samples."""
        if n_steps <= 0:
            return
        samples = np.arange(self.sample + 1, self.sample + n_steps + 1)
        emf = self.source.emf(samples, self.dt, self.w0)
        er = self._erows
        nb = len(er)
        cur_buf = np.empty((n_steps, nb))
        v_buf = np.empty((n_steps, self.n_nodes))
        motors = self.motors
        for k in range(n_steps):
            n = samples[k]
            while self._schedule and self._schedule[0][0] <= n:
                _, fid, what, spec = self._schedule.pop(0)
                self.sample = n
                if what == "apply":
                    self.apply_fault(spec, fid)
                else:
                    self.clear_fault(spec, fid)
            e = emf[k]
            if self._damp_next:
                # two backward-Euler steps after a discontinuity suppress trapezoidal ringing
                yinv, ctg, zmm, ycol = self._be
                h = self.Pb @ self.u + self.Qb @ self.i
                gmat = self.Gb
                self._damp_next -= 1
            else:
                yinv, ctg, zmm, ycol = self.yinv, self.CtG, self._zmm, self._ycol
                h = self.h
                gmat = self.G
            rhs = ctg[:, er] @ e - self.Ct @ h
            if motors is not None:
                g, eta = motors.predict()
                rhs[self._mnodes] -= eta
                v = yinv @ rhs
                dg = g - self._g_ref
                vm = np.linalg.solve(np.eye(len(dg)) + zmm * dg[None, :], v[self._mnodes])
                v = v - ycol @ (dg * vm)
            else:
                v = yinv @ rhs
            u = self.C @ v
            u[er] -= e
            i = gmat @ u + h
            self.h = self.P @ u + self.Q @ i
            self.u, self.i = u, i
            self.sample = n
            if motors is not None:
                for idx in motors.commit(v[self._mnodes], n):
                    self._on_stall(idx, n)
            cur_buf[k] = i[er]
            v_buf[k] = v
        if record:
            self._push(samples, cur_buf, v_buf)

    def _on_stall(self, idx, n):
        spec = self.motor_specs[idx]
        t = n * self.dt
        self.events.append((n, f"motor {self.motor_ids[idx]} stalled"))
        self.signals.append(EventSignal(t_emt=t, target=self.motor_ids[idx], kind="motor_stall",
                                        phase=spec.phase, value="stalled", source="emt"))
        log.info("EMT motor %s (phase %s) stalled at t=%.5f s", self.motor_ids[idx], spec.phase, t)

    def _push(self, samples, cur, v):
        n = len(samples)
        if self._wave_sink is not None:
            self._wave_sink(samples * self.dt, v, cur)
        if n >= self._ring_len:
            self._ring_i[:] = cur[-self._ring_len:]
            self._ring_v[:] = v[-self._ring_len:]
            self._ring_n[:] = samples[-self._ring_len:]
        else:
            self._ring_i = np.roll(self._ring_i, -n, axis=0)
            self._ring_v = np.roll(self._ring_v, -n, axis=0)
            self._ring_n = np.roll(self._ring_n, -n)
            self._ring_i[-n:] = cur
            self._ring_v[-n:] = v
            self._ring_n[-n:] = samples
        self._filled = min(self._ring_len, self._filled + n)

    def take_signals(self) -> list[EventSignal]:
        out, self.signals = self.signals, []
        return out

    @property
    def time(self) -> float:
        return self.sample * self.dt

    def motor_status(self) -> dict:
        if self.motors is None:
            return {}
        return {s.id: ("stalled" if self.motors.stalled[k] else "running")
                for k, s in enumerate(self.motor_specs)}

    def motor_speeds(self) -> dict:
        if self.motors is None:
            return {}
        return {s.id: float(self.motors.speed[k]) for k, s in enumerate(self.motor_specs)}


@dataclass
class WaveformBuffer:
    samples: np.ndarray       # sample indices, oldest first
    currents: np.ndarray      # (N, 3m) boundary currents, detailed -> external positive
    voltages: np.ndarray      # (N, n_nodes)
    dt: float
    ready: bool

    @property
    def times(self) -> np.ndarray:
        return self.samples * self.dt


def record_waveforms(ckt: EmtCircuit, window: int | None = None) -> WaveformBuffer:
    """Most recent full-cycle buffer of boundary currents (and node voltages)."""
    window = window or ckt.n_cycle
    if window > ckt._ring_len:
        raise ValueError("window longer than the recording ring")
    filled = min(ckt._filled, window)
    sl = slice(ckt._ring_len - filled, ckt._ring_len)
    return WaveformBuffer(ckt._ring_n[sl].copy(), ckt._ring_i[sl].copy(), ckt._ring_v[sl].copy(),
                          ckt.dt, filled >= window)
