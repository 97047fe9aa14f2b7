"""Three-stage hybrid simulation with automatic switching back to phasor mode.

Stage 1 runs both subsystems in the phasor domain linked through virtual
breakers.  Stage 2 replaces the detailed subsystem by an EMT model coupled to
the external phasor model through boundary equivalents, while a phasor copy of
the detailed subsystem runs alongside behind a Norton equivalent.  Once the two
detailed models agree at the boundary the switching controller ends stage 2 and
stage 3 continues in the phasor domain.
"""
from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field, replace

import numpy as np

from .boundary import (
    extract_phasors, injections_to_sequence, thevenin_external, thevenin_to_norton,
)
from .emt import EmtCircuit, record_waveforms, samples_per_cycle
from .netmodel import (
    FORTESCUE, NetworkModel, Representation, SequencePhasor, TopologyError, seq_to_phase,
    split_network,
)
from .phasor import (
    Link, LinkSystem, SubsystemSim, abc_from_vec, apply_override, power_flow, solve_networks,
    step,
)

log = logging.getLogger(__name__)

MODES = ("ts_only", "hybrid_switch", "hybrid_no_switch", "emt_only")


class CoordinatorError(RuntimeError):
    """Failure of a sub-engine, annotated with stage and time."""

    def __init__(self, stage, t, msg):
        super().__init__(f"stage {stage}, t={t:.6f} s: {msg}")
        self.stage, self.t = stage, t


# --------------------------------------------------------------------------
# Plan and switching controller

@dataclass(frozen=True)
class StagePlan:
    t_hybrid_start: float = 0.3
    t_end: float = 10.0
    dt_ts: float = 0.005
    dt_emt: float = 20e-6
    switching_enabled: bool = True
    warmup: float = 0.1

    def __post_init__(self):
        if not (self.dt_ts > 0 and self.dt_emt > 0 and self.t_end > 0):
            raise ValueError("step sizes and end time must be positive")
        ratio = self.dt_ts / self.dt_emt
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError(f"dt_ts={self.dt_ts} is not an integer multiple of dt_emt={self.dt_emt}")
        if not 0 <= self.t_hybrid_start < self.t_end:
            raise ValueError("t_hybrid_start must lie in [0, t_end)")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_ts / self.dt_emt))

    def steps(self, t: float) -> int:
        return int(round(t / self.dt_ts))


@dataclass(frozen=True)
class SwitchControllerConfig:
    t_delay: float = 0.2
    eps_rate: float = 0.005
    eps_dv: float = 0.005
    hold_cycles: float = 2
    f0: float = 60.0
    dt_ts: float = 0.005

    def __post_init__(self):
        if min(self.t_delay, self.eps_rate, self.eps_dv, self.f0, self.dt_ts) <= 0:
            raise ValueError("controller settings must be positive")
        if self.hold_cycles < 1:
            raise ValueError("hold_cycles must be at least 1")

    @property
    def hold_steps(self) -> int:
        return math.ceil(self.hold_cycles / (self.f0 * self.dt_ts) - 1e-9)


PHASES = ("waiting_delay", "watching_rate", "watching_dv")
HISTORY = 64


@dataclass(frozen=True)
class SwitchControllerState:
    phase: str = "waiting_delay"
    dv_history: tuple = ()
    rate_history: tuple = ()
    counter: int = 0
    decision: str = "stay"
    v_prev: tuple | None = None
    t_clear: float | None = None


def _abc_rows(v) -> np.ndarray:
    """(m, 3) abc array from phasor objects or arrays."""
    rows = []
    for x in (v if isinstance(v, (list, tuple)) else [v]):
        if hasattr(x, "as_array"):
            rows.append(x.as_array())
        else:
            rows.append(np.asarray(x, dtype=complex).reshape(-1, 3))
    return np.vstack(rows).astype(complex)


def _seq_rows_to_abc(v) -> np.ndarray:
    """(m, 3) abc array from SequencePhasors or (m, 3) arrays in (0, 1, 2) order."""
    out = []
    for x in (v if isinstance(v, (list, tuple)) else [v]):
        if isinstance(x, SequencePhasor):
            out.append(seq_to_phase(x).as_array())
        else:
            for row in np.asarray(x, dtype=complex).reshape(-1, 3):
                out.append(FORTESCUE @ row)
    return np.array(out)


def controller_step(cs: SwitchControllerState, cfg: SwitchControllerConfig, v_de_abc, v_ex_120,
                    t: float, t_fault_cleared: float) -> SwitchControllerState:
    """One evaluation of the switching logic; returns the new state.

    ``v_de_abc`` are the boundary voltages of the phasor detailed model and
    ``v_ex_120`` the sequence voltages of the external model at the same buses.
    """
    de = _abc_rows(v_de_abc)
    ex = _seq_rows_to_abc(v_ex_120)
    mags = np.concatenate([np.abs(de).ravel(), np.abs(ex).ravel()])
    rate = math.inf if cs.v_prev is None else float(np.max(np.abs(mags - np.array(cs.v_prev))))
    dv = float(np.max(np.abs(de - ex)))
    phase, counter, decision = cs.phase, cs.counter, cs.decision
    if decision != "switch":
        if cs.t_clear is not None and t_fault_cleared != cs.t_clear:
            # a new clearing event starts a new post-fault episode
            phase, counter = "waiting_delay", 0
        if phase == "waiting_delay" and t >= t_fault_cleared + cfg.t_delay - 1e-9:
            phase = "watching_rate"
        if phase == "watching_rate" and rate < cfg.eps_rate:
            phase = "watching_dv"
        if phase == "watching_dv":
            counter = counter + 1 if dv < cfg.eps_dv else 0
            if counter >= cfg.hold_steps:
                decision = "switch"
    return SwitchControllerState(
        phase=phase,
        dv_history=(cs.dv_history + (dv,))[-HISTORY:],
        rate_history=(cs.rate_history + (rate,))[-HISTORY:],
        counter=counter,
        decision=decision,
        v_prev=tuple(mags.tolist()),
        t_clear=t_fault_cleared,
    )


# --------------------------------------------------------------------------
# Event reconciliation

@dataclass(frozen=True)
class Delivery:
    t_emt: float
    t_delivered: float
    target: str
    kind: str
    changed: bool


def reconcile_events(sim: SubsystemSim, signals, event_map: dict, t_deliver: float) -> list[Delivery]:
    """Apply EMT event signals to the phasor detailed model as overrides."""
    out = []
    changed_any = False
    for sig in sorted(signals, key=lambda s: (s.t_emt, s.target)):
        if sig.t_emt > t_deliver + 1e-12:
            raise ValueError(f"signal at {sig.t_emt} delivered early at {t_deliver}")
        if sig.target not in event_map:
            raise KeyError(f"EMT element {sig.target!r} has no phasor counterpart in the event map")
        target = event_map[sig.target]
        try:
            motor = sim.motor(target)
        except KeyError:
            raise KeyError(f"event map sends {sig.target!r} to {target!r}, "
                           f"which is not in the phasor detailed model") from None
        changed = apply_override(motor, sig)
        changed_any |= changed
        out.append(Delivery(sig.t_emt, t_deliver, sig.target, sig.kind, changed))
    if changed_any:
        sim.rebuild()
    return out


@dataclass
class MonitoredStates:
    t: float
    x_de: dict
    x_ex: dict


# --------------------------------------------------------------------------
# EMT side of the exchange

@dataclass
class EmtReport:
    """EMT state at an interaction boundary, extracted over the last cycle."""
    sample: int
    t: float
    t_center: float       # centre of the extraction window
    injections: dict      # boundary bus -> abc current flowing into the external system
    voltages: dict        # bus -> abc voltage phasors
    signals: list
    motor_status: dict
    motor_speed: dict


def emt_report(ckt: EmtCircuit) -> EmtReport:
    buf = record_waveforms(ckt)
    if not buf.ready:
        raise RuntimeError("EMT frame requested before one full cycle was recorded")
    x = np.hstack([buf.currents, buf.voltages])
    ph = extract_phasors(x, ckt.f0, ckt.dt, buf.times)
    m = len(ckt.boundary)
    inj = {b: ph[3 * j:3 * j + 3] for j, b in enumerate(ckt.boundary)}
    volt = {b.id: ph[3 * m + 3 * k:3 * m + 3 * k + 3] for k, b in enumerate(ckt.net.buses)}
    return EmtReport(ckt.sample, ckt.time, float(buf.times.mean()), inj, volt, ckt.take_signals(), ckt.motor_status(),
                     ckt.motor_speeds())


class LocalEmt:
    """EMT engine driven in-process.

    ``submit`` hands over the boundary equivalent for the next batch and
    ``collect`` returns the report at its end; a remote engine runs the batch
    between the two calls.
    """

    def __init__(self, ckt: EmtCircuit):
        self.ckt = ckt
        self._pending = None

    def submit(self, v_th, z_th, n: int):
        self._pending = (np.asarray(v_th, dtype=complex), np.asarray(z_th, dtype=complex), int(n))

    def collect(self) -> EmtReport:
        v_th, z_th, n = self._pending
        self._pending = None
        self.ckt.set_boundary(v_th, z_th, window=n)
        self.ckt.run(n)
        return emt_report(self.ckt)

    def advance(self, v_th, z_th, n: int) -> EmtReport:
        self.submit(v_th, z_th, n)
        return self.collect()

    def notify_switch(self, t: float):
        pass

    def close(self):
        pass


# --------------------------------------------------------------------------
# Results

@dataclass
class SimulationResult:
    mode: str
    names: list
    rows: list                     # one list of floats per interaction step
    t_switch: float | None = None
    stage_starts: dict = field(default_factory=dict)
    events: list = field(default_factory=list)        # (t, text)
    deliveries: list = field(default_factory=list)    # Delivery records
    timings: dict = field(default_factory=dict)       # stage -> wall seconds
    controller: list = field(default_factory=list)    # (t, phase, max dv, rate, counter)
    monitored: list = field(default_factory=list)
    emt_stalls: dict = field(default_factory=dict)    # motor id -> EMT stall time
    phasor_stalls: dict = field(default_factory=dict)  # motor id -> phasor stall time
    switch_jump: float | None = None
    warmup_residual: float | None = None

    @property
    def data(self) -> np.ndarray:
        return np.array(self.rows, dtype=float)

    @property
    def times(self) -> np.ndarray:
        return self.data[:, 0]

    @property
    def stage(self) -> np.ndarray:
        return self.data[:, self.names.index("stage")].astype(int)

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.names.index(name)]

    @property
    def stages(self) -> list:
        return sorted(self.stage_starts)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.names) + "\n")
            for row in self.rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")

    def write_events(self, path):
        lines = [(t, text) for t, text in self.events]
        lines += [(d.t_delivered, f"delivered {d.kind} {d.target} t_emt={d.t_emt:.6f} changed={int(d.changed)}")
                  for d in self.deliveries]
        with open(path, "w", encoding="utf-8") as fh:
            for t, text in sorted(lines, key=lambda x: x[0]):
                fh.write(f"{t:.6f} {text}\n")

    def write_timing(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"mode {self.mode}\n")
            for k, v in self.timings.items():
                fh.write(f"{k} {v:.4f}\n")


def _fmt(v) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# Coordinator

PH = "abc"


class Coordinator:
    """Owns the engines of one run and drives them through the stages."""

    def __init__(self, case, plan: StagePlan | None = None, mode: str = "hybrid_switch",
                 controller: SwitchControllerConfig | None = None, reconcile: bool = True,
                 transport: str = "inproc", monitor=None, motor_speed: dict | None = None,
                 wave_sink=None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
        self.case = case
        cfg = case.config
        self.f0 = float(cfg.get("f0", 60.0))
        self.plan = plan or StagePlan(float(cfg.get("t_hybrid_start", 0.3)), float(cfg.get("t_end", 10.0)),
                                      float(cfg.get("dt_ts", 0.005)), float(cfg.get("dt_emt", 20e-6)))
        if mode == "hybrid_no_switch":
            self.plan = replace(self.plan, switching_enabled=False)
        self.mode = mode
        self.cfg = controller or SwitchControllerConfig(f0=self.f0, dt_ts=self.plan.dt_ts)
        if abs(self.cfg.dt_ts - self.plan.dt_ts) > 1e-15:
            self.cfg = replace(self.cfg, dt_ts=self.plan.dt_ts)
        self.reconcile = reconcile
        self.transport = transport
        self.motor_speed = motor_speed
        self.wave_sink = wave_sink
        self.net: NetworkModel = case.net
        self.faults = list(case.faults)
        if monitor is None:
            mon = cfg.get("monitor")
            monitor = str(mon).split() if mon is not None else list(case.boundary)
        self.monitor = [str(b) for b in monitor]
        for b in self.monitor:
            self.net.index(b)
        self.hybrid = mode in ("hybrid_switch", "hybrid_no_switch")
        self.stage = 1
        self.result = SimulationResult(mode, [], [])
        self._fault_ids: dict = {}
        self._report: EmtReport | None = None
        self._w_slip = 0.0
        self.emt = None
        self.cs = SwitchControllerState()

    # -- set-up ----------------------------------------------------------------
    def _build(self):
        from .motor import rate_motor
        self.pf = power_flow(self.net)
        self.ratings = {m.id: rate_motor(m) for m in self.net.motors}
        if self.mode in ("ts_only", "emt_only"):
            self.full = SubsystemSim(self.net, Representation.POSITIVE_SEQUENCE, self.pf, "full", self.ratings)
            self.subs, self.links = [self.full], None
            self.machine_sim = self.full
            return
        if len(self.case.boundary) != 1:
            raise ValueError("hybrid runs support exactly one boundary bus")
        sr = split_network(self.net, self.case.boundary)
        self.split = sr
        self.pairs = []
        for b, d in sr.breakers:
            self.pairs.append((b, d) if sr.side_of(b) == "external" else (d, b))
        for f in self.faults:
            if sr.side_of(f.bus) != "detailed":
                raise ValueError(f"fault at bus {f.bus} lies in the external system; "
                                 "only faults inside the detailed system are supported in hybrid runs")
            if f.t_on <= self.plan.t_hybrid_start:
                raise ValueError(f"fault at {f.t_on} s precedes the hybrid start {self.plan.t_hybrid_start} s")
        self.ex = SubsystemSim(sr.external, Representation.THREE_SEQUENCE, self.pf, "external", self.ratings)
        self.de = SubsystemSim(sr.detailed, Representation.THREE_PHASE, self.pf, "detailed", self.ratings)
        self.subs = [self.ex, self.de]
        self.links = LinkSystem(self.subs, [Link(f"vb:{eb}", 0, eb, 1, db) for eb, db in self.pairs])
        self.machine_sim = self.ex

    def _columns(self):
        names = ["time_s"]
        for b in self.monitor:
            for ph in PH:
                names += [f"V{b}_{ph}_mag", f"V{b}_{ph}_ang"]
            names.append(f"V{b}_pos_mag")
        for m in self.net.machines:
            names += [f"{m.id}_delta_rad", f"{m.id}_omega_pu"]
        names += [f"{m.id}_status" for m in self.net.motors]
        names.append("stage")
        return names

    # -- bookkeeping -------------------------------------------------------------
    def _phasor_sim_of(self, bus):
        if not self.hybrid:
            return self.full
        return self.ex if bus in self.ex.net._index else self.de

    def _bus_abc(self, bus) -> np.ndarray:
        if self.mode == "emt_only":
            return self._report.voltages[bus]
        if self.stage == 2 and bus in self.de.net._index and bus in self._report.voltages:
            return self._report.voltages[bus]
        return self._phasor_sim_of(bus).voltage_abc(bus)

    def _motor_status(self) -> dict:
        if self.mode == "emt_only" or (self.stage == 2 and self._report is not None):
            return self._report.motor_status
        sim = self.de if self.hybrid else self.full
        return sim.motor_status()

    def _record(self, k: int):
        row = [k * self.plan.dt_ts]
        for b in self.monitor:
            v = np.asarray(self._bus_abc(b), dtype=complex)
            for x in v:
                row += [abs(x), math.atan2(x.imag, x.real)]
            row.append(abs((FORTESCUE.conj().T[1] @ v) / 3.0))
        if self.mode == "emt_only":
            pass
        else:
            for st in self.machine_sim.mstates:
                row += [st.delta, st.omega]
        status = self._motor_status()
        row += [1.0 if status.get(m.id) == "running" else 0.0 for m in self.net.motors]
        row.append(self.stage)
        self.result.rows.append(row)

    def _event(self, t, text):
        self.result.events.append((round(t, 9), text))
        log.info("t=%.4f %s", t, text)

    # -- phasor fault events --------------------------------------------------------
    def _phasor_faults(self, k: int) -> bool:
        """Apply/clear faults scheduled at step ``k`` in the phasor models."""
        changed = False
        for idx, f in enumerate(self.faults):
            sim = self._phasor_sim_of(f.bus) if self.hybrid else self.full
            if self.plan.steps(f.t_on) == k and idx not in self._fault_ids:
                self._fault_ids[idx] = sim.apply_fault(f, fid=idx)
                self._event(k * self.plan.dt_ts, f"phasor fault on {f.kind} bus {f.bus} phases {f.phases}")
                changed = True
            if self.plan.steps(f.t_off) == k and idx in self._fault_ids:
                sim.clear_fault(self._fault_ids.pop(idx))
                self._event(k * self.plan.dt_ts, f"phasor fault cleared bus {f.bus}")
                changed = True
        return changed

    def _t_fault_cleared(self, k: int) -> float:
        """Most recent clearing time seen at step ``k``; an active fault returns its future clearing."""
        t_ref = self.plan.t_hybrid_start
        for f in self.faults:
            on, off = self.plan.steps(f.t_on), self.plan.steps(f.t_off)
            if on <= k < off:
                return f.t_off
            if off <= k:
                t_ref = max(t_ref, f.t_off)
        return t_ref

    def _phasor_stalls(self, sim, t):
        for m in sim.motors:
            if m.status == "stalled" and m.id not in self.result.phasor_stalls:
                self.result.phasor_stalls[m.id] = m.stall_time if m.stall_time is not None else t
                self._event(t, f"phasor motor {m.id} stalled")

    # -- stages ----------------------------------------------------------------------
    def run(self) -> SimulationResult:
        t_start = _time.perf_counter()
        self._build()
        self.result.names = self._columns()
        if self.mode == "emt_only":
            return self._run_emt_only(t_start)
        plan = self.plan
        k_end = plan.steps(plan.t_end)
        k2 = plan.steps(plan.t_hybrid_start) if self.hybrid else k_end + 1
        wall = {1: 0.0, 2: 0.0, 3: 0.0}
        self.result.stage_starts[1] = 0.0
        self._record(0)
        k = 0
        try:
            while k < k_end:
                t0 = _time.perf_counter()
                if self.stage == 1 and k == k2:
                    self.enter_stage2(k)
                    wall[1] += _time.perf_counter() - t0
                    t0 = _time.perf_counter()
                if self.stage == 2:
                    switched = self.interaction_step(k)
                    k += 1
                    self._record(k)
                    wall[2] += _time.perf_counter() - t0
                    if switched:
                        t0 = _time.perf_counter()
                        self.enter_stage3(k)
                        wall[3] += _time.perf_counter() - t0
                    continue
                sims = self.subs
                if self._phasor_faults(k):
                    solve_networks(sims, self.links)
                step(sims, self.links, plan.dt_ts, (k + 1) * plan.dt_ts)
                k += 1
                for s in sims:
                    if s is not getattr(self, "ex", None):
                        self._phasor_stalls(s, k * plan.dt_ts)
                self._record(k)
                wall[self.stage] += _time.perf_counter() - t0
        except CoordinatorError:
            raise
        except Exception as e:
            raise CoordinatorError(self.stage, k * plan.dt_ts, f"{type(e).__name__}: {e}") from e
        finally:
            if self.emt is not None:
                self.emt.close()
                self.emt = None
        self.result.timings = {f"stage{s}": wall[s] for s in (1, 2, 3)}
        self.result.timings["total"] = _time.perf_counter() - t_start
        return self.result

    def enter_stage2(self, k: int):
        plan = self.plan
        t = k * plan.dt_ts
        ex, de = self.ex, self.de
        ext_buses = [eb for eb, _ in self.pairs]
        th = thevenin_external(ex, ext_buses)
        # the link currents become explicit injections into the external system
        for eb, _ in self.pairs:
            sl = ex._sl(ex.bus_index(eb))
            ex.injections[eb] = abc_from_vec(ex.rep, ex.link_inj[sl])
        i_snap = {db: ex.injections[eb] for eb, db in self.pairs}
        ex.link_inj[:] = 0
        de.link_inj[:] = 0
        no = thevenin_to_norton(th)
        de.set_norton(self.pairs[0][1], no.y_n, no.i_n)
        solve_networks([de], None)
        snapshot = {b.id: de.voltage_abc(b.id) for b in de.net.buses}

        ckt = EmtCircuit(de.net, [db for _, db in self.pairs], plan.dt_emt, self.f0, z_thevenin=th.z_th)
        for f in self.faults:
            ckt.schedule_fault(f)
        n_end = int(round(t / plan.dt_emt))
        n_warm = max(int(round(plan.warmup / plan.dt_emt)), samples_per_cycle(self.f0, plan.dt_emt))
        ckt.sample = n_end - n_warm
        ckt.energize(snapshot, th.v_th, motor_status=de.motor_status(), motor_speed=self.motor_speed)
        self._attach_sink(ckt)
        self.emt = self._make_endpoint(ckt)
        rep = self.emt.advance(th.v_th, th.z_th, n_warm)
        resid = max(float(np.max(np.abs(rep.voltages[b] - v))) for b, v in snapshot.items())
        resid = max(resid, max(float(np.max(np.abs(rep.injections[db] - i))) for db, i in i_snap.items()))
        self.result.warmup_residual = resid
        if resid >= 0.01:
            raise CoordinatorError(2, t, f"EMT warm-up residual {resid:.4f} pu is not below 0.01 pu; "
                                         "check the initial motor speeds and the detailed-system data")
        self._report = rep
        if self.reconcile:
            # statuses of mirrored devices are commanded by the EMT model from here on
            for m in de.motors:
                m.override_active = True
        self.stage = 2
        self.result.stage_starts[2] = t
        self.cs = SwitchControllerState()
        self._event(t, f"enter stage 2 (warm-up residual {resid:.2e} pu)")

    def _attach_sink(self, ckt):
        if self.wave_sink is None:
            return
        if hasattr(self.wave_sink, "start"):
            self.wave_sink.start(ckt)
        ckt._wave_sink = self.wave_sink

    def _make_endpoint(self, ckt):
        if self.transport == "inproc":
            return LocalEmt(ckt)
        if self.transport == "tcp":
            from .transport import TcpEmt
            return TcpEmt(ckt)
        raise ValueError(f"unknown transport {self.transport!r}")

    def interaction_step(self, k: int) -> bool:
        """Advance the hybrid loop from step ``k`` to ``k + 1``; True when switching."""
        plan = self.plan
        t, t1 = k * plan.dt_ts, (k + 1) * plan.dt_ts
        ex, de = self.ex, self.de
        rep = self._report
        # 1: injection frame from the EMT buffers at t, advanced from the centre of the
        # extraction window to t + dT at the rotation rate of the boundary voltage
        lag = t1 - rep.t_center
        rot = np.exp(1j * self._w_slip * lag)
        frame = injections_to_sequence({eb: rep.injections[db] * rot for eb, db in self.pairs}, t)
        if not frame.ready:
            raise AssertionError("injection frame not ready")
        for eb, _ in self.pairs:
            ex.injections[eb] = FORTESCUE @ frame.injections[eb].as_012()
        pending = rep.signals
        for sig in pending:
            self.result.emt_stalls.setdefault(sig.target, sig.t_emt)
            self._event(sig.t_emt, f"EMT {sig.kind} {sig.target}")
        # 2: external system one step
        v1_prev = ex.v1(self.pairs[0][0])
        step([ex], None, plan.dt_ts, t1)
        v1 = ex.v1(self.pairs[0][0])
        if abs(v1) > 0.1 and abs(v1_prev) > 0.1:
            self._w_slip = float(np.angle(v1 * np.conj(v1_prev))) / plan.dt_ts
        # 3: Thevenin equivalent at t + dT
        th = thevenin_external(ex, [eb for eb, _ in self.pairs])
        # 4: EMT batch towards the new equivalent
        self.emt.submit(th.v_th, th.z_th, plan.substeps)
        # 5: Norton form for the phasor detailed model
        no = thevenin_to_norton(th)
        # 6: phasor detailed model, events first
        changed = False
        if self.reconcile and pending:
            self.result.deliveries += reconcile_events(de, pending, self.case.event_map, t)
            changed = True
        changed |= self._phasor_faults(k)
        if changed:
            solve_networks([de], None)
        de.set_norton(self.pairs[0][1], no.y_n, no.i_n)
        step([de], None, plan.dt_ts, t1)
        self._phasor_stalls(de, t1)
        # join with the EMT batch
        self._report = self.emt.collect()
        # 7: switching controller
        eb, db = self.pairs[0]
        v_de = de.voltage_abc(db)
        v_ex = ex.voltage_012(eb)
        self.cs = controller_step(self.cs, self.cfg, [v_de], [v_ex], t1, self._t_fault_cleared(k + 1))
        self.result.controller.append((t1, self.cs.phase, self.cs.dv_history[-1],
                                       self.cs.rate_history[-1], self.cs.counter))
        self.result.monitored.append(MonitoredStates(
            t1, {"v_boundary_abc": v_de, "motors": dict(self._report.motor_status)},
            {"v_boundary_012": v_ex, "omega": [st.omega for st in ex.mstates]}))
        if self.cs.decision == "switch" and plan.switching_enabled:
            return True
        return False

    def enter_stage3(self, k: int):
        t = k * self.plan.dt_ts
        for f in self.faults:
            if f.t_on > t + 1e-12:
                raise CoordinatorError(3, t, f"fault at {f.t_on} s would occur after the switch back to "
                                             "phasor mode; use a later switching policy or disable switching")
        ex, de = self.ex, self.de
        eb, db = self.pairs[0]
        v_before = np.concatenate([de.voltage_abc(db), ex.voltage_abc(eb)])
        self.emt.notify_switch(t)
        self.emt.close()
        self.emt = None
        de.clear_norton()
        ex.injections.clear()
        for m in de.motors:
            m.override_active = False
        solve_networks(self.subs, self.links)
        v_after = np.concatenate([de.voltage_abc(db), ex.voltage_abc(eb)])
        self.result.switch_jump = float(np.max(np.abs(v_after - v_before)))
        self.stage = 3
        self.result.t_switch = t
        self.result.stage_starts[3] = t
        self._event(t, f"switch to stage 3 (boundary jump {self.result.switch_jump:.2e} pu)")

    # -- EMT reference run ------------------------------------------------------------
    def _run_emt_only(self, t_start) -> SimulationResult:
        from .phasor import normalize_loads
        if self.net.machines:
            raise ValueError("emt_only needs a case without synchronous machines")
        plan = self.plan
        sources = [b.id for b in self.net.buses if b.pf_type == "slack"]
        if not sources:
            raise ValueError("emt_only needs a slack bus to act as the source")
        net = normalize_loads(self.net, self.pf)
        z = 1e-4j * np.eye(3 * len(sources))
        ckt = EmtCircuit(net, sources, plan.dt_emt, self.f0, z_thevenin=z)
        for f in self.faults:
            ckt.schedule_fault(f)
        v = {b.id: self.pf.voltage(b.id) * FORTESCUE[:, 1] for b in self.net.buses}
        emf = np.concatenate([v[s] for s in sources])
        n_warm = samples_per_cycle(self.f0, plan.dt_emt)
        ckt.sample = -n_warm
        ckt.energize(v, emf)
        self._attach_sink(ckt)
        self.emt = self._make_endpoint(ckt)
        self.stage = 2
        self.result.stage_starts[2] = 0.0
        self._report = self.emt.advance(emf, z, n_warm)
        self._record(0)
        t0 = _time.perf_counter()
        for k in range(plan.steps(plan.t_end)):
            self._report = self.emt.advance(emf, z, plan.substeps)
            for sig in self._report.signals:
                self.result.emt_stalls.setdefault(sig.target, sig.t_emt)
                self._event(sig.t_emt, f"EMT {sig.kind} {sig.target}")
            self._record(k + 1)
        self.emt.close()
        self.emt = None
        self.result.timings = {"stage2": _time.perf_counter() - t0,
                               "total": _time.perf_counter() - t_start}
        return self.result


def validate_case(case, plan: StagePlan | None = None) -> list[str]:
    """All problems that would stop a hybrid run of ``case``; empty when clean."""
    problems = []
    cfg = case.config
    if plan is None:
        try:
            plan = StagePlan(float(cfg.get("t_hybrid_start", 0.3)), float(cfg.get("t_end", 10.0)),
                             float(cfg.get("dt_ts", 0.005)), float(cfg.get("dt_emt", 20e-6)))
        except ValueError as e:
            problems.append(f"plan: {e}")
    for b in str(cfg.get("monitor", "")).split():
        if b not in case.net._index:
            problems.append(f"config: monitor bus {b!r} does not exist")
    if not case.boundary:
        problems.append("boundary: no boundary bus given")
        return problems
    if len(case.boundary) != 1:
        problems.append(f"boundary: hybrid runs support one boundary bus, got {len(case.boundary)}")
    try:
        sr = split_network(case.net, case.boundary)
    except (TopologyError, ValueError, KeyError) as e:
        problems.append(f"split: {e}")
        return problems
    if not sr.detailed.buses or not sr.external.buses:
        problems.append("split: one side of the boundary is empty")
    emt_ids = {m.emt_id or m.id: m.id for m in sr.detailed.motors}
    phasor_ids = {m.id for m in sr.detailed.motors}
    for emt_id in emt_ids:
        if emt_id not in case.event_map:
            problems.append(f"events: EMT motor {emt_id!r} has no mapping to a phasor motor")
    for emt_id, target in case.event_map.items():
        if emt_id not in emt_ids:
            problems.append(f"events: mapping gap, {emt_id!r} is not an EMT motor of the detailed system")
        elif target not in phasor_ids:
            problems.append(f"events: mapping gap, {emt_id!r} maps to unknown phasor motor {target!r}")
    for f in case.faults:
        if sr.side_of(f.bus) != "detailed" or f.bus in case.boundary:
            problems.append(f"events: fault at bus {f.bus} is outside the detailed system (unsupported)")
        if plan is not None and f.t_on <= plan.t_hybrid_start:
            problems.append(f"events: fault at bus {f.bus} starts at {f.t_on} s, not after t_hybrid_start")
        if plan is not None and f.t_on >= plan.t_end:
            problems.append(f"events: fault at bus {f.bus} starts after t_end")
    return problems


def run(plan: StagePlan, case, events=None, **kw) -> SimulationResult:
    """Run ``case`` under ``plan``; ``events`` replaces the case fault list if given."""
    if events is not None:
        case = replace(case, faults=list(events))
    mode = kw.pop("mode", "hybrid_switch" if plan.switching_enabled else "hybrid_no_switch")
    return Coordinator(case, plan, mode=mode, **kw).run()
