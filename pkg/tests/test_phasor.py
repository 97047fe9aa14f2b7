import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridsim.caseio import bundled_case, load_case
from hybridsim.netmodel import (
    Branch, Bus, FaultSpec, Load, Machine, NetworkModel, Representation, split_network,
)
from hybridsim.phasor import (
    V_BREAK, ACMotorPerf, Link, LinkSystem, SubsystemSim, acmotor_pq, apply_override,
    power_flow, solve_networks, step,
)
from hybridsim.signals import EventSignal

TS, TP = Representation.THREE_SEQUENCE, Representation.THREE_PHASE


@pytest.fixture(scope="module")
def ieee9():
    return load_case(bundled_case("ieee9"))


# Anderson & Fouad load flow, angles relative to bus 4 (degrees).  Generator
# buses sit behind delta/wye-grounded step-ups, which shift them by -30 deg.
PUBLISHED = {
    "1": (1.040, 0.0 + 2.2168 - 30), "2": (1.025, 9.2800 + 2.2168 - 30), "3": (1.025, 4.6648 + 2.2168 - 30),
    "4": (1.0258, 0.0), "5": (0.9956, -3.9888 + 2.2168), "6": (1.0127, -3.6874 + 2.2168),
    "7": (1.0258, 3.7197 + 2.2168), "8": (1.0159, 0.7275 + 2.2168), "9": (1.0323, 1.9667 + 2.2168),
}


def test_power_flow_matches_published_9bus(ieee9):
    pf = power_flow(ieee9.net)
    assert pf.mismatch < 1e-9
    ref = np.angle(pf.voltage("4"), deg=True)
    for bus, (vm, ang) in PUBLISHED.items():
        v = pf.voltage(bus)
        assert abs(abs(v) - vm) < 1e-3, bus
        assert abs(np.angle(v, deg=True) - ref - ang) < 0.02, bus


def test_9bus_equilibrium_holds(ieee9):
    pf = power_flow(ieee9.net)
    sim = SubsystemSim(ieee9.net, Representation.POSITIVE_SEQUENCE, pf)
    solve_networks([sim], None)
    x0 = sim.machine_state_array()
    v0 = sim.V.copy()
    assert np.max(np.abs(sim.derivatives())) < 1e-9
    for k in range(400):
        step([sim], None, 0.005, (k + 1) * 0.005)
    assert np.max(np.abs(sim.machine_state_array() - x0)) < 1e-9
    assert np.max(np.abs(sim.V - v0)) < 1e-9


def test_mechanical_power_step_accelerates(ieee9):
    pf = power_flow(ieee9.net)
    sim = SubsystemSim(ieee9.net, Representation.POSITIVE_SEQUENCE, pf)
    solve_networks([sim], None)
    g2 = [m.id for m in sim.machines].index("G2")
    sim.mstates[g2].pm += 0.1
    for k in range(20):
        step([sim], None, 0.005, (k + 1) * 0.005)
    assert sim.mstates[g2].omega > 1.0
    others = [s.omega for j, s in enumerate(sim.mstates) if j != g2]
    assert all(w < sim.mstates[g2].omega for w in others)


def test_network_solve_has_zero_residual(ieee9):
    pf = power_flow(ieee9.net)
    sim = SubsystemSim(ieee9.net, TS, pf)
    sim.apply_fault(FaultSpec("7", "SLG", "a", 5.0, 0.0, 1.0))
    sim.network_solve()
    assert sim.residual() < 1e-9
    v7 = sim.voltage_abc("7")
    assert abs(v7[0]) < abs(v7[1]) and abs(v7[0]) < abs(v7[2])


# -- MATE against a monolithic solve ---------------------------------------------

def random_split_case(seed):
    """Random network with 1-3 boundary buses between two connected areas."""
    rng = np.random.default_rng(seed)
    while True:
        ne, nb, nd = rng.integers(1, 5), rng.integers(1, 4), rng.integers(1, 6)
        if 3 <= ne + nb + nd <= 12:
            break
    ext = [f"E{k}" for k in range(ne)]
    bnd = [f"B{k}" for k in range(nb)]
    det = [f"D{k}" for k in range(nd)]
    buses = [Bus("E0", 230, kind="generator", pf_type="slack", v_set=1.02)]
    buses += [Bus(b, 230) for b in ext[1:] + bnd]
    buses += [Bus(b, 230, subsystem="detailed") for b in det]

    def line(i, a, b):
        z = complex(rng.uniform(0.005, 0.03), rng.uniform(0.05, 0.2))
        return Branch(f"L{i}", a, b, z, z0=3 * z, b1=rng.uniform(0, 0.05))

    branches = []
    area_e = ext + bnd
    for k in range(1, len(area_e)):
        branches.append(line(len(branches), area_e[rng.integers(0, k)], area_e[k]))
    for k in range(1, nd):
        branches.append(line(len(branches), det[rng.integers(0, k)], det[k]))
    for b in bnd:
        branches.append(line(len(branches), b, det[rng.integers(0, nd)]))
    for _ in range(rng.integers(0, 3)):
        a, b = rng.choice(det, 2) if nd > 1 else (None, None)
        if a is not None and a != b:
            branches.append(line(len(branches), a, b))
    machines = [Machine("G0", "E0", 5.0, 1.2, 0.25, 0.8, 0.3, 6.0, 0.5)]
    loads = [Load(f"P{k}", b, rng.uniform(0.02, 0.12), rng.uniform(0.0, 0.04))
             for k, b in enumerate(ext[1:] + bnd + det)]
    net = NetworkModel(tuple(buses), tuple(branches), tuple(machines), tuple(loads))
    fault = FaultSpec(det[rng.integers(0, nd)], "SLG", "a", rng.uniform(1.0, 20.0), 0.0, 1.0) \
        if rng.random() < 0.5 else None
    return net, bnd, fault


@pytest.mark.parametrize("seed", range(20))
def test_mate_matches_monolithic(seed):
    net, bnd, fault = random_split_case(seed)
    pf = power_flow(net)
    full = SubsystemSim(net, TS, pf)
    sr = split_network(net, bnd)
    ex = SubsystemSim(sr.external, TS, pf)
    de = SubsystemSim(sr.detailed, TP, pf)
    links = LinkSystem([ex, de], [Link(f"vb:{b}", 0, b, 1, d) for b, d in sr.breakers])
    if fault is not None:
        full.apply_fault(fault)
        de.apply_fault(fault)
    solve_networks([full], None)
    solve_networks([ex, de], links)
    for b in net.buses:
        sub = ex if b.id in sr.external._index else de
        assert np.max(np.abs(sub.voltage_abc(b.id) - full.voltage_abc(b.id))) < 1e-10
    for b, d in sr.breakers:
        assert np.max(np.abs(ex.voltage_abc(b) - de.voltage_abc(d))) < 1e-10


# -- A/C motor performance model ---------------------------------------------------

def _motor(status="running"):
    return ACMotorPerf("M", "1", "a", 0.5, 0.2, (0.5, -0.2, 0.7), complex(1.2, -2.4), status=status)


@given(st.floats(V_BREAK, 1.3))
def test_running_draw_is_constant_power_above_break(v):
    m = _motor()
    p, q = acmotor_pq(m, v)
    assert p == 0.5
    assert q == pytest.approx(0.2 * (0.5 * v * v - 0.2 * v + 0.7))


@given(st.floats(0.0, V_BREAK))
def test_running_draw_scales_with_v_squared_below_break(v):
    m = _motor()
    p, q = acmotor_pq(m, v)
    pb, qb = acmotor_pq(m, V_BREAK)
    assert p == pytest.approx(pb * (v / V_BREAK) ** 2, abs=1e-15)
    assert q == pytest.approx(qb * (v / V_BREAK) ** 2, abs=1e-15)


@given(st.floats(0.0, 1.3))
def test_stalled_draw_is_constant_admittance(v):
    p, q = acmotor_pq(_motor("stalled"), v)
    assert p == pytest.approx(1.2 * v * v)
    assert q == pytest.approx(2.4 * v * v)


def test_negative_voltage_rejected():
    with pytest.raises(ValueError):
        acmotor_pq(_motor(), -0.1)


def test_override_stalls_once():
    m = _motor()
    assert apply_override(m, EventSignal(0.61, "M"))
    assert m.status == "stalled" and m.stall_time == 0.61 and m.override_active
    assert not apply_override(m, EventSignal(0.62, "M"))
    assert m.stall_time == 0.61


def test_run_command_does_not_restart_a_stalled_motor():
    m = _motor("stalled")
    assert not apply_override(m, EventSignal(0.7, "M", kind="motor_run", value="running"))
    assert m.status == "stalled" and m.commanded == "running"


def test_override_rejects_foreign_signal():
    with pytest.raises(ValueError):
        apply_override(_motor(), EventSignal(0.7, "M", kind="breaker_open", value="open"))


def test_overridden_motor_ignores_local_trigger():
    m = _motor()
    m.override_active = True
    m.v_stall = 2.0
    sim = type("S", (), {})()
    sim.motors = [m]
    sim.voltage_abc = lambda bus: np.array([0.1, 0.1, 0.1])
    assert SubsystemSim.update_discrete(sim, 0.005, 0.1) == []
    assert m.status == "running"


def test_local_trigger_needs_sustained_low_voltage():
    m = _motor()
    sim = type("S", (), {})()
    sim.motors = [m]
    sim.voltage_abc = lambda bus: np.array([0.3, 1.0, 1.0])
    fired = [SubsystemSim.update_discrete(sim, 0.005, 0.005 * k) for k in range(1, 8)]
    n_needed = math.ceil(m.t_stall / 0.005 - 1e-9)
    assert fired[n_needed - 1] == ["M"]
    assert all(f == [] for f in fired[:n_needed - 1])
