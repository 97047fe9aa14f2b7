import math
import socket

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridsim.caseio import bundled_case, load_case, parse_case
from hybridsim.coordinator import (
    Coordinator, CoordinatorError, StagePlan, SwitchControllerConfig, SwitchControllerState,
    controller_step, reconcile_events,
)
from hybridsim.netmodel import Representation, split_network
from hybridsim.phasor import SubsystemSim, power_flow
from hybridsim.signals import EventSignal
from hybridsim.transport import (
    EVENT_SIGNAL, HANDSHAKE, INJECTION_FRAME, ProtocolError, encode, pack_complex, receive,
    unpack_complex,
)

CFG = SwitchControllerConfig()
BAL = np.exp(-2j * np.pi / 3 * np.arange(3))
T_CLEAR = 0.57


def _pair(dv):
    """Boundary voltages whose phase-wise mismatch is exactly ``dv`` with constant magnitudes."""
    theta = 2 * math.asin(dv / 2)
    return BAL, np.array([0.0, np.exp(1j * theta), 0.0])


def _drive(dvs, t0=T_CLEAR + 0.2, cs=None, t_clear=T_CLEAR):
    cs = cs or SwitchControllerState()
    states = []
    for k, dv in enumerate(dvs):
        de, ex = _pair(dv)
        cs = controller_step(cs, CFG, de, ex, t0 + k * CFG.dt_ts, t_clear)
        states.append(cs)
    return states


def test_hold_window_is_seven_steps():
    assert CFG.hold_steps == 7
    assert SwitchControllerConfig(hold_cycles=1).hold_steps == 4
    assert SwitchControllerConfig(dt_ts=1 / 240).hold_steps == 8


def test_switch_after_seven_quiet_steps():
    # the first step only primes the rate history
    states = _drive([0.004] * 9)
    decisions = [s.decision for s in states]
    assert decisions[:7] == ["stay"] * 7
    assert decisions[7] == "switch"


def test_large_mismatch_resets_counter():
    states = _drive([0.004] * 7 + [0.006] + [0.004] * 7)
    assert [s.counter for s in states] == [0, 1, 2, 3, 4, 5, 6, 0, 1, 2, 3, 4, 5, 6, 7]
    assert [s.decision for s in states].index("switch") == 14


def test_no_switch_inside_delay():
    states = _drive([0.0] * 40, t0=T_CLEAR + 0.1)
    first = [s.decision for s in states].index("switch")
    t_switch = T_CLEAR + 0.1 + first * CFG.dt_ts
    assert t_switch >= T_CLEAR + CFG.t_delay - 1e-9
    assert all(s.phase == "waiting_delay" for s in states[:20])


def test_fast_motion_blocks_dv_watch():
    cs = SwitchControllerState()
    for k in range(30):
        mag = 1.0 + 0.01 * (k % 2)
        cs = controller_step(cs, CFG, BAL * mag, np.array([0, mag, 0]), T_CLEAR + 0.2 + k * CFG.dt_ts, T_CLEAR)
        assert cs.phase == "watching_rate"
    assert cs.decision == "stay"


def test_new_clearing_restarts_delay():
    states = _drive([0.004] * 5)
    assert states[-1].phase == "watching_dv"
    later = _drive([0.004] * 3, t0=T_CLEAR + 0.3, cs=states[-1], t_clear=T_CLEAR + 0.25)
    assert all(s.phase == "waiting_delay" and s.counter == 0 for s in later)


def test_decision_is_latched():
    states = _drive([0.004] * 8 + [0.5] * 5)
    assert all(s.decision == "switch" for s in states[7:])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 0.01), min_size=1, max_size=60),
       st.floats(-0.3, 0.3))
def test_switch_implies_quiet_hold_window(dvs, offset):
    t0 = T_CLEAR + 0.2 + offset
    states = _drive(dvs, t0=t0)
    for k, s in enumerate(states):
        if s.decision == "switch":
            assert t0 + k * CFG.dt_ts >= T_CLEAR + CFG.t_delay - 1e-9
            assert k >= CFG.hold_steps
            assert all(d < CFG.eps_dv for d in s.dv_history[-CFG.hold_steps:])
            break
    else:
        # no switch: no run of hold_steps quiet samples after the delay and the priming step
        run = 0
        for k, d in enumerate(dvs):
            ready = k >= 1 and t0 + k * CFG.dt_ts >= T_CLEAR + CFG.t_delay - 1e-9
            run = run + 1 if (ready and d < CFG.eps_dv) else 0
            assert run < CFG.hold_steps


def test_controller_accepts_sequence_phasor_objects():
    from hybridsim.netmodel import SequencePhasor, ThreePhasePhasor
    de = ThreePhasePhasor.from_array(BAL)
    ex = SequencePhasor(s1=1.0)
    cs = controller_step(SwitchControllerState(), CFG, [de], [ex], 1.0, 0.5)
    assert cs.dv_history[-1] == pytest.approx(0.0, abs=1e-15)


# -- event reconciliation ------------------------------------------------------------

@pytest.fixture(scope="module")
def case9():
    return load_case(bundled_case("case9"))


def _detailed(case):
    sr = split_network(case.net, case.boundary)
    return SubsystemSim(sr.detailed, Representation.THREE_PHASE, power_flow(case.net))


def test_reconcile_applies_stall(case9):
    de = _detailed(case9)
    v0 = de.topology_version
    out = reconcile_events(de, [EventSignal(0.6281, "M12c", phase="c")], case9.event_map, 0.63)
    assert out[0].changed and out[0].target == "M12c"
    assert de.motor("M12c").status == "stalled" and de.motor("M12c").stall_time == 0.6281
    assert de.motor("M12a").status == "running"
    assert de.topology_version > v0


def test_reconcile_orders_by_time(case9):
    de = _detailed(case9)
    sigs = [EventSignal(0.62, "M12b"), EventSignal(0.61, "M12a")]
    out = reconcile_events(de, sigs, case9.event_map, 0.625)
    assert [d.target for d in out] == ["M12a", "M12b"]


def test_reconcile_rejects_unmapped_and_missing(case9):
    de = _detailed(case9)
    with pytest.raises(KeyError, match="no phasor counterpart"):
        reconcile_events(de, [EventSignal(0.6, "M99")], case9.event_map, 0.6)
    with pytest.raises(KeyError, match="not in the phasor"):
        reconcile_events(de, [EventSignal(0.6, "M12a")], {"M12a": "ghost"}, 0.6)


def test_reconcile_rejects_future_signal(case9):
    with pytest.raises(ValueError, match="early"):
        reconcile_events(_detailed(case9), [EventSignal(0.7, "M12a")], case9.event_map, 0.6)


# -- plan ------------------------------------------------------------------------------

def test_plan_counts():
    p = StagePlan()
    assert p.substeps == 250
    assert p.steps(0.3) == 60 and p.steps(10.0) == 2000


@pytest.mark.parametrize("kw", [dict(dt_emt=3e-5), dict(dt_ts=-1), dict(t_hybrid_start=10.0),
                                dict(t_end=0.0)])
def test_plan_rejects(kw):
    with pytest.raises(ValueError):
        StagePlan(**kw)


def test_unknown_mode(case9):
    with pytest.raises(ValueError):
        Coordinator(case9, mode="turbo")


def test_fault_before_hybrid_start_rejected(case9):
    with pytest.raises(ValueError, match="precedes"):
        Coordinator(case9, StagePlan(0.55, 1.0)).run()


def test_warmup_aborts_on_wrong_initial_motor_speed(case9):
    with pytest.raises(CoordinatorError, match="warm-up residual") as ei:
        Coordinator(case9, StagePlan(0.3, 0.35), motor_speed={"M12a": 0.6}).run()
    assert ei.value.stage == 2


def test_ts_only_columns_and_grid(case9):
    res = Coordinator(case9, StagePlan(0.1, 0.2), mode="ts_only").run()
    assert res.names[0] == "time_s" and res.names[-1] == "stage"
    assert "V5_pos_mag" in res.names and "G2_omega_pu" in res.names and "M12c_status" in res.names
    t = res.times
    assert len(t) == 41 and np.allclose(np.diff(t), 0.005)
    assert set(res.stage) == {1}


MACHINE_FREE = """
[config]
name = radial
[buses]
1 12.47 detailed type=slack v=1.0
2 12.47 detailed
3 12.47 detailed
[branches]
L12 1 2 0.02+0.08j
L23 2 3 0.03+0.05j
[loads]
P2 2 0.3 0.1
P3 3 0.2 0.05 phases=a
"""


def test_emt_only_reproduces_power_flow():
    case = parse_case(MACHINE_FREE)
    res = Coordinator(case, StagePlan(0.0, 0.05), mode="emt_only", monitor=["2", "3"]).run()
    pf = power_flow(case.net)
    for b in ("2", "3"):
        v1 = res.column(f"V{b}_pos_mag")[-1]
        assert v1 == pytest.approx(abs(pf.voltage(b)), abs=2e-3)


# -- transport framing -------------------------------------------------------------

@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=40), st.text(max_size=40))
def test_message_round_trip(values, text):
    a, b = socket.socketpair()
    with a, b:
        a.sendall(encode(INJECTION_FRAME, values, text))
        msg = receive(b)
    assert msg.kind == INJECTION_FRAME
    assert msg.values.tolist() == [float(v) for v in values]
    assert msg.text == text


def test_complex_packing_round_trip():
    x = np.array([1 + 2j, -3.5e-17 + 0j, 1e300j])
    assert np.array_equal(unpack_complex(pack_complex(x)), x)


def test_unknown_kind_and_truncation():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(encode(99))
        with pytest.raises(ProtocolError, match="unknown"):
            receive(b)
    a, b = socket.socketpair()
    with b:
        a.sendall(encode(EVENT_SIGNAL, [1.0, 2.0])[:-4])
        a.close()
        with pytest.raises(ProtocolError, match="closed"):
            receive(b)
    assert HANDSHAKE == 1
