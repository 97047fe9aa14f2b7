"""Single-phase induction motor: time-domain model and steady-state relations.

The machine is modelled in the stationary frame with the main winding on the
d axis and a two-axis squirrel-cage rotor.  Flux linkages are in per unit with
``v = r i + (1/w_b) dpsi/dt``; waveforms use the peak convention, so a steady
1 pu sinusoid corresponds to a 1 pu phasor.

Steady-state behaviour at constant speed follows the double-revolving-field
equivalent circuit (``drf_impedance`` / ``drf_torque``).  The time-domain model
reduces to it exactly, which the tests use as an oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .netmodel import MotorSpec

W_BASE = 2.0 * math.pi * 60.0
# rotor speed-voltage coupling: d-row gets +w*psi_rq, q-row gets -w*psi_rd
_W = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
_E0 = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class MotorParams:
    rs: float
    xls: float
    xm: float
    rr: float
    xlr: float
    H: float
    t_load: float
    c0: float

    @classmethod
    def from_spec(cls, spec: MotorSpec) -> "MotorParams":
        return cls(spec.rs, spec.xls, spec.xm, spec.rr, spec.xlr, spec.H, spec.t_load, spec.c0)

    @property
    def inductance(self) -> np.ndarray:
        xs, xr = self.xls + self.xm, self.xlr + self.xm
        return np.array([[xs, self.xm, 0.0], [self.xm, xr, 0.0], [0.0, 0.0, xr]])

    @property
    def resistance(self) -> np.ndarray:
        return np.diag([self.rs, self.rr, self.rr])

    def state_matrix(self, speed: float) -> np.ndarray:
        """M(w) such that (1/w_b) dpsi/dt = e0*v - M(w) psi."""
        return self.resistance @ np.linalg.inv(self.inductance) + speed * _W

    def load_torque(self, speed):
        return self.t_load * (self.c0 + (1.0 - self.c0) * speed * speed)


def electrical_torque(p: MotorParams, psi: np.ndarray) -> np.ndarray:
    """Instantaneous air-gap torque (own pu) from flux states ``psi`` (..., 3)."""
    cur = psi @ np.linalg.inv(p.inductance).T
    return -2.0 * p.xm * cur[..., 0] * cur[..., 2]


def drf_impedance(p: MotorParams, speed: float) -> complex:
    """Input impedance from the double-revolving-field equivalent circuit."""
    s = 1.0 - speed
    zf = _parallel(1j * p.xm, _rotor_branch(p, s))
    zb = _parallel(1j * p.xm, _rotor_branch(p, 2.0 - s))
    return p.rs + 1j * p.xls + 0.5 * zf + 0.5 * zb


def drf_torque(p: MotorParams, speed: float, v: float) -> float:
    """Average electrical torque (own pu) at terminal voltage magnitude ``v``."""
    s = 1.0 - speed
    zf = _parallel(1j * p.xm, _rotor_branch(p, s))
    zb = _parallel(1j * p.xm, _rotor_branch(p, 2.0 - s))
    i = v / abs(drf_impedance(p, speed))
    return i * i * 0.5 * (zf.real - zb.real)


def _rotor_branch(p, slip):
    if slip == 0.0:
        return complex(math.inf, 0.0)
    return p.rr / slip + 1j * p.xlr


def _parallel(a: complex, b: complex) -> complex:
    if math.isinf(b.real):
        return a
    return a * b / (a + b)


def steady_state(p: MotorParams, speed: float, v: complex = 1.0):
    """Phasor steady state of the flux model at constant speed.

    Returns (psi phasors, stator current phasor, average torque).
    """
    m = p.state_matrix(speed)
    psi = np.linalg.solve(1j * np.eye(3) + m, _E0 * v)
    cur = np.linalg.solve(p.inductance, psi)
    torque = -p.xm * (cur[0] * np.conj(cur[2])).real
    return psi, cur[0], torque


def running_speed(p: MotorParams, v: float) -> float | None:
    """Stable running equilibrium speed at voltage ``v``; None if the motor cannot run."""
    grid = np.linspace(0.02, 0.9999, 400)
    margin = np.array([drf_torque(p, w, v) - p.load_torque(w) for w in grid])
    k = int(np.argmax(margin))
    if margin[k] <= 0:
        return None
    f = lambda w: drf_torque(p, w, v) - p.load_torque(w)
    hi = 1.0 - 1e-12
    if f(hi) >= 0:
        return hi
    return brentq(f, grid[k], hi, xtol=1e-14, rtol=1e-14)


@dataclass(frozen=True)
class MotorRating:
    """Scaling between motor-own per unit and the system per-phase base."""
    scale: float          # system pu current per own pu current
    p0: float
    q0: float
    speed0: float
    y_stall: complex      # locked-rotor admittance, system pu
    q_coeffs: tuple[float, float, float]

    @property
    def locked_rotor_ratio(self) -> float:
        return abs(self.y_stall) / abs(complex(self.p0, -self.q0))


def rate_motor(spec: MotorSpec, fit_range=(0.8, 1.1)) -> MotorRating:
    """Size the motor for ``spec.p0`` and derive its phasor performance data.

    The running reactive curve is a quadratic in voltage fitted to the
    equilibrium draw over ``fit_range`` and anchored to q0 at 1 pu.
    """
    p = MotorParams.from_spec(spec)
    w1 = running_speed(p, 1.0)
    if w1 is None:
        raise ValueError(f"motor {spec.id}: no running equilibrium at 1 pu voltage")
    s_own = 1.0 / np.conj(drf_impedance(p, w1))
    scale = spec.p0 / s_own.real
    q0 = scale * s_own.imag
    vs = np.linspace(*fit_range, 17)
    qs = []
    for v in vs:
        w = running_speed(p, v)
        if w is None:
            raise ValueError(f"motor {spec.id}: stalls inside the fit range at v={v:.3f}")
        qs.append(scale * (v * v / np.conj(drf_impedance(p, w))).imag)
    qs = np.array(qs) / q0 - 1.0
    a, b = np.linalg.lstsq(np.column_stack([vs**2 - 1.0, vs - 1.0]), qs, rcond=None)[0]
    y_stall = scale / drf_impedance(p, 0.0)
    return MotorRating(scale, spec.p0, float(q0), float(w1), complex(y_stall),
                       (float(a), float(b), float(1.0 - a - b)))
