"""Conversions across the EMT/phasor boundary.

Phasors use the peak convention on a global reference rotating at f0 and
anchored at t = 0: x(t) = Re(X exp(j w0 t)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .netmodel import FORTESCUE, FORTESCUE_INV, ThreePhasePhasor, phase_to_seq

# impedance used for a sequence port with no path to ground
OPEN_PORT_Z = 1e6


def _fit_basis(t, w0, trend):
    cols = [np.cos(w0 * t), -np.sin(w0 * t), np.ones_like(t)]
    if trend:
        tc = t - t.mean()
        cols.append(tc / max(np.ptp(t), 1e-30))
    return np.column_stack(cols)


def extract_phasors(buffer, f0: float = 60.0, dt: float | None = None, t=None, *,
                    ready: bool = True, method: str = "fit"):
    """Fundamental phasor of each column of ``buffer`` over one cycle.

    ``t`` gives the absolute sample times; if omitted the window is assumed
    to start at t = 0 with spacing ``dt``.  The default ``fit`` method solves a
    least-squares problem on the exact-frequency cos/sin pair plus a constant
    and a linear trend; for a window of an integer number of periods the
    sinusoid part is identical to the (2/N) DFT, and with a fractional period
    it stays exact for a pure tone while rejecting a slowly decaying offset.
    ``method="dft"`` applies the plain (2/N) DFT, rotated to the global
    reference by the window start time.
    """
    if not ready:
        raise ValueError("waveform buffer is not ready (less than one full cycle)")
    x = np.asarray(buffer, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[:, None]
    if not np.all(np.isfinite(x)):
        raise ValueError("NaN or infinite sample in waveform buffer")
    n = x.shape[0]
    if t is None:
        if dt is None:
            raise ValueError("need dt or sample times")
        t = np.arange(n) * dt
    t = np.asarray(t, dtype=float)
    if dt is None:
        dt = float(t[1] - t[0])
    n_cycle = int(round(1.0 / (f0 * dt)))
    if n < n_cycle:
        raise ValueError(f"buffer has {n} samples, need {n_cycle} for one cycle")
    x, t = x[-n_cycle:], t[-n_cycle:]
    w0 = 2.0 * math.pi * f0
    if method == "dft":
        k = np.arange(n_cycle)
        ph = (2.0 / n_cycle) * (np.exp(-2j * math.pi * k / n_cycle) @ x)
        ph = ph * np.exp(-1j * w0 * t[0])
    elif method == "fit":
        a = _fit_basis(t, w0, trend=True)
        coef = np.linalg.lstsq(a, x, rcond=None)[0]
        ph = coef[0] + 1j * coef[1]
    else:
        raise ValueError(f"unknown extraction method {method!r}")
    if single:
        return complex(ph[0])
    if x.shape[1] == 3:
        return ThreePhasePhasor.from_array(ph)
    return ph


@dataclass(frozen=True)
class SequenceInjectionFrame:
    """Sequence current injections from the detailed into the external system."""
    t: float
    injections: dict            # bus id -> SequencePhasor
    ready: bool = True

    def as_012(self, buses) -> np.ndarray:
        return np.concatenate([self.injections[b].as_012() for b in buses])


def injections_to_sequence(i_abc: dict, t: float) -> SequenceInjectionFrame:
    """Convert per-bus abc injections (detailed -> external positive)."""
    out = {}
    for bus, cur in i_abc.items():
        p = cur if isinstance(cur, ThreePhasePhasor) else ThreePhasePhasor.from_array(cur)
        out[bus] = phase_to_seq(p)
    return SequenceInjectionFrame(t, out, True)


def seq_matrix_to_abc(z_seq: np.ndarray) -> np.ndarray:
    """(3, m, m) sequence port matrices in (0, 1, 2) order -> (3m, 3m) abc."""
    m = z_seq.shape[1]
    out = np.zeros((3 * m, 3 * m), dtype=complex)
    for i in range(m):
        for j in range(m):
            out[3 * i:3 * i + 3, 3 * j:3 * j + 3] = FORTESCUE @ np.diag(z_seq[:, i, j]) @ FORTESCUE_INV
    return out


def abc_matrix_to_seq(z_abc: np.ndarray) -> np.ndarray:
    m = z_abc.shape[0] // 3
    out = np.zeros((3, m, m), dtype=complex)
    for i in range(m):
        for j in range(m):
            blk = FORTESCUE_INV @ z_abc[3 * i:3 * i + 3, 3 * j:3 * j + 3] @ FORTESCUE
            out[:, i, j] = np.diag(blk)
    return out


@dataclass
class TheveninEquivalent3ph:
    """Multi-port Thevenin equivalent; ``v_th`` and ``z_th`` are abc, ordered by bus."""
    buses: tuple
    v_th: np.ndarray             # (3m,) complex
    z_th: np.ndarray             # (3m, 3m) complex
    z_seq: np.ndarray | None = None   # (3, m, m) sequence port impedances
    open_zero: tuple = ()

    def port(self, bus) -> ThreePhasePhasor:
        k = self.buses.index(bus)
        return ThreePhasePhasor.from_array(self.v_th[3 * k:3 * k + 3])


@dataclass
class NortonEquivalent3ph:
    buses: tuple
    i_n: np.ndarray              # (3m,) complex
    y_n: np.ndarray              # (3m, 3m) complex


def thevenin_to_norton(th: TheveninEquivalent3ph) -> NortonEquivalent3ph:
    try:
        cond = np.linalg.cond(th.z_th)
    except np.linalg.LinAlgError:
        cond = math.inf
    if not np.isfinite(cond) or cond > 1e15:
        bad = _singular_ports(th.z_th, th.buses)
        raise np.linalg.LinAlgError(f"singular Thevenin impedance at port(s) {bad}")
    y = np.linalg.inv(th.z_th)
    return NortonEquivalent3ph(th.buses, y @ th.v_th, y)


def norton_to_thevenin(no: NortonEquivalent3ph) -> TheveninEquivalent3ph:
    z = np.linalg.inv(no.y_n)
    return TheveninEquivalent3ph(no.buses, z @ no.i_n, z)


def _singular_ports(z, buses):
    bad = []
    for k, b in enumerate(buses):
        blk = z[3 * k:3 * k + 3, 3 * k:3 * k + 3]
        if np.linalg.matrix_rank(blk) < 3:
            bad.append(b)
    return bad or list(buses)


def port_impedance(y: sp.spmatrix, idx) -> np.ndarray | None:
    """Selected block of Y^-1 via sparse solves; None if Y is singular."""
    y = sp.csc_matrix(y)
    n = y.shape[0]
    rhs = np.zeros((n, len(idx)), dtype=complex)
    for k, i in enumerate(idx):
        rhs[i, k] = 1.0
    try:
        with np.errstate(all="ignore"):
            lu = spla.splu(y)
            cols = lu.solve(rhs)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(cols)):
        return None
    z = cols[list(idx)]
    # an isolated sequence network shows up as an enormous (numerically singular) result
    if np.max(np.abs(z)) > 1e12:
        return None
    return z


def thevenin_impedance(yseq, idx) -> tuple[np.ndarray, tuple]:
    """Sequence port impedances (3, m, m) for sequence admittance matrices
    ``yseq = (y0, y1, y2)``; a zero-sequence network without a path to ground
    is reported as an open port."""
    m = len(idx)
    z = np.zeros((3, m, m), dtype=complex)
    open_zero = ()
    for s in range(3):
        blk = port_impedance(yseq[s], idx)
        if blk is None:
            if s != 0:
                raise np.linalg.LinAlgError(f"sequence {s} network is singular")
            blk = OPEN_PORT_Z * np.eye(m, dtype=complex)
            open_zero = tuple(range(m))
        z[s] = blk
    return z, open_zero


def thevenin_from_solution(buses, z_seq, v012, i012, open_zero=()) -> TheveninEquivalent3ph:
    """Open-circuit back-projection of the present solution.

    ``v012`` and ``i012`` are (m, 3) arrays in (0, 1, 2) order of the boundary
    voltages and of the currents injected into the external system.
    """
    m = len(buses)
    v012 = np.asarray(v012, dtype=complex).reshape(m, 3)
    i012 = np.asarray(i012, dtype=complex).reshape(m, 3)
    voc = np.empty((m, 3), dtype=complex)
    for s in range(3):
        if s == 0 and open_zero:
            # no zero-sequence current can flow into an open port
            voc[:, 0] = v012[:, 0]
        else:
            voc[:, s] = v012[:, s] - z_seq[s] @ i012[:, s]
    v_abc = np.concatenate([FORTESCUE @ voc[k] for k in range(m)])
    return TheveninEquivalent3ph(tuple(buses), v_abc, seq_matrix_to_abc(z_seq), z_seq, open_zero)


def thevenin_external(ext, boundary_buses) -> TheveninEquivalent3ph:
    """Thevenin equivalent of the external subsystem ``ext`` at its boundary ports.

    ``ext`` must provide ``sequence_admittance()`` -> (y0, y1, y2) including
    device admittances, ``bus_index(bus)``, ``voltage_012(bus)`` and
    ``injection_012(bus)`` (current from the detailed side into the bus).
    The impedance part is cached on ``ext`` until its topology changes.
    """
    buses = tuple(boundary_buses)
    idx = [ext.bus_index(b) for b in buses]
    key = (buses, getattr(ext, "topology_version", 0))
    cache = getattr(ext, "_thevenin_cache", None)
    if cache is None or cache[0] != key:
        z_seq, open_zero = thevenin_impedance(ext.sequence_admittance(), idx)
        cache = (key, z_seq, open_zero)
        try:
            ext._thevenin_cache = cache
        except AttributeError:
            pass
    _, z_seq, open_zero = cache
    v012 = np.array([ext.voltage_012(b) for b in buses])
    i012 = np.array([ext.injection_012(b) for b in buses])
    return thevenin_from_solution(buses, z_seq, v012, i012, open_zero)
