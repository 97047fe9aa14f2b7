"""Reader for the ``.hyb`` case format.

A case file is a sequence of sections introduced by ``[name]`` headers.  Blank
lines and text after ``#`` are ignored.  Every data row has fixed positional
columns followed by optional ``key=value`` pairs.  Complex numbers are written
without spaces, e.g. ``0.01+0.085j``.

    [config]      key = value
    [buses]       id base_kv subsystem [kind= type= v= pg= shunt= shunt0=]
    [branches]    id from to z1 [z0= z2= b= b0= tap= conn= status=]
    [machines]    id bus H xd xdp xq xqp Td0p [Tq0p= D= KA= TA= x2= x0=]
    [loads]       id bus p q [phases=]
    [motors]      id bus phase p0 [emt_id= rs= xls= xm= rr= xlr= H= t_load= c0=
                                   stall_speed= v_stall= t_stall=]
    [boundary]    bus ids, whitespace separated
    [events]      fault bus= kind= phases= r= t_on= t_off=
                  map emt= phasor=

``type`` is the power-flow bus type (slack, pv, pq); ``pg`` the scheduled
generation and ``v`` the voltage setpoint.  Fault resistance ``r`` is in ohms.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources

from .netmodel import Branch, Bus, FaultSpec, Load, Machine, MotorSpec, NetworkModel

SECTIONS = ("config", "buses", "branches", "machines", "loads", "motors", "boundary", "events")


class CaseError(ValueError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path, self.line = path, line


@dataclass
class Case:
    net: NetworkModel
    boundary: list
    faults: list
    event_map: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    path: str = ""

    @property
    def name(self) -> str:
        return self.net.name


def _num(tok: str):
    t = tok.strip()
    if t.endswith("j") or "j" in t:
        return complex(t.replace(" ", ""))
    return float(t)


def _real(tok):
    v = _num(tok)
    if isinstance(v, complex):
        raise ValueError(f"expected a real number, got {tok!r}")
    return v


def _cplx(tok):
    return complex(_num(tok))


def _split(tokens, n_pos, path, line):
    pos, kw = [], {}
    for t in tokens:
        if "=" in t:
            k, v = t.split("=", 1)
            if not k or not v:
                raise CaseError(path, line, f"malformed option {t!r}")
            kw[k] = v
        else:
            if kw:
                raise CaseError(path, line, f"positional value {t!r} after options")
            pos.append(t)
    if len(pos) != n_pos:
        raise CaseError(path, line, f"expected {n_pos} positional fields, got {len(pos)}")
    return pos, kw


def _take(kw, allowed, path, line):
    bad = set(kw) - set(allowed)
    if bad:
        raise CaseError(path, line, f"unknown option(s): {', '.join(sorted(bad))}")


def _config_value(v: str):
    low = v.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return _num(v)
    except ValueError:
        return v


def parse_case(text: str, path: str = "<string>") -> Case:
    rows = {s: [] for s in SECTIONS}
    section = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise CaseError(path, no, f"bad section header {line!r}")
            section = line[1:-1].strip().lower()
            if section not in SECTIONS:
                raise CaseError(path, no, f"unknown section [{section}]")
            continue
        if section is None:
            raise CaseError(path, no, "data before the first section header")
        rows[section].append((no, line))

    config = {}
    for no, line in rows["config"]:
        if "=" not in line:
            raise CaseError(path, no, "config rows are 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        config[k] = _config_value(v)

    try:
        buses = []
        for no, line in rows["buses"]:
            (bid, kv, sub), kw = _split(line.split(), 3, path, no)
            _take(kw, ("kind", "type", "v", "pg", "shunt", "shunt0"), path, no)
            try:
                shunt = _cplx(kw.get("shunt", "0"))
                buses.append(Bus(bid, _real(kv), kind=kw.get("kind", "load"), subsystem=sub,
                                 pf_type=kw.get("type", "pq"), v_set=_real(kw.get("v", "1.0")),
                                 p_gen=_real(kw.get("pg", "0")), shunt=shunt,
                                 shunt0=_cplx(kw["shunt0"]) if "shunt0" in kw else shunt))
            except ValueError as e:
                raise CaseError(path, no, str(e)) from None

        branches = []
        for no, line in rows["branches"]:
            (bid, f, t, z1), kw = _split(line.split(), 4, path, no)
            _take(kw, ("z0", "z2", "b", "b0", "tap", "conn", "status"), path, no)
            try:
                branches.append(Branch(bid, f, t, z1=_cplx(z1),
                                       z0=_cplx(kw["z0"]) if "z0" in kw else None,
                                       z2=_cplx(kw["z2"]) if "z2" in kw else None,
                                       b1=_real(kw.get("b", "0")),
                                       b0=_real(kw["b0"]) if "b0" in kw else None,
                                       tap=_real(kw.get("tap", "1")), conn=kw.get("conn", "yg-yg"),
                                       status=kw.get("status", "closed")))
            except ValueError as e:
                raise CaseError(path, no, str(e)) from None

        machines = []
        for no, line in rows["machines"]:
            pos, kw = _split(line.split(), 8, path, no)
            _take(kw, ("Tq0p", "D", "KA", "TA", "x2", "x0"), path, no)
            vals = [_real(x) for x in pos[2:]]
            opt = {k: _real(v) for k, v in kw.items()}
            machines.append(Machine(pos[0], pos[1], *vals, **opt))

        loads = []
        for no, line in rows["loads"]:
            (lid, bus, p, q), kw = _split(line.split(), 4, path, no)
            _take(kw, ("phases",), path, no)
            loads.append(Load(lid, bus, _real(p), _real(q), phases=kw.get("phases", "abc")))

        motors = []
        motor_opts = ("emt_id", "rs", "xls", "xm", "rr", "xlr", "H", "t_load", "c0",
                      "stall_speed", "v_stall", "t_stall")
        for no, line in rows["motors"]:
            (mid, bus, phase, p0), kw = _split(line.split(), 4, path, no)
            _take(kw, motor_opts, path, no)
            opt = {k: (v if k == "emt_id" else _real(v)) for k, v in kw.items()}
            try:
                motors.append(MotorSpec(mid, bus, phase, _real(p0), **opt))
            except ValueError as e:
                raise CaseError(path, no, str(e)) from None
    except (TypeError, ValueError) as e:
        if isinstance(e, CaseError):
            raise
        raise CaseError(path, no, str(e)) from None

    boundary = []
    for no, line in rows["boundary"]:
        boundary.extend(line.split())

    faults, event_map = [], {}
    for no, line in rows["events"]:
        toks = line.split()
        kind, kw = toks[0], dict(t.split("=", 1) for t in toks[1:] if "=" in t)
        if kind == "fault":
            _take(kw, ("bus", "kind", "phases", "r", "t_on", "t_off"), path, no)
            try:
                faults.append(FaultSpec(kw["bus"], kw.get("kind", "SLG"), kw.get("phases", "a"),
                                        _real(kw.get("r", "0")), _real(kw["t_on"]), _real(kw["t_off"])))
            except (KeyError, ValueError) as e:
                raise CaseError(path, no, f"bad fault: {e}") from None
        elif kind == "map":
            _take(kw, ("emt", "phasor"), path, no)
            if "emt" not in kw or "phasor" not in kw:
                raise CaseError(path, no, "map needs emt= and phasor=")
            event_map[kw["emt"]] = kw["phasor"]
        else:
            raise CaseError(path, no, f"unknown event {kind!r}")

    name = str(config.get("name", os.path.splitext(os.path.basename(path))[0]))
    try:
        net = NetworkModel(tuple(buses), tuple(branches), tuple(machines), tuple(loads), tuple(motors),
                           s_base=float(config.get("s_base", 100.0)), name=name)
    except ValueError as e:
        raise CaseError(path, 0, str(e)) from None
    for b in boundary:
        if b not in net._index:
            raise CaseError(path, rows["boundary"][0][0], f"unknown boundary bus {b!r}")
    for f in faults:
        if f.bus not in net._index:
            raise CaseError(path, 0, f"fault at unknown bus {f.bus!r}")
    for m in motors:
        event_map.setdefault(m.emt_id or m.id, m.id)
    return Case(net, boundary, faults, event_map, config, path)


def load_case(path: str) -> Case:
    with open(path, encoding="utf-8") as fh:
        return parse_case(fh.read(), path)


def bundled_case(name: str) -> str:
    """Filesystem path of a case shipped with the package."""
    fname = name if name.endswith(".hyb") else name + ".hyb"
    return str(resources.files("hybridsim") / "cases" / fname)
