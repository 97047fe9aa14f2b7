import pytest

from hybridsim.caseio import CaseError, bundled_case, load_case, parse_case
from hybridsim.coordinator import validate_case

MINI = """
# two areas joined at bus 2
[config]
name = mini
f0 = 60
t_end = 2.0
[buses]
1 230 external kind=generator type=slack v=1.02
2 230 external
3 12.47 detailed shunt=0.1j
[branches]
L12 1 2 0.01+0.1j b=0.02
T23 2 3 0.05j conn=d-yg
[machines]
G1 1 5.0 1.2 0.25 0.8 0.3 6.0 Tq0p=0.5
[loads]
P3 3 0.2 0.05 phases=ab
[motors]
M3 3 a 0.1 emt_id=E3 H=0.05
[boundary]
2
[events]
fault bus=3 kind=SLG phases=a r=0 t_on=0.5 t_off=0.55
"""


def test_mini_case_fields():
    c = parse_case(MINI, "mini.hyb")
    assert c.name == "mini"
    assert c.config == {"name": "mini", "f0": 60, "t_end": 2.0}
    assert [b.id for b in c.net.buses] == ["1", "2", "3"]
    assert c.net.bus("3").shunt == 0.1j and c.net.bus("3").shunt0 == 0.1j
    br = c.net.branches
    assert br[0].b1 == 0.02 and br[0].z0 == br[0].z1 and br[1].conn == "d-yg"
    assert c.net.machines[0].Tq0p == 0.5
    assert c.net.loads[0].phases == "ab"
    m = c.net.motors[0]
    assert (m.phase, m.p0, m.H, m.emt_id) == ("a", 0.1, 0.05, "E3")
    assert c.boundary == ["2"]
    f = c.faults[0]
    assert (f.bus, f.kind, f.phases, f.r_fault, f.t_on, f.t_off) == ("3", "SLG", "a", 0.0, 0.5, 0.55)
    assert c.event_map == {"E3": "M3"}


@pytest.mark.parametrize("name", ["case9", "ieee9"])
def test_bundled_cases_parse(name):
    c = load_case(bundled_case(name))
    assert c.net.n >= 9


def test_case9_layout():
    c = load_case(bundled_case("case9"))
    assert c.boundary == ["5"]
    assert {m.phase for m in c.net.motors} == {"a", "b", "c"}
    assert set(c.event_map) == {m.id for m in c.net.motors}
    assert [(f.bus, f.kind, f.phases, f.t_on, f.t_off) for f in c.faults] == [("10", "SLG", "a", 0.5, 0.57)]


BROKEN = {
    "short_branch": ("L12 1 2 0.01+0.1j b=0.02", "L12 1 2"),
    "unknown_key": ("L12 1 2 0.01+0.1j b=0.02", "L12 1 2 0.01+0.1j q=3"),
    "bad_complex": ("L12 1 2 0.01+0.1j b=0.02", "L12 1 2 abc"),
    "bad_connection": ("T23 2 3 0.05j conn=d-yg", "T23 2 3 0.05j conn=zz"),
    "negative_kv": ("3 12.47 detailed shunt=0.1j", "3 -1 detailed"),
    "bad_phase": ("M3 3 a 0.1 emt_id=E3 H=0.05", "M3 3 d 0.1"),
    "unknown_section": ("[loads]", "[lods]"),
    "unknown_boundary": ("[boundary]\n2", "[boundary]\n9"),
    "unknown_event": ("fault bus=3", "spark bus=3"),
    "fault_ends_early": ("t_on=0.5 t_off=0.55", "t_on=0.5 t_off=0.4"),
}


def _with(old, new):
    assert old in MINI
    return MINI.replace(old, new)


@pytest.mark.parametrize("key", BROKEN)
def test_errors_cite_line(key):
    old, new = BROKEN[key]
    text = _with(old, new)
    line = text[:text.index(new)].count("\n") + 1 + new.count("\n")
    with pytest.raises(CaseError) as ei:
        parse_case(text, "bad.hyb")
    assert ei.value.line == line
    assert str(ei.value).startswith(f"bad.hyb:{line}:")


def test_data_before_header():
    with pytest.raises(CaseError, match="before the first section"):
        parse_case("1 230 external\n")


def test_map_needs_both_sides():
    with pytest.raises(CaseError):
        parse_case(MINI + "map emt=E3\n")


def test_validate_clean_cases():
    assert validate_case(load_case(bundled_case("case9"))) == []
    assert validate_case(parse_case(MINI)) == []


def test_validate_reports_mapping_gap():
    probs = validate_case(parse_case(MINI + "map emt=E9 phasor=M3\n"))
    assert any("mapping gap" in p and "E9" in p for p in probs)
    probs = validate_case(parse_case(MINI + "map emt=E3 phasor=M9\n"))
    assert any("mapping gap" in p and "M9" in p for p in probs)


def test_validate_names_crossing_branches():
    text = _with("T23 2 3 0.05j conn=d-yg", "T23 2 3 0.05j conn=d-yg\nL13 1 3 0.02+0.2j")
    probs = validate_case(parse_case(text))
    assert any("crossing branches" in p and "L13" in p for p in probs)


def test_validate_flags_external_and_early_faults():
    text = _with("fault bus=3 kind=SLG phases=a r=0 t_on=0.5 t_off=0.55",
                 "fault bus=1 kind=SLG phases=a r=0 t_on=0.1 t_off=0.15")
    probs = validate_case(parse_case(text))
    assert any("outside the detailed system" in p for p in probs)
    assert any("t_hybrid_start" in p for p in probs)


def test_validate_flags_plan():
    probs = validate_case(parse_case(_with("t_end = 2.0", "t_end = 2.0\ndt_ts = 0.005\ndt_emt = 3e-5")))
    assert any(p.startswith("plan:") for p in probs)
