"""Command-line front end: run, compare and validate."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .caseio import CaseError, bundled_case, load_case
from .coordinator import MODES, Coordinator, CoordinatorError, StagePlan, validate_case
from .emt import PHASES

log = logging.getLogger("hybridsim")


def _resolve_case(path: str) -> str:
    if os.path.exists(path):
        return path
    try:
        cand = bundled_case(os.path.basename(path))
    except (FileNotFoundError, ModuleNotFoundError):
        return path
    return cand if os.path.exists(cand) else path


def _plan(case, args) -> StagePlan:
    cfg = case.config
    return StagePlan(float(cfg.get("t_hybrid_start", 0.3)),
                     args.t_end if args.t_end is not None else float(cfg.get("t_end", 10.0)),
                     args.dt_ts if args.dt_ts is not None else float(cfg.get("dt_ts", 0.005)),
                     args.dt_emt if args.dt_emt is not None else float(cfg.get("dt_emt", 20e-6)))


class WaveformWriter:
    """Streams EMT samples (node voltages, boundary currents) to a CSV file."""

    def __init__(self, path):
        self.path = path
        self.fh = None

    def start(self, ckt):
        if self.fh is not None:
            self.fh.close()
        self.fh = open(self.path, "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh)
        nodes = sorted(ckt.node.items(), key=lambda kv: kv[1])
        cols = ["time_s"] + [f"v_{b}_{ph}" for (b, ph), _ in nodes]
        cols += [f"i_{b}_{ph}" for b in ckt.boundary for ph in PHASES]
        self.n_cur = len(cols) - 1 - len(nodes)
        self.writer.writerow(cols)

    def __call__(self, t, v, cur):
        cur = cur[:, :self.n_cur]
        for row in np.column_stack([t, v, cur]):
            self.writer.writerow([repr(float(x)) for x in row])

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None


# --------------------------------------------------------------------------
# run

def cmd_run(args) -> int:
    try:
        case = load_case(_resolve_case(args.case))
        plan = _plan(case, args)
    except CaseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    mode = args.mode
    if args.switch is not None and mode.startswith("hybrid"):
        mode = "hybrid_switch" if args.switch else "hybrid_no_switch"
    if args.seed is not None:
        log.info("seed %d accepted; the engines are deterministic", args.seed)
    os.makedirs(args.out, exist_ok=True)
    sink = WaveformWriter(os.path.join(args.out, "waveforms.csv")) if args.dump_waveforms else None
    try:
        coord = Coordinator(case, plan, mode=mode, reconcile=not args.no_event_reconcile,
                            transport=args.transport, wave_sink=sink)
        res = coord.run()
    except CoordinatorError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    finally:
        if sink is not None:
            sink.close()
    res.write_csv(os.path.join(args.out, "timeseries.csv"))
    res.write_events(os.path.join(args.out, "events.log"))
    res.write_timing(os.path.join(args.out, "timing.txt"))
    stalled = sorted(set(res.emt_stalls) | set(res.phasor_stalls))
    print(f"mode {res.mode}  t_end {plan.t_end:g} s  wall {res.timings.get('total', 0.0):.2f} s")
    print(f"switch {'none' if res.t_switch is None else f'{res.t_switch:.3f} s'}")
    print(f"stalled {', '.join(stalled) if stalled else 'none'}")
    print(f"outputs written to {args.out}")
    return 0


# --------------------------------------------------------------------------
# compare

def _read_run(path):
    csv_path = os.path.join(path, "timeseries.csv") if os.path.isdir(path) else path
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names, data = rows[0], np.array(rows[1:], dtype=float)
    wall = None
    timing = os.path.join(os.path.dirname(csv_path), "timing.txt")
    if os.path.exists(timing):
        with open(timing, encoding="utf-8") as fh:
            for line in fh:
                k, _, v = line.partition(" ")
                if k == "total":
                    wall = float(v)
    return names, data, wall


def stall_pattern(names, data) -> list[str]:
    """Motor ids whose status column reaches 0 at any point."""
    return sorted(n[:-len("_status")] for j, n in enumerate(names)
                  if n.endswith("_status") and np.any(data[:, j] < 0.5))


def compare_runs(a, b, quantities=None, t_after=None):
    """Per-quantity (max, mean) absolute differences on the shared time grid."""
    na, da = a
    nb, db = b
    ka = np.round(da[:, 0] * 1e9).astype(np.int64)
    kb = np.round(db[:, 0] * 1e9).astype(np.int64)
    common, ia, ib = np.intersect1d(ka, kb, return_indices=True)
    if t_after is not None:
        keep = common >= round(t_after * 1e9)
        ia, ib = ia[keep], ib[keep]
    if quantities is None:
        quantities = [q for q in na if q in nb and q not in ("time_s", "stage")]
    out = {}
    for q in quantities:
        if q not in na or q not in nb:
            raise KeyError(f"quantity {q!r} missing from one of the runs")
        if len(ia) == 0:
            out[q] = (float("nan"), float("nan"))
            continue
        d = np.abs(da[ia, na.index(q)] - db[ib, nb.index(q)])
        out[q] = (float(d.max()), float(d.mean()))
    return out


def _switch_time(names, data):
    st = data[:, names.index("stage")]
    hit = np.nonzero(st >= 3)[0]
    return float(data[hit[0], 0]) if len(hit) else None


def cmd_compare(args) -> int:
    try:
        na, da, wa = _read_run(args.run_a)
        nb, db, wb = _read_run(args.run_b)
    except (OSError, ValueError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    quantities = None
    if args.quantities:
        quantities = [q.strip() for q in args.quantities.split(",") if q.strip()]
    t_after = None
    if args.after == "switch":
        ts = [t for t in (_switch_time(na, da), _switch_time(nb, db)) if t is not None]
        t_after = max(ts) if ts else None
    elif args.after is not None:
        t_after = float(args.after)
    try:
        diffs = compare_runs((na, da), (nb, db), quantities, t_after)
    except KeyError as e:
        print(f"error: {e.args[0]}", file=sys.stderr)
        return 2
    if t_after is not None:
        print(f"window t >= {t_after:.4f} s")
    width = max([len(q) for q in diffs] + [8])
    print(f"{'quantity':<{width}}  {'max_abs':>12}  {'mean_abs':>12}")
    worst = 0.0
    for q, (mx, mn) in diffs.items():
        print(f"{q:<{width}}  {mx:12.6g}  {mn:12.6g}")
        if np.isfinite(mx):
            worst = max(worst, mx)
    if wa is not None and wb is not None and wb > 0:
        print(f"wall a {wa:.3f} s  b {wb:.3f} s  ratio a/b {wa / wb:.4f}")
    sa, sb = stall_pattern(na, da), stall_pattern(nb, db)
    differs = sa != sb
    print(f"stall pattern a: {', '.join(sa) or 'none'}")
    print(f"stall pattern b: {', '.join(sb) or 'none'}")
    print(f"stall pattern {'DIFFERS' if differs else 'same'}")
    if args.tol is None:
        return 0
    ok = worst < args.tol
    print(f"verdict {'PASS' if ok else 'FAIL'} (max {worst:.6g} vs tol {args.tol:g})")
    return 0 if ok else 1


# --------------------------------------------------------------------------
# validate

def cmd_validate(args) -> int:
    try:
        case = load_case(_resolve_case(args.case))
    except CaseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    plan = None
    if any(v is not None for v in (args.t_end, args.dt_ts, args.dt_emt)):
        try:
            plan = _plan(case, args)
        except ValueError as e:
            print(f"plan: {e}")
            return 1
    problems = validate_case(case, plan)
    for p in problems:
        print(p)
    if problems:
        print(f"{len(problems)} problem(s) in {case.path}")
        return 1
    print(f"{case.path}: clean")
    return 0


# --------------------------------------------------------------------------

def _add_plan_flags(p):
    p.add_argument("--t-end", type=float, help="simulation end time (s)")
    p.add_argument("--dt-ts", type=float, help="phasor time step (s)")
    p.add_argument("--dt-emt", type=float, help="EMT time step (s)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybridsim", description="Hybrid EMT/phasor simulation with mode switching")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a case")
    r.add_argument("case", help="case file, or the name of a bundled case")
    r.add_argument("--mode", choices=MODES, default="hybrid_switch")
    r.add_argument("--out", default="out", help="output directory")
    _add_plan_flags(r)
    r.add_argument("--switch", dest="switch", action="store_true", default=None,
                   help="allow the return to phasor-only simulation")
    r.add_argument("--no-switch", dest="switch", action="store_false",
                   help="stay hybrid until t_end")
    r.add_argument("--no-event-reconcile", action="store_true",
                   help="do not forward EMT device events to the phasor model")
    r.add_argument("--dump-waveforms", action="store_true", help="write waveforms.csv with EMT samples")
    r.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    r.add_argument("--seed", type=int, help="accepted for reproducibility scripts; engines are deterministic")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare two runs")
    c.add_argument("run_a", help="output directory or timeseries.csv")
    c.add_argument("run_b", help="output directory or timeseries.csv")
    c.add_argument("--quantities", help="comma-separated column names (default: all shared)")
    c.add_argument("--after", help="only compare t >= this time, or 'switch'")
    c.add_argument("--tol", type=float, help="max abs difference for a PASS verdict")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate", help="check a case for hybrid runs")
    v.add_argument("case")
    _add_plan_flags(v)
    v.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("HYBRIDSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
