"""Command-line driver: ``levyrearrange run`` and ``levyrearrange sweep``.

Exit codes: 0 when every ``holds`` flag is true, 1 when some flag is false
(reports are still written), 2 for an invalid spec or arguments (nothing is
written).
"""

from __future__ import annotations

import argparse
import copy
import logging
import math
import sys
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import __version__
from .capacity import qcapacity_ladder, verify_cap, zero_capacity
from .grid import GridField
from .reports import write_report
from .selftest import run_selftest
from .specio import SpecError, build_field, build_grid, build_mc, build_triple, load_spec, validate_spec
from .trap_continuum import TrapSchedule, verify_sausage, verify_trap
from .trap_discrete import build_instance, random_instance_params, verify_bll, verify_ri

__all__ = ["main", "run", "sweep", "execute", "CAPACITY_COLUMNS", "SWEEP_COLUMNS", "SWEEP_PARAMS"]

log = logging.getLogger("levyrearrange")

CAPACITY_COLUMNS = ("instance_id", "q", "estimate", "se", "bias_bound", "dt", "P", "holds")
SWEEP_COLUMNS = ("parameter", "value", "rows", "min_margin", "max_violation", "mean_lhs", "all_hold")
SWEEP_PARAMS = ("m", "K", "P", "n", "q")
DEFAULT_ALLOWANCE = 0.01
DEFAULT_TOL_C = 10.0
DEFAULT_N_MAX = 3


@dataclass
class Job:
    """One instance: ``fn()`` returns its JSON result and its CSV rows."""

    instance_id: str
    fn: Callable[[], tuple[dict, list[dict]]]


def _instance_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def _label(rec: dict, i: int) -> str:
    return rec.get("label", str(i))


def _comparison_row(iid: str, n: int, rep) -> dict:
    return {"instance_id": iid, "n": n, "lhs": rep.lhs, "rhs": rep.rhs, "margin": rep.margin, "tol": rep.tol,
            "holds": bool(rep.holds)}


# ---------------------------------------------------------------------------
# discrete kinds


def _discrete_params(spec: dict) -> list[tuple[str, dict]]:
    g = spec["grid"]
    d, L = int(g.get("d", 1)), float(g.get("L", 8.0))
    if "instances" in spec:
        def boxes(bs):
            return [{"value": 1.0, **b} for b in bs]

        return [(_label(r, i), {"d": d, "L": L, "psi": boxes(r["psi"]), "V": [boxes(v) for v in r["V"]],
                                "p": [boxes(p) for p in r["p"]]})
                for i, r in enumerate(spec["instances"])]
    rnd = spec["random"]
    out = []
    for i in range(rnd["count"]):
        rng = np.random.default_rng([spec["seed"], i])
        n = int(rnd["n"]) if "n" in rnd else int(rng.integers(1, rnd.get("n_max", DEFAULT_N_MAX) + 1))
        out.append((str(i), random_instance_params(rng, n, d, L)))
    return out


def _ri_jobs(spec: dict, workers) -> list[Job]:
    m, c = int(spec["grid"]["m"]), spec.get("tol_c", DEFAULT_TOL_C)
    jobs = []
    for iid, params in _discrete_params(spec):
        inst = build_instance(params, m)

        def fn(inst=inst, iid=iid, params=params):
            rep = verify_ri(inst, c)
            return {"instance_id": iid, "params": params, **rep.to_dict()}, [_comparison_row(iid, inst.n, rep)]

        jobs.append(Job(iid, fn))
    return jobs


def _bll_jobs(spec: dict, workers) -> list[Job]:
    m, c = int(spec["grid"]["m"]), spec.get("tol_c", DEFAULT_TOL_C)
    jobs = []
    for iid, params in _discrete_params(spec):
        inst = build_instance(params, m)
        grid = inst.grid
        psi = 1.0 - inst.phi.values
        phi_prob = GridField(grid, psi / (grid.cell_volume * psi.sum()))
        # each A_i covers the start mass plus the i-th trap boxes, so the stay probability is nontrivial
        A = [GridField(grid, ((psi > 0) | (sum(v.values for v in vs) > 0)).astype(float)) for vs in inst.V]

        def fn(phi_prob=phi_prob, A=A, p=list(inst.p), iid=iid, params=params):
            rep = verify_bll(phi_prob, A, p, c)
            return {"instance_id": iid, "params": params, **rep.to_dict()}, [_comparison_row(iid, len(p), rep)]

        jobs.append(Job(iid, fn))
    return jobs


# ---------------------------------------------------------------------------
# Monte Carlo kinds


def _mc_common(spec: dict, workers):
    grid = build_grid(spec["grid"])
    base = build_mc(spec["mc"], spec["seed"], workers)
    return grid, base, spec.get("allowance_rel", DEFAULT_ALLOWANCE), spec.get("_base_dir", ".")


def _trap_jobs(spec: dict, workers) -> list[Job]:
    grid, base, allow, bdir = _mc_common(spec, workers)
    jobs = []
    for i, r in enumerate(spec["instances"]):
        iid = _label(r, i)
        T = build_triple(r["triple"], grid.dim)
        phi = build_field(r["phi"], grid, bdir)
        soft = build_field(r["soft"], grid, bdir) if "soft" in r else None
        hard = build_field(r["hard"], grid, bdir) if "hard" in r else None
        sched = TrapSchedule.constant(float(r["t"]), soft=soft, hard=hard)
        mc = replace(base, seed=_instance_seed(spec["seed"], i))

        def fn(T=T, sched=sched, phi=phi, mc=mc, iid=iid):
            rep = verify_trap(T, sched, phi, mc, allow, iid)
            return {"instance_id": iid, **rep.to_dict()}, [_comparison_row(iid, mc.n, rep)]

        jobs.append(Job(iid, fn))
    return jobs


def _sausage_jobs(spec: dict, workers) -> list[Job]:
    grid, base, allow, bdir = _mc_common(spec, workers)
    jobs = []
    for i, r in enumerate(spec["instances"]):
        iid = _label(r, i)
        T = build_triple(r["triple"], grid.dim)
        D = build_field(r["D"], grid, bdir)
        v = np.asarray(r["velocity"], dtype=float) if "velocity" in r else None
        if v is not None and v.size != grid.dim:
            raise SpecError(f"velocity of instance {iid} has the wrong dimension")
        g = None if v is None else (lambda s, v=v: v * s)
        mc = replace(base, seed=_instance_seed(spec["seed"], i))

        def fn(T=T, D=D, t=float(r["t"]), g=g, mc=mc, iid=iid):
            rep = verify_sausage(T, D, t, mc, g, allow, iid)
            return {"instance_id": iid, **rep.to_dict()}, [_comparison_row(iid, mc.n, rep)]

        jobs.append(Job(iid, fn))
    return jobs


def _cap_rows(iid: str, ests: list, holds: list[bool]) -> list[dict]:
    return [{"instance_id": iid, "q": e.q, "estimate": e.value, "se": e.std_error,
             "bias_bound": e.horizon_bias_bound + e.spatial_truncation_bias_bound, "dt": e.time_step,
             "P": e.paths, "holds": bool(h)} for e, h in zip(ests, holds)]


def _halving_holds(coarse: list, fine: list, allow: float) -> list[bool]:
    """Refinement check: halving the time step moves each estimate by at most 3 s.e. plus the allowance."""
    out = []
    for a, b in zip(coarse, fine):
        tol = 3 * math.hypot(a.std_error, b.std_error) + allow * max(abs(a.value), abs(b.value))
        out.append(bool(abs(b.value - a.value) <= tol))
    return out


def _capacity_jobs(spec: dict, workers) -> list[Job]:
    grid, base, allow, bdir = _mc_common(spec, workers)
    jobs = []
    for i, r in enumerate(spec["instances"]):
        iid = _label(r, i)
        T = build_triple(r["triple"], grid.dim)
        A = build_field(r["A"], grid, bdir)
        if not A.is_indicator():
            raise SpecError(f"A of instance {iid} must be an indicator")
        if r.get("zero") and not T.transient:
            raise SpecError(f"instance {iid}: zero capacity needs a triple flagged transient")
        method, t_max = r.get("method", "auto"), r.get("t_max")
        mc = replace(base, seed=_instance_seed(spec["seed"], i))
        fine = replace(mc, K=2 * mc.K)

        def fn(T=T, A=A, r=r, mc=mc, fine=fine, iid=iid, method=method, t_max=t_max):
            if r.get("zero"):
                levels = [zero_capacity(T, A, m, method=method, t_max=t_max) for m in (mc, fine)]
                ests = [[*z.ladder, z] for z in levels]
            else:
                ests = [qcapacity_ladder(T, A, [float(q) for q in r["q"]], m, method, t_max) for m in (mc, fine)]
            holds = _halving_holds(ests[0], ests[1], allow)
            result = {"instance_id": iid, "coarse": [e.to_dict() for e in ests[0]],
                      "fine": [e.to_dict() for e in ests[1]], "halving_holds": holds}
            return result, _cap_rows(iid, ests[0], holds) + _cap_rows(iid, ests[1], holds)

        jobs.append(Job(iid, fn))
    return jobs


def _cap_verify_jobs(spec: dict, workers) -> list[Job]:
    grid, base, allow, bdir = _mc_common(spec, workers)
    jobs = []
    for i, r in enumerate(spec["instances"]):
        iid = _label(r, i)
        T = build_triple(r["triple"], grid.dim)
        A = build_field(r["A"], grid, bdir)
        if not A.is_indicator():
            raise SpecError(f"A of instance {iid} must be an indicator")
        mc = replace(base, seed=_instance_seed(spec["seed"], i))

        def fn(T=T, A=A, q=float(r["q"]), mc=mc, iid=iid, method=r.get("method", "auto"), t_max=r.get("t_max")):
            rep = verify_cap(T, A, q, mc, allow, method, t_max, label=iid)
            return {"instance_id": iid, **rep.to_dict()}, [_comparison_row(iid, mc.n, rep)]

        jobs.append(Job(iid, fn))
    return jobs


def _selftest_jobs(spec: dict, workers) -> list[Job]:
    def fn():
        rows = run_selftest()
        return {"instance_id": "selftest", "checks": len(rows)}, rows

    return [Job("selftest", fn)]


HANDLERS = {
    "ri-verify": _ri_jobs,
    "bll-verify": _bll_jobs,
    "trap-verify": _trap_jobs,
    "sausage": _sausage_jobs,
    "capacity": _capacity_jobs,
    "cap-verify": _cap_verify_jobs,
    "selftest": _selftest_jobs,
}


# ---------------------------------------------------------------------------
# run / sweep


def resolved_config(spec: dict) -> dict:
    """The spec as executed: defaults filled in, execution-only details dropped."""
    cfg = {k: v for k, v in spec.items() if not k.startswith("_")}
    if spec["kind"] in ("trap-verify", "sausage", "capacity", "cap-verify"):
        cfg["allowance_rel"] = spec.get("allowance_rel", DEFAULT_ALLOWANCE)
        cfg["mc"] = {"n": 16, **spec["mc"]}
    if spec["kind"] in ("ri-verify", "bll-verify"):
        cfg["tol_c"] = spec.get("tol_c", DEFAULT_TOL_C)
        cfg["grid"] = {"d": 1, "L": 8.0, **spec["grid"]}
    return cfg


def execute(spec: dict, workers: int | None = None) -> tuple[dict, list[dict], tuple]:
    """Run a validated spec; returns the JSON payload, the CSV rows and the CSV columns.

    Raises :class:`SpecError` for inputs that pass the schema but cannot be
    built or run; no report is written in that case.
    """
    kind = spec["kind"]
    try:
        jobs = HANDLERS[kind](spec, workers)
    except SpecError:
        raise
    except (ValueError, KeyError) as exc:
        raise SpecError(str(exc)) from exc
    results, rows = [], []
    for job in jobs:
        log.info("%s: instance %s", kind, job.instance_id)
        try:
            res, r = job.fn()
        except ValueError as exc:
            # e.g. a horizon too short for the tolerance: a configuration problem, not a numerical verdict
            raise SpecError(f"instance {job.instance_id}: {exc}") from exc
        results.append(res)
        rows.extend(r)
    all_hold = all(r["holds"] for r in rows)
    payload = {"kind": kind, "version": __version__, "config": resolved_config(spec), "results": results,
               "rows": rows, "all_hold": all_hold}
    columns = CAPACITY_COLUMNS if kind == "capacity" else None
    return payload, rows, columns


def _stem(spec: dict) -> str:
    return spec.get("output", {}).get("stem", spec["kind"])


def _write(out_dir, stem, payload, rows, columns):
    if columns is None:
        return write_report(out_dir, stem, payload, rows)
    return write_report(out_dir, stem, payload, rows, columns)


def _load(spec_path, seed: int | None) -> dict:
    spec = load_spec(spec_path)
    if seed is not None:
        spec["seed"] = int(seed)
        base = spec.pop("_base_dir")
        spec = validate_spec(spec)
        spec["_base_dir"] = base
    return spec


def run(spec_path, seed: int | None = None, workers: int | None = None, out_dir=".") -> int:
    try:
        spec = _load(spec_path, seed)
        payload, rows, columns = execute(spec, workers)
    except SpecError as exc:
        log.error("%s", exc)
        return 2
    for p in _write(out_dir, _stem(spec), payload, rows, columns):
        log.info("wrote %s", p)
    return 0 if payload["all_hold"] else 1


def _apply(spec: dict, param: str, value) -> dict:
    s = copy.deepcopy(spec)
    kind = s["kind"]
    if param == "m":
        s.setdefault("grid", {})["m"] = int(value)
    elif param in ("K", "P"):
        if "mc" not in s:
            raise SpecError(f"kind {kind} has no Monte Carlo parameters to sweep")
        s["mc"][param] = int(value)
    elif param == "n":
        if kind in ("ri-verify", "bll-verify"):
            if "random" not in s:
                raise SpecError("sweeping n needs randomly generated instances")
            s["random"]["n"] = int(value)
            s["random"].pop("n_max", None)
        elif "mc" in s:
            s["mc"]["n"] = int(value)
        else:
            raise SpecError(f"kind {kind} has no truncation level to sweep")
    elif param == "q":
        if kind == "capacity":
            for r in s["instances"]:
                if r.pop("zero", None):
                    raise SpecError("q cannot be swept for a zero-capacity instance")
                r["q"] = [float(value)]
        elif kind == "cap-verify":
            for r in s["instances"]:
                r["q"] = float(value)
        else:
            raise SpecError(f"kind {kind} has no q")
    else:
        raise SpecError(f"cannot sweep {param!r}; choose one of {', '.join(SWEEP_PARAMS)}")
    base = s.pop("_base_dir", ".")
    s = validate_spec(s)
    s["_base_dir"] = base
    return s


def _summary_row(param, value, rows) -> dict:
    lhs = [r.get("lhs", r.get("estimate")) for r in rows]
    margins = [r["margin"] for r in rows if "margin" in r]
    viol = [max(0.0, -m) for m in margins]
    return {"parameter": param, "value": value, "rows": len(rows),
            "min_margin": min(margins) if margins else "", "max_violation": max(viol) if viol else "",
            "mean_lhs": float(np.mean(lhs)) if lhs else "", "all_hold": all(r["holds"] for r in rows)}


ROUNDING = 1e-12


def _violation(r: dict) -> float:
    """Negative part of the margin, ignoring rounding-level noise."""
    scale = max(1.0, abs(r["lhs"]), abs(r["rhs"]))
    v = -r["margin"]
    return v if v > ROUNDING * scale else 0.0


def _refinement(param, values, per_value_rows, allow) -> dict:
    """Per-instance series across the sweep plus the two refinement checks."""
    keyed = {}
    for v, rows in zip(values, per_value_rows):
        for r in rows:
            key = r["instance_id"] if "q" not in r else f"{r['instance_id']}@dt={r['dt']!r}@q={r['q']!r}"
            keyed.setdefault(key, []).append((v, r))
    series, shrink_ok, drift_ok = {}, True, True
    for key, items in keyed.items():
        lhs = [r.get("lhs", r.get("estimate")) for _, r in items]
        viol = [_violation(r) for _, r in items if "margin" in r]
        series[key] = {"value": [v for v, _ in items], "lhs": lhs,
                       "margin": [r["margin"] for _, r in items if "margin" in r]}
        if any(b > a for a, b in zip(viol, viol[1:])):
            shrink_ok = False
        if len(lhs) >= 2 and abs(lhs[-1] - lhs[-2]) > allow * max(abs(lhs[-1]), abs(lhs[-2])) + 1e-300:
            drift_ok = False
    return {"parameter": param, "series": series, "violation_nonincreasing": shrink_ok,
            "last_two_drift_within_allowance": drift_ok}


def sweep(spec_path, param: str, values, seed: int | None = None, workers: int | None = None, out_dir=".") -> int:
    try:
        if not values:
            raise SpecError("sweep needs at least one value")
        if param not in SWEEP_PARAMS:
            raise SpecError(f"cannot sweep {param!r}; choose one of {', '.join(SWEEP_PARAMS)}")
        conv = float if param == "q" else int
        try:
            values = [conv(v) for v in values]
        except ValueError as exc:
            raise SpecError(f"bad sweep value: {exc}") from exc
        spec = _load(spec_path, seed)
        specs = [_apply(spec, param, v) for v in values]
        outputs = [execute(s, workers) for s in specs]
    except SpecError as exc:
        log.error("%s", exc)
        return 2
    stem = _stem(spec)
    for v, (payload, rows, columns) in zip(values, outputs):
        _write(out_dir, f"{stem}.{param}-{v}", payload, rows, columns)
    summary_rows = [_summary_row(param, v, rows) for v, (_, rows, _) in zip(values, outputs)]
    summary = {"kind": spec["kind"], "version": __version__, "config": resolved_config(spec),
               "parameter": param, "values": values, "rows": summary_rows,
               "refinement": _refinement(param, values, [o[1] for o in outputs],
                                         spec.get("allowance_rel", DEFAULT_ALLOWANCE)),
               "all_hold": all(r["all_hold"] for r in summary_rows)}
    for p in write_report(out_dir, f"{stem}.sweep-{param}", summary, summary_rows, SWEEP_COLUMNS):
        log.info("wrote %s", p)
    return 0 if summary["all_hold"] else 1


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="levyrearrange", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--spec", required=True, help="experiment spec (JSON)")
        p.add_argument("--seed", type=int, help="override the spec's seed")
        p.add_argument("--workers", type=int, help="worker threads (default: $LEVYREARRANGE_WORKERS or 1)")
        p.add_argument("--out-dir", default=".", help="directory for the JSON and CSV reports")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("run", help="run one experiment"))
    p = sub.add_parser("sweep", help="rerun an experiment over values of one parameter")
    common(p)
    p.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)}")
    p.add_argument("--values", nargs="*", default=[], help="parameter values")
    return ap


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    if args.workers is not None and args.workers < 1:
        log.error("--workers must be >= 1")
        return 2
    if args.command == "run":
        return run(args.spec, args.seed, args.workers, args.out_dir)
    return sweep(args.spec, args.param, args.values, args.seed, args.workers, args.out_dir)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
