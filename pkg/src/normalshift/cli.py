"""Scenario-driven command line: validate, check, shift, blowup,
metrizability.

Every pipeline writes a JSON report (verdicts and residual summaries), CSV
data, and a plain-text summary into the output directory. Floating-point
output uses 17 significant digits (round-trip safe) and sampling uses a
seeded PCG64 generator, so a fixed seed reproduces byte-identical outputs.
Exit codes: 0 all verdicts pass, 1 any verdict failed, 2 configuration or
runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import NormalShiftError, ScenarioError
from .expr import parse
from .forcefield import check_normality, conformal_force, zero_force
from .metrizability import inheritance_test, metrizable_force
from .scenario import Scenario, load_scenario, validate_scenario
from .shift import blowup, build_shift, deviation, gnn_check, w_constancy

__all__ = ["main"]


def f17(x) -> str:
    return format(float(x), ".17g")


def _sample_states(rng, scenario: Scenario, count, x_box, speed_range):
    n = scenario.n
    box = np.asarray(x_box, dtype=float)
    X = rng.uniform(box[:, 0], box[:, 1], size=(count, n))
    D = rng.normal(size=(count, n))
    g = scenario.metric.matrix(X)
    norms = np.sqrt(np.einsum("...i,...ij,...j->...", D, g, D))
    D = D / norms[..., None]
    speeds = rng.uniform(speed_range[0], speed_range[1], size=count)
    return X, D * speeds[:, None]


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _write_report(out_dir: Path, report: dict, summary_lines):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "summary.txt", "w") as fh:
        fh.write("\n".join(summary_lines) + "\n")


def _verdict_entry(name, value, tolerance):
    return {
        "name": name,
        "max": None if value is None else f17(value),
        "tolerance": f17(tolerance),
        "passed": bool(value is not None and value <= tolerance),
    }


# --------------------------------------------------------------------------
# Pipelines
# --------------------------------------------------------------------------

def _run_check(sc: Scenario, out_dir: Path, args) -> int:
    cfg = sc.action_cfg
    count = args.samples or int(cfg.get("samples", 100))
    tol = args.tolerance or float(cfg.get("tolerance", 1e-6))
    x_box = cfg.get("x_box", [[-1.0, 1.0]] * sc.n)
    speed_range = cfg.get("speed_range", [0.5, 2.0])
    rng = np.random.default_rng(np.random.PCG64(sc.seed))
    X, V = _sample_states(rng, sc, count, x_box, speed_range)

    force = sc.force if sc.force is not None else zero_force(sc.n)
    report = check_normality(force, sc.metric, X, V, tolerance=tol,
                             v_min=sc.integrator.v_min)

    weak_rows = np.max(np.abs(report.weak), axis=-1)
    add_rows = np.max(np.abs(report.additional), axis=(-1, -2, -3))
    header = ([f"x{i + 1}" for i in range(sc.n)]
              + [f"v{i + 1}" for i in range(sc.n)]
              + ["weak_max", "additional_max"])
    cols = [X[:, i] for i in range(sc.n)] + [V[:, i] for i in range(sc.n)]
    cols += [weak_rows, add_rows]
    if report.reduced_b is not None:
        header.append("reduced_b_max")
        cols.append(np.max(np.abs(report.reduced_b), axis=(-1, -2)))
    if report.reduced_a is not None:
        header.append("reduced_a_max")
        cols.append(np.max(np.abs(report.reduced_a), axis=-1))
    rows = [[f17(c[i]) for c in cols] for i in range(count)]
    _write_csv(out_dir / "residuals.csv", header, rows)

    checks = [_verdict_entry(f"normality/{k}", m, tol)
              for k, m in sorted(report.max_abs.items())]
    passed = report.passed
    doc = {
        "action": "check",
        "version": sc.version,
        "seed": sc.seed,
        "n": sc.n,
        "samples": count,
        "tolerance": f17(tol),
        "force_form": sc.force_form,
        "checks": checks,
        "max_abs": {k: f17(v) for k, v in report.max_abs.items()},
        "mean_abs": {k: f17(v) for k, v in report.mean_abs.items()},
        "failing": report.failing_equations(),
        "verdict": "pass" if passed else "fail",
    }
    lines = [f"normality check: {doc['verdict']}",
             f"samples: {count}  tolerance: {f17(tol)}"]
    lines += [f"  {c['name']}: max {c['max']} "
              f"({'ok' if c['passed'] else 'FAIL'})" for c in checks]
    _write_report(out_dir, doc, lines)
    return 0 if passed else 1


def _family_csv(out_dir: Path, fam, sc: Scenario):
    dev = deviation(fam)
    lat = fam.lattice_shape
    k_axes = len(lat)
    speeds = fam.speeds()
    have_w = fam.gen is not None
    header = ([f"i{k + 1}" for k in range(k_axes)]
              + [f"u{k + 1}" for k in range(k_axes)] + ["t"]
              + [f"x{i + 1}" for i in range(sc.n)]
              + [f"v{i + 1}" for i in range(sc.n)] + ["speed"]
              + [f"phi{k + 1}" for k in range(k_axes)]
              + (["W"] if have_w else []) + ["valid"])
    rows = []
    w_vals = None
    for jt, t in enumerate(fam.t):
        if have_w:
            w_vals = np.asarray(fam.gen.w_value(
                fam.x[jt].reshape(-1, sc.n),
                speeds[jt].reshape(-1))).reshape(lat)
        for idx in np.ndindex(*lat):
            row = [str(i) for i in idx]
            row += [f17(fam.U[idx + (k,)]) for k in range(k_axes)]
            row.append(f17(t))
            row += [f17(fam.x[(jt,) + idx + (i,)]) for i in range(sc.n)]
            row += [f17(fam.v[(jt,) + idx + (i,)]) for i in range(sc.n)]
            row.append(f17(speeds[(jt,) + idx]))
            row += [f17(dev.phi[(jt,) + idx + (k,)]) for k in range(k_axes)]
            if have_w:
                row.append(f17(w_vals[idx]))
            row.append("1" if fam.valid[(jt,) + idx] else "0")
            rows.append(row)
    _write_csv(out_dir / "family.csv", header, rows)
    return dev


def _run_family_action(sc: Scenario, out_dir: Path, args, kind: str) -> int:
    cfg = sc.action_cfg
    tol = args.tolerance or float(cfg.get("tolerance", 1e-6))
    t_max = float(cfg.get("t_max", 0.5))
    t_steps = int(cfg.get("t_steps", 6))
    t_grid = np.linspace(0.0, t_max, t_steps)
    lattice = tuple(int(c) for c in cfg.get("lattice", [21] * (sc.n - 1)))
    nu0 = float(cfg.get("nu0", 1.0))

    if kind == "shift":
        p0 = cfg.get("p0", [0.0] * (sc.n - 1))
        fam = build_shift(sc.force, sc.metric, sc.surface, lattice, t_grid,
                          nu0, p0, gen=sc.gen, opts=sc.integrator)
    else:
        p0 = cfg.get("p0", [0.0] * sc.n)
        rect = cfg.get("rect", [[0.8, 1.2], [0.3, 0.7]][:sc.n - 1])
        t_skip = float(cfg.get("t_skip", 0.05))
        fam = blowup(sc.force, sc.metric, p0, nu0, t_grid, rect, lattice,
                     gen=sc.gen, t_skip=t_skip, opts=sc.integrator)

    dev = _family_csv(out_dir, fam, sc)
    max_dev = dev.max_normalized(t_mask=fam.t_mask())
    checks = [_verdict_entry("deviation/max_normalized", max_dev, tol)]
    extras = {}
    if fam.gen is not None:
        wc = w_constancy(fam)
        gc = gnn_check(fam)
        checks.append(_verdict_entry("level/spread", wc["max_spread"], tol))
        if wc["max_drift"] is not None:
            checks.append(_verdict_entry("level/transport_drift",
                                         wc["max_drift"], tol))
        checks.append(_verdict_entry("associated/speed_vs_inverse_map",
                                     gc["max_residual"], tol))
        extras = {
            "w0": f17(fam.w0),
            "level_spread_per_t": [f17(v) for v in wc["spread"]],
            "level_mean_per_t": [f17(v) for v in wc["mean"]],
        }
    passed = all(c["passed"] for c in checks)
    doc = {
        "action": kind,
        "version": sc.version,
        "seed": sc.seed,
        "n": sc.n,
        "tolerance": f17(tol),
        "force_form": sc.force_form,
        "nu0": f17(nu0),
        "lattice": list(lattice),
        "t_max": f17(t_max),
        "caustic_t": (None if dev.caustic_index is None
                      else f17(fam.t[dev.caustic_index])),
        "members_failed": int(np.sum(fam.reasons != "completed")),
        "checks": checks,
        "verdict": "pass" if passed else "fail",
        **extras,
    }
    lines = [f"{kind}: {doc['verdict']}",
             f"max normalized deviation: {f17(max_dev)} (tol {f17(tol)})",
             f"members failed: {doc['members_failed']}"]
    lines += [f"  {c['name']}: max {c['max']} "
              f"({'ok' if c['passed'] else 'FAIL'})" for c in checks]
    _write_report(out_dir, doc, lines)
    return 0 if passed else 1


def _run_metrizability(sc: Scenario, out_dir: Path, args) -> int:
    cfg = sc.action_cfg
    tol = args.tolerance or float(cfg.get("tolerance", 1e-5))
    count = args.samples or int(cfg.get("samples", 10))
    arc_budget = float(cfg.get("arc_budget", 1.0))
    resample = int(cfg.get("resample", 200))
    x_box = cfg.get("x_box", [[-0.5, 0.5]] * sc.n)
    ntol = float(cfg.get("normality_tolerance", 1e-6))

    f_expr = parse(cfg["f"])
    H_expr = parse(cfg["H"], ["s"]) if "H" in cfg else None
    candidate = metrizable_force(f_expr, H_expr, sc.metric)
    reference = conformal_force(f_expr, None, sc.metric)

    rng = np.random.default_rng(np.random.PCG64(sc.seed))
    X, V = _sample_states(rng, sc, count, x_box, [1.0, 1.0])
    dirs = V  # unit g-speed directions

    rep = inheritance_test(candidate, reference, sc.metric, X, dirs,
                           tolerance=tol, arc_budget=arc_budget,
                           resample=resample, opts=sc.integrator)
    Xr, Vr = _sample_states(rng, sc, max(count, 50), x_box, [0.5, 2.0])
    norm = check_normality(candidate, sc.metric, Xr, Vr, tolerance=ntol,
                           v_min=sc.integrator.v_min)

    header = [f"x{i + 1}" for i in range(sc.n)] + \
             [f"dir{i + 1}" for i in range(sc.n)] + ["distance"]
    rows = [[f17(X[i, j]) for j in range(sc.n)]
            + [f17(dirs[i, j]) for j in range(sc.n)]
            + [f17(rep.distances[i])] for i in range(count)]
    _write_csv(out_dir / "inheritance.csv", header, rows)

    checks = [_verdict_entry("inheritance/max_distance",
                             float(np.nanmax(rep.distances)), tol)]
    checks += [_verdict_entry(f"normality/{k}", m, ntol)
               for k, m in sorted(norm.max_abs.items())]
    passed = rep.passed and norm.passed
    doc = {
        "action": "metrizability",
        "version": sc.version,
        "seed": sc.seed,
        "n": sc.n,
        "samples": count,
        "tolerance": f17(tol),
        "arc_budget": f17(arc_budget),
        "f": f_expr.source,
        "H": None if H_expr is None else H_expr.source,
        "checks": checks,
        "inheritance_failures": rep.failures,
        "verdict": "pass" if passed else "fail",
    }
    lines = [f"metrizability: {doc['verdict']}"]
    lines += [f"  {c['name']}: max {c['max']} "
              f"({'ok' if c['passed'] else 'FAIL'})" for c in checks]
    _write_report(out_dir, doc, lines)
    return 0 if passed else 1


def _run_validate(path, out_dir: Path | None) -> int:
    diags, inventory = validate_scenario(path)
    lines = []
    if diags:
        lines.append(f"INVALID: {len(diags)} problem(s)")
        lines += [f"  - {d}" for d in diags]
    else:
        lines.append("OK: scenario is valid")
    if inventory:
        lines.append("declared fields:")
        lines += [f"  {where}: '{src}' over variables "
                  f"{{{', '.join(vs)}}}" for where, src, vs in inventory]
    print("\n".join(lines))
    if out_dir is not None:
        _write_report(out_dir, {
            "action": "validate",
            "diagnostics": diags,
            "fields": [{"where": w, "source": s, "variables": v}
                       for w, s, v in inventory],
            "verdict": "pass" if not diags else "fail",
        }, lines)
    return 0 if not diags else 2


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def _build_parser():
    p = argparse.ArgumentParser(
        prog="normalshift",
        description="Construct and verify force fields admitting the "
                    "normal shift; simulate shifts and blow-ups.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("validate", "parse and dimension-check a scenario"),
        ("check", "evaluate normality residuals on seeded samples"),
        ("shift", "shift a hypersurface and certify orthogonality"),
        ("blowup", "blow up a point and certify orthogonality"),
        ("metrizability", "trajectory-inheritance and normality test"),
    ]:
        q = sub.add_parser(name, help=help_)
        q.add_argument("--config", required=True, help="scenario TOML path")
        q.add_argument("--out", default=None, help="output directory")
        q.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
        q.add_argument("--tolerance", type=float, default=None,
                       help="override the action tolerance")
        q.add_argument("--samples", type=int, default=None,
                       help="override the sample count")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    out_dir = Path(args.out) if args.out else Path("out")
    try:
        if args.command == "validate":
            return _run_validate(args.config, Path(args.out) if args.out
                                 else None)
        sc = load_scenario(args.config, seed_override=args.seed)
        if sc.action != args.command:
            print(f"error: scenario declares action [{sc.action}] but "
                  f"'{args.command}' was requested", file=sys.stderr)
            return 2
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "check":
            code = _run_check(sc, out_dir, args)
        elif args.command == "shift":
            code = _run_family_action(sc, out_dir, args, "shift")
        elif args.command == "blowup":
            code = _run_family_action(sc, out_dir, args, "blowup")
        else:
            code = _run_metrizability(sc, out_dir, args)
        print((out_dir / "summary.txt").read_text(), end="")
        return code
    except ScenarioError as err:
        print(f"error: {err}", file=sys.stderr)
        for d in err.diagnostics:
            print(f"  - {d}", file=sys.stderr)
        return 2
    except NormalShiftError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
