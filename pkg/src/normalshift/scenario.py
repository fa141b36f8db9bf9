"""Declarative scenario files: loading, validation, and object construction.

A scenario is a TOML document with a mandatory ``version`` key, a metric
block, a force block, exactly one action block (``check``, ``shift``,
``blowup``, or ``metrizability``), and optional integrator settings. All
user-declared fields are quoted expression strings over the documented
variable sets (see docs/scenarios.md). Validation aggregates every
diagnostic instead of failing on the first, and inventories the declared
fields with their variable sets.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dynamics import IntegratorOptions
from .errors import ExprSyntaxError, ScenarioError
from .expr import Expr, Var, parse
from .forcefield import (ForceField, GeneratingFunction, VFormGenerating,
                         WFormGenerating, build_force, conformal_force)
from .geometry import Metric, coord_names
from .shift import Hypersurface

__all__ = ["Scenario", "load_scenario", "validate_scenario"]

ACTION_BLOCKS = ("check", "shift", "blowup", "metrizability")
FORCE_FORMS = ("geodesic", "W", "V", "conformal", "custom")


@dataclass
class Scenario:
    """Fully constructed scenario: every expression parsed, every object
    built, ready for the pipelines."""

    version: int
    n: int
    seed: int
    metric: Metric
    force_form: str
    force: Optional[ForceField]          # None means geodesic flow
    gen: Optional[GeneratingFunction]
    action: str
    action_cfg: dict
    integrator: IntegratorOptions
    surface: Optional[Hypersurface] = None
    raw: dict = field(default_factory=dict)


def _get(table, key, kind, diags, where, default=None, required=False):
    if key not in table:
        if required:
            diags.append(f"{where}: missing required key '{key}'")
        return default
    val = table[key]
    if kind is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, kind):
        diags.append(f"{where}: key '{key}' must be {kind.__name__}, "
                     f"got {type(val).__name__}")
        return default
    return val


def _parse_expr(source, variables, diags, where):
    try:
        return parse(source, variables=variables)
    except ExprSyntaxError as err:
        diags.append(f"{where}: {err}")
        return None


def _load_raw(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}")
    except tomllib.TOMLDecodeError as err:
        raise ScenarioError(f"scenario file is not valid TOML: {err}")


def validate_scenario(path) -> tuple:
    """Parse and dimension-check a scenario without executing anything.

    Returns ``(diagnostics, inventory)``: the aggregated list of problems
    (empty for a valid scenario) and an inventory of declared expression
    fields with their variable sets.
    """
    raw = _load_raw(path)
    diags: list = []
    inventory: list = []

    if "version" not in raw:
        diags.append("top level: missing mandatory 'version' key")
    n = _get(raw, "dimension", int, diags, "top level", default=3)
    if n is not None and n < 2:
        diags.append("top level: dimension must be at least 2")
        n = 3
    names = coord_names(n)

    def inv(where, expr):
        if expr is not None:
            inventory.append((where, expr.source,
                              sorted(expr.variables)))

    # ---- metric ----
    metric_tbl = raw.get("metric")
    if metric_tbl is None:
        diags.append("missing [metric] block")
    else:
        kind = _get(metric_tbl, "kind", str, diags, "[metric]",
                    default="flat")
        if kind not in ("flat", "conformal", "general"):
            diags.append(f"[metric]: unknown kind {kind!r}")
        elif kind == "conformal":
            src = _get(metric_tbl, "f", str, diags, "[metric]",
                       required=True)
            if src is not None:
                inv("metric.f", _parse_expr(src, names, diags, "[metric].f"))
        elif kind == "general":
            rows = metric_tbl.get("entries")
            if (not isinstance(rows, list) or len(rows) != n
                    or any(not isinstance(r, list) or len(r) != n
                           for r in rows)):
                diags.append(f"[metric]: entries must be an {n}x{n} grid of "
                             "expression strings")
            else:
                for i in range(n):
                    for j in range(n):
                        e = _parse_expr(rows[i][j], names, diags,
                                        f"[metric].entries[{i}][{j}]")
                        inv(f"metric.entries[{i}][{j}]", e)
                        if (e is not None and i < j
                                and rows[i][j] != rows[j][i]):
                            diags.append(f"[metric]: entries ({i},{j}) and "
                                         f"({j},{i}) differ; the grid must "
                                         "be symmetric")

    # ---- force ----
    force_tbl = raw.get("force")
    if force_tbl is None:
        diags.append("missing [force] block")
        form = None
    else:
        form = _get(force_tbl, "form", str, diags, "[force]", required=True)
        if form is not None and form not in FORCE_FORMS:
            diags.append(f"[force]: unknown form {form!r}; expected one of "
                         f"{FORCE_FORMS}")
        if form in ("W", "V", "conformal") and n < 3:
            diags.append("[force]: force construction requires n >= 3")
        if form == "W":
            src = _get(force_tbl, "W", str, diags, "[force]", required=True)
            if src is not None:
                inv("force.W", _parse_expr(src, names + ["v"], diags,
                                           "[force].W"))
        elif form == "V":
            src = _get(force_tbl, "V", str, diags, "[force]", required=True)
            if src is not None:
                inv("force.V", _parse_expr(src, names + ["w"], diags,
                                           "[force].V"))
        elif form == "conformal":
            src = _get(force_tbl, "f", str, diags, "[force]", required=True)
            if src is not None:
                inv("force.f", _parse_expr(src, names, diags, "[force].f"))
            if "H" in force_tbl:
                src = _get(force_tbl, "H", str, diags, "[force]")
                if src is not None:
                    inv("force.H", _parse_expr(src, ["s"], diags,
                                               "[force].H"))
        elif form == "custom":
            comps = force_tbl.get("components")
            if not isinstance(comps, list) or len(comps) != n:
                diags.append(f"[force]: custom form needs {n} component "
                             "expression strings")
            else:
                vnames = names + [f"v{i + 1}" for i in range(n)]
                for i, src in enumerate(comps):
                    inv(f"force.components[{i}]",
                        _parse_expr(src, vnames, diags,
                                    f"[force].components[{i}]"))
        if form in ("W", "V") and "h" in force_tbl:
            src = _get(force_tbl, "h", str, diags, "[force]")
            if src is not None:
                inv("force.h", _parse_expr(src, ["w"], diags, "[force].h"))

    # ---- action blocks ----
    present = [a for a in ACTION_BLOCKS if a in raw]
    if len(present) != 1:
        diags.append("exactly one action block required "
                     f"({', '.join(ACTION_BLOCKS)}); found "
                     f"{present or 'none'}")
    action = present[0] if len(present) == 1 else None

    if "surface" in raw:
        stbl = raw["surface"]
        params = stbl.get("params")
        maps = stbl.get("maps")
        rect = stbl.get("rect")
        if not isinstance(params, list) or len(params) != n - 1:
            diags.append(f"[surface]: params must list {n - 1} parameter "
                         "names")
            params = [f"u{i + 1}" for i in range(n - 1)]
        if not isinstance(maps, list) or len(maps) != n:
            diags.append(f"[surface]: maps must list {n} expressions")
        else:
            for i, src in enumerate(maps):
                e = _parse_expr(src, params, diags, f"[surface].maps[{i}]")
                inv(f"surface.maps[{i}]", e)
        if (not isinstance(rect, list) or len(rect) != n - 1
                or any(not isinstance(r, list) or len(r) != 2 for r in rect)):
            diags.append(f"[surface]: rect must list {n - 1} [lo, hi] pairs")
    elif action == "shift":
        diags.append("[shift] requires a [surface] block")

    if action == "shift" and form == "custom" and "shift" in raw:
        pass  # constant initial speed; nothing else to check
    if action == "metrizability" and "metrizability" in raw:
        mtbl = raw["metrizability"]
        src = _get(mtbl, "f", str, diags, "[metrizability]", required=True)
        if src is not None:
            inv("metrizability.f",
                _parse_expr(src, names, diags, "[metrizability].f"))
        if "H" in mtbl:
            src = _get(mtbl, "H", str, diags, "[metrizability]")
            if src is not None:
                inv("metrizability.H", _parse_expr(src, ["s"], diags,
                                                   "[metrizability].H"))

    itbl = raw.get("integrate", {})
    method = itbl.get("method", "rk4")
    if method not in ("rk4", "rk45"):
        diags.append(f"[integrate]: unknown method {method!r}")
    if "step" in itbl and not (isinstance(itbl["step"], (int, float))
                               and itbl["step"] > 0):
        diags.append("[integrate]: step must be a positive number")

    return diags, inventory


def load_scenario(path, seed_override=None) -> Scenario:
    """Validate and construct a scenario; raises ScenarioError carrying the
    full diagnostic list on any problem."""
    diags, _ = validate_scenario(path)
    if diags:
        raise ScenarioError(f"scenario invalid with {len(diags)} problem(s)",
                            diagnostics=diags)
    raw = _load_raw(path)
    n = int(raw.get("dimension", 3))
    names = coord_names(n)
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)

    mtbl = raw["metric"]
    kind = mtbl.get("kind", "flat")
    if kind == "flat":
        metric = Metric.flat(n)
    elif kind == "conformal":
        metric = Metric.conformally_flat(parse(mtbl["f"], names), n)
    else:
        metric = Metric.from_strings(mtbl["entries"])

    ftbl = raw["force"]
    form = ftbl["form"]
    gen = None
    force = None
    if form == "geodesic":
        force = None
    elif form in ("W", "V"):
        h_expr = parse(ftbl["h"], ["w"]) if "h" in ftbl else None
        if form == "W":
            gen = WFormGenerating(parse(ftbl["W"], names + ["v"]), h_expr, n,
                                  v_bracket=tuple(ftbl.get("v_bracket",
                                                           (1e-6, 20.0))))
        else:
            gen = VFormGenerating(parse(ftbl["V"], names + ["w"]), h_expr, n,
                                  w_bracket=tuple(ftbl.get("w_bracket",
                                                           (-10.0, 10.0))))
        force = build_force(gen, metric)
    elif form == "conformal":
        f_expr = parse(ftbl["f"], names)
        H_expr = parse(ftbl["H"], ["s"]) if "H" in ftbl else None
        force = conformal_force(f_expr, H_expr, metric)
        # equivalent generating function, used for speed profiles
        w_src = f"v * exp(-({f_expr.source}))"
        h_expr = (None if H_expr is None
                  else H_expr.subst("s", Var("w")))
        gen = WFormGenerating(parse(w_src, names + ["v"]), h_expr, n)
        force = ForceField(force.n, force.fn, provenance="conformal",
                           gen=gen, meta=force.meta)
    else:  # custom
        vnames = [f"v{i + 1}" for i in range(n)]
        comps = [parse(src, names + vnames) for src in ftbl["components"]]

        def fn(x, v, _comps=comps):
            env = {nm: x[..., i] for i, nm in enumerate(names)}
            env.update({nm: v[..., i] for i, nm in enumerate(vnames)})
            out = np.empty(np.broadcast(x[..., 0], v[..., 0]).shape + (n,))
            for i, c in enumerate(_comps):
                out[..., i] = c(env)
            return out

        force = ForceField(n, fn, provenance="user-supplied")

    surface = None
    if "surface" in raw:
        stbl = raw["surface"]
        params = tuple(stbl["params"])
        maps = tuple(parse(src, params) for src in stbl["maps"])
        rect = tuple((float(lo), float(hi)) for lo, hi in stbl["rect"])
        surface = Hypersurface(params, maps, rect,
                               orientation=int(stbl.get("orientation", 1)))

    itbl = raw.get("integrate", {})
    integrator = IntegratorOptions(
        method=itbl.get("method", "rk4"),
        step=float(itbl.get("step", 1e-3)),
        rtol=float(itbl.get("rtol", 1e-9)),
        atol=float(itbl.get("atol", 1e-12)),
        max_steps=int(itbl.get("max_steps", 1_000_000)),
        escape=float(itbl.get("escape", 10.0)),
        v_min=float(itbl.get("v_min", 1e-8)),
    )

    action = next(a for a in ACTION_BLOCKS if a in raw)
    return Scenario(version=int(raw["version"]), n=n, seed=seed,
                    metric=metric, force_form=form, force=force, gen=gen,
                    action=action, action_cfg=dict(raw[action]),
                    integrator=integrator, surface=surface, raw=raw)
