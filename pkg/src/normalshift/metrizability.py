"""Trajectory inheritance and metrizability by conformally rescaled flows.

A system is metrizable when it inherits the trajectories (as unparameterized
curves) of the geodesic flow of a conformally rescaled metric. This module
builds the rescaled connection and its deformation tensor, force fields of
the quadratic-plus-speed-forcing shape, and runs the numerical
trajectory-inheritance test: integrate both systems from a shared initial
point and direction, reparameterize both curves by arc length, and compare
the point sets by a symmetric max-min distance over a fixed arc budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import IntegratorOptions, integrate_family
from .errors import IntegrationError, SpeedFloorError
from .expr import Expr, eval_dual
from .forcefield import ForceField, conformal_force
from .geometry import Metric, V_MIN_DEFAULT, coord_names

__all__ = [
    "ConnectionDeformation",
    "InheritanceReport",
    "conformal_connection",
    "conformal_deformation",
    "inherited_force",
    "metrizable_force",
    "inheritance_test",
]


def _f_gradient(f: Expr, n: int, x: np.ndarray):
    names = coord_names(n)
    env = {name: x[..., i] for i, name in enumerate(names)}
    dv = eval_dual(f, env, first=names)
    val = np.asarray(dv.value, dtype=float)
    shape = np.broadcast(val, x[..., 0]).shape
    grad = np.stack([np.broadcast_to(np.asarray(dv.derivatives[nm], float),
                                     shape) for nm in names], axis=-1)
    return val, grad


def conformal_connection(f: Expr, metric: Metric, x) -> np.ndarray:
    """Connection of the conformally rescaled metric exp(-2f) g, written
    through the base connection and the gradient of f (no second metric is
    ever built, so this is an independent route from differentiating the
    rescaled entries)."""
    x = np.asarray(x, dtype=float)
    n = metric.n
    gamma = metric.christoffel(x)
    g = metric.matrix(x)
    ginv = np.linalg.inv(g)
    _, grad = _f_gradient(f, n, x)
    grad_up = np.einsum("...kq,...q->...k", ginv, grad)
    eye = np.eye(n)
    out = (gamma
           - grad[..., None, :, None] * eye[None, :, :].reshape(
               (1,) * (gamma.ndim - 3) + (n, 1, n))
           - grad[..., None, None, :] * eye.reshape(
               (1,) * (gamma.ndim - 3) + (n, n, 1))
           + grad_up[..., :, None, None] * g[..., None, :, :])
    return out


def conformal_deformation(f: Expr, metric: Metric) -> "ConnectionDeformation":
    """Deformation tensor of the conformal rescaling: the difference of the
    rescaled and base connections as an evaluator."""

    def ev(x):
        x = np.asarray(x, dtype=float)
        n = metric.n
        g = metric.matrix(x)
        ginv = np.linalg.inv(g)
        _, grad = _f_gradient(f, n, x)
        grad_up = np.einsum("...kq,...q->...k", ginv, grad)
        eye = np.eye(n)
        lead = (1,) * (g.ndim - 2)
        return (-grad[..., None, :, None] * eye.reshape(lead + (n, 1, n))
                - grad[..., None, None, :] * eye.reshape(lead + (n, n, 1))
                + grad_up[..., :, None, None] * g[..., None, :, :])

    return ConnectionDeformation(ev, name=f"conformal({f.source})")


@dataclass(frozen=True)
class ConnectionDeformation:
    """Difference field of two symmetric connections: evaluator
    ``x -> M[..., k, i, j]``, symmetric in the lower pair."""

    evaluator: Callable
    name: str = "deformation"

    def __call__(self, x):
        M = np.asarray(self.evaluator(np.asarray(x, dtype=float)))
        if not np.allclose(M, np.swapaxes(M, -1, -2), atol=1e-12):
            raise ValueError("deformation not symmetric in its lower pair")
        return M


def inherited_force(deformation: ConnectionDeformation,
                    H: Optional[Callable], metric: Metric,
                    v_min: float = V_MIN_DEFAULT) -> ForceField:
    """Force field of a system inheriting a deformed geodesic flow:
    quadratic contraction of the deformation with the velocity plus an
    arbitrary speed-forcing term along the unit direction. ``H`` is an
    extended-scalar callable (x, v) -> value, or None."""

    def fn(x, v):
        g = metric.matrix(x)
        s = metric.speed(x, v, g=g)
        if np.any(s <= v_min):
            raise SpeedFloorError("speed at or below floor in force "
                                  "evaluation")
        M = deformation(x)
        F_up = -np.einsum("...kij,...i,...j->...k", M, v, v)
        if H is not None:
            hval = np.asarray(H(x, v), dtype=float)
            F_up = F_up + hval[..., None] * v / s[..., None]
        return np.einsum("...kj,...j->...k", g, F_up)

    return ForceField(metric.n, fn, provenance="inherited",
                      meta={"deformation": deformation.name})


def metrizable_force(f: Expr, H: Optional[Expr], metric: Metric,
                     v_min: float = V_MIN_DEFAULT) -> ForceField:
    """The complete family of admissible force fields metrizable by the
    conformally rescaled metric exp(-2f) g: the conformal-flow force plus
    the speed-forcing term with the rescaled-speed argument."""
    ff = conformal_force(f, H, metric, v_min=v_min)
    return ForceField(ff.n, ff.fn, provenance="inherited", meta=ff.meta)


# --------------------------------------------------------------------------
# Trajectory inheritance
# --------------------------------------------------------------------------

@dataclass
class InheritanceReport:
    """Per-sample symmetric curve distances over the arc budget, with the
    pass verdict at the configured tolerance."""

    distances: np.ndarray
    tolerance: float
    arc_budget: float
    failures: list

    @property
    def passed(self) -> bool:
        return (not self.failures) and bool(
            np.all(self.distances <= self.tolerance))


def _integrate_to_arc(force, metric, x0, v0, arc_budget, opts):
    """Integrate a batch until every member accumulates the g-arc budget;
    returns per-member polylines truncated at the budget."""
    m = x0.shape[0]
    t_block = max(4 * opts.step, arc_budget * opts.step * 4)
    # crude horizon guess from initial speeds, extended on demand
    s0 = metric.speed(x0, v0)
    t_max = float(1.5 * arc_budget / max(np.min(s0), 1e-6))
    for _ in range(8):
        steps = int(np.ceil(t_max / opts.step))
        t_grid = np.linspace(0.0, t_max, steps + 1)
        fam = integrate_family(force, metric, x0, v0, t_grid, opts)
        if np.any(fam.reasons != "completed"):
            bad = np.nonzero(fam.reasons != "completed")[0]
            raise IntegrationError(
                f"members {bad.tolist()} terminated early: "
                f"{[str(r) for r in fam.reasons[bad]]}")
        speeds = metric.speed(fam.x, fam.v)
        darc = 0.5 * (speeds[1:] + speeds[:-1]) * np.diff(t_grid)[:, None]
        arc = np.concatenate([np.zeros((1, m)), np.cumsum(darc, axis=0)])
        if np.all(arc[-1] >= arc_budget):
            return fam.x, arc
        t_max *= 1.6
    raise IntegrationError("could not accumulate the requested arc length")


def _resample_by_arc(points, arc, arc_budget, count):
    """Linear interpolation of a polyline at equally spaced arc values."""
    targets = np.linspace(0.0, arc_budget, count)
    out = np.empty((count, points.shape[-1]))
    for d in range(points.shape[-1]):
        out[:, d] = np.interp(targets, arc, points[:, d])
    return out


def _point_polyline_distance(pts, poly):
    """Max over pts of the distance to the polyline (segment-accurate)."""
    a = poly[:-1]
    b = poly[1:]
    ab = b - a
    denom = np.einsum("sj,sj->s", ab, ab)
    denom = np.where(denom == 0.0, 1.0, denom)
    diff = pts[:, None, :] - a[None, :, :]
    tpar = np.clip(np.einsum("psj,sj->ps", diff, ab) / denom, 0.0, 1.0)
    proj = a[None, :, :] + tpar[..., None] * ab[None, :, :]
    dist = np.linalg.norm(pts[:, None, :] - proj, axis=-1)
    return float(np.max(np.min(dist, axis=1)))


def inheritance_test(force_a: ForceField, force_b: ForceField,
                     metric: Metric, init_x, init_dirs,
                     tolerance: float = 1e-5, arc_budget: float = 1.0,
                     resample: int = 200,
                     opts: IntegratorOptions | None = None,
                     speed_a: float = 1.0,
                     speed_b: float = 1.0) -> InheritanceReport:
    """Numerical trajectory-inheritance test.

    Both systems launch from the same points and directions (speeds may
    differ); each trajectory is reparameterized by cumulative g-arc length,
    resampled, and compared by the symmetric max-min chart distance. The
    verdict passes iff every sample stays within the tolerance; integration
    failures are flagged per sample.
    """
    opts = opts or IntegratorOptions()
    X = np.asarray(init_x, dtype=float)
    D = np.asarray(init_dirs, dtype=float)
    g = metric.matrix(X)
    norms = np.sqrt(np.einsum("...i,...ij,...j->...", D, g, D))
    D = D / norms[..., None]
    m = X.shape[0]

    failures = []
    dists = np.full(m, np.nan)
    try:
        xa, arc_a = _integrate_to_arc(force_a, metric, X, speed_a * D,
                                      arc_budget, opts)
        xb, arc_b = _integrate_to_arc(force_b, metric, X, speed_b * D,
                                      arc_budget, opts)
    except IntegrationError as err:
        return InheritanceReport(dists, tolerance, arc_budget,
                                 [f"family integration failed: {err}"])
    for i in range(m):
        pa = _resample_by_arc(xa[:, i], arc_a[:, i], arc_budget, resample)
        pb = _resample_by_arc(xb[:, i], arc_b[:, i], arc_budget, resample)
        d = max(_point_polyline_distance(pa, pb),
                _point_polyline_distance(pb, pa))
        dists[i] = d
    return InheritanceReport(dists, tolerance, arc_budget, failures)
