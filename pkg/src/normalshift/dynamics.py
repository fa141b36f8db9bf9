"""Trajectory integration for Newtonian dynamical systems on a chart.

Solves the covariant second-order system: chart acceleration equals the
contravariant force minus the connection's quadratic velocity term. The
default integrator is fixed-step RK4 (reproducibility over adaptivity) with
an opt-in embedded Dormand-Prince 5(4) pair. Whole families of trajectories
integrate in lockstep as batched numpy states; members that escape the chart
box, lose speed, or produce non-finite values are frozen and flagged without
failing the rest of the family.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import IntegrationError, NormalShiftError
from .expr import Expr
from .geometry import Metric, V_MIN_DEFAULT

__all__ = [
    "IntegratorOptions",
    "Trajectory",
    "FamilyResult",
    "integrate",
    "integrate_family",
    "speed_rate",
    "w0_evolve",
]

REASON_COMPLETED = "completed"
REASON_ESCAPED = "escaped chart"
REASON_DEGENERATE = "velocity degenerate"
REASON_FAILED = "step failure"


@dataclass(frozen=True)
class IntegratorOptions:
    """Numerical options for trajectory integration.

    ``escape`` is the half-width of the chart box; leaving it terminates the
    member (single-chart assumption: escapes are reported, not remapped).
    """

    method: str = "rk4"          # rk4 (fixed step) | rk45 (embedded adaptive)
    step: float = 1e-3
    rtol: float = 1e-9
    atol: float = 1e-12
    max_steps: int = 1_000_000
    escape: Optional[float] = 10.0
    v_min: float = V_MIN_DEFAULT

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"unknown integrator method {self.method!r}")
        if self.step <= 0 or self.max_steps < 1:
            raise ValueError("step must be positive and max_steps >= 1")


@dataclass
class Trajectory:
    """Sampled solution of one trajectory on the requested time grid.

    ``valid[j]`` marks grid points actually reached; the termination reason
    and the integration metadata record any mid-flight failure.
    """

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    reason: str
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.x.shape[-1]

    def speeds(self, metric: Metric) -> np.ndarray:
        return metric.speed(self.x, self.v)


@dataclass
class FamilyResult:
    """Lockstep-integrated family over an arbitrary lattice of members.

    Arrays are indexed ``[time, *lattice, component]``; ``reasons`` has the
    lattice shape.
    """

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    reasons: np.ndarray


# --------------------------------------------------------------------------
# Right-hand side
# --------------------------------------------------------------------------

def _make_rhs(force, metric: Metric):
    def rhs(x, v):
        g = metric.matrix(x)
        gamma = metric.christoffel(x)
        acc = -np.einsum("...kij,...i,...j->...k", gamma, v, v)
        if force is not None:
            F_cov = np.asarray(force(x, v), dtype=float)
            ginv = np.linalg.inv(g)
            acc = acc + np.einsum("...kj,...j->...k", ginv, F_cov)
        return v, acc

    return rhs


def speed_rate(force, metric: Metric, x, v,
               v_min: float = V_MIN_DEFAULT) -> np.ndarray:
    """Instantaneous rate of change of the velocity modulus: the projection
    of the covariant force onto the unit velocity direction."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    g = metric.matrix(x)
    N = metric.unit_direction(x, v, g=g, v_min=v_min)
    F = np.asarray(force(x, v), dtype=float)
    return np.einsum("...k,...k->...", N, F)


# --------------------------------------------------------------------------
# Steppers (batched state (m, 2n))
# --------------------------------------------------------------------------

def _rk4_substep(rhs, x, v, h):
    k1x, k1v = rhs(x, v)
    k2x, k2v = rhs(x + 0.5 * h * k1x, v + 0.5 * h * k1v)
    k3x, k3v = rhs(x + 0.5 * h * k2x, v + 0.5 * h * k2v)
    k4x, k4v = rhs(x + h * k3x, v + h * k3v)
    xn = x + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    vn = v + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return xn, vn


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784,
                   11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])


def _dp_substep(rhs, x, v, h):
    """One Dormand-Prince step: returns 5th-order (x, v) and the max scaled
    error against the embedded 4th-order solution."""
    kx = []
    kv = []
    for i in range(7):
        xi, vi = x, v
        if i:
            a = _DP_A[i]
            for j, aij in enumerate(a):
                if aij != 0.0:
                    xi = xi + h * aij * kx[j]
                    vi = vi + h * aij * kv[j]
        dx, dv = rhs(xi, vi)
        kx.append(dx)
        kv.append(dv)
    x5 = x + h * sum(b * k for b, k in zip(_DP_B5, kx) if b != 0.0)
    v5 = v + h * sum(b * k for b, k in zip(_DP_B5, kv) if b != 0.0)
    ex = h * sum((b5 - b4) * k for b5, b4, k in zip(_DP_B5, _DP_B4, kx))
    ev = h * sum((b5 - b4) * k for b5, b4, k in zip(_DP_B5, _DP_B4, kv))
    return x5, v5, ex, ev


# --------------------------------------------------------------------------
# Family integration with member isolation
# --------------------------------------------------------------------------

def _state_ok(x, v, metric, opts):
    """Elementwise health of candidate states (finite, inside the chart box,
    speed above floor)."""
    ok = np.all(np.isfinite(x), axis=-1) & np.all(np.isfinite(v), axis=-1)
    if opts.escape is not None:
        ok &= np.all(np.abs(x) <= opts.escape, axis=-1)
    if np.any(ok):
        s = np.where(ok, metric.speed(np.where(ok[..., None], x, 0.0),
                                      np.where(ok[..., None], v, 0.0)), 0.0)
        ok &= s > opts.v_min
    return ok


def _classify(x, v, metric, opts):
    bad_finite = ~(np.all(np.isfinite(x), axis=-1)
                   & np.all(np.isfinite(v), axis=-1))
    out = np.where(bad_finite, REASON_FAILED, REASON_COMPLETED).astype("<U32")
    if opts.escape is not None:
        esc = np.all(np.isfinite(x), axis=-1) & (
            np.max(np.abs(x), axis=-1, initial=0.0) > opts.escape)
        out[esc] = REASON_ESCAPED
    safe = out == REASON_COMPLETED
    if np.any(safe):
        s = metric.speed(np.where(safe[..., None], x, 0.0),
                         np.where(safe[..., None], v, 0.0))
        out[safe & (s <= opts.v_min)] = REASON_DEGENERATE
    return out


def _substep_isolated(rhs, x, v, h, metric, opts, stepper):
    """Advance active members one sub-step; on a batch-level evaluation
    error, bisect the batch to isolate the offending members. Returns
    (x_new, v_new, ok_mask)."""
    m = x.shape[0]
    try:
        out = stepper(rhs, x, v, h)
        xn, vn = out[0], out[1]
        ok = _state_ok(xn, vn, metric, opts)
        return xn, vn, ok
    except NormalShiftError:
        if m == 1:
            return x, v, np.zeros(1, dtype=bool)
        half = m // 2
        xa, va, oka = _substep_isolated(rhs, x[:half], v[:half], h, metric,
                                        opts, stepper)
        xb, vb, okb = _substep_isolated(rhs, x[half:], v[half:], h, metric,
                                        opts, stepper)
        return (np.concatenate([xa, xb]), np.concatenate([va, vb]),
                np.concatenate([oka, okb]))


def integrate_family(force, metric: Metric, x0, v0, t_grid,
                     opts: IntegratorOptions | None = None) -> FamilyResult:
    """Integrate a family of trajectories sharing a time grid.

    ``x0``, ``v0`` have shape ``(*lattice, n)``; the grid must be sorted and
    start at the initial time of the supplied states (time zero).
    """
    opts = opts or IntegratorOptions()
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or len(t_grid) < 1:
        raise IntegrationError("t_grid must be a non-empty 1-d array")
    if np.any(np.diff(t_grid) <= 0):
        raise IntegrationError("t_grid must be strictly increasing")
    if abs(t_grid[0]) > 0:
        raise IntegrationError("t_grid must contain the initial time 0")
    lat = x0.shape[:-1]
    n = x0.shape[-1]
    X = x0.reshape(-1, n).copy()
    V = v0.reshape(-1, n).copy()
    m = X.shape[0]

    s0 = metric.speed(X, V)
    if np.any(s0 <= opts.v_min):
        raise IntegrationError("initial speed at or below the floor")

    rhs = _make_rhs(force, metric)
    stepper = _rk4_substep if opts.method == "rk4" else None

    T = len(t_grid)
    out_x = np.empty((T, m, n))
    out_v = np.empty((T, m, n))
    valid = np.zeros((T, m), dtype=bool)
    reasons = np.full(m, REASON_COMPLETED, dtype="<U32")
    out_x[0], out_v[0], valid[0] = X, V, True

    active = np.ones(m, dtype=bool)
    steps_used = 0
    h_adapt = np.full(m, opts.step)

    for j in range(1, T):
        ta, tb = t_grid[j - 1], t_grid[j]
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            out_x[j], out_v[j] = out_x[j - 1], out_v[j - 1]
            continue
        if opts.method == "rk4":
            nsub = max(1, int(np.ceil((tb - ta) / opts.step - 1e-12)))
            h = (tb - ta) / nsub
            for _ in range(nsub):
                if len(idx) == 0:
                    break
                steps_used += 1
                if steps_used > opts.max_steps:
                    reasons[idx] = REASON_FAILED
                    active[idx] = False
                    break
                xn, vn, ok = _substep_isolated(rhs, X[idx], V[idx], h,
                                               metric, opts, stepper)
                bad = ~ok
                if np.any(bad):
                    bad_idx = idx[bad]
                    reasons[bad_idx] = _classify(xn[bad], vn[bad], metric,
                                                 opts)
                    active[bad_idx] = False
                X[idx[ok]] = xn[ok]
                V[idx[ok]] = vn[ok]
                idx = np.nonzero(active)[0]
        else:
            idx, steps_used = _advance_rk45(rhs, X, V, ta, tb, idx, active,
                                            reasons, metric, opts, h_adapt,
                                            steps_used)
        out_x[j] = X
        out_v[j] = V
        valid[j] = active

    return FamilyResult(t_grid, out_x.reshape((T,) + lat + (n,)),
                        out_v.reshape((T,) + lat + (n,)),
                        valid.reshape((T,) + lat), reasons.reshape(lat))


def _advance_rk45(rhs, X, V, ta, tb, idx, active, reasons, metric, opts,
                  h_adapt, steps_used):
    t_now = np.full(X.shape[0], ta)
    while len(idx) and np.any(t_now[idx] < tb - 1e-14):
        steps_used += 1
        if steps_used > opts.max_steps:
            reasons[idx] = REASON_FAILED
            active[idx] = False
            break
        h = np.minimum(h_adapt[idx], tb - t_now[idx])
        try:
            x5, v5, ex, ev = _dp_substep(rhs, X[idx], V[idx], h[:, None])
        except NormalShiftError:
            # isolate by retrying one RK4-style bisection at member level
            sub = lambda r, x, v, hh: _dp_substep(r, x, v, hh)[:2]
            xn, vn, ok = _substep_isolated(rhs, X[idx], V[idx],
                                           h[:, None], metric, opts,
                                           lambda r, x, v, hh: sub(r, x, v, hh))
            bad_idx = idx[~ok]
            reasons[bad_idx] = REASON_FAILED
            active[bad_idx] = False
            X[idx[ok]] = xn[ok]
            V[idx[ok]] = vn[ok]
            t_now[idx[ok]] += h[ok]
            idx = np.nonzero(active & (t_now < tb - 1e-14))[0]
            continue
        scale_x = opts.atol + opts.rtol * np.maximum(np.abs(X[idx]),
                                                     np.abs(x5))
        scale_v = opts.atol + opts.rtol * np.maximum(np.abs(V[idx]),
                                                     np.abs(v5))
        err = np.maximum(np.max(np.abs(ex) / scale_x, axis=-1),
                         np.max(np.abs(ev) / scale_v, axis=-1))
        err = np.maximum(err, 1e-16)
        accept = err <= 1.0
        ok = _state_ok(x5, v5, metric, opts) | ~accept
        factor = np.clip(0.9 * err ** (-0.2), 0.2, 5.0)
        h_adapt[idx] = np.maximum(h * factor, 1e-12)
        commit = accept & ok
        bad = accept & ~_state_ok(x5, v5, metric, opts)
        if np.any(bad):
            bad_idx = idx[bad]
            reasons[bad_idx] = _classify(x5[bad], v5[bad], metric, opts)
            active[bad_idx] = False
        sel = idx[commit]
        X[sel] = x5[commit]
        V[sel] = v5[commit]
        t_now[sel] += h[commit]
        idx = np.nonzero(active & (t_now < tb - 1e-14))[0]
    return np.nonzero(active)[0], steps_used


def integrate(force, metric: Metric, x0, v0, t_grid,
              opts: IntegratorOptions | None = None) -> Trajectory:
    """Integrate a single trajectory; partial results carry the failure
    reason and the valid-sample mask."""
    fam = integrate_family(force, metric, np.asarray(x0, float)[None, :],
                           np.asarray(v0, float)[None, :], t_grid, opts)
    reason = str(fam.reasons[0])
    return Trajectory(fam.t, fam.x[:, 0], fam.v[:, 0], fam.valid[:, 0],
                      reason, meta={"method": (opts or IntegratorOptions()).method})


# --------------------------------------------------------------------------
# Scalar invariant transport
# --------------------------------------------------------------------------

def w0_evolve(h: Expr | Callable | None, w0: float, t_grid,
              opts: IntegratorOptions | None = None) -> np.ndarray:
    """Transport of the level constant along the shift: solves the scalar
    ODE dW0/dt = h(W0) on the output grid with the same stepper family.
    ``h=None`` means identically zero (constant transport)."""
    opts = opts or IntegratorOptions()
    t_grid = np.asarray(t_grid, dtype=float)
    if h is None:
        return np.full(t_grid.shape, float(w0))
    if isinstance(h, Expr):
        h_fn = lambda w: np.asarray(h({"w": w}), dtype=float)
    else:
        h_fn = h

    out = np.empty(t_grid.shape)
    out[0] = w = float(w0)
    for j in range(1, len(t_grid)):
        ta, tb = t_grid[j - 1], t_grid[j]
        nsub = max(1, int(np.ceil((tb - ta) / opts.step - 1e-12)))
        hstep = (tb - ta) / nsub
        for _ in range(nsub):
            k1 = h_fn(w)
            k2 = h_fn(w + 0.5 * hstep * k1)
            k3 = h_fn(w + 0.5 * hstep * k2)
            k4 = h_fn(w + hstep * k3)
            w = w + (hstep / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(w):
            raise IntegrationError("level-constant transport blew up in "
                                   "finite time")
        out[j] = w
    return out
