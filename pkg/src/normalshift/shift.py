"""Normal shift of hypersurfaces and normal blow-ups of points.

A hypersurface is declared parametrically by n expression maps in n-1
parameters. The shift construction solves the level equation
W(x(u), nu) = W0 for the initial speed profile nu(u), launches one
trajectory per lattice node along the unit normal scaled by nu, and tracks
the family. Orthogonality is certified numerically through the deviation
functions: inner products of lattice-estimated tangent frames with the
velocity. Frames along the shifted surfaces are estimated by central
differences across the trajectory lattice (the flow map is only sampled);
wide-interior nodes use a fourth-order stencil, the remaining interior ring
second order, and boundary nodes one-sided differences that are flagged and
excluded from verdicts.

A blow-up is the degenerate shift whose initial surface is a single point:
the lattice covers a patch of angles on the unit sphere of directions, the
initial speed is the constant nu0, and frames are meaningful only after a
short skip time (they degenerate at the point itself).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import (FamilyResult, IntegratorOptions, integrate_family,
                       w0_evolve)
from .errors import FrameRankError, RootFindError
from .expr import Expr
from .forcefield import ForceField, GeneratingFunction
from .geometry import Metric, V_MIN_DEFAULT
from .rootfind import solve_bracketed

__all__ = [
    "Hypersurface",
    "ShiftFamily",
    "DeviationResult",
    "unit_normal",
    "solve_nu",
    "build_shift",
    "deviation",
    "initial_deviation_rate",
    "blowup",
    "w_constancy",
    "gnn_check",
    "normality_certificate",
    "sphere_directions",
]

GRAM_RANK_TOL = 1e-10
CAUSTIC_TOL = 1e-8

# stencil quality codes
Q_BOUNDARY = 0
Q_CENTRAL2 = 1
Q_CENTRAL4 = 2


# --------------------------------------------------------------------------
# Hypersurfaces
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Hypersurface:
    """Parametric hypersurface: n coordinate maps in n-1 parameters over a
    rectangle, plus the orientation sign fixing the normal direction."""

    params: tuple
    maps: tuple            # n expressions in the parameters
    rect: tuple            # (n-1) pairs (lo, hi)
    orientation: int = 1

    def __post_init__(self):
        if self.orientation not in (-1, 1):
            raise ValueError("orientation must be +1 or -1")
        if len(self.rect) != len(self.params):
            raise ValueError("rectangle must list one interval per "
                             "parameter")
        for m in self.maps:
            extra = m.variables - set(self.params)
            if extra:
                raise ValueError(f"surface map uses undeclared variables "
                                 f"{sorted(extra)}")

    @property
    def n(self):
        return len(self.maps)

    def _env(self, U: np.ndarray) -> dict:
        return {p: U[..., i] for i, p in enumerate(self.params)}

    def points(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=float)
        env = self._env(U)
        out = np.empty(U.shape[:-1] + (self.n,))
        for i, m in enumerate(self.maps):
            out[..., i] = m(env)
        return out

    def frame(self, U) -> np.ndarray:
        """Exact coordinate tangent vectors tau[..., k, i] = dx^i/du^k."""
        from .expr import eval_dual
        U = np.asarray(U, dtype=float)
        env = self._env(U)
        k = len(self.params)
        out = np.empty(U.shape[:-1] + (k, self.n))
        for i, m in enumerate(self.maps):
            dv = eval_dual(m, env, first=self.params)
            for j, p in enumerate(self.params):
                out[..., j, i] = dv.derivatives[p]
        return out

    def lattice(self, shape: Sequence[int]) -> np.ndarray:
        """Regular parameter lattice of the given per-axis node counts."""
        axes = [np.linspace(lo, hi, cnt)
                for (lo, hi), cnt in zip(self.rect, shape)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack(grids, axis=-1)


def _check_rank(metric: Metric, xs, tau):
    g = metric.matrix(xs)
    gram = np.einsum("...ki,...ij,...lj->...kl", tau, g, tau)
    det = np.linalg.det(gram)
    if np.any(det <= GRAM_RANK_TOL):
        raise FrameRankError("tangent frame rank-deficient on the sampled "
                             "parameter set")
    return gram


def unit_normal(metric: Metric, surface: Hypersurface, U) -> np.ndarray:
    """g-unit normal over the parameter lattice, g-orthogonal to the frame,
    with the sign fixed by the surface orientation (continuity follows from
    the smooth full-rank frame)."""
    U = np.asarray(U, dtype=float)
    xs = surface.points(U)
    tau = surface.frame(U)
    _check_rank(metric, xs, tau)
    g = metric.matrix(xs)
    # rows of A span the g-orthogonal complement conditions: A = tau . g
    A = np.einsum("...ki,...ij->...kj", tau, g)
    _, _, vt = np.linalg.svd(A)
    d = vt[..., -1, :]
    norm = np.sqrt(np.einsum("...i,...ij,...j->...", d, g, d))
    d = d / norm[..., None]
    det = np.linalg.det(np.concatenate([tau, d[..., None, :]], axis=-2))
    sign = np.where(det * surface.orientation >= 0.0, 1.0, -1.0)
    return d * sign[..., None]


def solve_nu(gen: GeneratingFunction, metric: Metric, xs, w0: float,
             bracket=(1e-6, 20.0)) -> np.ndarray:
    """Initial-speed profile from the level equation W(x, nu) = W0 by a
    bracketed monotone solve (the inverse map is evaluated directly when
    the generating function stores it)."""
    xs = np.asarray(xs, dtype=float)
    if gen.form == "V":
        nu = np.asarray(gen.v_value(xs, np.full(xs.shape[:-1], w0)),
                        dtype=float)
        nu = np.broadcast_to(nu, xs.shape[:-1]).copy()
    else:
        def f(s):
            return gen.w_value(xs, s) - w0

        def df(s):
            return gen.w_derivs(xs, s)[1]

        lo, hi = bracket
        nu = solve_bracketed(f, np.full(xs.shape[:-1], float(lo)),
                             np.full(xs.shape[:-1], float(hi)), df=df)
        nu = np.asarray(nu, dtype=float)
    if np.any(nu <= 0.0):
        raise RootFindError("initial-speed solve produced a non-positive "
                            "root")
    return nu


# --------------------------------------------------------------------------
# Families
# --------------------------------------------------------------------------

@dataclass
class ShiftFamily:
    """Grid of trajectories realizing a shift (or blow-up), with everything
    needed for the orthogonality, level-constancy, and associated-metric
    checks."""

    kind: str                      # "surface" | "blowup"
    metric: Metric
    t: np.ndarray                  # (T,)
    U: np.ndarray                  # (*lat, n-1) parameter lattice
    spacing: tuple                 # per-axis lattice spacing
    x: np.ndarray                  # (T, *lat, n)
    v: np.ndarray                  # (T, *lat, n)
    valid: np.ndarray              # (T, *lat)
    reasons: np.ndarray            # (*lat,)
    nu: np.ndarray                 # (*lat,)
    gen: Optional[GeneratingFunction] = None
    w0: Optional[float] = None
    w0_trace: Optional[np.ndarray] = None   # (T,)
    t_skip: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def lattice_shape(self):
        return self.U.shape[:-1]

    def speeds(self) -> np.ndarray:
        return self.metric.speed(self.x, self.v)

    def t_mask(self) -> np.ndarray:
        return self.t >= self.t_skip - 1e-12


def build_shift(force: ForceField, metric: Metric, surface: Hypersurface,
                lattice_shape: Sequence[int], t_grid, nu0: float,
                p0_params: Sequence[float],
                gen: Optional[GeneratingFunction] = None,
                opts: IntegratorOptions | None = None,
                nu_bracket=(1e-6, 20.0)) -> ShiftFamily:
    """Shift of a hypersurface along trajectories of the force field.

    With a generating function the speed profile comes from the level
    equation anchored at nu(p0) = nu0; without one (user-supplied force) the
    profile is the constant nu0. The level constant is always derived from
    (p0, nu0), never supplied directly.
    """
    if nu0 <= 0:
        raise ValueError("nu0 must be positive")
    U = surface.lattice(lattice_shape)
    spacing = tuple((hi - lo) / (cnt - 1) if cnt > 1 else 0.0
                    for (lo, hi), cnt in zip(surface.rect, lattice_shape))
    xs = surface.points(U)
    normals = unit_normal(metric, surface, U)

    w0 = None
    w0_trace = None
    if gen is not None:
        p0 = surface.points(np.asarray(p0_params, dtype=float))
        w0 = float(gen.w_value(p0, float(nu0)))
        nu = solve_nu(gen, metric, xs, w0, bracket=nu_bracket)
        h_fn = (lambda w: np.asarray(gen.h(w), dtype=float))
        t_arr = np.asarray(t_grid, dtype=float)
        w0_trace = w0_evolve(h_fn, w0, t_arr)
    else:
        nu = np.full(xs.shape[:-1], float(nu0))

    v0 = nu[..., None] * normals
    fam = integrate_family(force, metric, xs, v0, t_grid, opts)
    return ShiftFamily("surface", metric, fam.t, U, spacing, fam.x, fam.v,
                       fam.valid, fam.reasons, nu, gen=gen, w0=w0,
                       w0_trace=w0_trace,
                       meta={"nu0": float(nu0), "surface": True})


def sphere_directions(U: np.ndarray, n: int) -> np.ndarray:
    """Euclidean unit vectors from hyperspherical angles u1..u_{n-1}:
    e = (cos u1, sin u1 cos u2, ..., sin u1 ... sin u_{n-1})."""
    U = np.asarray(U, dtype=float)
    out = np.empty(U.shape[:-1] + (n,))
    sin_prod = np.ones(U.shape[:-1])
    for i in range(n - 1):
        out[..., i] = sin_prod * np.cos(U[..., i])
        sin_prod = sin_prod * np.sin(U[..., i])
    out[..., n - 1] = sin_prod
    return out


def blowup(force: ForceField, metric: Metric, p0, nu0: float, t_grid,
           angle_rect: Sequence, lattice_shape: Sequence[int],
           gen: Optional[GeneratingFunction] = None,
           t_skip: float = 0.05,
           opts: IntegratorOptions | None = None) -> ShiftFamily:
    """Normal blow-up of a point: a fan of trajectories over a patch of the
    g-unit direction sphere at p0 with constant initial speed nu0. Frame
    estimates are skipped for t below ``t_skip`` (degenerate at the point).
    """
    if nu0 <= 0:
        raise ValueError("nu0 must be positive")
    p0 = np.asarray(p0, dtype=float)
    n = metric.n
    if n < 3:
        raise ValueError("blow-up requires dimension n >= 3")
    axes = [np.linspace(lo, hi, cnt)
            for (lo, hi), cnt in zip(angle_rect, lattice_shape)]
    grids = np.meshgrid(*axes, indexing="ij")
    U = np.stack(grids, axis=-1)
    spacing = tuple((hi - lo) / (cnt - 1) if cnt > 1 else 0.0
                    for (lo, hi), cnt in zip(angle_rect, lattice_shape))

    e = sphere_directions(U, n)
    g0 = metric.matrix(p0)
    norms = np.sqrt(np.einsum("...i,ij,...j->...", e, g0, e))
    dirs = e / norms[..., None]

    w0 = None
    w0_trace = None
    if gen is not None:
        w0 = float(gen.w_value(p0, float(nu0)))
        h_fn = (lambda w: np.asarray(gen.h(w), dtype=float))
        w0_trace = w0_evolve(h_fn, w0, np.asarray(t_grid, dtype=float))

    xs = np.broadcast_to(p0, dirs.shape).copy()
    v0 = float(nu0) * dirs
    fam = integrate_family(force, metric, xs, v0, t_grid, opts)
    nu = np.full(dirs.shape[:-1], float(nu0))
    return ShiftFamily("blowup", metric, fam.t, U, spacing, fam.x, fam.v,
                       fam.valid, fam.reasons, nu, gen=gen, w0=w0,
                       w0_trace=w0_trace, t_skip=t_skip,
                       meta={"nu0": float(nu0), "p0": p0.tolist()})


# --------------------------------------------------------------------------
# Lattice derivatives and deviation functions
# --------------------------------------------------------------------------

def _lattice_derivative(arr: np.ndarray, axis: int, spacing: float):
    """Per-node derivative of sampled data along a lattice axis.

    Wide-interior nodes get the fourth-order central stencil, the remaining
    interior nodes second-order central, and edges one-sided second-order.
    Returns (derivative, quality) with quality the per-node stencil code
    along that axis.
    """
    if spacing == 0.0 or arr.shape[axis] < 3:
        raise ValueError("lattice too small for derivatives along axis")
    arr = np.moveaxis(arr, axis, 0)
    m = arr.shape[0]
    out = np.empty_like(arr)
    quality = np.zeros(m, dtype=np.int8)
    d = spacing
    out[0] = (-3.0 * arr[0] + 4.0 * arr[1] - arr[2]) / (2.0 * d)
    out[-1] = (3.0 * arr[-1] - 4.0 * arr[-2] + arr[-3]) / (2.0 * d)
    out[1:-1] = (arr[2:] - arr[:-2]) / (2.0 * d)
    quality[1:-1] = Q_CENTRAL2
    if m >= 5:
        out[2:-2] = (arr[:-4] - 8.0 * arr[1:-3] + 8.0 * arr[3:-1]
                     - arr[4:]) / (12.0 * d)
        quality[2:-2] = Q_CENTRAL4
    return np.moveaxis(out, 0, axis), quality


@dataclass
class DeviationResult:
    """Deviation functions over the family grid.

    ``phi[t, *lat, k]`` is the inner product of the k-th estimated tangent
    vector with the velocity; ``normalized`` divides by frame norm times
    speed. ``quality[*lat, k]`` is the worst stencil code entering a node's
    k-th frame vector; verdicts should restrict to ``quality == 2`` (or
    ``>= 1`` on small lattices). ``gram_min[t]`` tracks frame degeneracy for
    caustic detection; ``caustic_index`` is the first t index past it.
    """

    phi: np.ndarray
    normalized: np.ndarray
    quality: np.ndarray
    valid: np.ndarray
    gram_min: np.ndarray
    caustic_index: Optional[int]

    def verdict_mask(self, t_mask=None):
        """Mask (T, *lat, k) of entries eligible for a verdict: best
        available stencil, valid members, pre-caustic times."""
        best = int(np.max(self.quality))
        mask = (self.quality == best) & self.valid[..., None]
        if t_mask is not None:
            shape = (len(t_mask),) + (1,) * (mask.ndim - 1)
            mask = mask & np.asarray(t_mask).reshape(shape)
        if self.caustic_index is not None:
            mask[self.caustic_index:] = False
        return mask

    def max_normalized(self, t_mask=None) -> float:
        mask = self.verdict_mask(t_mask)
        if not np.any(mask):
            return float("nan")
        return float(np.max(np.abs(self.normalized[mask])))


def deviation(family: ShiftFamily) -> DeviationResult:
    """Deviation functions phi_k over the whole family grid, with tangent
    frames estimated from the trajectory lattice."""
    metric = family.metric
    x = family.x                      # (T, *lat, n)
    v = family.v
    lat = family.lattice_shape
    k_axes = len(lat)
    n = metric.n
    T = x.shape[0]

    g = metric.matrix(x, check=False)
    speeds = np.sqrt(np.einsum("...ij,...i,...j->...", g, v, v))

    phi = np.empty((T,) + lat + (k_axes,))
    normalized = np.empty_like(phi)
    quality = np.zeros(lat + (k_axes,), dtype=np.int8)
    tau_store = np.empty((T,) + lat + (k_axes, n))
    for k in range(k_axes):
        tau, q = _lattice_derivative(x, axis=1 + k, spacing=family.spacing[k])
        tau_store[..., k, :] = tau
        shape = [1] * len(lat)
        shape[k] = lat[k]
        quality[..., k] = np.broadcast_to(q.reshape(shape), lat)
        p = np.einsum("...ij,...i,...j->...", g, tau, v)
        tnorm = np.sqrt(np.einsum("...ij,...i,...j->...", g, tau, tau))
        phi[..., k] = p
        with np.errstate(invalid="ignore", divide="ignore"):
            normalized[..., k] = p / (tnorm * speeds)

    # member validity must hold on the whole stencil: erode along each axis
    valid = family.valid.copy()
    for k in range(k_axes):
        v_ax = np.moveaxis(valid, 1 + k, 0)
        eroded = v_ax.copy()
        eroded[1:-1] &= v_ax[2:] & v_ax[:-2]
        if v_ax.shape[0] >= 5:
            eroded[2:-2] &= v_ax[4:] & v_ax[:-4]
        eroded[0] &= v_ax[1] & v_ax[2]
        eroded[-1] &= v_ax[-2] & v_ax[-3]
        valid = np.moveaxis(eroded, 0, 1 + k)

    gram = np.einsum("...ij,...ki,...lj->...kl", g, tau_store, tau_store)
    det = np.linalg.det(gram)
    det_masked = np.where(valid, det, np.inf)
    gram_min = np.min(det_masked.reshape(T, -1), axis=1)
    t_skip_mask = family.t >= family.t_skip - 1e-12
    caustic_index = None
    bad_t = np.nonzero((gram_min < CAUSTIC_TOL) & t_skip_mask)[0]
    if len(bad_t):
        caustic_index = int(bad_t[0])
    return DeviationResult(phi, normalized, quality, valid, gram_min,
                           caustic_index)


def normality_certificate(family: ShiftFamily) -> dict:
    """Normalized-orthogonality certificate for the family: the maximum of
    |phi_k| / (frame norm * speed) over verdict-eligible grid entries and
    times (after the skip window, before any caustic)."""
    dev = deviation(family)
    t_mask = family.t_mask()
    max_norm = dev.max_normalized(t_mask=t_mask)
    return {
        "max_normalized_deviation": max_norm,
        "caustic_index": dev.caustic_index,
        "caustic_t": (None if dev.caustic_index is None
                      else float(family.t[dev.caustic_index])),
        "members_failed": int(np.sum(family.reasons != "completed")),
    }


def initial_deviation_rate(force: ForceField, metric: Metric,
                           surface: Hypersurface, U: np.ndarray,
                           nu: np.ndarray, spacing: Sequence[float]):
    """Initial rate of the deviation functions: nu dnu/du^k plus the frame
    pairing with the force at the launch states. Returns (rate, quality)."""
    U = np.asarray(U, dtype=float)
    xs = surface.points(U)
    tau = surface.frame(U)
    normals = unit_normal(metric, surface, U)
    v0 = np.asarray(nu)[..., None] * normals
    F = np.asarray(force(xs, v0), dtype=float)
    k_axes = len(surface.params)
    out = np.empty(nu.shape + (k_axes,))
    quality = np.zeros(nu.shape + (k_axes,), dtype=np.int8)
    for k in range(k_axes):
        dnu, q = _lattice_derivative(np.asarray(nu), axis=k,
                                     spacing=spacing[k])
        shape = [1] * len(nu.shape)
        shape[k] = nu.shape[k]
        quality[..., k] = np.broadcast_to(q.reshape(shape), nu.shape)
        out[..., k] = nu * dnu + np.einsum("...i,...i->...",
                                           tau[..., k, :], F)
    return out, quality


# --------------------------------------------------------------------------
# Level constancy and associated-coordinate checks
# --------------------------------------------------------------------------

def w_constancy(family: ShiftFamily) -> dict:
    """Per-time statistics of the level function over the family: the
    spread across the lattice and the drift of the mean against the
    transported constant."""
    if family.gen is None:
        raise ValueError("family was built without a generating function")
    speeds = family.speeds()
    T = len(family.t)
    spread = np.empty(T)
    mean = np.empty(T)
    for j in range(T):
        ok = family.valid[j]
        w = np.asarray(family.gen.w_value(family.x[j][ok], speeds[j][ok]))
        spread[j] = float(np.max(w) - np.min(w)) if w.size else np.nan
        mean[j] = float(np.mean(w)) if w.size else np.nan
    drift = (np.abs(mean - family.w0_trace)
             if family.w0_trace is not None else None)
    return {
        "spread": spread,
        "mean": mean,
        "w0_trace": family.w0_trace,
        "max_spread": float(np.nanmax(spread)),
        "max_drift": float(np.nanmax(drift)) if drift is not None else None,
    }


def gnn_check(family: ShiftFamily) -> dict:
    """Associated-coordinate check: along every trajectory the speed must
    equal the inverse map evaluated at the transported level constant (the
    metric's shift-direction diagonal entry is its square), and the frame
    pairings with the velocity are the off-diagonal entries (same data as
    the deviation functions)."""
    if family.gen is None or family.w0_trace is None:
        raise ValueError("family was built without a generating function")
    speeds = family.speeds()
    T = len(family.t)
    resid = np.zeros(T)
    for j in range(T):
        ok = family.valid[j]
        if not np.any(ok):
            resid[j] = np.nan
            continue
        target = family.gen.v_value(family.x[j][ok],
                                    np.full(int(np.sum(ok)),
                                            family.w0_trace[j]))
        resid[j] = float(np.max(np.abs(speeds[j][ok] - target)))
    dev = deviation(family)
    off_diag = dev.max_normalized(t_mask=family.t_mask())
    return {
        "speed_vs_inverse_map": resid,
        "max_residual": float(np.nanmax(resid)),
        "max_offdiagonal": off_diag,
    }
