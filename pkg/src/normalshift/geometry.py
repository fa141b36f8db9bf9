"""Riemannian metric evaluation and the extended-field calculus.

Chart points and velocities are numpy arrays of shape ``(..., n)``; every
operation broadcasts over leading axes, so a whole lattice of points can be
processed in one call. Connection coefficients are returned as arrays
``Gamma[..., k, i, j]`` = Gamma^k_ij (symmetric in i, j).

Fields on the tangent bundle come in two declarations:

* extended fields take full velocity components ``(x, v)``;
* fiberwise spherically symmetric fields take ``(x, s)`` with s the speed
  (modulus of velocity) and are independent of direction.

Two covariant derivatives act on them: the spatial gradient (with the
velocity-correction term for extended fields, without it for spherically
symmetric ones) and the velocity gradient (plain v-partials). Derivatives of
opaque fields use central finite differences with step
``max(1, |coordinate|) * eps**(1/3)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import MetricError, SpeedFloorError
from .expr import Expr, eval_dual, parse

__all__ = [
    "V_MIN_DEFAULT",
    "Metric",
    "ExtendedScalarField",
    "SphericalScalarField",
    "ExtendedCovectorField",
    "SphericalCovectorField",
    "velocity_gradient",
    "spatial_gradient",
    "fd_partial_x",
    "fd_partial_v",
    "fd_partial_scalar",
]

#: Speed floor below which unit direction / projector are undefined.
V_MIN_DEFAULT = 1e-8

_CBRT_EPS = float(np.cbrt(np.finfo(float).eps))


def coord_names(n: int) -> list:
    return [f"x{i + 1}" for i in range(n)]


# --------------------------------------------------------------------------
# Metric
# --------------------------------------------------------------------------

class Metric:
    """Analytic Riemannian metric g_ij(x) on a single chart.

    ``entries[i][j]`` is an Expr in x1..xn; the grid must be symmetric.
    Positive-definiteness is checked lazily at each evaluated point via
    Cholesky factorization. Instances are immutable after construction and
    safe for concurrent use.
    """

    def __init__(self, n: int, entries=None, kind: str = "general"):
        if n < 2:
            raise ValueError("metric needs dimension n >= 2")
        self.n = n
        self.kind = kind
        self._names = coord_names(n)
        if entries is None:
            if kind != "flat":
                raise ValueError("non-flat metric requires entries")
            self.entries = None
        else:
            if len(entries) != n or any(len(row) != n for row in entries):
                raise ValueError(f"entries must form an {n}x{n} grid")
            for i in range(n):
                for j in range(i):
                    if entries[i][j].root != entries[j][i].root:
                        raise ValueError(f"entries not symmetric at ({i},{j})")
            self.entries = tuple(tuple(row) for row in entries)

    # -- constructors ------------------------------------------------------

    @classmethod
    def flat(cls, n: int) -> "Metric":
        return cls(n, None, kind="flat")

    @classmethod
    def conformally_flat(cls, f: Expr, n: int) -> "Metric":
        """Metric exp(-2 f(x)) * delta_ij built as explicit entry ASTs."""
        factor = parse(f"exp(-2 * ({f.source}))", variables=coord_names(n))
        zero = parse("0")
        entries = [[factor if i == j else zero for j in range(n)]
                   for i in range(n)]
        return cls(n, entries, kind="conformal")

    @classmethod
    def from_strings(cls, rows: Sequence[Sequence[str]], kind="general") -> "Metric":
        n = len(rows)
        names = coord_names(n)
        entries = [[parse(s, variables=names) for s in row] for row in rows]
        return cls(n, entries, kind=kind)

    # -- evaluation --------------------------------------------------------

    def _bindings(self, x: np.ndarray) -> dict:
        return {name: x[..., i] for i, name in enumerate(self._names)}

    def matrix(self, x: np.ndarray, check: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.entries is None:
            eye = np.eye(self.n)
            return np.broadcast_to(eye, x.shape[:-1] + (self.n, self.n)).copy()
        env = self._bindings(x)
        g = np.empty(x.shape[:-1] + (self.n, self.n))
        for i in range(self.n):
            for j in range(i, self.n):
                val = self.entries[i][j](env)
                g[..., i, j] = val
                g[..., j, i] = val
        if check:
            self._assert_positive_definite(g)
        return g

    def _assert_positive_definite(self, g: np.ndarray):
        try:
            np.linalg.cholesky(g)
        except np.linalg.LinAlgError:
            raise MetricError("metric not positive-definite at an "
                              "evaluation point") from None

    def inverse(self, x: np.ndarray, g: np.ndarray | None = None) -> np.ndarray:
        if g is None:
            g = self.matrix(x)
        return np.linalg.inv(g)

    def matrix_with_partials(self, x: np.ndarray):
        """(g, dg) with dg[..., m, i, j] = d g_ij / d x^m (exact)."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        if self.entries is None:
            g = np.broadcast_to(np.eye(self.n), shape + (self.n, self.n)).copy()
            return g, np.zeros(shape + (self.n, self.n, self.n))
        env = self._bindings(x)
        g = np.empty(shape + (self.n, self.n))
        dg = np.empty(shape + (self.n, self.n, self.n))
        for i in range(self.n):
            for j in range(i, self.n):
                dv = eval_dual(self.entries[i][j], env, first=self._names)
                g[..., i, j] = g[..., j, i] = dv.value
                for m, name in enumerate(self._names):
                    dg[..., m, i, j] = dg[..., m, j, i] = dv.derivatives[name]
        self._assert_positive_definite(g)
        return g, dg

    def christoffel(self, x: np.ndarray) -> np.ndarray:
        """Metric-connection components Gamma[..., k, i, j] from the
        standard half-inverse-times-derivative-combination formula."""
        if self.entries is None:
            x = np.asarray(x, dtype=float)
            return np.zeros(x.shape[:-1] + (self.n,) * 3)
        g, dg = self.matrix_with_partials(x)
        ginv = np.linalg.inv(g)
        # comb[..., q, i, j] = d_i g_qj + d_j g_qi - d_q g_ij
        comb = (np.einsum("...iqj->...qij", dg)
                + np.einsum("...jqi->...qij", dg) - dg)
        return 0.5 * np.einsum("...kq,...qij->...kij", ginv, comb)

    # -- pointwise algebra -------------------------------------------------

    def speed(self, x: np.ndarray, v: np.ndarray,
              g: np.ndarray | None = None) -> np.ndarray:
        if g is None:
            g = self.matrix(x)
        v = np.asarray(v, dtype=float)
        return np.sqrt(np.einsum("...ij,...i,...j->...", g, v, v))

    def lower(self, x: np.ndarray, vec: np.ndarray,
              g: np.ndarray | None = None) -> np.ndarray:
        if g is None:
            g = self.matrix(x)
        return np.einsum("...ij,...j->...i", g, vec)

    def raise_(self, x: np.ndarray, cov: np.ndarray,
               g: np.ndarray | None = None) -> np.ndarray:
        ginv = np.linalg.inv(g if g is not None else self.matrix(x))
        return np.einsum("...ij,...j->...i", ginv, cov)

    def unit_direction(self, x: np.ndarray, v: np.ndarray,
                       g: np.ndarray | None = None,
                       v_min: float = V_MIN_DEFAULT) -> np.ndarray:
        """Unit vector along the velocity (contravariant components)."""
        if g is None:
            g = self.matrix(x)
        s = self.speed(x, v, g=g)
        if np.any(s <= v_min):
            raise SpeedFloorError(f"speed {np.min(s):g} at or below the floor "
                                  f"{v_min:g}; unit direction undefined")
        return np.asarray(v, dtype=float) / s[..., None]

    def projector(self, x: np.ndarray, v: np.ndarray,
                  g: np.ndarray | None = None,
                  v_min: float = V_MIN_DEFAULT) -> np.ndarray:
        """Orthogonal projector P[..., i, j] = P^i_j onto the hyperplane
        g-perpendicular to the velocity."""
        if g is None:
            g = self.matrix(x)
        N = self.unit_direction(x, v, g=g, v_min=v_min)
        N_cov = np.einsum("...ij,...j->...i", g, N)
        eye = np.eye(self.n)
        return eye - N[..., :, None] * N_cov[..., None, :]


# --------------------------------------------------------------------------
# Extended / spherically symmetric field declarations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtendedScalarField:
    """Scalar on the tangent bundle; ``fn(x, v) -> (...)``."""
    fn: Callable

    def __call__(self, x, v):
        return self.fn(x, v)


@dataclass(frozen=True)
class SphericalScalarField:
    """Fiberwise spherically symmetric scalar; ``fn(x, s) -> (...)`` with s
    the speed."""
    fn: Callable

    def __call__(self, x, s):
        return self.fn(x, s)

    @classmethod
    def from_expr(cls, expr: Expr, n: int, speed_var: str = "v"):
        names = coord_names(n)

        def fn(x, s):
            env = {name: x[..., i] for i, name in enumerate(names)}
            env[speed_var] = s
            return expr(env)

        return cls(fn)


@dataclass(frozen=True)
class ExtendedCovectorField:
    """Covector on the tangent bundle; ``fn(x, v) -> (..., n)``."""
    fn: Callable

    def __call__(self, x, v):
        return self.fn(x, v)


@dataclass(frozen=True)
class SphericalCovectorField:
    """Fiberwise spherically symmetric covector; ``fn(x, s) -> (..., n)``."""
    fn: Callable

    def __call__(self, x, s):
        return self.fn(x, s)


def _as_extended(field, metric):
    """View any declaration as a function of (x, v-components)."""
    if isinstance(field, (ExtendedScalarField, ExtendedCovectorField)):
        return field
    if isinstance(field, SphericalScalarField):
        return ExtendedScalarField(lambda x, v: field(x, metric.speed(x, v)))
    if isinstance(field, SphericalCovectorField):
        return ExtendedCovectorField(lambda x, v: field(x, metric.speed(x, v)))
    raise TypeError(f"not a field declaration: {field!r}")


# --------------------------------------------------------------------------
# Finite differences (central; step = max(1,|c|) * eps^(1/3))
# --------------------------------------------------------------------------

def _steps(values: np.ndarray) -> np.ndarray:
    return _CBRT_EPS * np.maximum(1.0, np.abs(values))


def _expand_span(span, numerator):
    span = np.asarray(span)
    extra = numerator.ndim - span.ndim
    return span.reshape(span.shape + (1,) * extra) if extra > 0 else span


def fd_partial_x(fn: Callable, x: np.ndarray, v, m: int,
                 richardson: bool = False):
    """Central difference of ``fn(x, v)`` in chart coordinate m."""

    def diff(scale):
        h = _steps(x[..., m]) * scale
        xp = x.copy()
        xm = x.copy()
        xp[..., m] = x[..., m] + h
        xm[..., m] = x[..., m] - h
        num = np.asarray(fn(xp, v)) - np.asarray(fn(xm, v))
        return num / _expand_span(xp[..., m] - xm[..., m], num)

    if not richardson:
        return diff(1.0)
    d1, d2 = diff(1.0), diff(0.5)
    return (4.0 * d2 - d1) / 3.0


def fd_partial_v(fn: Callable, x, v: np.ndarray, m: int,
                 richardson: bool = False):
    """Central difference of ``fn(x, v)`` in velocity component m."""

    def diff(scale):
        h = _steps(v[..., m]) * scale
        vp = v.copy()
        vm = v.copy()
        vp[..., m] = v[..., m] + h
        vm[..., m] = v[..., m] - h
        num = np.asarray(fn(x, vp)) - np.asarray(fn(x, vm))
        return num / _expand_span(vp[..., m] - vm[..., m], num)

    if not richardson:
        return diff(1.0)
    d1, d2 = diff(1.0), diff(0.5)
    return (4.0 * d2 - d1) / 3.0


def fd_partial_scalar(fn: Callable, x, s, richardson: bool = False):
    """Central difference of ``fn(x, s)`` in the scalar argument s."""
    s = np.asarray(s, dtype=float)

    def diff(scale):
        h = _steps(s) * scale
        sp, sm = s + h, s - h
        num = np.asarray(fn(x, sp)) - np.asarray(fn(x, sm))
        return num / _expand_span(sp - sm, num)

    if not richardson:
        return diff(1.0)
    d1, d2 = diff(1.0), diff(0.5)
    return (4.0 * d2 - d1) / 3.0


# --------------------------------------------------------------------------
# Gradients on extended fields
# --------------------------------------------------------------------------

def velocity_gradient(field, metric: Metric, x: np.ndarray, v: np.ndarray):
    """Velocity gradient: plain partials in the velocity components.

    Scalars return ``(..., m)``; covectors return ``(..., m, k)`` with m the
    new covariant index. For spherically symmetric fields the chain rule
    through the speed is applied: d/dv^m = (d/ds) * N_m.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n = metric.n
    if isinstance(field, (SphericalScalarField, SphericalCovectorField)):
        g = metric.matrix(x)
        s = metric.speed(x, v, g=g)
        N_cov = np.einsum("...ij,...j->...i", g, v) / s[..., None]
        ds = fd_partial_scalar(field.fn, x, s)
        if isinstance(field, SphericalScalarField):
            return ds[..., None] * N_cov
        # covector: out[..., m, k] = N_m * d b_k / ds
        return N_cov[..., :, None] * ds[..., None, :]
    ext = _as_extended(field, metric)
    val = np.asarray(ext(x, v))
    scalar = val.ndim == x.ndim - 1
    if scalar:
        out = np.empty(val.shape + (n,))
        for m in range(n):
            out[..., m] = fd_partial_v(ext.fn, x, v, m)
        return out
    out = np.empty(val.shape[:-1] + (n, n))
    for m in range(n):
        out[..., m, :] = fd_partial_v(ext.fn, x, v, m)
    return out


def spatial_gradient(field, metric: Metric, x: np.ndarray, v_or_s,
                     mode: str = "full", richardson: bool = False):
    """Spatial gradient of an extended field.

    ``mode="full"`` applies the velocity-corrected covariant derivative (the
    correction couples x-partials with v-partials through the connection);
    extended and spherically symmetric declarations are both accepted, the
    latter viewed through the speed, and the second argument is the velocity.
    ``mode="spherical"`` applies the reduced derivative valid for spherically
    symmetric fields (x-partials at fixed speed, connection terms on tensor
    indices only) and requires a spherical declaration; the second argument
    is then the speed s.

    Scalars return ``(..., m)``; covectors ``(..., m, k)``.
    """
    x = np.asarray(x, dtype=float)
    n = metric.n
    if mode == "spherical":
        if not isinstance(field, (SphericalScalarField, SphericalCovectorField)):
            raise TypeError("spherical-mode spatial gradient requires a "
                            "fiberwise spherically symmetric field")
        s = np.asarray(v_or_s, dtype=float)
        if isinstance(field, SphericalScalarField):
            val = np.asarray(field(x, s))
            out = np.empty(val.shape + (n,))
            for m in range(n):
                out[..., m] = fd_partial_x(field.fn, x, s, m, richardson)
            return out
        val = np.asarray(field(x, s))
        gamma = metric.christoffel(x)
        out = np.empty(val.shape[:-1] + (n, n))
        for m in range(n):
            out[..., m, :] = fd_partial_x(field.fn, x, s, m, richardson)
        # connection term on the covariant index: - Gamma^b_mk b_b
        out -= np.einsum("...bmk,...b->...mk", gamma, val)
        return out
    if mode != "full":
        raise ValueError(f"unknown spatial-gradient mode {mode!r}")

    v = np.asarray(v_or_s, dtype=float)
    ext = _as_extended(field, metric)
    gamma = metric.christoffel(x)
    val = np.asarray(ext(x, v))
    scalar = val.ndim == x.ndim - 1

    dv = velocity_gradient(ext, metric, x, v)  # (..., b) or (..., b, k)
    if scalar:
        out = np.empty(val.shape + (n,))
        for m in range(n):
            out[..., m] = fd_partial_x(ext.fn, x, v, m, richardson)
        # velocity correction: - v^a Gamma^b_ma dX/dv^b
        corr = np.einsum("...a,...bma,...b->...m", v, gamma, dv)
        return out - corr
    out = np.empty(val.shape[:-1] + (n, n))
    for m in range(n):
        out[..., m, :] = fd_partial_x(ext.fn, x, v, m, richardson)
    corr = np.einsum("...a,...bma,...bk->...mk", v, gamma, dv)
    conn = np.einsum("...bmk,...b->...mk", gamma, val)
    return out - corr - conn
