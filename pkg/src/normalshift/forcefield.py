"""Force fields admitting the normal shift: construction and verification.

In dimension n >= 3 every admissible force field comes from a single
fiberwise spherically symmetric generating function together with one free
function of one variable. The generating function can be declared in two
mutually inverse forms: W(x, v) directly, or V(x, w) inverted numerically on
a declared bracket. Canonical evaluation goes through W and its first
partials; for the V form those partials come from the implicit-function
relations (reciprocal and quotient of the V partials), so one code path
serves both forms.

This module also evaluates the weak and additional normality equations as
numerical residuals for *arbitrary* force fields (the admissibility
criterion), the reduced normality equations for spherically symmetric
coefficient fields, the scalar-ansatz decomposition, gauge transformations,
and the conformal-flow force field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (DegenerateGeneratorError, RootFindError, SpeedFloorError)
from .expr import Expr, eval_dual
from .geometry import (Metric, SphericalCovectorField, SphericalScalarField,
                       V_MIN_DEFAULT, coord_names, fd_partial_scalar,
                       fd_partial_v, fd_partial_x, spatial_gradient)
from .rootfind import solve_bracketed

__all__ = [
    "GeneratingFunction",
    "WFormGenerating",
    "VFormGenerating",
    "ForceField",
    "ScalarAnsatz",
    "NormalityReport",
    "dual_convert",
    "build_force",
    "gauge_transform",
    "scalar_ansatz",
    "conformal_force",
    "weak_normality_residual",
    "additional_normality_residual",
    "reduced_residuals",
    "check_normality",
]

WV_THRESHOLD = 1e-10  # construction refuses below this derivative magnitude


# --------------------------------------------------------------------------
# Generating functions
# --------------------------------------------------------------------------

class GeneratingFunction:
    """Common interface: W-values and W-partials in natural variables
    (x, speed), the inverse map V, and the one-variable factor h."""

    form = "?"
    n = 0

    def h(self, w):
        raise NotImplementedError

    def w_value(self, x, s):
        raise NotImplementedError

    def w_derivs(self, x, s):
        """Return (w, dW/dv, dW/dx as (..., n)) at fixed speed arguments."""
        raise NotImplementedError

    def v_value(self, x, w):
        raise NotImplementedError

    def a_field(self) -> SphericalScalarField:
        """The speed-direction coefficient h(W)/W_v as a spherical scalar."""
        def fn(x, s):
            w, Wv, _ = self.w_derivs(x, s)
            return self.h(w) / Wv
        return SphericalScalarField(fn)

    def b_field(self) -> SphericalCovectorField:
        """The covector coefficient -grad_x W / W_v as a spherical field."""
        def fn(x, s):
            _, Wv, Wx = self.w_derivs(x, s)
            return -Wx / Wv[..., None]
        return SphericalCovectorField(fn)


def _h_expr_eval(h_expr: Optional[Expr], w):
    if h_expr is None:
        return np.zeros_like(np.asarray(w, dtype=float))
    return np.asarray(h_expr({"w": w}), dtype=float)


class WFormGenerating(GeneratingFunction):
    """Generating function given directly as W(x1..xn, v)."""

    form = "W"

    def __init__(self, w_expr: Expr, h_expr: Optional[Expr], n: int,
                 v_bracket=(1e-6, 20.0), wv_threshold: float = WV_THRESHOLD):
        allowed = set(coord_names(n)) | {"v"}
        extra = w_expr.variables - allowed
        if extra:
            raise ValueError(f"W uses undeclared variables {sorted(extra)}")
        if "v" not in w_expr.variables:
            raise ValueError("W must depend on the speed variable v")
        self.n = n
        self.w_expr = w_expr
        self.h_expr = h_expr
        self.v_bracket = tuple(v_bracket)
        self.wv_threshold = wv_threshold
        self._names = coord_names(n)

    def _env(self, x, s):
        env = {name: np.asarray(x, float)[..., i]
               for i, name in enumerate(self._names)}
        env["v"] = np.asarray(s, dtype=float)
        return env

    def h(self, w):
        return _h_expr_eval(self.h_expr, w)

    def w_value(self, x, s):
        return np.asarray(self.w_expr(self._env(x, s)), dtype=float)

    def w_derivs(self, x, s):
        dv = eval_dual(self.w_expr, self._env(x, s),
                       first=["v"] + self._names)
        w = np.asarray(dv.value, dtype=float)
        Wv = np.asarray(dv.derivatives["v"], dtype=float)
        Wv = np.broadcast_to(Wv, w.shape)
        if np.any(np.abs(Wv) < self.wv_threshold):
            raise DegenerateGeneratorError(
                "dW/dv below threshold; generating function degenerate")
        Wx = np.stack([np.broadcast_to(
            np.asarray(dv.derivatives[name], dtype=float), w.shape)
            for name in self._names], axis=-1)
        return w, Wv, Wx

    def v_value(self, x, w):
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)

        def f(s):
            return self.w_value(x, s) - w

        def df(s):
            return eval_dual(self.w_expr, self._env(x, s),
                             first=["v"]).derivatives["v"]

        lo, hi = self.v_bracket
        return solve_bracketed(f, lo, hi, df=df)


class VFormGenerating(GeneratingFunction):
    """Generating function given as the inverse map V(x1..xn, w); W-values
    come from a monotone bracketed solve, W-partials from the inversion
    identities (reciprocal / negative quotient of the V partials)."""

    form = "V"

    def __init__(self, v_expr: Expr, h_expr: Optional[Expr], n: int,
                 w_bracket=(-10.0, 10.0), wv_threshold: float = WV_THRESHOLD):
        allowed = set(coord_names(n)) | {"w"}
        extra = v_expr.variables - allowed
        if extra:
            raise ValueError(f"V uses undeclared variables {sorted(extra)}")
        if "w" not in v_expr.variables:
            raise ValueError("V must depend on the parameter variable w")
        self.n = n
        self.v_expr = v_expr
        self.h_expr = h_expr
        self.w_bracket = tuple(w_bracket)
        self.wv_threshold = wv_threshold
        self._names = coord_names(n)

    def _env(self, x, w):
        env = {name: np.asarray(x, float)[..., i]
               for i, name in enumerate(self._names)}
        env["w"] = np.asarray(w, dtype=float)
        return env

    def h(self, w):
        return _h_expr_eval(self.h_expr, w)

    def v_value(self, x, w):
        return np.asarray(self.v_expr(self._env(x, w)), dtype=float)

    def w_value(self, x, s):
        x = np.asarray(x, dtype=float)
        s = np.asarray(s, dtype=float)

        def f(w):
            return self.v_value(x, w) - s

        def df(w):
            return eval_dual(self.v_expr, self._env(x, w),
                             first=["w"]).derivatives["w"]

        lo, hi = self.w_bracket
        return solve_bracketed(f, lo, hi, df=df)

    def w_derivs(self, x, s):
        w = self.w_value(x, s)
        dv = eval_dual(self.v_expr, self._env(x, w),
                       first=["w"] + self._names)
        Vw = np.broadcast_to(np.asarray(dv.derivatives["w"], float), w.shape)
        if np.any(np.abs(Vw) < self.wv_threshold):
            raise DegenerateGeneratorError(
                "dV/dw below threshold; generating function degenerate")
        Wv = 1.0 / Vw
        Vx = np.stack([np.broadcast_to(
            np.asarray(dv.derivatives[name], float), w.shape)
            for name in self._names], axis=-1)
        Wx = -Vx / Vw[..., None]
        return w, Wv, Wx


class _GaugeTransformed(GeneratingFunction):
    """Reparameterized generating function: the level-set parameter is
    remapped by a strictly monotone rho, the one-variable factor picks up
    the rho' Jacobian, and the induced force field is unchanged."""

    form = "gauge"

    def __init__(self, base: GeneratingFunction, rho: Expr,
                 w_range=(-10.0, 10.0), check_points: int = 33):
        if rho.variables - {"w"}:
            raise ValueError("gauge map must be an expression in w only")
        self.base = base
        self.n = base.n
        self.rho = rho
        self.w_range = tuple(w_range)
        grid = np.linspace(w_range[0], w_range[1], check_points)
        dgrid = np.asarray(
            eval_dual(rho, {"w": grid}, first=["w"]).derivatives["w"])
        if np.any(dgrid > 0) and np.any(dgrid < 0) or np.any(dgrid == 0.0):
            raise RootFindError("gauge map not strictly monotone on the "
                                "working range")

    def _rho(self, w):
        return np.asarray(self.rho({"w": w}), dtype=float)

    def _rho_prime(self, w):
        return np.asarray(
            eval_dual(self.rho, {"w": w}, first=["w"]).derivatives["w"],
            dtype=float)

    def _rho_inverse(self, wt):
        lo, hi = self.w_range
        return solve_bracketed(lambda r: self._rho(r) - np.asarray(wt, float),
                               lo, hi, df=self._rho_prime)

    def h(self, wt):
        r = self._rho_inverse(wt)
        return self.base.h(r) * self._rho_prime(r)

    def w_value(self, x, s):
        return self._rho(self.base.w_value(x, s))

    def w_derivs(self, x, s):
        w, Wv, Wx = self.base.w_derivs(x, s)
        rp = self._rho_prime(w)
        return self._rho(w), rp * Wv, rp[..., None] * Wx

    def v_value(self, x, wt):
        return self.base.v_value(x, self._rho_inverse(wt))


def dual_convert(gen: GeneratingFunction, x, v=None, w=None):
    """Convert between the two generating-function arguments at a point:
    given the speed v return the level value w, given w return v. For the
    form that stores the other map this is a monotone bracketed solve with
    round-trip residual at solver tolerance."""
    if (v is None) == (w is None):
        raise ValueError("give exactly one of v or w")
    x = np.asarray(x, dtype=float)
    if v is not None:
        return gen.w_value(x, v)
    return gen.v_value(x, w)


def gauge_transform(gen: GeneratingFunction, rho: Expr,
                    w_range=(-10.0, 10.0)) -> GeneratingFunction:
    """Apply the gauge reparameterization with monotone map rho. Identity
    maps return the original object."""
    from .expr import Var
    if rho.root == Var("w"):
        return gen
    return _GaugeTransformed(gen, rho, w_range=w_range)


# --------------------------------------------------------------------------
# Force fields
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ForceField:
    """Covariant force evaluator ``fn(x, v) -> F_k`` with provenance tag
    (generated | user-supplied | conformal | inherited)."""

    n: int
    fn: Callable
    provenance: str = "user-supplied"
    gen: Optional[GeneratingFunction] = None
    meta: dict = field(default_factory=dict)

    def __call__(self, x, v):
        return self.fn(np.asarray(x, dtype=float), np.asarray(v, dtype=float))


def zero_force(n: int) -> ForceField:
    return ForceField(n, lambda x, v: np.zeros_like(v), provenance="generated")


def build_force(gen: GeneratingFunction, metric: Metric,
                v_min: float = V_MIN_DEFAULT) -> ForceField:
    """Admissible force field from a generating function.

    Components: F_k = h(W) N_k / W_v - |v| * sum_i (grad_i W / W_v)
    (2 N^i N_k - delta^i_k), with the spatial gradient taken at fixed speed.
    Requires n >= 3 and a non-degenerate W_v along the evaluation set.
    """
    if metric.n < 3:
        raise ValueError("force construction requires dimension n >= 3")
    if gen.n != metric.n:
        raise ValueError("generating function and metric dimensions differ")

    def fn(x, v):
        g = metric.matrix(x)
        s = metric.speed(x, v, g=g)
        if np.any(s <= v_min):
            raise SpeedFloorError("speed at or below floor in force "
                                  "evaluation")
        w, Wv, Wx = gen.w_derivs(x, s)
        N = v / s[..., None]
        N_cov = np.einsum("...ij,...j->...i", g, N)
        h = gen.h(w)
        proj = np.einsum("...i,...i->...", Wx, N)
        bracket = 2.0 * proj[..., None] * N_cov - Wx
        return (h / Wv)[..., None] * N_cov - (s / Wv)[..., None] * bracket

    return ForceField(metric.n, fn, provenance="generated", gen=gen)


def conformal_force(f: Expr, H: Optional[Expr], metric: Metric,
                    v_min: float = V_MIN_DEFAULT) -> ForceField:
    """Force field of the conformally rescaled geodesic flow, optionally
    with the speed-forcing term H(s e^{-f}) e^f v_k / s (H an expression in
    the single variable s; None or zero omits the term)."""
    names = coord_names(metric.n)
    extra = f.variables - set(names)
    if extra:
        raise ValueError(f"conformal factor uses undeclared variables "
                         f"{sorted(extra)}")
    if H is not None and H.variables - {"s"}:
        raise ValueError("H must be an expression in the single variable s")

    def fn(x, v):
        g = metric.matrix(x)
        s = metric.speed(x, v, g=g)
        if np.any(s <= v_min):
            raise SpeedFloorError("speed at or below floor in force "
                                  "evaluation")
        env = {name: x[..., i] for i, name in enumerate(names)}
        dv = eval_dual(f, env, first=names)
        fval = np.asarray(dv.value, dtype=float)
        shape = np.broadcast(fval, s).shape
        grad = np.stack([np.broadcast_to(np.asarray(dv.derivatives[nm], float),
                                         shape) for nm in names], axis=-1)
        v_cov = np.einsum("...ij,...j->...i", g, v)
        pairing = np.einsum("...s,...s->...", grad, v)
        out = (-(s ** 2))[..., None] * grad + 2.0 * pairing[..., None] * v_cov
        if H is not None:
            ef = np.exp(fval)
            hval = np.asarray(H({"s": s / ef}), dtype=float)
            out = out + (hval * ef / s)[..., None] * v_cov
        return out

    prov = "conformal"
    return ForceField(metric.n, fn, provenance=prov,
                      meta={"f": f.source, "H": None if H is None else H.source})


# --------------------------------------------------------------------------
# Scalar ansatz
# --------------------------------------------------------------------------

@dataclass
class ScalarAnsatz:
    """Velocity-direction projection A of the force, and (for generated
    fields) its decomposition into the spherically symmetric pair (a, b)
    with A = a + sum_i b_i v^i."""

    A: np.ndarray
    a: Optional[np.ndarray]
    b: Optional[np.ndarray]
    affine_residual: Optional[np.ndarray]


def scalar_ansatz(force: ForceField, metric: Metric, x, v,
                  v_min: float = V_MIN_DEFAULT) -> ScalarAnsatz:
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    g = metric.matrix(x)
    s = metric.speed(x, v, g=g)
    if np.any(s <= v_min):
        raise SpeedFloorError("speed at or below floor in scalar ansatz")
    N = v / s[..., None]
    F = force(x, v)
    A = np.einsum("...k,...k->...", F, N)
    if force.gen is None:
        return ScalarAnsatz(A, None, None, None)
    w, Wv, Wx = force.gen.w_derivs(x, s)
    a = force.gen.h(w) / Wv
    b = -Wx / Wv[..., None]
    resid = np.abs(A - (a + np.einsum("...i,...i->...", b, v)))
    return ScalarAnsatz(A, a, b, resid)


# --------------------------------------------------------------------------
# Normality residuals
# --------------------------------------------------------------------------

_QRT_EPS = float(np.finfo(float).eps ** 0.25)


def _force_derivatives(force, metric: Metric, x, v):
    """Partials of the covariant force components: (F, dFdx, dFdv) with
    dFdx[..., m, k] = dF_k/dx^m etc., by central differences."""
    n = metric.n
    F = np.asarray(force(x, v), dtype=float)
    dFdx = np.empty(F.shape[:-1] + (n, n))
    dFdv = np.empty(F.shape[:-1] + (n, n))
    for m in range(n):
        dFdx[..., m, :] = fd_partial_x(force, x, v, m)
        dFdv[..., m, :] = fd_partial_v(force, x, v, m)
    return F, dFdx, dFdv


def _covariant_force_gradient(F, dFdx, dFdv, gamma, v):
    """Spatial covariant derivative of the covector force field:
    nabla_m F_k with the velocity-correction and connection terms."""
    corr = np.einsum("...a,...bma,...bk->...mk", v, gamma, dFdv)
    conn = np.einsum("...bmk,...b->...mk", gamma, F)
    return dFdx - corr - conn


def _projection_scalar(force, metric: Metric):
    """The extended scalar A(x, v): projection of the force onto the unit
    velocity direction."""

    def A(xq, vq):
        gq = metric.matrix(xq)
        sq = metric.speed(xq, vq, g=gq)
        Nq = vq / sq[..., None]
        return np.einsum("...j,...j->...", Nq, np.asarray(force(xq, vq)))

    return A


def _second_steps(values):
    # optimal truncation/rounding balance for second differences
    return _QRT_EPS * np.maximum(1.0, np.abs(values))


def _v_first(A, x, v, n):
    out = np.empty(v.shape[:-1] + (n,))
    for m in range(n):
        out[..., m] = fd_partial_v(A, x, v, m)
    return out


def _v_hessian(A, x, v, n):
    """Symmetric matrix of second v-partials of the scalar A by nested
    central differences."""
    out = np.empty(v.shape[:-1] + (n, n))
    A0 = np.asarray(A(x, v), dtype=float)
    for r in range(n):
        h = _second_steps(v[..., r])
        vp, vm = v.copy(), v.copy()
        vp[..., r] = v[..., r] + h
        vm[..., r] = v[..., r] - h
        span = 0.5 * (vp[..., r] - vm[..., r])
        out[..., r, r] = (np.asarray(A(x, vp)) - 2.0 * A0
                          + np.asarray(A(x, vm))) / span ** 2
    for r in range(n):
        hr = _second_steps(v[..., r])
        for q in range(r + 1, n):
            hq = _second_steps(v[..., q])
            vpp, vpm, vmp, vmm = v.copy(), v.copy(), v.copy(), v.copy()
            vpp[..., r] += hr; vpp[..., q] += hq
            vpm[..., r] += hr; vpm[..., q] -= hq
            vmp[..., r] -= hr; vmp[..., q] += hq
            vmm[..., r] -= hr; vmm[..., q] -= hq
            val = (np.asarray(A(x, vpp)) - np.asarray(A(x, vpm))
                   - np.asarray(A(x, vmp)) + np.asarray(A(x, vmm)))
            out[..., r, q] = out[..., q, r] = val / (4.0 * hr * hq)
    return out


def _xv_cross(A, x, v, n):
    """Mixed partials out[..., r, s] = d^2 A / dx^r dv^s."""
    out = np.empty(v.shape[:-1] + (n, n))
    for r in range(n):
        hr = _second_steps(x[..., r])
        for s_i in range(n):
            hs = _second_steps(v[..., s_i])
            xp, xm = x.copy(), x.copy()
            xp[..., r] += hr
            xm[..., r] -= hr
            vp, vm = v.copy(), v.copy()
            vp[..., s_i] += hs
            vm[..., s_i] -= hs
            val = (np.asarray(A(xp, vp)) - np.asarray(A(xp, vm))
                   - np.asarray(A(xm, vp)) + np.asarray(A(xm, vm)))
            out[..., r, s_i] = val / (4.0 * hr * hs)
    return out


def weak_normality_residual(force, metric: Metric, x, v,
                            v_min: float = V_MIN_DEFAULT) -> np.ndarray:
    """Both rows of the weak normality equations; returns the concatenated
    left-hand-side vectors, shape (..., 2n).

    Row one projects F/|v| plus the velocity gradient of the direction
    projection A onto the hyperplane normal to the velocity. Row two is the
    second-order condition on A (spatial gradient plus the quadratic
    velocity-Hessian couplings), the form every admissible field must
    annihilate. Second derivatives of A use nested central differences.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n = metric.n
    g = metric.matrix(x)
    ginv = np.linalg.inv(g)
    gamma = metric.christoffel(x)
    s = metric.speed(x, v, g=g)
    if np.any(s <= v_min):
        raise SpeedFloorError("speed at or below floor in residual "
                              "evaluation")
    N = v / s[..., None]
    N_cov = np.einsum("...ij,...j->...i", g, N)
    P = np.eye(n) - N[..., :, None] * N_cov[..., None, :]
    P_up = ginv - N[..., :, None] * N[..., None, :]

    F = np.asarray(force(x, v), dtype=float)
    A = _projection_scalar(force, metric)
    A0 = np.asarray(A(x, v), dtype=float)
    dA = _v_first(A, x, v, n)                    # tilde-nabla_s A
    row1 = np.einsum("...i,...ik->...k", F / s[..., None] + dA, P)

    hess = _v_hessian(A, x, v, n)                # tilde-nabla_r tilde-nabla_s A
    cross = _xv_cross(A, x, v, n)                # d^2 A / dx^r dv^s
    dAdx = np.empty_like(dA)
    for m in range(n):
        dAdx[..., m] = fd_partial_x(A, x, v, m)
    # full spatial gradient of the scalar A
    gradA = dAdx - np.einsum("...a,...bma,...b->...m", v, gamma, dA)
    # full spatial gradient of the covector tilde-nabla A
    grad_dA = (cross
               - np.einsum("...a,...bra,...bs->...rs", v, gamma, hess)
               - np.einsum("...brs,...b->...rs", gamma, dA))

    term2 = s[..., None] * np.einsum("...qr,...q,...rs->...s", P_up, dA, hess)
    term3 = -A0[..., None] * np.einsum("...r,...rs->...s", N, hess)
    term4 = -s[..., None] * np.einsum("...r,...rs->...s", N, grad_dA)
    row2 = np.einsum("...s,...sk->...k", gradA + term2 + term3 + term4, P)
    return np.concatenate([row1, row2], axis=-1)


def additional_normality_residual(force, metric: Metric, x, v,
                                  v_min: float = V_MIN_DEFAULT) -> np.ndarray:
    """Both rows of the additional normality equations; returns residual
    tensors stacked on a leading pair axis, shape (..., 2, n, n)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n = metric.n
    g = metric.matrix(x)
    ginv = np.linalg.inv(g)
    gamma = metric.christoffel(x)
    s = metric.speed(x, v, g=g)
    if np.any(s <= v_min):
        raise SpeedFloorError("speed at or below floor in residual "
                              "evaluation")
    N = v / s[..., None]
    N_cov = np.einsum("...ij,...j->...i", g, N)
    P = np.eye(n) - N[..., :, None] * N_cov[..., None, :]

    F, dFdx, dFdv = _force_derivatives(force, metric, x, v)
    grad = _covariant_force_gradient(F, dFdx, dFdv, gamma, v)

    # row 1: antisymmetric part of F_i (N^m dF_j/dv^m)/s - nabla_i F_j,
    # doubly projected
    q = np.einsum("...m,...mj->...j", N, dFdv)
    T = F[..., :, None] * q[..., None, :] / s[..., None, None] - grad
    delta = T - np.swapaxes(T, -1, -2)
    row1 = np.einsum("...ie,...ij,...js->...es", P, delta, P)

    # row 2: traceless part of the doubly projected velocity gradient of
    # the contravariant force
    G = np.einsum("...ik,...jk->...ij", ginv, dFdv)  # G^i_j = dF^i/dv^j
    PGP = np.einsum("...ei,...ij,...js->...es", P, G, P)
    tr = np.einsum("...ee->...", PGP)
    row2 = PGP - (tr / (n - 1))[..., None, None] * P
    return np.stack([row1, row2], axis=-3)


def reduced_residuals(b_field: SphericalCovectorField,
                      metric: Metric, x, s,
                      a_field: Optional[SphericalScalarField] = None):
    """Residuals of the reduced normality equations for spherically
    symmetric coefficient fields.

    Returns ``(omega, rho)``: the antisymmetric pair-residual
    nabla_r b_s + b_r b'_s - nabla_s b_r - b_s b'_r as (..., n, n), and
    (if ``a_field`` is given) nabla_s a + b_s a' - a b'_s as (..., n),
    else None.
    """
    if not isinstance(b_field, SphericalCovectorField):
        raise TypeError("b must be declared fiberwise spherically symmetric")
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    b = np.asarray(b_field(x, s), dtype=float)
    bp = fd_partial_scalar(b_field.fn, x, s)
    grad_b = spatial_gradient(b_field, metric, x, s, mode="spherical")
    M = grad_b + b[..., :, None] * bp[..., None, :]
    omega = M - np.swapaxes(M, -1, -2)
    rho = None
    if a_field is not None:
        if not isinstance(a_field, SphericalScalarField):
            raise TypeError("a must be declared fiberwise spherically "
                            "symmetric")
        a = np.asarray(a_field(x, s), dtype=float)
        ap = fd_partial_scalar(a_field.fn, x, s)
        grad_a = spatial_gradient(a_field, metric, x, s, mode="spherical")
        rho = grad_a + b * ap[..., None] - a[..., None] * bp
    return omega, rho


# --------------------------------------------------------------------------
# Aggregated report
# --------------------------------------------------------------------------

@dataclass
class NormalityReport:
    """Sampled residuals of the normality equations with per-equation
    summaries. The verdict is evidence over the sample set, not a proof."""

    x: np.ndarray
    v: np.ndarray
    weak: np.ndarray            # (m, 2n)
    additional: np.ndarray      # (m, 2, n, n)
    reduced_b: Optional[np.ndarray]  # (m, n, n)
    reduced_a: Optional[np.ndarray]  # (m, n)
    tolerance: float

    @property
    def max_abs(self) -> dict:
        out = {
            "weak": float(np.max(np.abs(self.weak))),
            "additional": float(np.max(np.abs(self.additional))),
        }
        if self.reduced_b is not None:
            out["reduced_b"] = float(np.max(np.abs(self.reduced_b)))
        if self.reduced_a is not None:
            out["reduced_a"] = float(np.max(np.abs(self.reduced_a)))
        return out

    @property
    def mean_abs(self) -> dict:
        out = {
            "weak": float(np.mean(np.abs(self.weak))),
            "additional": float(np.mean(np.abs(self.additional))),
        }
        if self.reduced_b is not None:
            out["reduced_b"] = float(np.mean(np.abs(self.reduced_b)))
        if self.reduced_a is not None:
            out["reduced_a"] = float(np.mean(np.abs(self.reduced_a)))
        return out

    @property
    def passed(self) -> bool:
        return all(m <= self.tolerance for m in self.max_abs.values())

    def failing_equations(self) -> list:
        return sorted(k for k, m in self.max_abs.items() if m > self.tolerance)


def check_normality(force: ForceField, metric: Metric, x, v,
                    tolerance: float = 1e-6,
                    v_min: float = V_MIN_DEFAULT) -> NormalityReport:
    """Evaluate all normality residuals on a sample batch. Generated force
    fields also get the reduced residuals of their coefficient pair."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    weak = weak_normality_residual(force, metric, x, v, v_min=v_min)
    add = additional_normality_residual(force, metric, x, v, v_min=v_min)
    reduced_b = reduced_a = None
    if force.gen is not None:
        s = metric.speed(x, v)
        omega, rho = reduced_residuals(force.gen.b_field(), metric, x, s,
                                       a_field=force.gen.a_field())
        reduced_b, reduced_a = omega, rho
    return NormalityReport(x, v, weak, add, reduced_b, reduced_a, tolerance)
