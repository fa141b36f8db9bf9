"""Bracketed scalar root solving, vectorized over numpy arrays.

Newton iterations accelerated by an always-maintained sign-change bracket;
elements whose Newton step leaves the bracket fall back to bisection, so the
solve cannot diverge. Used for generating-function inversion and for the
initial-speed functional equation on hypersurfaces.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import RootFindError

__all__ = ["solve_bracketed"]


def solve_bracketed(f: Callable, lo, hi, df: Callable | None = None,
                    ftol: float = 1e-13, max_iter: int = 200):
    """Solve f(x) = 0 elementwise for x in the bracket [lo, hi].

    ``f`` (and optional derivative ``df``) map arrays to arrays of one common
    broadcast shape. The bracket must contain a sign change for every
    element. With ``df`` given, a sign flip of the derivative against the
    bracket orientation is reported as a monotonicity violation.

    Returns an array of the broadcast shape (or a scalar for scalar input)
    with |f(root)| <= ftol or a bracket narrowed to machine width.
    """
    lo_a, hi_a = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    a = np.array(lo_a, dtype=float)
    b = np.array(hi_a, dtype=float)
    fa = np.asarray(f(a), dtype=float)
    fb = np.asarray(f(b), dtype=float)
    scalar_input = fa.ndim == 0
    a, b, fa, fb = np.atleast_1d(a, b, fa, fb)
    a, b, fa, fb = np.broadcast_arrays(a, b, fa, fb)
    a, b, fa, fb = a.copy(), b.copy(), fa.copy(), fb.copy()

    done_at_a = np.abs(fa) <= ftol
    done_at_b = np.abs(fb) <= ftol
    if np.any((fa * fb > 0.0) & ~done_at_a & ~done_at_b):
        raise RootFindError("no sign change in the bracket for at least one "
                            "element; root not bracketed")
    orientation = np.sign(fb - fa)

    x = 0.5 * (a + b)
    x[done_at_a] = a[done_at_a]
    x[done_at_b] = b[done_at_b]
    active = ~(done_at_a | done_at_b)

    for _ in range(max_iter):
        if not np.any(active):
            break
        fx = np.asarray(f(x), dtype=float)
        fx = np.broadcast_to(fx, x.shape)
        conv = np.abs(fx) <= ftol
        active &= ~conv
        if not np.any(active):
            break
        # maintain the bracket
        same_side_as_a = (fx * fa) > 0.0
        move_a = active & same_side_as_a
        move_b = active & ~same_side_as_a
        a[move_a] = x[move_a]
        fa[move_a] = fx[move_a]
        b[move_b] = x[move_b]
        fb[move_b] = fx[move_b]

        width = np.abs(b - a)
        tiny = width <= 4.0 * np.finfo(float).eps * np.maximum(1.0, np.abs(x))
        active &= ~tiny

        new_x = 0.5 * (a + b)
        if df is not None:
            d = np.asarray(df(x), dtype=float)
            d = np.broadcast_to(d, x.shape)
            if np.any(active & (d * orientation < 0.0) & (np.abs(d) > ftol)):
                raise RootFindError("derivative sign change inside the "
                                    "bracket (monotonicity violation)")
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where(d != 0.0, fx / np.where(d == 0.0, 1.0, d), np.inf)
            cand = x - step
            inside = (cand > np.minimum(a, b)) & (cand < np.maximum(a, b))
            ok = inside & np.isfinite(cand)
            new_x = np.where(ok, cand, new_x)
        x = np.where(active, new_x, x)

    fx = np.asarray(f(x), dtype=float)
    if np.any(np.abs(np.broadcast_to(fx, x.shape)[active]) > 1e-9):
        raise RootFindError("bracketed solve failed to converge")
    return float(x.reshape(())) if scalar_input else x
