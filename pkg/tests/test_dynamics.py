import numpy as np
import pytest

from normalshift.dynamics import (IntegratorOptions, integrate,
                                  integrate_family, speed_rate, w0_evolve)
from normalshift.errors import IntegrationError
from normalshift.expr import parse
from normalshift.forcefield import (WFormGenerating, build_force,
                                    conformal_force, zero_force)
from normalshift.geometry import Metric
from normalshift.metrizability import (_point_polyline_distance,
                                       _resample_by_arc)


@pytest.fixture
def flat():
    return Metric.flat(3)


def test_straight_line_geodesic_exact(flat):
    tr = integrate(None, flat, [0, 0, 0], [1, 0, 0], np.linspace(0, 1, 11))
    assert tr.reason == "completed"
    np.testing.assert_allclose(tr.x[-1], [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(tr.v, np.tile([1.0, 0, 0], (11, 1)),
                               atol=1e-12)


def test_geodesic_speed_conserved_on_curved_metric():
    pol = Metric.from_strings([["1", "0"], ["0", "x1^2"]])
    tr = integrate(None, pol, [2.0, 0.1], [0.3, 0.2], np.linspace(0, 1, 11))
    speeds = tr.speeds(pol)
    assert np.max(np.abs(speeds - speeds[0])) <= 1e-9


def test_conformal_trajectory_matches_rescaled_geodesic(flat):
    # the conformal-flow force on the flat chart traces the same curve as
    # the geodesic of the rescaled metric started identically
    f = parse("0.1*x1")
    F = conformal_force(f, None, flat)
    tilde = Metric.conformally_flat(f, 3)
    x0 = np.array([0.1, -0.2, 0.0])
    d0 = np.array([0.6, 0.5, 0.4])
    d0 /= np.linalg.norm(d0)
    grid = np.linspace(0, 1.0, 201)
    tr_force = integrate(F, flat, x0, d0, grid)
    tr_geo = integrate(None, tilde, x0, d0, grid)
    assert tr_force.reason == tr_geo.reason == "completed"

    def arc(tr):
        seg = np.linalg.norm(np.diff(tr.x, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    budget = min(arc(tr_force)[-1], arc(tr_geo)[-1])
    pa = _resample_by_arc(tr_force.x, arc(tr_force), budget, 200)
    pb = _resample_by_arc(tr_geo.x, arc(tr_geo), budget, 200)
    d = max(_point_polyline_distance(pa, pb),
            _point_polyline_distance(pb, pa))
    assert d <= 1e-5


def test_speed_rate_zero_for_geodesic_and_orthogonal_force(flat):
    x = np.zeros(3)
    v = np.array([1.0, 0.5, 0.0])
    assert speed_rate(zero_force(3), flat, x, v) == 0.0
    from normalshift.forcefield import ForceField
    # force g-orthogonal to v has vanishing projection
    Forth = ForceField(3, lambda x, v: np.stack(
        [-v[..., 1], v[..., 0], np.zeros_like(v[..., 0])], axis=-1))
    assert speed_rate(Forth, flat, x, v) == pytest.approx(0.0, abs=1e-15)


def test_speed_rate_matches_generator_formula(flat):
    gen = WFormGenerating(parse("v*exp(-0.1*x1) + 0.2*x2"), parse("w"), 3)
    F = build_force(gen, flat)
    rng = np.random.default_rng(2)
    X = rng.uniform(-1, 1, (30, 3))
    D = rng.normal(size=(30, 3))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    V = D * rng.uniform(0.5, 2.0, 30)[:, None]
    s = flat.speed(X, V)
    w, Wv, Wx = gen.w_derivs(X, s)
    expected = gen.h(w) / Wv - np.einsum("...i,...i->...", Wx / Wv[..., None],
                                         V)
    np.testing.assert_allclose(speed_rate(F, flat, X, V), expected,
                               atol=1e-9)


def test_level_transport_constant_and_linear(flat):
    assert np.all(w0_evolve(None, 0.7, np.linspace(0, 1, 5)) == 0.7)
    np.testing.assert_allclose(
        w0_evolve(parse("1 + 0*w"), 0.5, np.linspace(0, 1, 5)),
        0.5 + np.linspace(0, 1, 5), atol=1e-13)


def test_level_transport_exponential(flat):
    out = w0_evolve(parse("w"), 1.0, np.linspace(0, 1, 11))
    assert abs(out[-1] - np.e) <= 1e-9


def test_level_transport_blowup_reported(flat):
    with pytest.raises(IntegrationError):
        w0_evolve(parse("w^2"), 5.0, np.linspace(0, 2, 5),
                  IntegratorOptions(step=1e-2))


def test_invariant_transport_along_trajectories(flat):
    gen = WFormGenerating(parse("v - x3"), parse("1"), 3)
    F = build_force(gen, flat)
    rng = np.random.default_rng(5)
    X0 = rng.uniform(-0.5, 0.5, (20, 3))
    D = rng.normal(size=(20, 3))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    V0 = D * rng.uniform(0.8, 1.5, 20)[:, None]
    grid = np.linspace(0, 1, 11)
    fam = integrate_family(F, flat, X0, V0, grid)
    assert np.all(fam.reasons == "completed")
    speeds = flat.speed(fam.x, fam.v)
    W = speeds - fam.x[..., 2]
    W0 = W[0]
    drift = np.abs(W - (W0[None, :] + grid[:, None]))
    assert np.max(drift) <= 1e-6


def test_rk4_step_halving_ratio(flat):
    F = conformal_force(parse("0.1*x1"), None, flat)
    x0 = [0.1, 0.2, 0.0]
    v0 = [0.5, 0.3, 0.7]
    grid = np.array([0.0, 1.0])
    ref = integrate(F, flat, x0, v0, grid, IntegratorOptions(step=1e-5))
    e1 = integrate(F, flat, x0, v0, grid, IntegratorOptions(step=0.02))
    e2 = integrate(F, flat, x0, v0, grid, IntegratorOptions(step=0.01))
    err1 = np.max(np.abs(e1.x[-1] - ref.x[-1]))
    err2 = np.max(np.abs(e2.x[-1] - ref.x[-1]))
    assert 12.0 <= err1 / err2 <= 20.0


def test_rk45_matches_rk4(flat):
    gen = WFormGenerating(parse("v - x3"), parse("1"), 3)
    F = build_force(gen, flat)
    grid = np.linspace(0, 1, 6)
    a = integrate(F, flat, [0.1, -0.2, 0.0], [0.3, 0.4, 0.8], grid)
    b = integrate(F, flat, [0.1, -0.2, 0.0], [0.3, 0.4, 0.8], grid,
                  IntegratorOptions(method="rk45", rtol=1e-11, atol=1e-13))
    assert np.max(np.abs(a.x - b.x)) <= 1e-8


def test_escape_terminates_member_not_family(flat):
    x0 = np.array([[9.95, 0, 0], [0, 0, 0]])
    v0 = np.array([[1.0, 0, 0], [1.0, 0, 0]])
    fam = integrate_family(None, flat, x0, v0, np.linspace(0, 1, 11),
                           IntegratorOptions(escape=10.0))
    assert fam.reasons[0] == "escaped chart"
    assert fam.reasons[1] == "completed"
    assert not fam.valid[-1, 0] and fam.valid[-1, 1]
    # frozen member keeps its last healthy state
    assert np.all(np.abs(fam.x[:, 0, 0]) <= 10.0 + 0.1)


def test_degenerate_speed_terminates(flat):
    from normalshift.forcefield import ForceField
    # constant decelerating force along the motion axis
    Fdec = ForceField(3, lambda x, v: np.broadcast_to(
        np.array([-1.0, 0.0, 0.0]), v.shape).copy())
    tr = integrate(Fdec, flat, [0, 0, 0], [0.5, 0, 0], np.linspace(0, 2, 21))
    assert tr.reason in ("velocity degenerate", "step failure")
    assert not tr.valid[-1]


def test_initial_floor_violation_is_immediate_error(flat):
    with pytest.raises(IntegrationError):
        integrate(None, flat, [0, 0, 0], [0, 0, 0], np.linspace(0, 1, 5))


def test_unsorted_grid_rejected(flat):
    with pytest.raises(IntegrationError):
        integrate(None, flat, [0, 0, 0], [1, 0, 0], np.array([0.0, 0.5, 0.2]))
