import numpy as np
import pytest

from normalshift.errors import (DegenerateGeneratorError, RootFindError,
                                SpeedFloorError)
from normalshift.expr import parse
from normalshift.forcefield import (ForceField, VFormGenerating,
                                    WFormGenerating,
                                    additional_normality_residual,
                                    build_force, check_normality,
                                    conformal_force, dual_convert,
                                    gauge_transform, reduced_residuals,
                                    scalar_ansatz, weak_normality_residual,
                                    zero_force)
from normalshift.geometry import (Metric, SphericalCovectorField,
                                  SphericalScalarField)


@pytest.fixture
def flat():
    return Metric.flat(3)


def sample_states(seed, count, speed_lo=0.5, speed_hi=2.0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (count, 3))
    D = rng.normal(size=(count, 3))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    return X, D * rng.uniform(speed_lo, speed_hi, count)[:, None]


def closed_form_blend(x, v, c=0.2):
    """Independent evaluation of the displayed closed form for the
    inverse-map blend with a linear profile."""
    phi = c * x[..., 0]
    grad = np.zeros_like(x)
    grad[..., 0] = c
    s = np.linalg.norm(v, axis=-1)
    pair = np.einsum("...i,...i->...", v, grad)
    return (((1 - s) / (1 - phi))[..., None]
            * (2 * pair[..., None] * v - (s ** 2)[..., None] * grad)
            / s[..., None])


# ---------------------------------------------------------------------------
# Generating-function conversion
# ---------------------------------------------------------------------------

def test_dual_convert_identity_map(flat):
    gen = VFormGenerating(parse("w"), None, 3)
    assert dual_convert(gen, np.zeros(3), v=2.0) == pytest.approx(2.0)


def test_dual_convert_exponential_profile():
    gen = VFormGenerating(parse("exp(0.1*x1)*w"), None, 3)
    w = dual_convert(gen, np.array([1.0, 0, 0]), v=3.0)
    assert w == pytest.approx(3.0 * np.exp(-0.1), abs=1e-12)


def test_dual_convert_blend_profile():
    gen = VFormGenerating(parse("w + (1 - w)*(0.2*x1)"), None, 3)
    w = dual_convert(gen, np.array([2.5, 0, 0]), v=2.0)
    assert w == pytest.approx(3.0, abs=1e-12)


def test_dual_convert_round_trip_residual():
    gen = VFormGenerating(parse("w + 0.3*tanh(w)*x2"), None, 3,
                          w_bracket=(-5.0, 5.0))
    x = np.array([0.2, 0.7, -0.3])
    w = dual_convert(gen, x, v=1.3)
    assert abs(gen.v_value(x, w) - 1.3) <= 1e-12


def test_w_form_inverse_solve():
    gen = WFormGenerating(parse("v - x3"), None, 3)
    v = dual_convert(gen, np.array([0, 0, 0.4]), w=1.0)
    assert v == pytest.approx(1.4, abs=1e-12)


def test_unbracketed_root_is_an_error():
    gen = VFormGenerating(parse("w"), None, 3, w_bracket=(0.0, 1.0))
    with pytest.raises(RootFindError):
        dual_convert(gen, np.zeros(3), v=5.0)


# ---------------------------------------------------------------------------
# Force construction
# ---------------------------------------------------------------------------

def test_trivial_generator_gives_zero_force(flat):
    gen = VFormGenerating(parse("w"), None, 3)
    F = build_force(gen, flat)
    X, V = sample_states(0, 40)
    assert np.max(np.abs(F(X, V))) == 0.0


def test_blend_generator_matches_closed_form(flat):
    gen = VFormGenerating(parse("w + (1 - w)*(0.2*x1)"), None, 3)
    F = build_force(gen, flat)
    X, V = sample_states(1, 50)
    np.testing.assert_allclose(F(X, V), closed_form_blend(X, V), atol=1e-9)


def test_exponential_generator_matches_conformal_force(flat):
    gen = WFormGenerating(parse("v*exp(-0.1*x1)"), None, 3)
    F = build_force(gen, flat)
    Fc = conformal_force(parse("0.1*x1"), None, flat)
    X, V = sample_states(2, 50)
    np.testing.assert_allclose(F(X, V), Fc(X, V), atol=1e-10)


def test_construction_paths_agree_for_equivalent_forms(flat):
    # directly declared level function vs numeric inversion of its inverse
    genW = WFormGenerating(parse("v*exp(-0.1*x1)"), parse("0.5*w"), 3)
    genV = VFormGenerating(parse("exp(0.1*x1)*w"), parse("0.5*w"), 3)
    FW = build_force(genW, flat)
    FV = build_force(genV, flat)
    X, V = sample_states(3, 60)
    np.testing.assert_allclose(FW(X, V), FV(X, V), atol=1e-8)


def test_low_dimension_rejected():
    with pytest.raises(ValueError, match="n >= 3"):
        build_force(WFormGenerating(parse("v"), None, 2), Metric.flat(2))


def test_degenerate_level_derivative_refused(flat):
    gen = WFormGenerating(parse("v - x3"), None, 3)
    # squash dW/dv to zero through a crafted profile
    bad = WFormGenerating(parse("v*0.0000000000001 + x1"), None, 3)
    F = build_force(bad, flat)
    with pytest.raises(DegenerateGeneratorError):
        F(np.zeros((1, 3)), np.array([[1.0, 0, 0]]))
    del gen


def test_speed_floor_enforced(flat):
    F = build_force(WFormGenerating(parse("v"), None, 3), flat)
    with pytest.raises(SpeedFloorError):
        F(np.zeros((1, 3)), np.full((1, 3), 1e-10))


# ---------------------------------------------------------------------------
# Gauge transformations
# ---------------------------------------------------------------------------

def test_gauge_identity_returns_same_object(flat):
    gen = WFormGenerating(parse("v - x3"), parse("1"), 3)
    assert gauge_transform(gen, parse("w")) is gen


def test_gauge_invariance_of_force(flat):
    gen = WFormGenerating(parse("v - x3"), parse("1 + 0.2*w^2"), 3)
    F = build_force(gen, flat)
    F2 = build_force(gauge_transform(gen, parse("2*w + 1")), flat)
    X, V = sample_states(4, 50)
    np.testing.assert_allclose(F2(X, V), F(X, V), atol=1e-10)


def test_gauge_normalizes_constant_forcing(flat):
    # with h constant = 2, the map with slope 1/h makes the new h unity
    gen = WFormGenerating(parse("v - x3"), parse("2 + 0*w"), 3)
    normal = gauge_transform(gen, parse("0.5*w"))
    w_vals = np.linspace(-1.0, 1.5, 7)
    np.testing.assert_allclose(normal.h(w_vals), np.ones_like(w_vals),
                               atol=1e-12)
    F = build_force(gen, flat)
    F2 = build_force(normal, flat)
    X, V = sample_states(5, 30)
    np.testing.assert_allclose(F2(X, V), F(X, V), atol=1e-10)


def test_non_monotone_gauge_rejected(flat):
    gen = WFormGenerating(parse("v"), None, 3)
    with pytest.raises(RootFindError):
        gauge_transform(gen, parse("w^2"), w_range=(-1.0, 1.0))


# ---------------------------------------------------------------------------
# Scalar ansatz
# ---------------------------------------------------------------------------

def test_ansatz_zero_force(flat):
    ans = scalar_ansatz(zero_force(3), flat, np.zeros(3),
                        np.array([1.0, 0, 0]))
    assert ans.A == pytest.approx(0.0)
    assert ans.a is None and ans.b is None


def test_ansatz_linear_level_values(flat):
    gen = WFormGenerating(parse("v - x3"), parse("1"), 3)
    F = build_force(gen, flat)
    v = np.array([0.3, 0.4, 0.8])
    ans = scalar_ansatz(F, flat, np.zeros(3), v)
    assert ans.a == pytest.approx(1.0)
    np.testing.assert_allclose(ans.b, [0.0, 0.0, 1.0], atol=1e-14)
    assert ans.A == pytest.approx(1.0 + v[2])
    assert ans.affine_residual <= 1e-10


def test_ansatz_affine_over_fiber(flat):
    gen = WFormGenerating(parse("v*exp(-0.1*x1) + 0.2*sin(x2)"),
                          parse("0.3*w"), 3)
    F = build_force(gen, flat)
    X, V = sample_states(6, 80)
    ans = scalar_ansatz(F, flat, X, V)
    assert np.max(ans.affine_residual) <= 1e-10


def test_fiber_linearity_least_squares(flat):
    # at fixed base point and speed, the direction dependence of the
    # projection is affine-linear in the unit direction
    gen = WFormGenerating(parse("v*(1 + 0.2*sin(x1)) + 0.3*x2"),
                          parse("w^2"), 3)
    F = build_force(gen, flat)
    rng = np.random.default_rng(9)
    x = np.array([0.3, -0.2, 0.5])
    speed = 1.4
    D = rng.normal(size=(12, 3))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    V = speed * D
    A = np.einsum("...k,...k->...", F(np.broadcast_to(x, (12, 3)), V),
                  D)
    design = np.concatenate([np.ones((12, 1)), D], axis=1)
    coef, *_ = np.linalg.lstsq(design, A, rcond=None)
    assert np.max(np.abs(design @ coef - A)) <= 1e-9


# ---------------------------------------------------------------------------
# Normality residuals
# ---------------------------------------------------------------------------

def test_zero_force_residuals_vanish(flat):
    X, V = sample_states(7, 50)
    assert np.max(np.abs(weak_normality_residual(zero_force(3), flat,
                                                 X, V))) == 0.0
    assert np.max(np.abs(additional_normality_residual(zero_force(3), flat,
                                                       X, V))) == 0.0


@pytest.mark.parametrize("w_src,h_src", [
    ("v - x3", "1"),
    ("v*exp(-0.1*x1)", None),
    ("v*(1 + 0.2*sin(x1)*cos(x2)) + 0.3*x3", "w"),
])
def test_generated_fields_pass_residuals(flat, w_src, h_src):
    gen = WFormGenerating(parse(w_src),
                          None if h_src is None else parse(h_src), 3)
    F = build_force(gen, flat)
    X, V = sample_states(8, 100)
    assert np.max(np.abs(weak_normality_residual(F, flat, X, V))) <= 1e-6
    assert np.max(np.abs(additional_normality_residual(F, flat,
                                                       X, V))) <= 1e-6


def test_generated_field_on_curved_metric_passes(flat):
    curved = Metric.from_strings([
        ["1 + 0.1*x2^2", "0", "0"],
        ["0", "1", "0"],
        ["0", "0", "1 + 0.1*x1^2"],
    ])
    gen = WFormGenerating(parse("v - x3"), parse("1"), 3)
    F = build_force(gen, curved)
    X, V = sample_states(10, 50)
    assert np.max(np.abs(weak_normality_residual(F, curved, X, V))) <= 1e-6
    assert np.max(np.abs(additional_normality_residual(F, curved,
                                                       X, V))) <= 1e-6


def test_conformal_flow_passes_residuals(flat):
    F = conformal_force(parse("0.1*x1"), None, flat)
    X, V = sample_states(11, 100)
    assert np.max(np.abs(weak_normality_residual(F, flat, X, V))) <= 1e-6


def test_constant_force_fails_weak_residuals(flat):
    F = ForceField(3, lambda x, v: np.broadcast_to(
        np.array([0.3, 0.0, 0.0]), v.shape).copy())
    X, V = sample_states(12, 100)
    assert np.max(np.abs(weak_normality_residual(F, flat, X, V))) > 1e-2


def test_quadratic_non_conformal_field_fails_additional(flat):
    # velocity-quadratic field whose deformation is not of the conformal
    # shape: M^1_22 only
    def fn(x, v):
        out = np.zeros_like(v)
        out[..., 0] = -0.4 * v[..., 1] * v[..., 1]
        return out

    F = ForceField(3, fn)
    X, V = sample_states(13, 100)
    assert np.max(np.abs(additional_normality_residual(F, flat,
                                                       X, V))) > 1e-3


# ---------------------------------------------------------------------------
# Reduced residuals for the coefficient pair
# ---------------------------------------------------------------------------

def test_reduced_residuals_constant_covector(flat):
    b = SphericalCovectorField(lambda x, s: np.broadcast_to(
        np.array([0.0, 0.0, 1.0]), x.shape).copy())
    X = np.zeros((10, 3))
    S = np.linspace(0.5, 2.0, 10)
    omega, rho = reduced_residuals(b, flat, X, S)
    assert np.max(np.abs(omega)) <= 1e-12
    assert rho is None


@pytest.mark.parametrize("w_src,h_src", [
    ("v*exp(-0.1*x1) + 0.2*x2", "1"),
    ("v*(1 + 0.1*sin(x1)) - 0.3*x3", "w"),
    ("v + 0.2*tanh(x1)*x2", "0.5 + 0*w"),
])
def test_generated_pair_satisfies_reduced_equations(flat, w_src, h_src):
    gen = WFormGenerating(parse(w_src), parse(h_src), 3)
    rng = np.random.default_rng(21)
    X = rng.uniform(-1, 1, (60, 3))
    S = rng.uniform(0.5, 2.0, 60)
    omega, rho = reduced_residuals(gen.b_field(), flat, X, S,
                                   a_field=gen.a_field())
    assert np.max(np.abs(omega)) <= 1e-7
    assert np.max(np.abs(rho)) <= 1e-7


def test_handpicked_covector_violates_pair_equation(flat):
    b = SphericalCovectorField(lambda x, s: np.stack(
        [s * x[..., 1], np.zeros_like(s), np.zeros_like(s)], axis=-1))
    X = np.full((5, 3), 0.5)
    S = np.linspace(0.8, 1.6, 5)
    omega, _ = reduced_residuals(b, flat, X, S)
    assert np.max(np.abs(omega)) > 1e-3


def test_reduced_requires_spherical_declaration(flat):
    with pytest.raises(TypeError):
        reduced_residuals(lambda x, s: x, flat, np.zeros((2, 3)),
                          np.ones(2))


# ---------------------------------------------------------------------------
# Aggregated report
# ---------------------------------------------------------------------------

def test_check_normality_report_structure(flat):
    gen = WFormGenerating(parse("v - x3"), parse("1"), 3)
    F = build_force(gen, flat)
    X, V = sample_states(14, 40)
    rep = check_normality(F, flat, X, V, tolerance=1e-6)
    assert rep.passed
    assert set(rep.max_abs) == {"weak", "additional", "reduced_b",
                                "reduced_a"}
    assert all(v >= 0 for v in rep.max_abs.values())
    assert rep.failing_equations() == []


def test_check_normality_flags_failures(flat):
    F = ForceField(3, lambda x, v: np.broadcast_to(
        np.array([0.3, 0.0, 0.0]), v.shape).copy())
    X, V = sample_states(15, 40)
    rep = check_normality(F, flat, X, V, tolerance=1e-6)
    assert not rep.passed
    assert "weak" in rep.failing_equations()
