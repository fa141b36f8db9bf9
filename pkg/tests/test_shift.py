import numpy as np
import pytest

from normalshift.dynamics import IntegratorOptions
from normalshift.errors import FrameRankError, RootFindError
from normalshift.expr import parse
from normalshift.forcefield import (ForceField, VFormGenerating,
                                    WFormGenerating, build_force)
from normalshift.geometry import Metric
from normalshift.shift import (Hypersurface, blowup, build_shift, deviation,
                               gnn_check, initial_deviation_rate,
                               normality_certificate, solve_nu, unit_normal,
                               w_constancy)


@pytest.fixture
def flat():
    return Metric.flat(3)


def plane():
    return Hypersurface(("u1", "u2"),
                        (parse("u1"), parse("u2"), parse("0")),
                        ((-0.5, 0.5), (-0.5, 0.5)))


def sphere_patch():
    return Hypersurface(
        ("u1", "u2"),
        (parse("sin(u1)*cos(u2)"), parse("sin(u1)*sin(u2)"),
         parse("cos(u1)")),
        ((0.8, 1.8), (0.3, 1.3)))


GEODESIC_GEN = WFormGenerating(parse("v"), None, 3)
LINEAR_GEN = WFormGenerating(parse("v - x3"), parse("1"), 3)


# ---------------------------------------------------------------------------
# Frames and normals
# ---------------------------------------------------------------------------

def test_plane_frame_is_cartesian(flat):
    tau = plane().frame(np.array([0.2, -0.1]))
    np.testing.assert_allclose(tau, [[1, 0, 0], [0, 1, 0]], atol=1e-15)


def test_graph_frame_hand_derivatives():
    graph = Hypersurface(("u1", "u2"),
                         (parse("u1"), parse("u2"), parse("u1*u2")),
                         ((-2, 2), (-2, 2)))
    tau = graph.frame(np.array([1.0, 1.0]))
    np.testing.assert_allclose(tau, [[1, 0, 1], [0, 1, 1]], atol=1e-15)


def test_rank_deficient_map_rejected(flat):
    degenerate = Hypersurface(("u1", "u2"),
                              (parse("u1"), parse("u1"), parse("0")),
                              ((-1, 1), (-1, 1)))
    with pytest.raises(FrameRankError):
        unit_normal(flat, degenerate, np.array([0.0, 0.0]))


def test_unit_normal_examples(flat):
    np.testing.assert_allclose(
        unit_normal(flat, plane(), np.array([0.0, 0.0])), [0, 0, 1],
        atol=1e-12)
    graph = Hypersurface(("u1", "u2"),
                         (parse("u1"), parse("u2"), parse("u1")),
                         ((-1, 1), (-1, 1)))
    np.testing.assert_allclose(
        unit_normal(flat, graph, np.array([0.0, 0.0])),
        [-1 / np.sqrt(2), 0, 1 / np.sqrt(2)], atol=1e-12)
    stretched = Metric.from_strings([["1", "0", "0"], ["0", "1", "0"],
                                     ["0", "0", "4"]])
    np.testing.assert_allclose(
        unit_normal(stretched, plane(), np.array([0.0, 0.0])),
        [0, 0, 0.5], atol=1e-12)


def test_unit_normal_orientation_flip(flat):
    flipped = Hypersurface(plane().params, plane().maps, plane().rect,
                           orientation=-1)
    np.testing.assert_allclose(unit_normal(flat, flipped,
                                           np.array([0.0, 0.0])),
                               [0, 0, -1], atol=1e-12)


def test_normal_g_orthogonal_to_frame_on_lattice(flat):
    surf = sphere_patch()
    U = surf.lattice((9, 9))
    nrm = unit_normal(flat, surf, U)
    tau = surf.frame(U)
    dots = np.einsum("...ki,...i->...k", tau, nrm)
    assert np.max(np.abs(dots)) <= 1e-12
    norms = np.einsum("...i,...i->...", nrm, nrm)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# Initial-speed solve
# ---------------------------------------------------------------------------

def test_solve_nu_linear_level(flat):
    xs = plane().points(plane().lattice((5, 5)))
    nu = solve_nu(LINEAR_GEN, flat, xs, 1.0)
    np.testing.assert_allclose(nu, 1.0, atol=1e-12)


def test_solve_nu_exponential_level(flat):
    gen = WFormGenerating(parse("v*exp(-0.1*x1)"), None, 3)
    nu = solve_nu(gen, flat, np.array([[2.0, 0.0, 0.0]]), 1.0)
    assert nu[0] == pytest.approx(np.exp(0.2), abs=1e-12)


def test_solve_nu_on_graph(flat):
    graph = Hypersurface(("u1", "u2"),
                         (parse("u1"), parse("u2"), parse("u1")),
                         ((-1, 1), (-1, 1)))
    xs = graph.points(np.array([0.3, 0.0]))
    nu = solve_nu(LINEAR_GEN, flat, xs[None, :], 1.0)
    assert nu[0] == pytest.approx(1.3, abs=1e-12)


def test_solve_nu_rejects_unbracketed(flat):
    gen = WFormGenerating(parse("v"), None, 3)
    with pytest.raises(RootFindError):
        solve_nu(gen, flat, np.zeros((1, 3)), 100.0, bracket=(1e-6, 5.0))


# ---------------------------------------------------------------------------
# Shift families
# ---------------------------------------------------------------------------

def test_geodesic_plane_shift_is_parallel(flat):
    fam = build_shift(None, flat, plane(), (21, 21), np.linspace(0, 0.5, 6),
                      1.0, (0.0, 0.0), gen=GEODESIC_GEN)
    cert = normality_certificate(fam)
    assert cert["max_normalized_deviation"] <= 1e-9
    # the shifted surfaces are the planes x3 = t
    np.testing.assert_allclose(fam.x[..., 2],
                               np.broadcast_to(fam.t[:, None, None],
                                               fam.x.shape[:-1]),
                               atol=1e-12)


def test_geodesic_sphere_shift_is_concentric(flat):
    fam = build_shift(None, flat, sphere_patch(), (21, 21),
                      np.linspace(0, 0.5, 6), 1.0, (1.3, 0.8),
                      gen=GEODESIC_GEN)
    cert = normality_certificate(fam)
    assert cert["max_normalized_deviation"] <= 1e-8
    radii = np.linalg.norm(fam.x, axis=-1)
    np.testing.assert_allclose(
        radii, 1.0 + np.broadcast_to(fam.t[:, None, None], radii.shape),
        atol=1e-9)


def test_blend_field_keeps_plane_shift_normal(flat):
    gen = VFormGenerating(parse("w + (1 - w)*(0.2*x1)"), None, 3)
    F = build_force(gen, flat)
    fam = build_shift(F, flat, plane(), (21, 21), np.linspace(0, 0.5, 6),
                      1.0, (0.0, 0.0), gen=gen)
    cert = normality_certificate(fam)
    assert cert["max_normalized_deviation"] <= 1e-6
    # surfaces stay level planes
    spread = (np.max(fam.x[..., 2].reshape(len(fam.t), -1), axis=1)
              - np.min(fam.x[..., 2].reshape(len(fam.t), -1), axis=1))
    assert np.max(spread) <= 1e-6


def test_deviation_vanishes_at_launch(flat):
    F = build_force(LINEAR_GEN, flat)
    fam = build_shift(F, flat, plane(), (11, 11), np.linspace(0, 0.3, 4),
                      1.0, (0.0, 0.0), gen=LINEAR_GEN)
    dev = deviation(fam)
    interior = dev.quality == np.max(dev.quality)
    assert np.max(np.abs(dev.phi[0][interior])) <= 1e-10


def test_constant_force_family_loses_normality(flat):
    Fbad = ForceField(3, lambda x, v: np.broadcast_to(
        np.array([0.3, 0.0, 0.0]), v.shape).copy())
    fam = build_shift(Fbad, flat, plane(), (21, 21), np.linspace(0, 0.5, 6),
                      1.0, (0.0, 0.0))
    cert = normality_certificate(fam)
    assert cert["max_normalized_deviation"] > 1e-3


def test_nu_independence_of_admissibility(flat):
    F = build_force(LINEAR_GEN, flat)
    for nu0 in (0.5, 2.0):
        fam = build_shift(F, flat, plane(), (15, 15),
                          np.linspace(0, 0.5, 6), nu0, (0.0, 0.0),
                          gen=LINEAR_GEN)
        cert = normality_certificate(fam)
        assert cert["max_normalized_deviation"] <= 1e-6


# ---------------------------------------------------------------------------
# Initial deviation rate
# ---------------------------------------------------------------------------

def test_initial_rate_vanishes_for_generated_field(flat):
    F = build_force(LINEAR_GEN, flat)
    surf = plane()
    U = surf.lattice((11, 11))
    nu = solve_nu(LINEAR_GEN, flat, surf.points(U), 1.0)
    rate, q = initial_deviation_rate(F, flat, surf, U, nu, (0.1, 0.1))
    assert np.max(np.abs(rate[q >= 1])) <= 1e-8


def test_initial_rate_zero_for_geodesic_constant_profile(flat):
    surf = plane()
    U = surf.lattice((7, 7))
    nu = np.ones(U.shape[:-1])
    from normalshift.forcefield import zero_force
    rate, q = initial_deviation_rate(zero_force(3), flat, surf, U, nu,
                                     (1.0 / 6, 1.0 / 6))
    assert np.max(np.abs(rate)) == 0.0


def test_initial_rate_picks_up_tangential_force(flat):
    surf = plane()
    U = surf.lattice((7, 7))
    nu = np.ones(U.shape[:-1])
    Ftan = ForceField(3, lambda x, v: np.broadcast_to(
        np.array([0.4, 0.0, 0.0]), v.shape).copy())
    rate, q = initial_deviation_rate(Ftan, flat, surf, U, nu,
                                     (1.0 / 6, 1.0 / 6))
    np.testing.assert_allclose(rate[..., 0], 0.4, atol=1e-12)
    np.testing.assert_allclose(rate[..., 1], 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# Blow-ups
# ---------------------------------------------------------------------------

BLOWUP_RECT = ((0.85, 1.15), (0.35, 0.65))


def test_geodesic_blowup_gives_spheres(flat):
    fam = blowup(None, flat, [0, 0, 0], 1.0, np.linspace(0, 0.5, 9),
                 BLOWUP_RECT, (15, 15), gen=GEODESIC_GEN, t_skip=0.1)
    cert = normality_certificate(fam)
    assert cert["max_normalized_deviation"] <= 1e-8
    tm = fam.t >= 0.1
    radii = np.linalg.norm(fam.x[tm], axis=-1)
    flatr = radii.reshape(radii.shape[0], -1)
    assert np.max(np.max(flatr, axis=1) - np.min(flatr, axis=1)) <= 1e-8


def test_generated_blowup_stays_normal(flat):
    F = build_force(LINEAR_GEN, flat)
    fam = blowup(F, flat, [0, 0, 0], 1.0, np.linspace(0, 0.5, 9),
                 BLOWUP_RECT, (15, 15), gen=LINEAR_GEN, t_skip=0.1)
    cert = normality_certificate(fam)
    assert cert["max_normalized_deviation"] <= 1e-6


def test_blowup_guards_nonpositive_speed(flat):
    with pytest.raises(ValueError):
        blowup(None, flat, [0, 0, 0], 0.0, np.linspace(0, 0.5, 5),
               BLOWUP_RECT, (5, 5))


# ---------------------------------------------------------------------------
# Level constancy and associated-coordinate checks
# ---------------------------------------------------------------------------

def test_level_constant_without_forcing(flat):
    gen = WFormGenerating(parse("v*exp(-0.1*x1)"), None, 3)
    F = build_force(gen, flat)
    fam = build_shift(F, flat, plane(), (11, 11), np.linspace(0, 0.5, 6),
                      1.0, (0.0, 0.0), gen=gen)
    wc = w_constancy(fam)
    assert wc["max_spread"] <= 1e-8
    np.testing.assert_allclose(wc["w0_trace"], wc["w0_trace"][0])


def test_level_advances_linearly_with_unit_forcing(flat):
    F = build_force(LINEAR_GEN, flat)
    fam = build_shift(F, flat, plane(), (11, 11), np.linspace(0, 0.5, 6),
                      1.0, (0.0, 0.0), gen=LINEAR_GEN)
    wc = w_constancy(fam)
    assert wc["max_spread"] <= 1e-8
    np.testing.assert_allclose(wc["mean"], fam.w0 + fam.t, atol=1e-6)


def test_level_spread_detects_bad_family(flat):
    # launched from the sphere patch the normals vary, so an inadmissible
    # force drives visibly different level values across the lattice
    Fbad = ForceField(3, lambda x, v: np.broadcast_to(
        np.array([0.3, 0.0, 0.0]), v.shape).copy())
    fam = build_shift(Fbad, flat, sphere_patch(), (11, 11),
                      np.linspace(0, 0.5, 6), 1.0, (1.3, 0.8))
    fam.gen = LINEAR_GEN
    fam.w0 = 1.0
    wc = w_constancy(fam)
    assert wc["max_spread"] > 1e-3


def test_gnn_check_unit_speed_geodesics(flat):
    fam = build_shift(None, flat, plane(), (11, 11), np.linspace(0, 0.5, 6),
                      1.0, (0.0, 0.0), gen=GEODESIC_GEN)
    gc = gnn_check(fam)
    assert gc["max_residual"] <= 1e-10
    assert gc["max_offdiagonal"] <= 1e-9


def test_gnn_check_linear_level(flat):
    F = build_force(LINEAR_GEN, flat)
    fam = build_shift(F, flat, plane(), (11, 11), np.linspace(0, 0.5, 6),
                      1.0, (0.0, 0.0), gen=LINEAR_GEN)
    gc = gnn_check(fam)
    assert gc["max_residual"] <= 1e-6


def test_gnn_check_conformal_scenario(flat):
    gen = WFormGenerating(parse("v*exp(-0.1*x1)"), None, 3)
    F = build_force(gen, flat)
    fam = build_shift(F, flat, plane(), (11, 11), np.linspace(0, 0.5, 6),
                      1.0, (0.0, 0.0), gen=gen)
    gc = gnn_check(fam)
    assert gc["max_residual"] <= 1e-6
    # the speed profile follows the conformal factor along trajectories
    speeds = fam.speeds()
    expect = np.exp(0.1 * fam.x[..., 0]) * fam.w0
    assert np.max(np.abs(speeds - expect)) <= 1e-6
