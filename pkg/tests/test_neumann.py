import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrsystems import neumann as nm
from lrsystems.dynamics import Veselova3State, veselova3_field, veselova3_integrals
from lrsystems.integrate import IntegratorConfig, integrate_flow
from lrsystems.reduced import GeodesicSystem, SphereSystem, _random_cotangent, sphere_energy

A4 = np.array([0.6, 1.0, 1.5, 2.2])
A3 = np.array([0.7, 1.1, 1.9])
TIGHT = dict(rel_tol=1e-12, abs_tol=1e-14)


def neumann_start(A, rng, h=1.0):
    """An F0 = 0 Neumann state obtained from a reduced state of energy h."""
    q, p = _random_cotangent(len(A), rng)
    p *= math.sqrt(h / sphere_energy(q, p, A))
    return nm.reduced_to_neumann(q, p, A, h)


def run_neumann(A, y0, horizon, samples=None, **tol):
    grid = None if samples is None else np.linspace(0, horizon, samples)
    cfg = IntegratorConfig(horizon=horizon, **(tol or TIGHT))
    sysm = nm.NeumannSystem(A)
    return integrate_flow(sysm.field, y0, cfg, t_eval=grid, diagnostics=sysm.diagnostics())


def test_isotropic_neumann_is_great_circle(rng):
    q, qp = _random_cotangent(4, rng)
    c = 1.7
    _, qpp = nm.neumann_vector_field(nm.NeumannState(q, qp), np.full(4, c))
    assert np.max(np.abs(qpp + (qp @ qp) * q)) < 1e-15


def test_neumann_constraints_and_family(rng):
    q, qp = _random_cotangent(4, rng)
    y0 = np.concatenate([q, qp])
    tr = run_neumann(A4, y0, 20.0)
    assert tr.diagnostics["sphere"].max() < 1e-9
    assert tr.diagnostics["tangency"].max() < 1e-9
    I = 1.0 / A4
    tests = [I.min() - 0.3, 0.5 * (I[0] + I[1]), 0.5 * (I[2] + I[3]), I.max() + 0.2, I.max() + 2.0]
    for lam in tests:
        F = np.array([nm.family_F(lam, y[:4], y[4:], A4) for y in tr.states])
        assert np.max(np.abs(F - F[0])) / max(abs(F[0]), 1.0) < 1e-8


def test_F0_is_family_at_zero(rng):
    q, qp = _random_cotangent(4, rng)
    assert nm.neumann_F0(q, qp, A4) == pytest.approx(nm.family_F(0.0, q, qp, A4), rel=1e-12)
    q3, qp3 = _random_cotangent(3, rng)
    assert nm.neumann_integral_n3(q3, qp3, A3) == pytest.approx(nm.neumann_F0(q3, qp3, A3) / np.prod(A3), rel=1e-12)


def test_phi_F_polynomial(rng):
    q, qp = _random_cotangent(4, rng)
    I = 1.0 / A4
    poly = nm.phi_F_poly(q, qp, A4)
    for lam in (0.1, 3.0, -2.0):
        assert np.polyval(poly, lam) == pytest.approx(np.prod(lam - I) * nm.family_F(lam, q, qp, A4), rel=1e-10)


def test_constants_conserved_along_flow(rng):
    q, qp = neumann_start(A4, rng)
    tr = run_neumann(A4, np.concatenate([q, qp]), 10.0, 51)
    cs = np.array([nm.neumann_invariants(nm.NeumannState(y[:4], y[4:]), A4)["cs"] for y in tr.states])
    assert cs.shape[1] == 2
    assert np.max(np.abs(cs - cs[0])) < 1e-7
    assert np.max(np.abs(tr.diagnostics["F0"])) < 1e-8


def test_radical_polynomial_matches_family(rng):
    q, qp = neumann_start(A4, rng)
    inv = nm.neumann_invariants(nm.NeumannState(q, qp), A4)
    assert abs(inv["F0"]) < 1e-10
    R = nm.MotionConstants(1.0, inv["cs"]).radical_poly(A4)
    other = -np.polymul(np.poly(1.0 / A4), nm.phi_F_poly(q, qp, A4))
    other[-1] = 0.0  # the constant term is -Phi(0) F0 = 0 on this level
    assert np.max(np.abs(R - other) / np.maximum(np.abs(R), 1e-12)) < 1e-8


def test_degenerate_constants_raise():
    # no motion in the first two coordinates: a double root at I_1 = I_2
    q, qp = np.eye(4)[2], np.eye(4)[3]
    with pytest.raises(nm.DegenerateTorusError):
        nm.neumann_invariants(nm.NeumannState(q, qp), np.array([1.0, 1.0, 2.0, 3.0]))


def test_n3_constant_matches_veselova_ratio(rng):
    I = 1.0 / A3
    g = rng.standard_normal(3)
    g /= np.linalg.norm(g)
    W = rng.standard_normal(3)
    W -= (W @ g) * g
    ints = veselova3_integrals(Veselova3State(W, g), I)
    h = ints["F1"]
    factor = math.sqrt(2 * h * np.prod(A3) / ((A3 * g) @ g))
    qp = np.cross(g, W) / factor
    inv = nm.neumann_invariants(nm.NeumannState(g, qp), A3)
    assert abs(inv["F0"]) < 1e-10
    assert inv["cs"][0] == pytest.approx(ints["F2"] / ints["F1"], rel=1e-10)


def test_veselova_maps_to_neumann_n3(rng):
    # the time factor and the zero value of the n = 3 integral along a Veselova trajectory
    I = 1.0 / A3
    g = np.array([0.3, -0.5, 0.81])
    g /= np.linalg.norm(g)
    W = np.array([1.0, 0.2, -0.4])
    W -= (W @ g) * g
    tr = integrate_flow(veselova3_field(I), np.concatenate([W, g]), IntegratorConfig(horizon=10.0, **TIGHT))
    h = veselova3_integrals(Veselova3State(W, g), I)["F1"]
    for y in tr.states[::10]:
        W, g = y[:3], y[3:]
        tf = nm.time_factors(g, np.cross(g, W), A3, h)
        assert tf["dtau1_dt"] == pytest.approx(tf["dtau1_dt_on_level"], rel=1e-8)
        assert tf["dtau1_dt_on_level"] == pytest.approx(math.sqrt(2 * h * np.prod(A3) / ((A3 * g) @ g)), rel=1e-14)
        qp = np.cross(g, W) / tf["dtau1_dt_on_level"]
        assert abs(nm.neumann_integral_n3(g, qp, A3)) < 1e-8


# --- spheroconic coordinates ---------------------------------------------------------


@given(st.integers(0, 2**32 - 1), st.integers(3, 6))
def test_spheroconic_roundtrip(seed, n):
    rng = np.random.default_rng(seed)
    A = np.sort(rng.uniform(0.5, 2.5, n))
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    pt = nm.spheroconic(q, A)
    I = np.sort(1.0 / A)
    assert np.all((pt.lambdas >= I[:-1]) & (pt.lambdas <= I[1:]))
    back = nm.spheroconic(pt, A, direction="inverse")
    assert np.max(np.abs(back - q)) < 1e-10 or pt.boundary


def test_spheroconic_roundtrip_100(rng):
    worst = 0.0
    for _ in range(100):
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        worst = max(worst, np.max(np.abs(nm.spheroconic_inverse(nm.spheroconic_forward(q, A4), A4) - q)))
    assert worst < 1e-10


def test_spheroconic_boundary_example():
    pt = nm.spheroconic_forward(np.array([1.0, 0.0, 0.0]), np.array([1.0, 2.0, 3.0]))
    assert pt.boundary
    assert np.allclose(pt.lambdas, [1.0 / 3.0, 1.0 / 2.0], atol=1e-15)


def test_inverse_lands_on_sphere(rng):
    I = np.sort(1.0 / A4)
    for _ in range(20):
        lam = I[:-1] + rng.uniform(0, 1, 3) * np.diff(I)
        q = nm.spheroconic_inverse(nm.SpheroconicPoint(lam, np.ones(4)), A4)
        assert q @ q == pytest.approx(1.0, abs=1e-12)


def test_spheroconic_direction_validation():
    with pytest.raises(ValueError):
        nm.spheroconic(np.ones(3) / math.sqrt(3), A3, direction="up")


def test_spheroconic_velocity_matches_differences(rng):
    q, v = _random_cotangent(4, rng)
    lam = nm.spheroconic_forward(q, A4).lambdas
    h = 1e-6
    qa, qb = q + h * v, q - h * v
    fd = (nm.spheroconic_forward(qa / np.linalg.norm(qa), A4).lambdas - nm.spheroconic_forward(qb / np.linalg.norm(qb), A4).lambdas) / (2 * h)
    assert np.max(np.abs(nm.spheroconic_velocity(q, v, lam, A4) - fd)) < 1e-6


# --- time factors --------------------------------------------------------------------------------


def test_time_factor_identities(rng):
    q, p = _random_cotangent(4, rng)
    h = sphere_energy(q, p, A4)
    qdot, _ = SphereSystem(A4).field(np.concatenate([q, p]))[:4], None
    tf = nm.time_factors(q, qdot, A4, h)
    assert tf["dtau1_dt"] == pytest.approx(tf["dtau1_dt_on_level"], rel=1e-10)
    assert tf["dtau1_dt_on_level"] / tf["dtau_dt"] == pytest.approx(math.sqrt(2 * h), rel=1e-15)
    assert 1.0 / tf["dtau1_dt_on_level"] == pytest.approx(nm.mu_h(q, A4, h), rel=1e-14)


def test_isotropic_time_factors_are_constant(rng):
    A = np.full(4, 1.4)
    vals = [nm.time_factors(*_random_cotangent(4, rng), A, 1.0)["dtau_dt"] for _ in range(5)]
    assert np.ptp(vals) < 1e-15 * vals[0]


# --- correspondences ---------------------------------------------------------------------------


@pytest.mark.parametrize("n", [3, 4, 5])
def test_reduced_flow_maps_to_neumann(n, rng):
    A = np.sort(rng.uniform(0.5, 2.5, n))
    q, p = _random_cotangent(n, rng)
    p /= math.sqrt(sphere_energy(q, p, A))
    tr = integrate_flow(SphereSystem(A).field, np.concatenate([q, p]), IntegratorConfig(horizon=5.0, **TIGHT))
    for y in tr.states[:: max(1, len(tr) // 25)]:
        assert nm.neumann_residual_of_reduced(y[:n], y[n:], A, 1.0) < 1e-6
        assert abs(nm.neumann_F0(*nm.reduced_to_neumann(y[:n], y[n:], A, 1.0), A)) < 1e-8


@pytest.mark.parametrize("n", [3, 4])
def test_neumann_maps_back_to_reduced_flow(n, rng):
    A = np.sort(rng.uniform(0.5, 2.5, n))
    q, qp = neumann_start(A, rng)
    tr = run_neumann(A, np.concatenate([q, qp]), 5.0, 26)
    for y in tr.states:
        assert nm.reduced_residual_of_neumann(y[:n], y[n:], A, 1.0) < 1e-6
        qq, p = nm.neumann_to_reduced(y[:n], y[n:], A, 1.0)
        assert sphere_energy(qq, p, A) == pytest.approx(1.0, rel=1e-8)


def test_reduced_neumann_roundtrip(rng):
    q, p = _random_cotangent(4, rng)
    h = sphere_energy(q, p, A4)
    q2, p2 = nm.neumann_to_reduced(*nm.reduced_to_neumann(q, p, A4, h), A4, h)
    assert np.max(np.abs(p2 - p)) < 1e-13


def test_off_level_neumann_fails_backward_map(rng):
    # a Neumann state with F0 != 0 is not the image of a reduced trajectory
    q, qp = _random_cotangent(4, rng)
    qp *= 2.0
    assert abs(nm.neumann_F0(q, qp, A4)) > 1e-2
    tr = run_neumann(A4, np.concatenate([q, qp]), 2.0, 11)
    assert max(nm.reduced_residual_of_neumann(y[:4], y[4:], A4, 1.0) for y in tr.states) > 1e-3


def test_neumann_rescaled_matches_geodesic_flow(rng):
    h = 0.8
    q, qp = neumann_start(A4, rng, h)
    s = math.sqrt(2 * h)
    grid = np.linspace(0, 5.0, 26)
    neu = run_neumann(A4, np.concatenate([q, qp]), 5.0 * s, 26)
    mapped = np.array([np.concatenate(nm.neumann_to_geodesic(y[:4], y[4:], A4, h)) for y in neu.states])
    geo = GeodesicSystem(A4)
    gt = integrate_flow(geo.field, mapped[0], IntegratorConfig(horizon=5.0, **TIGHT), t_eval=grid)
    assert np.max(np.abs(mapped - gt.states)) < 1e-6


# --- Abel-Jacobi -----------------------------------------------------------------------------


def _aj_series(A, y0, horizon, samples):
    n = len(A)
    tr = run_neumann(A, y0, horizon, samples)
    lam, dlam = [], []
    for y in tr.states:
        pt = nm.spheroconic_forward(y[:n], A)
        lam.append(pt.lambdas)
        dlam.append(nm.spheroconic_velocity(y[:n], y[n:], pt.lambdas, A))
    inv = nm.neumann_invariants(nm.NeumannState(y0[:n], y0[n:]), A)
    return np.array(lam), np.array(dlam), inv


@pytest.mark.parametrize("n", [3, 4])
def test_abel_jacobi_quadratures(n, rng):
    A = np.sort(rng.uniform(0.5, 2.5, n))
    q, qp = neumann_start(A, rng)
    lam, dlam, inv = _aj_series(A, np.concatenate([q, qp]), 10.0, 1001)
    mc = nm.MotionConstants(1.0, inv["cs"])
    res, mask = nm.abel_jacobi_residual(lam, dlam, mc, A, branch_tol=1e-3)
    # samples near a turning point of some lambda_k are masked out
    assert mask.sum() > 0.2 * len(mask)
    assert np.nanmax(np.abs(res)) < 1e-5
    bad = nm.MotionConstants(1.0, inv["cs"] + np.eye(len(inv["cs"]))[0] * 1e-2)
    res2, mask2 = nm.abel_jacobi_residual(lam, dlam, bad, A, branch_tol=1e-3)
    assert np.median(np.nanmax(np.abs(res2[mask2]), axis=1)) > 1e-3


def test_abel_jacobi_tau_variant(rng):
    # in tau the derivatives pick up sqrt(2h) and so does the right side
    h = 2.0
    q, qp = neumann_start(A4, rng, h)
    lam, dlam, inv = _aj_series(A4, np.concatenate([q, qp]), 5.0, 401)
    mc = nm.MotionConstants(h, inv["cs"])
    res, mask = nm.abel_jacobi_residual(lam, math.sqrt(2 * h) * dlam, mc, A4, variant="tau", branch_tol=1e-3)
    assert mask.any()
    assert np.nanmax(np.abs(res)) < 1e-5


def test_branch_distance_is_zero_at_roots():
    mc = nm.MotionConstants(1.0, np.array([1.2, 1.5]))
    roots = np.sort(np.roots(mc.radical_poly(A4)).real)
    assert np.all(nm.branch_distance(roots, mc, A4) < 1e-12)
