import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrsystems._validation import ConstraintViolationError
from lrsystems.algebra import Frame, InertiaSpec, killing_inner, project_constraint_plane, random_frame, wedge
from lrsystems.integrate import IntegratorConfig, integrate_flow, reparametrized_integrate
from lrsystems.reduced import (
    GeodesicSystem,
    ReducedState,
    SphereChart,
    SphereSystem,
    StiefelSystem,
    _random_cotangent,
    chaplygin_pi_residual,
    chaplygin_transform,
    geodesic_F2_star,
    geodesic_lagrangian,
    geodesic_vector_field,
    momentum_map,
    momentum_map_star,
    reduced_measure_density,
    reduced_omega,
    reducing_multiplier,
    sphere_chart_measure_residual,
    sphere_density,
    sphere_energy,
    sphere_vector_field,
    state_from_velocity,
    stiefel_vector_field,
)

TIGHT = dict(rel_tol=1e-11, abs_tol=1e-13)


def stiefel_point(n, r, rng, scale=1.0):
    X = random_frame(n, rng).vectors[:r].T
    P = scale * rng.standard_normal((n, r))
    S = X.T @ P
    return ReducedState(X, P - X @ (0.5 * (S + S.T)))


def distinct_A(n, rng):
    return np.sort(rng.uniform(0.5, 2.5, n))


def test_reduced_state_validation(rng):
    s = stiefel_point(4, 2, rng)
    assert s.n == 4 and s.r == 2
    s.check()
    with pytest.raises(ConstraintViolationError):
        ReducedState(2 * s.X, s.P).check()
    with pytest.raises(ValueError):
        ReducedState(np.zeros((4, 2)), np.zeros((4, 3)))


# --- momentum maps -------------------------------------------------------------------


def test_momentum_map_rank_one_is_wedge(rng):
    q, v = _random_cotangent(5, rng)
    assert np.max(np.abs(momentum_map(q, v) - wedge(q, v))) < 1e-15
    assert np.all(momentum_map(q, np.zeros(5)) == 0)


def test_momentum_map_rank_two(rng):
    s = stiefel_point(4, 2, rng)
    X, Xdot = s.X, s.P  # any tangent vector will do
    Phi = momentum_map(X, Xdot)
    fr = Frame(X.T, 2)
    assert np.max(np.abs(Phi - project_constraint_plane(Phi, fr))) < 1e-12
    assert np.max(np.abs(Xdot + Phi @ X)) < 1e-10


def test_momentum_map_star_special_cases(rng):
    q, p = _random_cotangent(4, rng)
    assert np.max(np.abs(momentum_map_star(ReducedState(q, p)) - wedge(q, p))) < 1e-15
    assert np.all(momentum_map_star(ReducedState(q, np.zeros(4))) == 0)


@pytest.mark.parametrize("n,r", [(5, 2), (4, 1), (5, 3)])
def test_momentum_map_star_is_bijective(n, r, rng):
    spec = InertiaSpec.special(distinct_A(n, rng))
    s = stiefel_point(n, r, rng)
    omega = reduced_omega(s, spec)
    back = state_from_velocity(s.X, -omega @ s.X, spec)
    assert np.max(np.abs(back.P - s.P)) < 1e-9


# --- reduced fields ---------------------------------------------------------------------


def test_isotropic_sphere_flow_is_great_circle(rng):
    q, p = _random_cotangent(4, rng)
    dq, dp = sphere_vector_field(q, p, np.ones(4))
    assert np.allclose(dq, p, atol=1e-15)
    assert np.allclose(dp, -(p @ p) * q, atol=1e-15)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_stiefel_rank_one_matches_sphere(n, rng):
    A = distinct_A(n, rng)
    spec = InertiaSpec.special(A)
    for _ in range(5):
        q, p = _random_cotangent(n, rng)
        dX, dP = stiefel_vector_field(ReducedState(q, p), spec)
        dq, dp = sphere_vector_field(q, p, A)
        assert np.max(np.abs(dX[:, 0] - dq)) < 1e-10
        assert np.max(np.abs(dP[:, 0] - dp)) < 1e-10
        assert StiefelSystem(spec, 1).energy(np.concatenate([q, p])) == pytest.approx(sphere_energy(q, p, A), rel=1e-12)


def test_sphere_flow_conserves_constraints_and_energy(rng):
    A = distinct_A(4, rng)
    sysm = SphereSystem(A)
    q, p = _random_cotangent(4, rng)
    p /= math.sqrt(sphere_energy(q, p, A))  # unit energy
    # at rel_tol 1e-11 this draw drifts by 1.2e-9; the drift scales with the tolerance
    cfg = IntegratorConfig(horizon=20.0, rel_tol=1e-12, abs_tol=1e-14)
    tr = integrate_flow(sysm.field, np.concatenate([q, p]), cfg, diagnostics=sysm.diagnostics())
    assert np.max(tr.diagnostics["sphere"] + tr.diagnostics["tangency"]) < 1e-9
    e = tr.diagnostics["energy"]
    assert np.max(np.abs(e - e[0])) / e[0] < 1e-9


@pytest.mark.parametrize("generic", [False, True])
def test_stiefel_flow_integrals(generic, rng):
    n, r = 4, 2
    if generic:
        B = rng.standard_normal((6, 6))
        spec = InertiaSpec.generic(B @ B.T + 2 * np.eye(6))
    else:
        spec = InertiaSpec.special(distinct_A(n, rng))
    sysm = StiefelSystem(spec, r)
    y0 = sysm.pack(stiefel_point(n, r, rng))
    tr = integrate_flow(sysm.field, y0, IntegratorConfig(horizon=10.0, **TIGHT), diagnostics=sysm.diagnostics())
    assert np.max(tr.diagnostics["stiefel"] + tr.diagnostics["tangency"]) < 1e-8
    e = tr.diagnostics["energy"]
    assert np.max(np.abs(e - e[0])) / e[0] < 1e-8
    PtP0, cc0 = sysm.invariants(y0)
    for y in tr.states[:: max(1, len(tr) // 20)]:
        PtP, cc = sysm.invariants(y)
        assert np.max(np.abs(PtP - PtP0)) < 1e-8
        assert np.max(np.abs(cc - cc0)) < 1e-8


def test_isotropic_stiefel_energy_exact(rng):
    spec = InertiaSpec.isotropic(4, 0.8)
    s = stiefel_point(4, 2, rng)
    omega = reduced_omega(s, spec)
    M = momentum_map_star(s)
    assert np.max(np.abs(spec.forward(omega) - M)) < 1e-13


# --- densities and measures ------------------------------------------------------------------


def test_density_rank_one_n3(rng):
    A = np.array([0.7, 1.1, 1.9])
    spec = InertiaSpec.special(A)
    vals = []
    for _ in range(20):
        q, p = _random_cotangent(3, rng)
        vals.append(reduced_measure_density(ReducedState(q, p), spec) * math.sqrt(q @ (A * q)))
    assert np.ptp(vals) / np.mean(vals) < 1e-12


@pytest.mark.parametrize("n", [4, 5])
def test_density_matches_closed_form(n, rng):
    A = distinct_A(n, rng)
    spec = InertiaSpec.special(A)
    vals = []
    for _ in range(20):
        q, p = _random_cotangent(n, rng)
        vals.append(reduced_measure_density(ReducedState(q, p), spec) / sphere_density(q, A))
    assert np.ptp(vals) / np.mean(vals) < 1e-12


def test_density_constant_for_corank_one(rng):
    spec = InertiaSpec.special(distinct_A(4, rng))
    vals = [reduced_measure_density(stiefel_point(4, 3, rng), spec) for _ in range(20)]
    assert np.ptp(vals) / np.mean(vals) < 1e-12


@pytest.mark.parametrize("n", [3, 4, 5])
def test_sphere_measure_in_charts(n, rng):
    A = distinct_A(n, rng)
    good, bad = [], []
    for _ in range(10):
        q, p = _random_cotangent(n, rng)
        good.append(abs(sphere_chart_measure_residual(q, p, A)))
        bad.append(abs(sphere_chart_measure_residual(q, p, A, log_density=lambda z: 0.0)))
    assert max(good) < 1e-5
    if n >= 4:
        assert np.median(bad) > 1e-3


def test_chart_roundtrip(rng):
    q, p = _random_cotangent(5, rng)
    chart = SphereChart.around(q)
    u, pu = chart.to_chart(q, p)
    q2, p2 = chart.from_chart(u, pu)
    assert np.max(np.abs(q2 - q)) < 1e-14 and np.max(np.abs(p2 - p)) < 1e-13
    with pytest.raises(ValueError):
        chart.q_of(np.ones(4))


# --- reducing multiplier and Hamiltonization ----------------------------------------------------


@pytest.mark.parametrize("n", [3, 4, 5])
def test_reducing_multiplier_residuals(n, rng):
    A = distinct_A(n, rng)
    for _ in range(10):
        q, p = _random_cotangent(n, rng)
        out = chaplygin_pi_residual(q, p, A)
        assert out["pi_residual"] < 1e-6
        assert out["alpha_residual"] < 1e-6


def test_reducing_multiplier_wrong_power_fails(rng):
    A = distinct_A(4, rng)
    vals = [chaplygin_pi_residual(*_random_cotangent(4, rng), A, n_power=1.1)["alpha_residual"] for _ in range(5)]
    assert np.median(vals) > 1e-3


def test_isotropic_reducing_multiplier(rng):
    A = np.full(4, 1.3)
    q, p = _random_cotangent(4, rng)
    out = chaplygin_pi_residual(q, p, A)
    # exact zero in theory; the nested finite differences leave a ~1e-9 floor
    assert out["pi_residual"] < 1e-8 and out["alpha_residual"] < 1e-8
    assert reducing_multiplier(q, A) == pytest.approx(1.3 ** 1.5)


@given(st.integers(0, 2**32 - 1), st.integers(3, 6))
def test_chaplygin_roundtrip(seed, n):
    rng = np.random.default_rng(seed)
    A = distinct_A(n, rng)
    q, p = _random_cotangent(n, rng)
    rs = chaplygin_transform(q, p, A)
    q2, p2 = chaplygin_transform(rs.q, rs.p_tilde, A, direction="to_t")
    assert np.max(np.abs(p2 - p)) < 1e-14 * max(1.0, np.max(np.abs(p)))
    assert np.array_equal(q2, q)


def test_chaplygin_direction_validation(rng):
    with pytest.raises(ValueError):
        chaplygin_transform(*_random_cotangent(3, rng), np.ones(3), direction="sideways")


@pytest.mark.parametrize("n", [3, 4, 5])
def test_hamiltonization(n, rng):
    A = distinct_A(n, rng)
    q, p = _random_cotangent(n, rng)
    y0 = np.concatenate([q, p])
    grid = np.linspace(0, 5.0, 41)
    cfg = IntegratorConfig(horizon=5.0, **TIGHT)
    red = reparametrized_integrate(SphereSystem(A).field, lambda y: 1.0 / reducing_multiplier(y[:n], A), y0, cfg, t_eval=grid)
    mapped = np.array([np.concatenate([y[:n], chaplygin_transform(y[:n], y[n : 2 * n], A).p_tilde]) for y in red.states])
    geo = GeodesicSystem(A)
    gt = integrate_flow(geo.field, mapped[0], cfg, t_eval=grid, diagnostics=geo.diagnostics())
    assert np.max(np.abs(mapped - gt.states)) < 1e-6
    H = gt.diagnostics["H_star"]
    assert np.max(np.abs(H - H[0])) / H[0] < 1e-9
    if n == 3:
        F = gt.diagnostics["F2_star"]
        assert np.max(np.abs(F - F[0])) / max(abs(F[0]), 1.0) < 1e-8


def test_geodesic_isotropic_unit_speed(rng):
    q, p = _random_cotangent(4, rng)
    dq, dp = geodesic_vector_field(q, p, np.ones(4))
    assert np.allclose(dq, p) and np.allclose(dp, -(p @ p) * q)
    assert geodesic_lagrangian(q, dq, np.ones(4)) == pytest.approx(0.5 * p @ p)


def test_geodesic_hamiltonian_long_horizon(rng):
    for n in (3, 4):
        A = distinct_A(n, rng)
        geo = GeodesicSystem(A)
        q, p = _random_cotangent(n, rng)
        tr = integrate_flow(geo.field, np.concatenate([q, p]), IntegratorConfig(horizon=20.0, **TIGHT), diagnostics=geo.diagnostics())
        H = tr.diagnostics["H_star"]
        assert np.max(np.abs(H - H[0])) / H[0] < 1e-9


def test_legendre_transform_consistency(rng):
    # H* evaluated at p~ equals L* at the velocity q' = dH*/dp~
    A = distinct_A(4, rng)
    q, p = _random_cotangent(4, rng)
    dq, _ = geodesic_vector_field(q, p, A)
    assert geodesic_lagrangian(q, dq, A) == pytest.approx(0.5 * p @ (p / A), rel=1e-12)
    with pytest.raises(ValueError):
        geodesic_F2_star(q, dq, A)


def test_reduced_energy_equals_full_energy(rng):
    A = distinct_A(4, rng)
    spec = InertiaSpec.special(A)
    q, p = _random_cotangent(4, rng)
    omega = reduced_omega(ReducedState(q, p), spec)
    assert spec.energy(omega) == pytest.approx(sphere_energy(q, p, A), rel=1e-12)
    fr = Frame(q[None, :], 1)
    assert np.max(np.abs(project_constraint_plane(omega, fr) - omega)) < 1e-13
    assert killing_inner(omega, omega) > 0
