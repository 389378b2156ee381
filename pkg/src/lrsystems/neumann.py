"""The Neumann system on S^{n-1}, spheroconic coordinates, the hyperelliptic
polynomial R, Abel-Jacobi residuals, and the time substitutions linking the
reduced LR flow, the Neumann flow and the geodesic flow.

Throughout ``I_i = 1 / A_i``.
"""

from dataclasses import dataclass
import itertools
import math

import numpy as np

from ._validation import check_positive_diagonal
from .reduced import sphere_vector_field


def _I(A):
    return 1.0 / check_positive_diagonal(A, "A")


@dataclass(frozen=True)
class NeumannState:
    q: np.ndarray
    qprime: np.ndarray

    def flat(self):
        return np.concatenate([self.q, self.qprime])


def neumann_multiplier(q, qprime, A):
    """``lambda = (A^-1 q, q) - (q', q')``, the multiplier keeping ``|q| = 1``."""
    return q @ (q / A) - qprime @ qprime


def neumann_vector_field(state, A):
    A = np.asarray(A, dtype=float)
    q, qp = state.q, state.qprime
    lam = neumann_multiplier(q, qp, A)
    return qp, -q / A + lam * q


class NeumannSystem:
    """Flat layout ``[q, q']`` in the time ``tau_1``."""

    def __init__(self, A):
        self.A = check_positive_diagonal(A, "A")
        self.n = self.A.shape[0]

    @property
    def layout(self):
        return [f"q_{i + 1}" for i in range(self.n)] + [f"qp_{i + 1}" for i in range(self.n)]

    def field(self, y):
        n, A = self.n, self.A
        q, qp = y[:n], y[n:]
        lam = q @ (q / A) - qp @ qp
        return np.concatenate([qp, -q / A + lam * q])

    def diagnostics(self):
        n, A = self.n, self.A
        return {
            "F0": lambda y: neumann_F0(y[:n], y[n:], A),
            "sphere": lambda y: abs(y[:n] @ y[:n] - 1.0),
            "tangency": lambda y: abs(y[:n] @ y[n:]),
        }


def neumann_F0(q, qprime, A):
    """``<Aq', q'><Aq, q> - <Aq, q'>^2 - <Aq, q>``; equals ``F(0)`` of the family."""
    A = np.asarray(A, dtype=float)
    Aq = A * q
    qAq = q @ Aq
    return (qprime @ (A * qprime)) * qAq - (Aq @ qprime) ** 2 - qAq


def neumann_integral_n3(q, qprime, A):
    """n = 3 form ``(I (q' x q), q' x q) - det I (I^-1 q, q)`` with ``I = A^-1``; equals ``F0 / det A``."""
    A = np.asarray(A, dtype=float)
    w = np.cross(qprime, q)
    return (w / A) @ w - (q @ (A * q)) / np.prod(A)


def family_F(lam, q, qprime, A):
    """``F(lam) = sum_{i<j} P_ij^2 / ((lam - I_i)(lam - I_j)) + sum_i q_i^2 / (lam - I_i)``."""
    I = _I(A)
    P = np.outer(q, qprime) - np.outer(qprime, q)
    d = lam - I
    iu = np.triu_indices(len(I), 1)
    return np.sum(P[iu] ** 2 / (d[iu[0]] * d[iu[1]])) + np.sum(q * q / d)


def phi_F_poly(q, qprime, A):
    """Coefficients (highest degree first) of ``Phi(lam) F(lam)``, ``Phi = prod (lam - I_i)``."""
    I = _I(A)
    n = len(I)
    P = np.outer(q, qprime) - np.outer(qprime, q)
    out = np.zeros(n)
    for i in range(n):
        out = out + q[i] ** 2 * np.poly(np.delete(I, i))
    for i, j in itertools.combinations(range(n), 2):
        c = np.zeros(n)
        c[1:] = np.poly(np.delete(I, [i, j]))
        out = out + P[i, j] ** 2 * c
    return out


class DegenerateTorusError(ValueError):
    pass


@dataclass(frozen=True)
class MotionConstants:
    """Energy ``h`` and the constants ``c_2..c_{n-1}`` (``c_1 = 0``)."""

    h: float
    cs: np.ndarray

    def radical_poly(self, A):
        """``R(lam) = -(lam - I_1)...(lam - I_n) lam (lam - c_2)...(lam - c_{n-1})``."""
        I = _I(A)
        return -np.polymul(np.poly(I), np.poly(np.concatenate([[0.0], np.asarray(self.cs, dtype=float)])))

    def R(self, lam, A):
        return np.polyval(self.radical_poly(A), lam)


def neumann_invariants(state, A, zero_tol=1e-10, gap_tol=1e-6):
    """``{F0, cs, F_evaluator}``.

    ``cs`` are the roots of ``Phi F`` other than the one forced to zero when
    ``F0 = 0`` (deflated analytically).  Complex or colliding roots raise
    :class:`DegenerateTorusError`.
    """
    A = np.asarray(A, dtype=float)
    q, qp = state.q, state.qprime
    F0 = neumann_F0(q, qp, A)
    poly = phi_F_poly(q, qp, A)
    if abs(F0) < zero_tol:
        roots = np.roots(poly[:-1])
    else:
        roots = np.roots(poly)
    if roots.size and np.max(np.abs(roots.imag)) > 1e-8 * max(1.0, np.max(np.abs(roots))):
        raise DegenerateTorusError("constants of motion are not real")
    cs = np.sort(roots.real)
    if cs.size > 1 and np.min(np.diff(cs)) < gap_tol:
        raise DegenerateTorusError("constants of motion nearly collide")
    return {"F0": F0, "cs": cs, "F_evaluator": lambda lam: family_F(lam, q, qp, A)}


# ----------------------------------------------------------------------------
# spheroconic coordinates


@dataclass(frozen=True)
class SpheroconicPoint:
    lambdas: np.ndarray
    signs: np.ndarray
    boundary: bool = False


def _bisect(f, a, b, tol=1e-14):
    fa = f(a)
    for _ in range(200):
        if b - a <= tol * max(1.0, abs(b)):
            break
        m = 0.5 * (a + b)
        fm = f(m)
        if fm == 0.0:
            return m
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


def spheroconic_forward(q, A, zero_tol=1e-12):
    """Roots of ``sum q_i^2 / (lam - I_i)`` on the interlacing intervals.

    A component with ``|q_i| < zero_tol`` pins one root to ``I_i``; the
    point is then returned with ``boundary=True``.
    """
    I = _I(A)
    q = np.asarray(q, dtype=float)
    order = np.argsort(I)
    Is, qs = I[order], q[order]
    n = len(I)
    zero = np.abs(qs) < zero_tol
    lams = np.empty(n - 1)

    def f(lam):
        return np.sum(np.where(zero, 0.0, qs * qs) / (lam - Is))

    for k in range(n - 1):
        a, b = Is[k], Is[k + 1]
        if zero[k] or a == b:
            # a repeated I_i also pins a root; the point is not a regular chart point
            lams[k] = a
        elif zero[k + 1]:
            lams[k] = b
        else:
            lo = max(np.nextafter(a, b), a + (b - a) * 1e-16)
            hi = min(np.nextafter(b, a), b - (b - a) * 1e-16)
            lams[k] = _bisect(f, lo, hi)
    signs = np.where(q >= 0, 1.0, -1.0)
    return SpheroconicPoint(lams, signs, bool(np.any(zero) or np.any(np.diff(Is) == 0)))


def spheroconic_inverse(point, A):
    """``q_i^2 = prod_k (I_i - lam_k) / prod_{j != i} (I_i - I_j)`` with the stored signs."""
    I = _I(A)
    lam = np.asarray(point.lambdas, dtype=float)
    n = len(I)
    q2 = np.empty(n)
    for i in range(n):
        q2[i] = np.prod(I[i] - lam) / np.prod(np.delete(I[i] - I, i))
    return np.asarray(point.signs) * np.sqrt(np.maximum(q2, 0.0))


def spheroconic(value, A, direction="forward"):
    if direction == "forward":
        return spheroconic_forward(value, A)
    if direction == "inverse":
        return spheroconic_inverse(value, A)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def spheroconic_velocity(q, qdot, lambdas, A):
    """``d lam_k`` along ``qdot`` by implicit differentiation of ``sum q_i^2/(lam - I_i) = 0``."""
    I = _I(A)
    out = np.empty(len(lambdas))
    for k, lam in enumerate(lambdas):
        d = lam - I
        out[k] = (2 * np.sum(q * qdot / d)) / np.sum(q * q / d**2)
    return out


# ----------------------------------------------------------------------------
# time substitutions


def time_factors(q, qdot, A, h):
    """Ratios between the times ``t``, ``tau`` and ``tau_1``.

    ``dtau1_dt`` uses the actual velocity ``qdot = dq/dt``; the other three
    only need ``q`` and the energy level ``h``.
    """
    A = np.asarray(A, dtype=float)
    q, qdot = np.asarray(q, dtype=float), np.asarray(qdot, dtype=float)
    detA = np.prod(A)
    Aq = A * q
    qAq = q @ Aq
    # det A <q^qdot, I(q^qdot)> = (Aq, q)(A qdot, qdot) - (Aq, qdot)^2
    two_h_det = qAq * (qdot @ (A * qdot)) - (Aq @ qdot) ** 2
    dtau_dt = math.sqrt(detA / qAq)
    return {
        "dtau1_dt": math.sqrt(two_h_det / qAq),
        "dtau1_dt_on_level": math.sqrt(2 * h * detA / qAq),
        "dtau_dt": dtau_dt,
        "dtau1_dtau": math.sqrt(2 * h),
    }


def mu_h(q, A, h):
    """``dt / dtau_1`` on the level ``E = h``."""
    A = np.asarray(A, dtype=float)
    return math.sqrt((q @ (A * q)) / (2 * h * np.prod(A)))


def momentum_from_velocity(q, qdot, A):
    """Invert the ``qdot`` half of the reduced sphere field: ``p = ((q,Aq) A qdot - (qdot, Aq) A q) / det A``."""
    A = np.asarray(A, dtype=float)
    Aq = A * q
    return ((q @ Aq) * (A * qdot) - (qdot @ Aq) * Aq) / np.prod(A)


def _complex_jvp(f, x, v, h=1e-30):
    return np.imag(f(x + 1j * h * v)) / h


def reduced_to_neumann(q, p, A, h):
    """``(q, q')`` with ``q' = mu_h qdot``."""
    qdot, _ = sphere_vector_field(q, p, A)
    return q, mu_h(q, A, h) * qdot


def neumann_residual_of_reduced(q, p, A, h):
    """Neumann-ODE residual ``|q'' + A^-1 q - lambda q|`` of the reduced flow seen in ``tau_1``.

    ``q''`` is ``mu (mu_dot qdot + mu qddot)`` with ``qddot`` an exact
    complex-step directional derivative of the reduced field.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]

    def qdot_of(y):
        return sphere_vector_field(y[:n], y[n:], A)[0]

    y = np.concatenate([q, p])
    qdot, pdot = sphere_vector_field(q, p, A)
    qddot = _complex_jvp(qdot_of, y.astype(complex), np.concatenate([qdot, pdot]))
    mu = mu_h(q, A, h)
    mudot = mu * ((A * q) @ qdot) / (q @ (A * q))
    qpp = mu * (mudot * qdot + mu * qddot)
    qp = mu * qdot
    lam = neumann_multiplier(q, qp, A)
    return float(np.max(np.abs(qpp + q / A - lam * q)))


def neumann_to_reduced(q, qprime, A, h):
    """``(q, p)`` with ``qdot = q' / mu_h`` and ``p`` from :func:`momentum_from_velocity`."""
    qdot = qprime / mu_h(q, A, h)
    return q, momentum_from_velocity(q, qdot, A)


def reduced_residual_of_neumann(q, qprime, A, h):
    """Residual of the reduced LR ODE along a Neumann trajectory mapped back to ``t``."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    mu = mu_h(q, A, h)

    def chart(y):
        qq, qp = y[:n], y[n:]
        m = np.sqrt((qq @ (A * qq)) / (2 * h * np.prod(A)))
        qdot = qp / m
        Aq = A * qq
        p = ((qq @ Aq) * (A * qdot) - (qdot @ Aq) * Aq) / np.prod(A)
        return np.concatenate([qq, p])

    y = np.concatenate([q, qprime])
    v = NeumannSystem(A).field(y)
    measured = _complex_jvp(chart, y.astype(complex), v) / mu
    qq, p = neumann_to_reduced(q, qprime, A, h)
    dq, dp = sphere_vector_field(qq, p, A)
    return float(np.max(np.abs(measured - np.concatenate([dq, dp]))))


def neumann_to_geodesic(q, qprime, A, h):
    """``(q, p~)`` for the geodesic flow with ``dq/dtau = sqrt(2h) q'``."""
    A = np.asarray(A, dtype=float)
    qt = math.sqrt(2 * h) * np.asarray(qprime, dtype=float)
    Aq = A * q
    return q, A * qt - (Aq @ qt) / (q @ Aq) * Aq


# ----------------------------------------------------------------------------
# Abel-Jacobi quadratures


def initial_branch_signs(lambdas, dlambdas, constants, A, variant="tau1"):
    """Sign pattern of ``sqrt R(lam_s)`` that best satisfies the quadratures at one sample."""
    m = len(lambdas)
    best, best_err = None, math.inf
    for signs in itertools.product((1.0, -1.0), repeat=m):
        r = _aj_residual(lambdas, dlambdas, np.array(signs), constants, A, variant)
        err = np.max(np.abs(r))
        if err < best_err:
            best, best_err = np.array(signs), err
    return best


def _aj_residual(lam, dlam, signs, constants, A, variant):
    m = len(lam)
    Rv = constants.R(lam, A)
    # off the true level set R can dip negative; |R| keeps the residual finite
    root = signs * np.sqrt(np.abs(Rv))
    rhs = 1.0 if variant == "tau1" else math.sqrt(2 * constants.h)
    out = np.empty(m)
    for k in range(1, m + 1):
        out[k - 1] = np.sum(lam ** (k - 1) * dlam / (2 * root)) - (rhs if k == m else 0.0)
    return out


def branch_distance(lambdas, constants, A):
    """Distance of each ``lam_s`` to the nearest root of ``R``, relative to the spread of the roots."""
    roots = np.sort(np.roots(constants.radical_poly(A)).real)
    scale = roots[-1] - roots[0]
    lam = np.asarray(lambdas, dtype=float)
    return np.min(np.abs(lam[..., None] - roots), axis=-1) / scale


def abel_jacobi_residual(lambdas, dlambdas, constants, A, variant="tau1", branch_tol=1e-4):
    """Per-sample residuals of the Abel-Jacobi quadratures.

    ``lambdas`` and ``dlambdas`` are ``(m, n-1)`` arrays of spheroconic
    coordinates and their derivatives in ``tau_1`` (``variant="tau1"``,
    right side 1) or ``tau`` (``variant="tau"``, right side sqrt(2h)).
    The sign of each ``sqrt R(lam_s)`` is fixed at the first sample by
    best fit and then carried by continuity: it flips whenever ``lam_s``
    turns around (passes a branch point).  Samples where some ``lam_s`` lies
    within ``branch_tol`` (relative, see :func:`branch_distance`) of a root
    of ``R`` are excluded (``mask`` False).
    """
    lambdas = np.atleast_2d(np.asarray(lambdas, dtype=float))
    dlambdas = np.atleast_2d(np.asarray(dlambdas, dtype=float))
    ok = np.all(branch_distance(lambdas, constants, A) > branch_tol, axis=1)
    res = np.full(lambdas.shape, np.nan)
    if not np.any(ok):
        return res, ok
    first = int(np.argmax(ok))
    signs = initial_branch_signs(lambdas[first], dlambdas[first], constants, A, variant)
    prev_d = dlambdas[first].copy()
    for i in range(first, lambdas.shape[0]):
        d = dlambdas[i]
        flip = (np.sign(d) != np.sign(prev_d)) & (d != 0) & (prev_d != 0)
        signs = np.where(flip, -signs, signs)
        prev_d = np.where(d != 0, d, prev_d)
        if ok[i]:
            res[i] = _aj_residual(lambdas[i], d, signs, constants, A, variant)
    return res, ok


__all__ = [
    "DegenerateTorusError",
    "MotionConstants",
    "NeumannState",
    "NeumannSystem",
    "SpheroconicPoint",
    "abel_jacobi_residual",
    "branch_distance",
    "family_F",
    "initial_branch_signs",
    "momentum_from_velocity",
    "mu_h",
    "neumann_F0",
    "neumann_integral_n3",
    "neumann_invariants",
    "neumann_multiplier",
    "neumann_residual_of_reduced",
    "neumann_to_geodesic",
    "neumann_to_reduced",
    "neumann_vector_field",
    "phi_F_poly",
    "reduced_residual_of_neumann",
    "reduced_to_neumann",
    "spheroconic",
    "spheroconic_forward",
    "spheroconic_inverse",
    "spheroconic_velocity",
    "time_factors",
]
