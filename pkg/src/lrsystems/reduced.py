"""Chaplygin reduction of the LR system to T*V(r, n) and T*S^{n-1}.

States are kept in redundant coordinates: ``X`` is an ``n x r`` matrix with
orthonormal columns and ``P`` satisfies ``X^T P + P^T X = 0`` (for r = 1,
``q`` on the unit sphere and ``p`` tangent to it).  Local charts appear only
inside the verification helpers (measure and reducing-multiplier checks).
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._validation import ConstraintViolationError, DegenerateConfigurationError, check_positive_diagonal
from .algebra import Frame, constraint_bases, gram, killing_inner, project_constraint_plane, restricted_determinants
from .dynamics import char_coefficients


@dataclass(frozen=True)
class ReducedState:
    X: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        P = np.array(self.P, dtype=float)
        if X.ndim == 1:
            X, P = X[:, None], P[:, None]
        if X.shape != P.shape or X.shape[1] > X.shape[0]:
            raise ValueError(f"X and P must both be n x r with r <= n, got {X.shape} and {P.shape}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "P", P)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def r(self):
        return self.X.shape[1]

    def residuals(self):
        X, P = self.X, self.P
        S = X.T @ P
        return (
            float(np.max(np.abs(X.T @ X - np.eye(self.r)))),
            float(np.max(np.abs(S + S.T))),
        )

    def check(self, tol=1e-8):
        a, b = self.residuals()
        if a > tol or b > tol:
            raise ConstraintViolationError(f"reduced state off its manifold (X^T X: {a:.2e}, X^T P + P^T X: {b:.2e})")
        return self


def momentum_map(X, Xdot, tol=1e-8):
    """``X Xdot^T - Xdot X^T + 1/2 X [X^T Xdot - Xdot^T X] X^T``."""
    X = np.atleast_2d(np.asarray(X, dtype=float).T).T
    Xdot = np.atleast_2d(np.asarray(Xdot, dtype=float).T).T
    ReducedState(X, Xdot).check(tol)
    S = X.T @ Xdot
    return X @ Xdot.T - Xdot @ X.T + 0.5 * X @ (S - S.T) @ X.T


def momentum_map_star(state):
    """``M = X P^T - P X^T + 1/2 X [X^T P - P^T X] X^T``; lies in ``D_r``."""
    X, P = state.X, state.P
    S = X.T @ P
    return X @ P.T - P @ X.T + 0.5 * X @ (S - S.T) @ X.T


def _plane_basis(X):
    # polar factor: identity on V(r, n), and keeps the field defined at the
    # slightly off-manifold stages of a Runge-Kutta step
    U, _, Vt = np.linalg.svd(X, full_matrices=False)
    frame = Frame((U @ Vt).T, X.shape[1])
    D, _ = constraint_bases(frame)
    return D


def reduced_omega(state, spec):
    """The element of ``D_r`` with ``pr_D(I omega) = M*`` (Cholesky in the e_k ^ e_i basis)."""
    D = _plane_basis(state.X)
    G = gram(D, spec.forward)
    M = momentum_map_star(state)
    b = np.array([killing_inner(W, M) for W in D])
    try:
        c = cho_solve(cho_factor(G), b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError("I restricted to D_r is singular (mu_tilde = 0)") from exc
    return np.tensordot(c, D, axes=1)


def stiefel_vector_field(state, spec):
    omega = reduced_omega(state, spec)
    return -omega @ state.X, -omega @ state.P


def state_from_velocity(X, Xdot, spec):
    """Cotangent point whose reduced flow starts with velocity ``Xdot``."""
    X = np.atleast_2d(np.asarray(X, dtype=float).T).T
    omega = momentum_map(X, Xdot)
    M = project_constraint_plane(spec.forward(omega), Frame(X.T, X.shape[1]))
    # M* = X P^T - P X^T + ... is solved by P = -M X + X S, S symmetric part fixed by tangency
    P = -M @ X
    S = X.T @ P
    P = P - X @ (0.5 * (S + S.T))
    return ReducedState(X, P)


def sphere_vector_field(q, p, A):
    """Reduced LR flow on T*S^{n-1} for the special inertia with parameters ``A``.

    Works on complex input too (used for complex-step derivatives).
    """
    A = np.asarray(A, dtype=float)
    q, p = np.asarray(q), np.asarray(p)
    detA = np.prod(A)
    qAq = q @ (A * q)
    Ainv_p = p / A
    pAq = Ainv_p @ q
    qdot = detA / qAq * (Ainv_p - pAq * q)
    Lam = detA * (p @ Ainv_p - (p @ q) * pAq) / qAq
    return qdot, -Lam * q


def sphere_energy(q, p, A):
    """``H = 1/2 det A (p, A^-1 p) / (q, A q)``."""
    A = np.asarray(A, dtype=float)
    return 0.5 * np.prod(A) * (p @ (p / A)) / (q @ (A * q))


def reduced_measure_density(state, spec):
    """``1 / mu_tilde(X)``."""
    return 1.0 / restricted_determinants(spec, Frame(state.X.T, state.r)).mu_tilde


def sphere_density(q, A):
    """``(A q, q)^(-(n-2)/2)``, the r = 1 density up to a constant factor."""
    A = np.asarray(A, dtype=float)
    return (q @ (A * q)) ** (-(len(A) - 2) / 2.0)


# ----------------------------------------------------------------------------
# reducing multiplier and the geodesic flow


def reducing_multiplier(q, A):
    """``N(q) = sqrt(det A / (A q, q))``."""
    A = np.asarray(A, dtype=float)
    return math.sqrt(np.prod(A) / (q @ (A * q)))


@dataclass(frozen=True)
class RescaledState:
    q: np.ndarray
    p_tilde: np.ndarray
    tau: float = 0.0


def chaplygin_transform(q, p, A, direction="to_tau", tau=0.0):
    """``p~ = N p`` (``to_tau``) or ``p = p~ / N`` (``to_t``); ``q`` is unchanged.

    ``to_tau`` returns a :class:`RescaledState`, ``to_t`` a ``(q, p)`` pair.
    The time relation is ``d tau = N dt``.
    """
    q = np.asarray(q, dtype=float)
    N = reducing_multiplier(q, A)
    if direction == "to_tau":
        return RescaledState(q, N * np.asarray(p, dtype=float), tau)
    if direction == "to_t":
        return q, np.asarray(p, dtype=float) / N
    raise ValueError(f"direction must be 'to_tau' or 'to_t', got {direction!r}")


def geodesic_vector_field(q, p_tilde, A):
    """Dirac-bracket flow of ``H* = 1/2 (p~, A^-1 p~)`` on ``{|q| = 1, (q, p~) = 0}``.

    On the constraint surface ``H*`` is the Legendre transform of
    :func:`geodesic_lagrangian`, so this is the geodesic flow of the metric
    ``[(A dq, dq)(A q, q) - (A q, dq)^2] / (A q, q)``.
    """
    A = np.asarray(A, dtype=float)
    q, p = np.asarray(q, dtype=float), np.asarray(p_tilde, dtype=float)
    qq = q @ q
    Ap = p / A
    qAp = q @ Ap
    dq = Ap - qAp / qq * q
    dp = -(p @ Ap) / qq * q + qAp / qq * p
    return dq, dp


def geodesic_hamiltonian(q, p_tilde, A):
    A = np.asarray(A, dtype=float)
    return 0.5 * p_tilde @ (p_tilde / A)


def geodesic_lagrangian(q, qprime, A):
    """``L* = 1/2 (q, Aq)^-1 [(A q', q')(A q, q) - (A q, q')^2]``."""
    A = np.asarray(A, dtype=float)
    Aq = A * q
    qAq = q @ Aq
    return 0.5 * ((qprime @ (A * qprime)) * qAq - (Aq @ qprime) ** 2) / qAq


def geodesic_F2_star(q, qprime, A):
    """n = 3 quadratic integral ``((I w, I w) - (I w, q)^2) / (2 (q, A q))``,
    ``w = q' x q``, ``I = A^-1``: the pullback of ``F2`` under the reduction."""
    A = np.asarray(A, dtype=float)
    if A.shape[0] != 3:
        raise ValueError("F2* is defined for n = 3")
    w = np.cross(qprime, q)
    Iw = w / A
    return (Iw @ Iw - (Iw @ q) ** 2) / (2.0 * (q @ (A * q)))


# ----------------------------------------------------------------------------
# flat systems


class SphereSystem:
    """Flat layout ``[q, p]``."""

    def __init__(self, A):
        self.A = check_positive_diagonal(A, "A")
        self.n = self.A.shape[0]

    @property
    def layout(self):
        return [f"q_{i + 1}" for i in range(self.n)] + [f"p_{i + 1}" for i in range(self.n)]

    def field(self, y):
        dq, dp = sphere_vector_field(y[: self.n], y[self.n :], self.A)
        return np.concatenate([dq, dp])

    def diagnostics(self):
        n, A = self.n, self.A
        return {
            "energy": lambda y: sphere_energy(y[:n], y[n:], A),
            "sphere": lambda y: abs(y[:n] @ y[:n] - 1.0),
            "tangency": lambda y: abs(y[:n] @ y[n:]),
        }


class StiefelSystem:
    """Flat layout ``[X (row-major n x r), P (row-major n x r)]``."""

    def __init__(self, spec, r):
        self.spec, self.n, self.r = spec, spec.n, r
        if not 1 <= r < self.n:
            raise ValueError(f"need 1 <= r < n, got r={r}, n={self.n}")

    @property
    def layout(self):
        names = [f"X_{i + 1}{k + 1}" for i in range(self.n) for k in range(self.r)]
        return names + [f"P_{i + 1}{k + 1}" for i in range(self.n) for k in range(self.r)]

    def unpack(self, y):
        m = self.n * self.r
        return ReducedState(y[:m].reshape(self.n, self.r), y[m : 2 * m].reshape(self.n, self.r))

    def pack(self, state):
        return np.concatenate([state.X.ravel(), state.P.ravel()])

    def field(self, y):
        dX, dP = stiefel_vector_field(self.unpack(y), self.spec)
        return np.concatenate([dX.ravel(), dP.ravel()])

    def energy(self, y):
        st = self.unpack(y)
        omega = reduced_omega(st, self.spec)
        return self.spec.energy(omega)

    def diagnostics(self):
        def stiefel(y):
            return self.unpack(y).residuals()[0]

        def tangency(y):
            return self.unpack(y).residuals()[1]

        return {"energy": self.energy, "stiefel": stiefel, "tangency": tangency}

    def invariants(self, y):
        """``P^T P`` and the spectral invariants ``tr (M* + lam X X^T)^k``."""
        st = self.unpack(y)
        M = momentum_map_star(st)
        cc = char_coefficients(M, st.X @ st.X.T)
        return st.P.T @ st.P, np.concatenate([cc[k] for k in sorted(cc)])


class GeodesicSystem:
    """Flat layout ``[q, p~]`` in the time ``tau``."""

    def __init__(self, A):
        self.A = check_positive_diagonal(A, "A")
        self.n = self.A.shape[0]

    @property
    def layout(self):
        return [f"q_{i + 1}" for i in range(self.n)] + [f"pt_{i + 1}" for i in range(self.n)]

    def field(self, y):
        dq, dp = geodesic_vector_field(y[: self.n], y[self.n :], self.A)
        return np.concatenate([dq, dp])

    def diagnostics(self):
        n, A = self.n, self.A
        out = {
            "H_star": lambda y: geodesic_hamiltonian(y[:n], y[n:], A),
            "sphere": lambda y: abs(y[:n] @ y[:n] - 1.0),
            "tangency": lambda y: abs(y[:n] @ y[n:]),
        }
        if n == 3:
            out["F2_star"] = lambda y: geodesic_F2_star(y[:n], self.field(y)[:n], A)
        return out


# ----------------------------------------------------------------------------
# charts


class SphereChart:
    """Graph chart over the hyperplane ``q_m = 0``, ``q_m = s sqrt(1 - |u|^2)``.

    Momenta are the canonical ones, ``p_u = J^T p`` with ``J = dq/du``.
    """

    def __init__(self, m, sign):
        self.m, self.s = int(m), 1.0 if sign >= 0 else -1.0

    @classmethod
    def around(cls, q):
        m = int(np.argmax(np.abs(q)))
        return cls(m, q[m])

    def _others(self, n):
        return [i for i in range(n) if i != self.m]

    def q_of(self, u):
        n = u.shape[0] + 1
        w2 = 1.0 - u @ u
        if w2 <= 0:
            raise ValueError("point outside the chart")
        q = np.empty(n)
        q[self._others(n)] = u
        q[self.m] = self.s * math.sqrt(w2)
        return q

    def jacobian(self, u):
        n = u.shape[0] + 1
        w = math.sqrt(1.0 - u @ u)
        J = np.zeros((n, n - 1))
        J[self._others(n), np.arange(n - 1)] = 1.0
        J[self.m] = -self.s * u / w
        return J

    def to_chart(self, q, p):
        u = np.delete(q, self.m)
        return u, self.jacobian(u).T @ p

    def from_chart(self, u, pu):
        J = self.jacobian(u)
        return self.q_of(u), J @ np.linalg.solve(J.T @ J, pu)

    def pushforward(self, q, p, dq, dp):
        """Chart velocity ``(u_dot, pu_dot)`` of an ambient tangent vector."""
        u = np.delete(q, self.m)
        udot = np.delete(dq, self.m)
        w = math.sqrt(1.0 - u @ u)
        J = self.jacobian(u)
        dJ = np.zeros_like(J)
        dJ[self.m] = -self.s * (udot / w + u * (u @ udot) / w**3)
        return udot, dJ.T @ p + J.T @ dp

    def field(self, ambient_field):
        """Chart field ``z -> dz/dt`` with ``z = (u, p_u)``."""

        def f(z):
            k = z.shape[0] // 2
            q, p = self.from_chart(z[:k], z[k:])
            dq, dp = ambient_field(q, p)
            a, b = self.pushforward(q, p, dq, dp)
            return np.concatenate([a, b])

        return f


def _random_cotangent(n, rng, scale=1.0):
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    p = scale * rng.standard_normal(n)
    return q, p - (p @ q) * q


def chaplygin_pi_residual(q, p, A, n_power=1.0, fd_step=1e-5, p_step=1e-2):
    """Compare the non-Hamiltonian part of the reduced sphere flow with the
    reducing-multiplier formula ``Pi = N^-1 (Gp, p) grad N - N^-1 (grad N, Gp) p``.

    ``alpha_residual = |div_p Pi + (grad log N^(k-1), G p)|`` with
    ``k = n - 1``.  ``n_power`` replaces N by ``N^n_power`` in the formula
    (a control: anything but 1 should fail).

    Derivatives in ``q`` use central differences with ``fd_step``; those
    in the momenta use the wide step ``p_step``, which is exact because
    both ``H`` and ``Pi`` are quadratic in ``p``.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    k = n - 1
    q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
    chart = SphereChart.around(q)
    u, pu = chart.to_chart(q, p)
    f = chart.field(lambda a, b: sphere_vector_field(a, b, A))
    m = n - 1

    def H(uu, pp):
        qq, p_amb = chart.from_chart(uu, pp)
        return sphere_energy(qq, p_amb, A)

    def logN(uu):
        return n_power * math.log(reducing_multiplier(chart.q_of(uu), A))

    def grad(fun, x, h=fd_step):
        g = np.empty_like(x)
        for i in range(x.shape[0]):
            e = np.zeros_like(x)
            e[i] = h
            g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
        return g

    def pi_measured(uu, pp):
        z = f(np.concatenate([uu, pp]))
        return z[m:] + grad(lambda x: H(x, pp), uu)

    def gp(uu, pp):
        # G p = dH/dp_u (the Hamiltonian part of u_dot)
        return grad(lambda x: H(uu, x), pp, p_step)

    Pi_m = pi_measured(u, pu)
    Gp = gp(u, pu)
    gradN_over_N = grad(logN, u)
    Pi_f = (2.0 * H(u, pu)) * gradN_over_N - (gradN_over_N @ Gp) * pu
    div_p = 0.0
    for i in range(m):
        e = np.zeros(m)
        e[i] = p_step
        div_p += (pi_measured(u, pu + e)[i] - pi_measured(u, pu - e)[i]) / (2 * p_step)
    alpha = abs(div_p + (k - 1) * (gradN_over_N @ Gp))
    return {"pi_residual": float(np.max(np.abs(Pi_m - Pi_f))), "alpha_residual": float(alpha)}


def sphere_chart_measure_residual(q, p, A, log_density=None, fd_step=1e-5):
    """Divergence residual of the reduced sphere flow in a canonical chart."""
    from .dynamics import measure_divergence_residual

    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    chart = SphereChart.around(q)
    u, pu = chart.to_chart(np.asarray(q, dtype=float), np.asarray(p, dtype=float))
    f = chart.field(lambda a, b: sphere_vector_field(a, b, A))
    if log_density is None:
        def log_density(z):
            qq = chart.q_of(z[: n - 1])
            return -(n - 2) / 2.0 * math.log(qq @ (A * qq))
    return measure_divergence_residual(f, log_density, np.concatenate([u, pu]), fd_step)


__all__ = [
    "GeodesicSystem",
    "ReducedState",
    "RescaledState",
    "SphereChart",
    "SphereSystem",
    "StiefelSystem",
    "chaplygin_pi_residual",
    "chaplygin_transform",
    "geodesic_F2_star",
    "geodesic_hamiltonian",
    "geodesic_lagrangian",
    "geodesic_vector_field",
    "momentum_map",
    "momentum_map_star",
    "reduced_measure_density",
    "reduced_omega",
    "reducing_multiplier",
    "sphere_chart_measure_residual",
    "sphere_density",
    "sphere_energy",
    "sphere_vector_field",
    "state_from_velocity",
    "stiefel_vector_field",
]
