"""Reconstruction of the motion on SO(n) over a reduced r = 1 trajectory.

The chain is: reduced LR flow on S^{n-1}  ->  Neumann flow (time tau_1)  ->
geodesic on the quadric Q(0) = {(X, A^-1 X) = 1} (Knorrer map, arc length s)
->  Moser Lax matrix L and its eigenvectors (Chasles frame)  ->  the frame
rows (q, n_2, ..., n_{n-1}, gamma) which move by e' = -omega e with
omega = q ^ qdot.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.integrate import cumulative_simpson

from ._validation import check_positive_diagonal
from .algebra import killing_inner, wedge
from .neumann import mu_h, spheroconic_forward


class FrameDegeneracyError(ValueError):
    pass


# ----------------------------------------------------------------------------
# geodesics on Q(0) and the Knorrer map


@dataclass(frozen=True)
class QuadricGeodesicState:
    X: np.ndarray
    gamma: np.ndarray

    def residuals(self, A):
        A = np.asarray(A, dtype=float)
        return (
            abs(self.X @ (self.X / A) - 1.0),
            abs(self.gamma @ (self.X / A)),
            abs(self.gamma @ self.gamma - 1.0),
        )


def quadric_geodesic_field(state, A):
    """``dX/ds = gamma``, ``dgamma/ds = kappa A^-1 X`` with the multiplier keeping X on Q(0)."""
    A = np.asarray(A, dtype=float)
    X, g = state.X, state.gamma
    nX = X / A
    kappa = -(g @ (g / A)) / (nX @ nX)
    return g, kappa * nX


class QuadricGeodesicSystem:
    """Flat layout ``[X, gamma]`` in arc length ``s``."""

    def __init__(self, A):
        self.A = check_positive_diagonal(A, "A")
        self.n = self.A.shape[0]

    @property
    def layout(self):
        return [f"X_{i + 1}" for i in range(self.n)] + [f"gamma_{i + 1}" for i in range(self.n)]

    def field(self, y):
        dX, dg = quadric_geodesic_field(QuadricGeodesicState(y[: self.n], y[self.n :]), self.A)
        return np.concatenate([dX, dg])

    def diagnostics(self):
        n, A = self.n, self.A
        return {
            "quadric": lambda y: abs(y[:n] @ (y[:n] / A) - 1.0),
            "tangency": lambda y: abs(y[n:] @ (y[:n] / A)),
            "unit_speed": lambda y: abs(y[n:] @ y[n:] - 1.0),
        }


def quadric_to_sphere(X, gamma, A):
    """``q = A^-1 X / |A^-1 X|`` and ``q' = dq/dtau_1``; also returns ``ds/dtau_1``."""
    A = np.asarray(A, dtype=float)
    nX = X / A
    r = math.sqrt(nX @ nX)
    q = nX / r
    dq_ds = (gamma / A - q * (q @ (gamma / A))) / r
    ds_dtau1 = math.sqrt((nX @ nX) / (gamma @ (gamma / A)))
    return q, dq_ds * ds_dtau1, ds_dtau1


def sphere_to_quadric(q, qprime, A):
    """``X = (q, Aq)^-1/2 A q``, ``gamma = X'/|X'|``; also returns ``ds/dtau_1 = |X'|``."""
    A = np.asarray(A, dtype=float)
    Aq = A * q
    s = 1.0 / math.sqrt(q @ Aq)
    X = s * Aq
    dX = s * (A * qprime) - s**3 * (Aq @ qprime) * Aq
    speed = math.sqrt(dX @ dX)
    return X, dX / speed, speed


def knorrer_map(a, b, A, direction="quadric_to_sphere"):
    if direction == "quadric_to_sphere":
        return quadric_to_sphere(a, b, A)
    if direction == "sphere_to_quadric":
        return sphere_to_quadric(a, b, A)
    raise ValueError(f"unknown direction {direction!r}")


# ----------------------------------------------------------------------------
# Moser matrices and the Chasles frame


def moser_matrices(x, gamma, A):
    """``L = Pi_g (A - x x^T) Pi_g`` and ``B = A^-1 x ^ A^-1 gamma``.

    Along a geodesic of Q(0), ``dL/ds_1 = LB - BL`` with ``ds = nu ds_1``,
    ``nu = (x, A^-2 x)``; the spectrum of ``L`` is constant.
    """
    A = np.asarray(A, dtype=float)
    x, gamma = np.asarray(x, dtype=float), np.asarray(gamma, dtype=float)
    gg = gamma @ gamma
    if gg == 0:
        raise ValueError("gamma must be nonzero")
    Pi = np.eye(len(A)) - np.outer(gamma, gamma) / gg
    L = Pi @ (np.diag(A) - np.outer(x, x)) @ Pi
    L = 0.5 * (L + L.T)
    B = wedge(x / A, gamma / A)
    return L, B


@dataclass(frozen=True)
class ChaslesFrame:
    alphas: np.ndarray
    normals: np.ndarray
    gamma: np.ndarray

    @property
    def n1(self):
        return self.normals[0]


def chasles_frame(L, gamma, gap_tol=1e-9):
    """Eigenframe of ``L``: ``normals[0] = n_1`` (the second null vector),
    ``normals[1:]`` the eigenvectors with nonzero eigenvalues ``alphas``
    (ascending), and the unit tangent ``gamma``.

    The null space is two-dimensional; ``gamma`` is taken as the (normalized)
    projection of the given tangent onto it and ``n_1`` as its complement.
    """
    w, V = np.linalg.eigh(L)
    order = np.argsort(np.abs(w))
    null, rest = order[:2], np.sort(order[2:])
    Z = V[:, null]
    g = Z @ (Z.T @ gamma)
    g /= np.linalg.norm(g)
    n1 = Z[:, 0] - g * (g @ Z[:, 0])
    if np.linalg.norm(n1) < 0.5:
        n1 = Z[:, 1] - g * (g @ Z[:, 1])
    n1 /= np.linalg.norm(n1)
    alphas = w[rest]
    all_ev = np.concatenate([[0.0], alphas])
    if np.min(np.diff(np.sort(all_ev))) < gap_tol or np.min(np.abs(alphas), initial=np.inf) < gap_tol:
        raise FrameDegeneracyError("eigenvalues of L are not separated")
    normals = np.vstack([n1, V[:, rest].T])
    return ChaslesFrame(alphas, normals, g)


# ----------------------------------------------------------------------------
# frame reconstruction


@dataclass
class FrameTrajectory:
    times: np.ndarray
    g: np.ndarray
    omega: np.ndarray
    alphas: np.ndarray
    flags: np.ndarray


def quadric_lift(q, qdot, A):
    """``X``, unit tangent ``gamma`` (direction of increasing s) and ``nu = (X, A^-2 X)``."""
    A = np.asarray(A, dtype=float)
    Aq = A * q
    s = 1.0 / math.sqrt(q @ Aq)
    X = s * Aq
    dX = s * (A * qdot) - s**3 * (Aq @ qdot) * Aq
    return X, dX / np.linalg.norm(dX), s * s


def reconstruct_frame(times, qs, qdots, A, R_init=None):
    """Frames ``g(t)`` (rows e_1..e_n) over reduced samples ``(q(t), qdot(t))``.

    Rows are ``(q, n_2, ..., n_{n-1}, gamma)`` with eigenvector signs fixed
    by continuity along the samples; at the first sample the normals point
    to the side of their first nonzero component, and the last normal is
    flipped if needed so that det g = +1.  ``R_init`` acts on rows 2..n as
    ``(e_2 ... e_n) = (n_2 ... gamma) R_init``.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    m = len(times)
    g = np.empty((m, n, n))
    om = np.empty((m, n, n))
    alphas = np.full((m, n - 2), np.nan)
    flags = np.zeros(m, dtype=bool)
    prev = None
    for i in range(m):
        q, qd = np.asarray(qs[i], dtype=float), np.asarray(qdots[i], dtype=float)
        X, gam, _ = quadric_lift(q, qd, A)
        L, _ = moser_matrices(X, gam, A)
        try:
            fr = chasles_frame(L, gam)
        except FrameDegeneracyError:
            flags[i] = True
            fr = chasles_frame(L, gam, gap_tol=0.0)
        normals = fr.normals[1:].copy()
        if prev is None:
            for k in range(normals.shape[0]):
                j = np.argmax(np.abs(normals[k]) > 1e-8)
                if normals[k, j] < 0:
                    normals[k] *= -1
        else:
            for k in range(normals.shape[0]):
                if normals[k] @ prev[k] < 0:
                    normals[k] *= -1
        G = np.vstack([q, normals, fr.gamma])
        if prev is None and np.linalg.det(G) < 0:
            normals[-1] *= -1
            G[n - 2] *= -1
        prev = normals
        g[i] = G
        om[i] = wedge(q, qd)
        alphas[i] = fr.alphas
    if R_init is not None:
        R = np.asarray(R_init, dtype=float)
        if R.shape != (n - 1, n - 1) or np.max(np.abs(R.T @ R - np.eye(n - 1))) > 1e-10:
            raise ValueError("R_init must be an orthogonal (n-1) x (n-1) matrix")
        g[:, 1:, :] = np.einsum("ji,mjk->mik", R, g[:, 1:, :])
    return FrameTrajectory(np.asarray(times, dtype=float), g, om, alphas, flags)


def linear_integrals(frames, spec):
    """``l_k = <M, e_1 ^ e_k>``, ``M = I omega`` projected on D_1, per sample."""
    out = []
    for G, w in zip(frames.g, frames.omega):
        Iw = spec.forward(w)
        out.append([killing_inner(Iw, wedge(G[0], G[k])) for k in range(1, G.shape[0])])
    return np.array(out)


def central_derivative(y, h):
    """Fourth-order central differences on a uniform grid (interior points only)."""
    return (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * h)


# ----------------------------------------------------------------------------
# explicit hyperelliptic formulas


def _U(lam, r):
    return np.prod(r - lam)


def explicit_frame(lambdas, branch_signs, constants, A):
    """Components of ``q``, ``n_2..n_{n-1}`` and ``gamma`` from the spheroconic data.

    ``branch_signs`` are the signs of ``sqrt R(lam_s)`` (as tracked for the
    Abel-Jacobi quadratures).  The results are determined up to the sign of
    each component of ``q`` and of each whole vector.
    """
    I = 1.0 / np.asarray(A, dtype=float)
    lam = np.asarray(lambdas, dtype=float)
    cs = np.asarray(constants.cs, dtype=float)
    m = len(lam)
    Rv = constants.R(lam, A)
    xi = np.array(
        [branch_signs[s] * math.sqrt(abs(Rv[s])) / np.prod([lam[s] - lam[j] for j in range(m) if j != s]) for s in range(m)]
    )
    roots_psi = np.concatenate([[0.0], cs])
    n = len(I)
    base = np.empty(n)
    for i in range(n):
        base[i] = math.sqrt(max(_U(lam, I[i]) / np.prod([I[i] - I[j] for j in range(n) if j != i]), 0.0))

    def dpsi(r):
        return np.prod([r - c for c in roots_psi if c != r])

    def vec(c):
        scale = math.sqrt(abs(_U(lam, c) / dpsi(c)))
        return base * scale * np.array([np.sum(xi / ((c - lam) * (I[i] - lam))) for i in range(n)])

    normals = np.array([vec(c) for c in cs])
    gamma = vec(0.0)
    return base, normals, gamma


def ellipsoidal_coords(X, A):
    """``nu_k``: roots of ``sum (X_i^2 / A_i) / (nu - A_i)`` (Jacobi's coordinates on Q(0))."""
    A = np.asarray(A, dtype=float)
    return spheroconic_forward(X / np.sqrt(A), 1.0 / A).lambdas


# ----------------------------------------------------------------------------
# time variables


@dataclass
class TimeChain:
    tau1: np.ndarray
    t: np.ndarray
    t_quadrature: np.ndarray
    tau: np.ndarray
    s: np.ndarray
    s1: np.ndarray
    richardson: float


def _cumulative(y, x):
    return np.concatenate([[0.0], cumulative_simpson(y, x=x)])


def time_chain(tau1, qs, qprimes, A, h):
    """Cumulative maps from uniform ``tau_1`` samples of a Neumann trajectory
    on ``F0 = 0`` to ``t`` (two routes), ``tau``, ``s`` and ``s_1``.

    ``t`` integrates ``dt = mu_h dtau_1``; ``t_quadrature`` integrates
    ``sqrt(lam_1...lam_{n-1}) / sqrt(2h)`` in the spheroconic coordinates.
    ``richardson`` estimates the quadrature error by halving the grid.
    """
    A = np.asarray(A, dtype=float)
    tau1 = np.asarray(tau1, dtype=float)
    if np.any(np.diff(tau1) <= 0):
        raise ValueError("tau_1 samples must be increasing")
    dt = np.array([mu_h(q, A, h) for q in qs])
    prod = np.array([np.prod(spheroconic_forward(q, A).lambdas) for q in qs])
    dtq = np.sqrt(prod) / math.sqrt(2 * h)
    ds = []
    nu = []
    for q, qp in zip(qs, qprimes):
        X, gam, speed = sphere_to_quadric(q, qp, A)
        ds.append(speed)
        nu.append(X @ (X / A**2))
    ds, nu = np.array(ds), np.array(nu)
    if np.any(ds <= 0):
        raise ValueError("s is not monotone along the samples")
    t = _cumulative(dt, tau1)
    tq = _cumulative(dtq, tau1)
    if len(tau1) >= 5 and len(tau1) % 2 == 1:
        coarse = _cumulative(dtq[::2], tau1[::2])
        rich = float(np.max(np.abs(coarse - tq[::2])) / 15.0)
    else:
        rich = float("nan")
    s = _cumulative(ds, tau1)
    s1 = _cumulative(ds / nu, tau1)
    return TimeChain(tau1, t, tq, tau1 / math.sqrt(2 * h), s, s1, rich)


__all__ = [
    "ChaslesFrame",
    "FrameDegeneracyError",
    "FrameTrajectory",
    "QuadricGeodesicState",
    "QuadricGeodesicSystem",
    "TimeChain",
    "central_derivative",
    "chasles_frame",
    "ellipsoidal_coords",
    "explicit_frame",
    "knorrer_map",
    "linear_integrals",
    "moser_matrices",
    "quadric_geodesic_field",
    "quadric_lift",
    "quadric_to_sphere",
    "reconstruct_frame",
    "sphere_to_quadric",
    "time_chain",
]
