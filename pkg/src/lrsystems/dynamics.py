"""The unreduced LR system on SO(n) and the classical n = 3 systems.

Two formulations of the LR system are provided:

* multiplier form on ``(omega, e_1..e_n)``: the constraints
  ``<omega, e_p ^ e_q> = 0`` (``r <= p < q``, 0-based) are enforced by
  Lagrange multipliers that solve an SPD Gram system;
* momentum form on ``(M, e_1..e_r)``: ``M' = [M, omega]``, ``e_k' = -omega e_k``
  with ``omega`` recovered from ``M`` by a linear solve.

Each formulation also has a small "system" object with a flat state layout,
which is what the integrator and the CLI work with.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._validation import DegenerateConfigurationError, check_positive_diagonal, check_vector
from .algebra import (
    Frame,
    _triu,
    bracket,
    constraint_bases,
    gram,
    killing_inner,
    project_constraint_plane,
    so_coords,
    so_dim,
    so_matrix,
    wedge,
)


@dataclass(frozen=True)
class BodyState:
    """State of the full LR system.

    ``representation`` is ``"velocity"`` (``matrix`` is omega, full frame)
    or ``"momentum"`` (``matrix`` is M, at least ``r`` frame vectors).
    """

    representation: str
    matrix: np.ndarray
    frame: Frame

    def __post_init__(self):
        if self.representation not in ("velocity", "momentum"):
            raise ValueError(f"unknown representation {self.representation!r}")
        X = np.asarray(self.matrix, dtype=float)
        if X.shape != (self.frame.n, self.frame.n):
            raise ValueError(f"matrix shape {X.shape} does not match frame dimension {self.frame.n}")
        object.__setattr__(self, "matrix", 0.5 * (X - X.T))

    @property
    def r(self):
        return self.frame.r

    @property
    def n(self):
        return self.frame.n


def _perp_basis(E, r):
    n = E.shape[1]
    return [wedge(E[p], E[q]) for p in range(r, n) for q in range(p + 1, n)]


def constraint_residuals(omega, frame):
    """``<omega, e_p ^ e_q>`` for ``r <= p < q`` (0-based) on a full frame."""
    E = frame.complete().vectors
    return np.array([killing_inner(omega, F) for F in _perp_basis(E, frame.r)])


def multiplier_vector_field(state, spec):
    """Returns ``(omega_dot, E_dot)`` with ``E`` the full frame (rows)."""
    if state.representation != "velocity":
        raise ValueError("the multiplier form needs a velocity state")
    if not state.frame.is_full:
        raise ValueError("the multiplier form needs a full frame")
    return _multiplier_rhs(state.matrix, state.frame.vectors, state.r, spec)


def _multiplier_rhs(omega, E, r, spec):
    Iw = spec.forward(omega)
    T = spec.inverse(bracket(Iw, omega))
    F = _perp_basis(E, r)
    wdot = T
    if F:
        IF = [spec.inverse(Fk) for Fk in F]
        G = np.array([[killing_inner(Fk, IFl) for IFl in IF] for Fk in F])
        b = np.array([killing_inner(T, Fk) for Fk in F])
        try:
            lam = cho_solve(cho_factor(G), -b)
        except np.linalg.LinAlgError as exc:
            raise DegenerateConfigurationError("multiplier Gram matrix is singular (mu = 0)") from exc
        # <omega, [F, omega]> = 0 identically, so only the omega_dot part enters
        for lk, IFk in zip(lam, IF):
            wdot = wdot + lk * IFk
    Edot = -(omega @ E.T).T
    return wdot, Edot


def _momentum_basis(spec):
    n = spec.n
    d = so_dim(n)
    W = np.array([so_matrix(np.eye(d)[k], n) for k in range(d)])
    B = np.array([spec.forward(Wk) for Wk in W]) - W
    return W, B


def _gamma_projector(X):
    # orthogonal projector onto span of the rows of X
    return X.T @ np.linalg.solve(X @ X.T, X)


def momentum_from_omega(omega, frame, spec):
    """``M = omega + (I omega - omega) Gamma + Gamma (I omega - omega) - Gamma (I omega - omega) Gamma``."""
    G = _gamma_projector(frame.leading)
    B = spec.forward(omega) - omega
    GB = G @ B
    return omega + B @ G + GB - GB @ G


def _momentum_operator(G, basis):
    W, B = basis
    GB = np.einsum("ij,kjl->kil", G, B)
    Mk = W + np.einsum("kij,jl->kil", B, G) + GB - np.einsum("kij,jl->kil", GB, G)
    iu = _triu(G.shape[0])
    return Mk[:, iu[0], iu[1]].T


def omega_from_momentum(M, frame, spec, _basis=None):
    """Invert :func:`momentum_from_omega` by a dense solve in so(n) coordinates."""
    basis = _basis if _basis is not None else _momentum_basis(spec)
    K = _momentum_operator(_gamma_projector(frame.leading), basis)
    try:
        c = np.linalg.solve(K, so_coords(M))
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError("momentum map is singular") from exc
    return so_matrix(c, spec.n)


def momentum_vector_field(state, spec):
    """Returns ``(M_dot, E_dot)`` for the leading ``r`` frame vectors."""
    if state.representation != "momentum":
        raise ValueError("the momentum form needs a momentum state")
    Mdot, Edot, _ = _momentum_rhs(state.matrix, state.frame.leading, spec, None)
    return Mdot, Edot


def _momentum_rhs(M, X, spec, basis):
    basis = basis if basis is not None else _momentum_basis(spec)
    K = _momentum_operator(_gamma_projector(X), basis)
    omega = so_matrix(np.linalg.solve(K, so_coords(M)), spec.n)
    return M @ omega - omega @ M, -(omega @ X.T).T, omega


def outside_plane_residual(M, frame):
    """Norm of the component of ``M`` outside ``D_r``; zero iff ``M ^ e_1 ^ ... ^ e_r = 0``."""
    R = M - project_constraint_plane(M, frame)
    return math.sqrt(killing_inner(R, R))


def char_coefficients(M, G, kmax=None):
    """``{k: c}`` with ``tr (M + lam G)^k = sum_j c[j] lam^j``, ``k = 2..kmax``."""
    n = M.shape[0]
    kmax = n if kmax is None else kmax
    powers = [np.eye(n)]
    out = {}
    for k in range(1, kmax + 1):
        nxt = [None] * (k + 1)
        for j in range(k + 1):
            acc = np.zeros((n, n))
            if j < k:
                acc = acc + powers[j] @ M
            if j > 0:
                acc = acc + powers[j - 1] @ G
            nxt[j] = acc
        powers = nxt
        if k >= 2:
            out[k] = np.array([np.trace(P) for P in powers])
    return out


def lr_integrals(state, spec):
    """Energy, constraint functions, spectral invariants and (r = 1) the linear integrals."""
    frame = state.frame
    if state.representation == "velocity":
        omega = state.matrix
        M = momentum_from_omega(omega, frame, spec)
        energy = spec.energy(omega)
    else:
        M = state.matrix
        omega = omega_from_momentum(M, frame, spec)
        energy = 0.5 * killing_inner(M, omega)
    out = {
        "energy": energy,
        "constraint_residuals": constraint_residuals(omega, frame),
        "char_coeffs": char_coefficients(M, frame.gamma()),
    }
    if frame.r == 1:
        E = frame.complete().vectors
        out["linear_l"] = np.array([killing_inner(M, wedge(E[0], E[k])) for k in range(1, frame.n)])
    return out


# ----------------------------------------------------------------------------
# flat-state systems


class MultiplierSystem:
    """Flat layout ``[omega_ij (i<j), e_1, ..., e_n]``."""

    def __init__(self, spec, r):
        self.spec, self.n, self.r = spec, spec.n, r
        self.d = so_dim(self.n)
        if not 1 <= r < self.n:
            raise ValueError(f"need 1 <= r < n, got r={r}, n={self.n}")

    @property
    def layout(self):
        iu = _triu(self.n)
        names = [f"omega_{i + 1}{j + 1}" for i, j in zip(*iu)]
        return names + [f"e{k + 1}_{j + 1}" for k in range(self.n) for j in range(self.n)]

    def pack(self, state):
        return np.concatenate([so_coords(state.matrix), state.frame.vectors.ravel()])

    def unpack(self, y):
        omega = so_matrix(y[: self.d], self.n)
        E = y[self.d :].reshape(self.n, self.n)
        return omega, E

    def state(self, y):
        omega, E = self.unpack(y)
        return BodyState("velocity", omega, Frame(E, self.r))

    def field(self, y):
        omega, E = self.unpack(y)
        wdot, Edot = _multiplier_rhs(omega, E, self.r, self.spec)
        return np.concatenate([so_coords(wdot), Edot.ravel()])

    def diagnostics(self):
        def energy(y):
            return self.spec.energy(self.unpack(y)[0])

        def constraint(y):
            omega, E = self.unpack(y)
            F = _perp_basis(E, self.r)
            return max((abs(killing_inner(omega, Fk)) for Fk in F), default=0.0)

        def frame_residual(y):
            E = self.unpack(y)[1]
            return float(np.max(np.abs(E @ E.T - np.eye(self.n))))

        return {"energy": energy, "constraint": constraint, "frame_residual": frame_residual}


class MomentumSystem:
    """Flat layout ``[M_ij (i<j), e_1, ..., e_r]``."""

    def __init__(self, spec, r):
        self.spec, self.n, self.r = spec, spec.n, r
        self.d = so_dim(self.n)
        if not 1 <= r < self.n:
            raise ValueError(f"need 1 <= r < n, got r={r}, n={self.n}")
        self._basis = _momentum_basis(spec)

    @property
    def layout(self):
        iu = _triu(self.n)
        names = [f"M_{i + 1}{j + 1}" for i, j in zip(*iu)]
        return names + [f"e{k + 1}_{j + 1}" for k in range(self.r) for j in range(self.n)]

    def pack(self, state):
        return np.concatenate([so_coords(state.matrix), state.frame.leading.ravel()])

    def unpack(self, y):
        return so_matrix(y[: self.d], self.n), y[self.d :].reshape(self.r, self.n)

    def state(self, y):
        M, X = self.unpack(y)
        return BodyState("momentum", M, Frame(X, self.r))

    def omega(self, y):
        M, X = self.unpack(y)
        K = _momentum_operator(_gamma_projector(X), self._basis)
        return so_matrix(np.linalg.solve(K, so_coords(M)), self.n)

    def field(self, y):
        M, X = self.unpack(y)
        Mdot, Xdot, _ = _momentum_rhs(M, X, self.spec, self._basis)
        return np.concatenate([so_coords(Mdot), Xdot.ravel()])

    def log_density(self, y):
        """``-log mu_tilde`` with the frame vectors replaced by their polar factor.

        On the phase space (orthonormal e) this is the density of the
        invariant measure; off it, the polar factor keeps the density
        invariant under the ambient flow, which is what a divergence check
        in ambient coordinates needs.
        """
        X = self.unpack(y)[1]
        U, _, Vt = np.linalg.svd(X, full_matrices=False)
        frame = Frame(U @ Vt, self.r)
        D, _ = constraint_bases(frame)
        G = gram(D, self.spec.forward)
        return -0.5 * math.log(np.linalg.det(G))

    def diagnostics(self):
        def energy(y):
            return 0.5 * killing_inner(self.unpack(y)[0], self.omega(y))

        def outside(y):
            M, X = self.unpack(y)
            G = _gamma_projector(X)
            R = M - (G @ M + M @ G - G @ M @ G)
            return math.sqrt(killing_inner(R, R))

        def frame_residual(y):
            X = self.unpack(y)[1]
            return float(np.max(np.abs(X @ X.T - np.eye(self.r))))

        return {"energy": energy, "outside_plane": outside, "frame_residual": frame_residual}


def random_on_constraint_state(spec, r, rng, scale=1.0, representation="velocity"):
    """Haar frame plus a Gaussian omega projected onto ``D_r``."""
    from .algebra import random_frame, random_skew

    frame = random_frame(spec.n, rng, r)
    omega = project_constraint_plane(random_skew(spec.n, rng, scale), frame)
    if representation == "velocity":
        return BodyState("velocity", omega, frame)
    M = momentum_from_omega(omega, frame, spec)
    return BodyState("momentum", M, Frame(frame.leading, r))


# ----------------------------------------------------------------------------
# potentials for the n = 3 systems


class PotentialSpec:
    kind = "abstract"

    def value(self, gamma):
        raise NotImplementedError

    def gradient(self, gamma):
        raise NotImplementedError


class ZeroPotential(PotentialSpec):
    kind = "zero"

    def value(self, gamma):
        return 0.0

    def gradient(self, gamma):
        return np.zeros(3)


class SingularPotentialError(ValueError):
    pass


class VeselovaFamilyPotential(PotentialSpec):
    """``V = a1((I^2 g, g) - (I g, g)^2) + a2 (I g, g) + a3/g1^2 + a4/g2^2 + a5/g3^2``.

    ``integral_term`` is the gamma-dependent part of the extra integral that
    makes the Veselova system with this potential integrable.
    """

    kind = "veselova_family"

    def __init__(self, alphas, I_diag):
        self.alphas = check_vector(alphas, "alphas", 5)
        self.I = check_positive_diagonal(I_diag, "I_diag")

    def _check(self, g):
        a = self.alphas
        for i in range(3):
            if a[2 + i] != 0 and abs(g[i]) < 1e-300:
                raise SingularPotentialError(f"gamma_{i + 1} = 0 is a pole of the potential")

    def value(self, g):
        g = np.asarray(g, dtype=float)
        self._check(g)
        a, I = self.alphas, self.I
        Ig = I @ (g * g)
        v = a[0] * ((I * I) @ (g * g) - Ig**2) + a[1] * Ig
        for i in range(3):
            if a[2 + i]:
                v += a[2 + i] / g[i] ** 2
        return v

    def gradient(self, g):
        g = np.asarray(g, dtype=float)
        self._check(g)
        a, I = self.alphas, self.I
        Ig = I @ (g * g)
        grad = a[0] * (2 * I * I * g - 4 * Ig * I * g) + 2 * a[1] * I * g
        for i in range(3):
            if a[2 + i]:
                grad[i] -= 2 * a[2 + i] / g[i] ** 3
        return grad

    def integral_term(self, g):
        g = np.asarray(g, dtype=float)
        self._check(g)
        a, I = self.alphas, self.I
        detI = np.prod(I)
        Ig = I @ (g * g)
        Iinvg = (g * g) @ (1.0 / I)
        f = a[0] * detI * Ig * Iinvg - a[1] * detI * Iinvg
        for i in range(3):
            if a[2 + i]:
                j, k = (i + 1) % 3, (i + 2) % 3
                # each gamma_j^2 / gamma_i^2 carries I_k with k the remaining index
                f += a[2 + i] * (I[k] * g[j] ** 2 + I[j] * g[k] ** 2) / g[i] ** 2
        return f

    def integral_gradient(self, g):
        g = np.asarray(g, dtype=float)
        self._check(g)
        a, I = self.alphas, self.I
        detI = np.prod(I)
        Ig = I @ (g * g)
        Iinvg = (g * g) @ (1.0 / I)
        grad = a[0] * detI * (2 * I * g * Iinvg + 2 * Ig * g / I) - 2 * a[1] * detI * g / I
        for i in range(3):
            if a[2 + i]:
                j, k = (i + 1) % 3, (i + 2) % 3
                grad[j] += 2 * a[2 + i] * I[k] * g[j] / g[i] ** 2
                grad[k] += 2 * a[2 + i] * I[j] * g[k] / g[i] ** 2
                grad[i] -= 2 * a[2 + i] * (I[k] * g[j] ** 2 + I[j] * g[k] ** 2) / g[i] ** 3
        return grad

    def dual(self):
        """The Euler-Poisson potential (``J = I^-1``) dual to this one: the integral term."""
        return CustomPotential(self.integral_term, self.integral_gradient)


class CustomPotential(PotentialSpec):
    """User potential; the gradient is checked against central differences."""

    kind = "custom"

    def __init__(self, value, gradient, rng=None, n_checks=5, rel_tol=1e-6):
        self._value, self._gradient = value, gradient
        rng = np.random.default_rng(0) if rng is None else rng
        for _ in range(n_checks):
            g = rng.standard_normal(3)
            g /= np.linalg.norm(g)
            fd = _central_gradient(value, g, 1e-6)
            an = np.asarray(gradient(g), dtype=float)
            err = np.max(np.abs(fd - an))
            if err > rel_tol * max(1.0, np.max(np.abs(an))):
                raise ValueError(f"potential gradient disagrees with finite differences (error {err:.2e})")

    def value(self, gamma):
        return float(self._value(np.asarray(gamma, dtype=float)))

    def gradient(self, gamma):
        return np.asarray(self._gradient(np.asarray(gamma, dtype=float)), dtype=float)


def _central_gradient(f, x, h):
    g = np.empty_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# ----------------------------------------------------------------------------
# classical Veselova and Euler-Poisson systems


@dataclass(frozen=True)
class Veselova3State:
    Omega: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Omega", check_vector(self.Omega, "Omega", 3))
        g = check_vector(self.gamma, "gamma", 3)
        if not np.any(g):
            raise ValueError("gamma must be nonzero")
        object.__setattr__(self, "gamma", g)

    def flat(self):
        return np.concatenate([self.Omega, self.gamma])


def veselova3_multiplier(Omega, gamma, I_diag, potential):
    I = np.asarray(I_diag, dtype=float)
    T = np.cross(I * Omega, Omega) + np.cross(gamma, potential.gradient(gamma))
    return -np.dot(T / I, gamma) / np.dot(gamma / I, gamma), T


def veselova3_vector_field(state, I_diag, potential=None):
    """``(Omega_dot, gamma_dot)``; defined on all of so(3) x R^3."""
    potential = potential or ZeroPotential()
    I = check_positive_diagonal(I_diag, "I_diag")
    W, g = state.Omega, state.gamma
    lam, T = veselova3_multiplier(W, g, I, potential)
    return (T + lam * g) / I, np.cross(g, W)


def veselova3_field(I_diag, potential=None):
    """Flat field on ``[Omega, gamma]``."""
    potential = potential or ZeroPotential()
    I = check_positive_diagonal(I_diag, "I_diag")

    def f(y):
        W, g = y[:3], y[3:]
        lam, T = veselova3_multiplier(W, g, I, potential)
        return np.concatenate([(T + lam * g) / I, np.cross(g, W)])

    return f


def veselova3_integrals(state, I_diag, potential=None):
    potential = potential or ZeroPotential()
    I = check_positive_diagonal(I_diag, "I_diag")
    W, g = state.Omega, state.gamma
    IW = I * W
    Wg, IWg = W @ g, IW @ g
    out = {
        "F1": 0.5 * IW @ W + potential.value(g),
        "F2": 0.5 * IW @ IW - 0.5 * IWg**2,
        "jacobi_painleve": 0.5 * W @ IW - Wg * IWg,
        "squared_momentum": 0.5 * np.sum((IW - IWg * g + Wg * g) ** 2),
        "geometric": g @ g,
        "constraint": Wg,
    }
    if isinstance(potential, VeselovaFamilyPotential):
        out["F_potential"] = out["F2"] + potential.integral_term(g)
    return out


def euler_poisson3_field(J_diag, potential=None):
    """Flat field on ``[Omega, gamma]`` for ``J Omega' = J Omega x Omega + gamma x dV/dgamma``."""
    potential = potential or ZeroPotential()
    J = check_positive_diagonal(J_diag, "J_diag")

    def f(y):
        W, g = y[:3], y[3:]
        return np.concatenate([(np.cross(J * W, W) + np.cross(g, potential.gradient(g))) / J, np.cross(g, W)])

    return f


def euler_poisson3_vector_field(state, J_diag, potential=None):
    """``((Omega_dot, gamma_dot), integrals)`` with ``i1, i2, f1, f2``."""
    potential = potential or ZeroPotential()
    y = np.concatenate([state.Omega, state.gamma])
    dy = euler_poisson3_field(J_diag, potential)(y)
    return (dy[:3], dy[3:]), euler_poisson3_integrals(state, J_diag, potential)


def euler_poisson3_integrals(state, J_diag, potential=None):
    potential = potential or ZeroPotential()
    J = check_positive_diagonal(J_diag, "J_diag")
    W, g = state.Omega, state.gamma
    JW = J * W
    return {
        "i1": g @ g,
        "i2": JW @ g,
        "f1": 0.5 * JW @ W + potential.value(g),
        "f2": 0.5 * JW @ JW,
    }


def veselova3_log_density(I_diag):
    """``log sqrt((I^-1 gamma, gamma))`` on ``[Omega, gamma]``."""
    I = check_positive_diagonal(I_diag, "I_diag")
    return lambda y: 0.5 * math.log(np.dot(y[3:] / I, y[3:]))


# ----------------------------------------------------------------------------
# invariant-measure verifier


def measure_divergence_residual(field, log_density, point, fd_step=1e-5):
    """``div v + grad(log mu) . v`` at ``point`` by central differences.

    Zero up to ``O(fd_step^2)`` and roundoff iff ``mu`` is an invariant
    density of ``v`` at that point.
    """
    x = np.asarray(point, dtype=float)
    v = np.asarray(field(x), dtype=float)
    div = 0.0
    dlog = 0.0
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = fd_step
        div += (field(x + e)[i] - field(x - e)[i]) / (2 * fd_step)
        dlog += (log_density(x + e) - log_density(x - e)) / (2 * fd_step) * v[i]
    return div + dlog


__all__ = [
    "BodyState",
    "CustomPotential",
    "MomentumSystem",
    "MultiplierSystem",
    "PotentialSpec",
    "SingularPotentialError",
    "Veselova3State",
    "VeselovaFamilyPotential",
    "ZeroPotential",
    "char_coefficients",
    "constraint_residuals",
    "euler_poisson3_field",
    "euler_poisson3_integrals",
    "euler_poisson3_vector_field",
    "lr_integrals",
    "measure_divergence_residual",
    "momentum_from_omega",
    "momentum_vector_field",
    "multiplier_vector_field",
    "omega_from_momentum",
    "outside_plane_residual",
    "random_on_constraint_state",
    "veselova3_field",
    "veselova3_integrals",
    "veselova3_log_density",
    "veselova3_vector_field",
]
