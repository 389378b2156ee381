"""ODE plumbing: an embedded Dormand-Prince 5(4) stepper with PI step control,
a fixed-step RK4 for reproducibility runs, manifold projections, and
integration in a reparametrized time.

All fields are autonomous callables ``field(y) -> dy/dt`` on flat arrays.
"""

from dataclasses import dataclass, field as dc_field
import math

import numpy as np


class IntegrationError(RuntimeError):
    """Step size underflow; ``trajectory`` holds everything accepted so far."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class ReparametrizationError(ValueError):
    pass


@dataclass
class IntegratorConfig:
    """``method`` is ``"adaptive"`` (Dormand-Prince 5(4)) or ``"rk4"``.

    ``stabilize_every`` is a count of accepted steps between manifold
    projections, or ``None`` to integrate the raw field.
    """

    method: str = "adaptive"
    horizon: float = 1.0
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    min_step: float = 1e-12
    max_step: float = math.inf
    step: float = 1e-2
    stabilize_every: int = None

    def __post_init__(self):
        if self.method not in ("adaptive", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if not (0 < self.rel_tol < 1 and 0 < self.abs_tol < 1):
            raise ValueError("tolerances must lie in (0, 1)")
        if not (0 < self.min_step <= self.max_step):
            raise ValueError("need 0 < min_step <= max_step")
        if self.step <= 0 or self.horizon <= 0:
            raise ValueError("step and horizon must be positive")
        if self.stabilize_every is not None and self.stabilize_every < 1:
            raise ValueError("stabilize_every must be a positive step count or None")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    derivatives: np.ndarray
    layout: list = None
    diagnostics: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def t(self):
        return self.times

    def column(self, name):
        return self.states[:, self.layout.index(name)]

    def __call__(self, t):
        """Cubic Hermite interpolation between stored samples."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        ts = self.times
        if np.any(t < ts[0] - 1e-12 * max(1.0, abs(ts[0]))) or np.any(
            t > ts[-1] + 1e-12 * max(1.0, abs(ts[-1]))
        ):
            raise ValueError("requested time outside the integrated interval")
        idx = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2)
        t0, t1 = ts[idx], ts[idx + 1]
        h = (t1 - t0)[:, None]
        s = ((t - t0) / (t1 - t0))[:, None]
        y0, y1 = self.states[idx], self.states[idx + 1]
        f0, f1 = self.derivatives[idx], self.derivatives[idx + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _dp_step(field, y, f0, h):
    K = np.empty((7, y.shape[0]))
    K[0] = f0
    for i in range(1, 7):
        K[i] = field(y + h * (np.dot(_A[i], K[:i])))
    y_new = y + h * (_B5 @ K)
    err = h * (_E @ K)
    return y_new, K[6], err


def _rk4_step(field, y, f0, h):
    k1 = f0
    k2 = field(y + 0.5 * h * k1)
    k3 = field(y + 0.5 * h * k2)
    k4 = field(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_flow(field, initial, config, diagnostics=None, t_eval=None, stabilizer=None, layout=None, t0=0.0):
    """Integrate ``dy/dt = field(y)`` from ``t0`` to ``t0 + config.horizon``.

    Samples are recorded at every accepted step, or exactly at ``t_eval``
    (the stepper shortens steps to land on each requested time).
    ``diagnostics`` maps names to scalar functions of the state.
    """
    y = np.array(initial, dtype=float)
    t_end = t0 + config.horizon
    diagnostics = diagnostics or {}
    if t_eval is not None:
        t_eval = np.asarray(t_eval, dtype=float)
        if t_eval[0] < t0 - 1e-14 or t_eval[-1] > t_end * (1 + 1e-14) + 1e-14 or np.any(np.diff(t_eval) <= 0):
            raise ValueError("t_eval must be increasing and inside the integration interval")
        t_end = float(t_eval[-1])
    f = np.asarray(field(y), dtype=float)

    times, states, derivs = [], [], []

    def record(t, y, f):
        times.append(t)
        states.append(y.copy())
        derivs.append(f.copy())

    next_out = 0
    if t_eval is None or abs(t_eval[0] - t0) <= 1e-14 * max(1.0, abs(t0)):
        record(t0, y, f)
        next_out = 1

    def make_traj():
        S = np.array(states) if states else np.zeros((0, y.shape[0]))
        diag = {k: np.array([fn(s) for s in S]) for k, fn in diagnostics.items()}
        return Trajectory(np.array(times), S, np.array(derivs).reshape(S.shape), layout, diag)

    t = t0
    accepted = 0
    if config.method == "rk4":
        h_nom = config.step
    else:
        h_nom = max(_initial_step(field, y, f, config), config.min_step)
    err_prev = 1.0
    while t < t_end - 1e-14 * max(1.0, abs(t_end)):
        target = t_end if t_eval is None or next_out >= len(t_eval) else t_eval[next_out]
        rem = target - t
        h = min(h_nom, config.max_step)
        # stretch a step that would leave only a rounding-sized sliver
        landing = h >= rem * (1.0 - 1e-9)
        if landing:
            h = rem
        if t + h == t:
            raise IntegrationError(f"step size underflow at t={t:.6g} (h={h:.2e})", make_traj())
        if config.method == "rk4":
            y_new = _rk4_step(field, y, f, h)
            f_new = np.asarray(field(y_new), dtype=float)
        else:
            y_new, f_new, err_vec = _dp_step(field, y, f, h)
            scale = config.abs_tol + config.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
            err = math.sqrt(np.mean((err_vec / scale) ** 2)) if y.size else 0.0
            if not np.isfinite(err) or err > 1.0:
                fac = 0.2 if not np.isfinite(err) else max(0.2, 0.9 * err ** (-0.2))
                h_nom = h * fac
                if h_nom < config.min_step:
                    raise IntegrationError(f"step size underflow at t={t:.6g} (h={h_nom:.2e})", make_traj())
                continue
            # PI controller (Gustafsson), exponents 0.7/5 and 0.4/5
            err = max(err, 1e-10)
            fac = 0.9 * err ** (-0.14) * err_prev**0.08
            h_grow = h * min(5.0, max(0.2, fac))
            err_prev = err
            if not landing or h_grow < h_nom:
                h_nom = h_grow
            else:
                h_nom = max(h_nom, h_grow)
        t = target if landing else t + h
        y, f = y_new, f_new
        accepted += 1
        if stabilizer is not None and config.stabilize_every and accepted % config.stabilize_every == 0:
            y = stabilizer(y)
            f = np.asarray(field(y), dtype=float)
        if t_eval is None:
            record(t, y, f)
        elif landing and next_out < len(t_eval):
            record(t, y, f)
            next_out += 1
    return make_traj()


def _initial_step(field, y, f, config):
    # Hairer-Wanner starting step heuristic.
    scale = config.abs_tol + config.rel_tol * np.abs(y)
    d0 = np.sqrt(np.mean((y / scale) ** 2))
    d1 = np.sqrt(np.mean((f / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y + h0 * f
    f1 = np.asarray(field(y1), dtype=float)
    d2 = np.sqrt(np.mean(((f1 - f) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, config.max_step, config.horizon)


def _polar(M):
    U, _, Vt = np.linalg.svd(M, full_matrices=False)
    return U @ Vt


def stabilize_state(state, manifold, n, r=None, max_residual=1e-3):
    """Project a flat state back onto its constraint manifold.

    ``frame_orthonormal``: the leading ``k*n`` entries are frame rows
    (``k = r`` or ``n``) and are replaced by the nearest orthonormal rows
    (polar factor), which keeps row order and orientation and commutes with
    orthogonal mixing of the rows.  ``sphere_cotangent``: ``(q, p)``.
    ``stiefel_cotangent``: ``(X, P)`` as two row-major ``n x r`` blocks.
    Everything else in the flat vector is passed through untouched.
    """
    y = np.array(state, dtype=float)
    if manifold == "frame_orthonormal":
        k = n if r is None else r
        E = y[: k * n].reshape(k, n)
        resid = np.max(np.abs(E @ E.T - np.eye(k)))
        _check_residual(resid, max_residual)
        y[: k * n] = _polar(E).ravel()
        return y
    if manifold == "sphere_cotangent":
        q, p = y[:n], y[n : 2 * n]
        resid = abs(q @ q - 1.0) + abs(q @ p)
        _check_residual(resid, max_residual)
        q = q / math.sqrt(q @ q)
        y[:n] = q
        y[n : 2 * n] = p - (q @ p) * q
        return y
    if manifold == "stiefel_cotangent":
        rr = 1 if r is None else r
        X = y[: n * rr].reshape(n, rr)
        P = y[n * rr : 2 * n * rr].reshape(n, rr)
        XtP = X.T @ P
        resid = np.max(np.abs(X.T @ X - np.eye(rr))) + np.max(np.abs(XtP + XtP.T))
        _check_residual(resid, max_residual)
        X = _polar(X)
        S = X.T @ P
        P = P - X @ (0.5 * (S + S.T))
        y[: n * rr] = X.ravel()
        y[n * rr : 2 * n * rr] = P.ravel()
        return y
    raise ValueError(f"unknown manifold {manifold!r}")


def _check_residual(resid, limit):
    if resid > limit:
        raise ValueError(f"constraint residual {resid:.2e} too large to project (limit {limit:.0e})")


def reparametrized_integrate(field, factor, initial, config, u0=0.0, **kwargs):
    """Integrate in a new time ``v`` with ``du/dv = factor(y)``.

    The returned trajectory is sampled in ``v``; its last state column is
    the original time ``u`` (also exposed as ``traj.u``).
    """

    def aug(z):
        y = z[:-1]
        c = factor(y)
        if not c > 0:
            raise ReparametrizationError(f"time factor must stay positive, got {c}")
        out = np.empty_like(z)
        out[:-1] = c * np.asarray(field(y), dtype=float)
        out[-1] = c
        return out

    stab = kwargs.pop("stabilizer", None)
    if stab is not None:
        kwargs["stabilizer"] = lambda z: np.append(stab(z[:-1]), z[-1])
    diags = kwargs.pop("diagnostics", None)
    if diags:
        kwargs["diagnostics"] = {k: (lambda z, fn=fn: fn(z[:-1])) for k, fn in diags.items()}
    layout = kwargs.pop("layout", None)
    if layout is not None:
        layout = list(layout) + ["u"]
    z0 = np.append(np.asarray(initial, dtype=float), u0)
    traj = integrate_flow(aug, z0, config, layout=layout, **kwargs)
    traj.u = traj.states[:, -1]
    return traj
