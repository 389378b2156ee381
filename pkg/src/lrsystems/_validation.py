"""Input checks shared by the public entry points.

They follow the ``check_*`` idiom of scikit-learn's validation helpers:
each takes raw user input, returns a clean float array, and raises
``ValueError`` with a readable message otherwise.
"""

import numpy as np


class DegenerateConfigurationError(np.linalg.LinAlgError):
    """A Gram/restricted-inertia matrix lost positive definiteness."""


class ConstraintViolationError(ValueError):
    """A state is too far from the manifold it is supposed to live on."""


def check_vector(x, name="x", dim=None):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise ValueError(f"{name} must have length {dim}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def check_square(X, name="X", dim=None):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {X.shape}")
    if dim is not None and X.shape[0] != dim:
        raise ValueError(f"{name} must be {dim}x{dim}, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite entries")
    return X


def check_positive_diagonal(A, name="A", distinct=False):
    A = check_vector(A, name)
    if np.any(A <= 0):
        raise ValueError(f"{name} must be strictly positive")
    if distinct:
        s = np.sort(A)
        if np.any(np.diff(s) <= 1e-12 * s[-1]):
            raise ValueError(f"{name} entries must be pairwise distinct")
    return A


def check_unit(q, name="q", tol=1e-8):
    q = check_vector(q, name)
    err = abs(q @ q - 1.0)
    if err > tol:
        raise ConstraintViolationError(f"{name} is not a unit vector (|q|^2-1 = {err:.2e})")
    return q


def check_sphere_cotangent(q, p, tol=1e-8):
    q = check_unit(q, "q", tol)
    p = check_vector(p, "p", q.shape[0])
    if abs(q @ p) > tol:
        raise ConstraintViolationError(f"(q, p) = {q @ p:.2e} violates tangency")
    return q, p
