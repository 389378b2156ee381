"""scikit-learn style transformers over coordinate changes of the reduced flows.

They are stateless apart from input validation: ``fit`` only records the
number of features, so they compose with ``Pipeline`` and ``clone``.
"""

import math

import numpy as np
from scipy.integrate import cumulative_simpson
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from ._validation import check_positive_diagonal
from .neumann import spheroconic_forward
from .reconstruction import quadric_to_sphere, sphere_to_quadric
from .reduced import chaplygin_transform, reducing_multiplier


class _CoordinateTransformer(TransformerMixin, BaseEstimator):
    def __init__(self, A=None):
        self.A = A

    def _A(self):
        if self.A is None:
            raise ValueError("parameter A is required")
        return check_positive_diagonal(self.A, "A")

    def _width(self, n):
        raise NotImplementedError

    def fit(self, X, y=None):
        A = self._A()
        X = validate_data(self, X, reset=True)
        if X.shape[1] != self._width(len(A)):
            raise ValueError(f"expected {self._width(len(A))} columns for n={len(A)}, got {X.shape[1]}")
        self.n_ = len(A)
        return self

    def _check(self, X, width=None):
        check_is_fitted(self, "n_")
        if width is None:
            return validate_data(self, X, reset=False)
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != width:
            raise ValueError(f"expected an array with {width} columns")
        return X


class SpheroconicTransformer(_CoordinateTransformer):
    """Unit vectors ``q`` (rows) to spheroconic coordinates ``lambda_1 < ... < lambda_{n-1}``.

    ``inverse_transform`` returns the representative with nonnegative
    components (the coordinates do not see the signs of ``q_i``).
    """

    def _width(self, n):
        return n

    def transform(self, X):
        X = self._check(X)
        A = self._A()
        return np.array([spheroconic_forward(q / np.linalg.norm(q), A).lambdas for q in X])

    def inverse_transform(self, L):
        L = self._check(L, self.n_ - 1)
        I = 1.0 / self._A()
        out = np.empty((L.shape[0], self.n_))
        for row, lam in enumerate(L):
            for i in range(self.n_):
                num = np.prod(I[i] - lam)
                den = np.prod([I[i] - I[j] for j in range(self.n_) if j != i])
                out[row, i] = math.sqrt(max(num / den, 0.0))
        return out

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "n_")
        return np.array([f"lambda_{k + 1}" for k in range(self.n_ - 1)], dtype=object)


class ChaplyginTimeTransformer(_CoordinateTransformer):
    """Rows ``(t, q, p)`` of a reduced trajectory to ``(tau, q, p~)``.

    ``p~ = N(q) p`` and ``tau = int N dt`` (cumulative Simpson rule, so the
    rows must be consecutive samples with increasing ``t``).
    """

    def _width(self, n):
        return 1 + 2 * n

    def transform(self, X):
        X = self._check(X)
        A, n = self._A(), self.n_
        t = X[:, 0]
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        N = np.array([reducing_multiplier(row[1 : n + 1], A) for row in X])
        out = np.empty_like(X)
        out[:, 0] = np.concatenate([[0.0], cumulative_simpson(N, x=t)]) if len(t) > 1 else 0.0
        out[:, 0] += t[0]
        for k, row in enumerate(X):
            out[k, 1 : n + 1] = row[1 : n + 1]
            out[k, n + 1 :] = chaplygin_transform(row[1 : n + 1], row[n + 1 :], A).p_tilde
        return out

    def inverse_transform(self, Y):
        Y = self._check(Y, 1 + 2 * self.n_)
        A, n = self._A(), self.n_
        tau = Y[:, 0]
        if np.any(np.diff(tau) <= 0):
            raise ValueError("times must be strictly increasing")
        invN = np.array([1.0 / reducing_multiplier(row[1 : n + 1], A) for row in Y])
        out = np.empty_like(Y)
        out[:, 0] = tau[0] + (np.concatenate([[0.0], cumulative_simpson(invN, x=tau)]) if len(tau) > 1 else 0.0)
        for k, row in enumerate(Y):
            q, p = chaplygin_transform(row[1 : n + 1], row[n + 1 :], A, direction="to_t")
            out[k, 1 : n + 1], out[k, n + 1 :] = q, p
        return out

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "n_")
        n = self.n_
        return np.array(["tau"] + [f"q_{i + 1}" for i in range(n)] + [f"pt_{i + 1}" for i in range(n)], dtype=object)


class KnorrerTransformer(_CoordinateTransformer):
    """Neumann states ``(q, q')`` to quadric geodesic states ``(X, gamma)``; the inverse maps back.

    The round trip ``(X, gamma) -> (q, q') -> (X, gamma)`` is the identity;
    the other one is the identity on the level ``F0 = 0``.
    """

    def _width(self, n):
        return 2 * n

    def transform(self, X):
        X = self._check(X)
        A, n = self._A(), self.n_
        out = np.empty_like(X)
        for k, row in enumerate(X):
            Xq, g, _ = sphere_to_quadric(row[:n], row[n:], A)
            out[k, :n], out[k, n:] = Xq, g
        return out

    def inverse_transform(self, Y):
        Y = self._check(Y, 2 * self.n_)
        A, n = self._A(), self.n_
        out = np.empty_like(Y)
        for k, row in enumerate(Y):
            q, qp, _ = quadric_to_sphere(row[:n], row[n:], A)
            out[k, :n], out[k, n:] = q, qp
        return out

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "n_")
        n = self.n_
        return np.array([f"X_{i + 1}" for i in range(n)] + [f"gamma_{i + 1}" for i in range(n)], dtype=object)


__all__ = ["ChaplyginTimeTransformer", "KnorrerTransformer", "SpheroconicTransformer"]
