"""Linear algebra on so(n): wedges, the Killing metric, inertia operators,
constraint-plane projections and the restricted determinants that give
invariant-measure densities.

Skew matrices are plain ``(n, n)`` numpy arrays.  Whenever an operator on
so(n) has to be written as a matrix we use the coordinates ``X[i, j]``,
``i < j`` (lexicographic), which are orthonormal for the Killing metric.
"""

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
import math

import numpy as np

from ._validation import (
    DegenerateConfigurationError,
    check_positive_diagonal,
    check_square,
)

_ORTHO_FIX_TOL = 1e-10
_ORTHO_REJECT_TOL = 1e-6


def so_dim(n):
    return n * (n - 1) // 2


@lru_cache(maxsize=None)
def _triu(n):
    return np.triu_indices(n, 1)


def skew(X):
    """Return the antisymmetric part of a square matrix, ``(X - X^T) / 2``."""
    X = check_square(X, "X")
    return 0.5 * (X - X.T)


def so_coords(X):
    """Killing-orthonormal coordinates ``X[i, j]``, ``i < j``."""
    X = np.asarray(X)
    return X[_triu(X.shape[0])]


def so_matrix(c, n):
    c = np.asarray(c)
    X = np.zeros((n, n), dtype=c.dtype)
    iu = _triu(n)
    X[iu] = c
    X[iu[1], iu[0]] = -c
    return X


def wedge(x, y):
    """``x ^ y = x y^T - y x^T``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"wedge needs two vectors of equal length, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("wedge needs dimension n >= 2")
    return np.outer(x, y) - np.outer(y, x)


def killing_inner(X, Y):
    """``<X, Y> = -tr(XY) / 2``."""
    X = np.asarray(X)
    Y = np.asarray(Y)
    if X.shape != Y.shape:
        raise ValueError(f"dimension mismatch: {X.shape} vs {Y.shape}")
    return 0.5 * np.sum(X * Y)


def bracket(X, Y):
    return X @ Y - Y @ X


def hat(v):
    """so(3) matrix acting as ``hat(v) @ w == cross(v, w)``."""
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def vee(W):
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


class InertiaSpec:
    """Nondegenerate inertia operator on so(n).

    Use :meth:`special` for the diagonal family
    ``I(E_i ^ E_j) = A_i A_j / det(A) E_i ^ E_j`` and :meth:`generic` for an
    arbitrary SPD matrix in Killing-orthonormal coordinates.
    """

    def __init__(self, matrix, A=None):
        self.matrix = matrix
        self.A = A
        self.n = _n_from_so_dim(matrix.shape[0])
        try:
            self._chol = np.linalg.cholesky(matrix)
        except np.linalg.LinAlgError as exc:
            raise DegenerateConfigurationError("inertia operator is not positive definite") from exc

    @classmethod
    def special(cls, A):
        A = check_positive_diagonal(A, "A")
        if A.shape[0] < 2:
            raise ValueError("special inertia needs n >= 2")
        iu = _triu(A.shape[0])
        diag = A[iu[0]] * A[iu[1]] / np.prod(A)
        spec = cls(np.diag(diag), A=A)
        spec._diag = diag
        return spec

    @classmethod
    def generic(cls, matrix, n=None):
        matrix = check_square(matrix, "inertia matrix")
        asym = np.max(np.abs(matrix - matrix.T))
        if asym > 1e-12 * max(1.0, np.max(np.abs(matrix))):
            raise ValueError(f"inertia matrix is not symmetric (max asymmetry {asym:.2e})")
        spec = cls(0.5 * (matrix + matrix.T))
        if n is not None and spec.n != n:
            raise ValueError(f"inertia matrix has size for n={spec.n}, expected n={n}")
        return spec

    @classmethod
    def isotropic(cls, n, c=1.0):
        return cls.special(np.full(n, float(c)))

    @property
    def kind(self):
        return "special" if self.A is not None else "generic"

    @property
    def is_diagonal(self):
        return hasattr(self, "_diag")

    def forward(self, X):
        if self.is_diagonal:
            iu = _triu(self.n)
            out = np.zeros_like(X)
            vals = X[iu] * self._diag
            out[iu] = vals
            out[iu[1], iu[0]] = -vals
            return out
        return so_matrix(self.matrix @ so_coords(X), self.n)

    def inverse(self, X):
        if self.is_diagonal:
            iu = _triu(self.n)
            out = np.zeros_like(X)
            vals = X[iu] / self._diag
            out[iu] = vals
            out[iu[1], iu[0]] = -vals
            return out
        c = np.linalg.solve(self._chol.T, np.linalg.solve(self._chol, so_coords(X)))
        return so_matrix(c, self.n)

    def det(self):
        return float(np.prod(np.diag(self._chol)) ** 2)

    def energy(self, omega):
        return 0.5 * killing_inner(self.forward(omega), omega)

    def __repr__(self):
        if self.A is not None:
            return f"InertiaSpec.special({self.A.tolist()})"
        return f"InertiaSpec.generic(<{self.matrix.shape[0]}x{self.matrix.shape[0]}>)"


def _n_from_so_dim(d):
    n = int(round((1 + math.sqrt(1 + 8 * d)) / 2))
    if so_dim(n) != d:
        raise ValueError(f"{d} is not the dimension of any so(n)")
    return n


def inertia_apply(spec, X, direction="forward"):
    X = check_square(X, "X", spec.n)
    if direction == "forward":
        return spec.forward(X)
    if direction == "inverse":
        return spec.inverse(X)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


@dataclass(frozen=True)
class Frame:
    """Orthonormal vectors ``e_1..e_k`` stored as the rows of ``vectors``.

    ``r`` is the number of leading vectors that define the constraint plane
    D_r.  A frame with ``k == n`` vectors is full and has determinant +1.
    """

    vectors: np.ndarray
    r: int

    def __post_init__(self):
        E = np.array(self.vectors, dtype=float, ndmin=2)
        k, n = E.shape
        if k > n or n < 2:
            raise ValueError(f"cannot hold {k} vectors in dimension {n}")
        if not 1 <= self.r <= k:
            raise ValueError(f"r={self.r} must satisfy 1 <= r <= {k}")
        resid = np.max(np.abs(E @ E.T - np.eye(k)))
        if resid > _ORTHO_REJECT_TOL:
            raise ValueError(f"frame vectors are not orthonormal (residual {resid:.2e})")
        if resid > _ORTHO_FIX_TOL:
            E = _orthonormalize_rows(E)
        if k == n:
            d = np.linalg.det(E)
            if abs(d - 1.0) > 1e-8:
                raise ValueError(f"full frame must have determinant +1, got {d:.6f}")
        E.setflags(write=False)
        object.__setattr__(self, "vectors", E)

    @classmethod
    def from_vectors(cls, vectors, r=None):
        E = np.array(vectors, dtype=float, ndmin=2)
        return cls(E, E.shape[0] if r is None else r)

    @property
    def n(self):
        return self.vectors.shape[1]

    @property
    def is_full(self):
        return self.vectors.shape[0] == self.n

    @property
    def leading(self):
        return self.vectors[: self.r]

    def gamma(self):
        """``Gamma = e_1 (x) e_1 + ... + e_r (x) e_r``."""
        X = self.leading
        return X.T @ X

    def complete(self):
        """Full frame with the same leading vectors (deterministic completion)."""
        if self.is_full:
            return self
        return Frame(complete_frame(self.vectors), self.r)


def _orthonormalize_rows(E):
    # QR keeps the span of every leading block; fix signs so each row moves least.
    Q, R = np.linalg.qr(E.T)
    Q = Q * np.sign(np.diag(R))
    return Q.T


def complete_frame(vectors):
    """Extend orthonormal rows ``e_1..e_k`` to a positively oriented basis.

    For a single vector the remaining rows are the images of ``E_2..E_n``
    under the rotation in span(E_1, e_1) taking E_1 to e_1, which is smooth
    except at e_1 = -E_1 (there the rotation by pi in the (1, 2)-plane is
    used).  For k > 1 the complement comes from a QR pass over [e | Id].
    """
    E = np.array(vectors, dtype=float, ndmin=2)
    k, n = E.shape
    if k == n:
        return E
    if k == 1:
        e = E[0]
        c = e[0]
        if c < -1.0 + 1e-12:
            R = np.eye(n)
            R[0, 0] = R[1, 1] = -1.0
        else:
            E1 = np.zeros(n)
            E1[0] = 1.0
            K = np.outer(e, E1) - np.outer(E1, e)
            R = np.eye(n) + K + (K @ K) / (1.0 + c)
        full = R.T.copy()
        full[0] = e
        return full
    Q, Rq = np.linalg.qr(np.column_stack([E.T, np.eye(n)]))
    Q = Q[:, :n]
    signs = np.sign(np.diag(Rq)[:k])
    Q[:, :k] *= signs
    full = Q.T.copy()
    full[:k] = E
    if np.linalg.det(full) < 0:
        full[-1] *= -1.0
    return full


def project_constraint_plane(X, frame):
    """Orthogonal projection onto ``D_r = span{e_k ^ x : k <= r}``:
    ``Gamma X + X Gamma - Gamma X Gamma``."""
    X = np.asarray(X)
    if X.shape != (frame.n, frame.n):
        raise ValueError(f"X has shape {X.shape}, frame lives in dimension {frame.n}")
    G = frame.gamma()
    GX = G @ X
    return GX + X @ G - GX @ G


def plucker_coords(frame):
    """Maximal minors of the n x r matrix (e_1 ... e_r), keyed by row tuples."""
    M = frame.leading.T
    n, r = M.shape
    return {I: float(np.linalg.det(M[list(I), :])) for I in combinations(range(n), r)}


def constraint_bases(frame):
    """Killing-orthonormal bases ``(D_r, D_r-perp)`` as stacks of skew matrices.

    D_r uses ``e_k ^ e_i`` with ``k < r``, ``k < i`` (0-based); the complement
    uses ``e_p ^ e_q`` with ``r <= p < q``.
    """
    E = frame.complete().vectors
    n, r = frame.n, frame.r
    D = [wedge(E[k], E[i]) for k in range(r) for i in range(k + 1, n)]
    perp = [wedge(E[p], E[q]) for p in range(r, n) for q in range(p + 1, n)]
    empty = np.zeros((0, n, n))
    return (np.array(D) if D else empty), (np.array(perp) if perp else empty)


def gram(basis, op):
    """``G[a, b] = <W_a, op(W_b)>`` for a stack of skew matrices."""
    m = len(basis)
    if m == 0:
        return np.zeros((0, 0))
    C = np.array([so_coords(W) for W in basis])
    OpC = np.array([so_coords(op(W)) for W in basis])
    G = C @ OpC.T
    return 0.5 * (G + G.T)


def _det_spd(G, what):
    if G.shape[0] == 0:
        return 1.0
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError(f"{what} Gram matrix is not positive definite") from exc
    return float(np.prod(np.diag(L)) ** 2)


@dataclass(frozen=True)
class MeasureDeterminants:
    mu: float
    mu_tilde: float
    p_special: float = None


def special_normalization(A, r):
    """``det(I|D_r)`` at the coordinate frame divided by ``(A_1...A_r)^(n-r-1)``.

    This fixes the constant ``(det A)^rho`` once per (A, r) numerically.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    spec = InertiaSpec.special(A)
    coord = Frame(np.eye(n)[:r], r)
    D, _ = constraint_bases(coord)
    mt2 = _det_spd(gram(D, spec.forward), "D_r")
    return mt2 / np.prod(A[:r]) ** (n - r - 1)


def special_bracket(A, frame):
    """``sum_I A_{i_1}...A_{i_r} (e_1 ^ ... ^ e_r)_I^2``."""
    A = np.asarray(A, dtype=float)
    return sum(np.prod(A[list(I)]) * c * c for I, c in plucker_coords(frame).items())


def restricted_determinants(spec, frame, r=None):
    """Densities of the invariant measures attached to the constraint plane.

    ``mu = sqrt det <e_p^e_q, I^-1 e_s^e_l>`` over the complement of D_r and
    ``mu_tilde = sqrt det <W_a, I W_b>`` over D_r.  Both depend only on the
    span of the leading vectors, so partial frames are completed first.
    For the special inertia ``p_special`` is the Plucker-coordinate form of
    ``mu_tilde^2``.
    """
    if r is not None and r != frame.r:
        frame = Frame(frame.vectors, r)
    if frame.n != spec.n:
        raise ValueError(f"frame dimension {frame.n} does not match inertia dimension {spec.n}")
    D, perp = constraint_bases(frame)
    mu2 = _det_spd(gram(perp, spec.inverse), "complement")
    mt2 = _det_spd(gram(D, spec.forward), "D_r")
    p = None
    if spec.A is not None:
        n, rr = frame.n, frame.r
        p = special_normalization(spec.A, rr) * special_bracket(spec.A, frame) ** (n - rr - 1)
    return MeasureDeterminants(math.sqrt(mu2), math.sqrt(mt2), p)


def random_frame(n, rng, r=None):
    """Haar-random full frame (rows), sign-fixed QR of a Gaussian matrix."""
    Z = rng.standard_normal((n, n))
    Q, R = np.linalg.qr(Z)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, -1] *= -1.0
    return Frame(Q.T, n if r is None else r)


def random_skew(n, rng, scale=1.0):
    return skew(scale * rng.standard_normal((n, n)))


__all__ = [
    "Frame",
    "InertiaSpec",
    "MeasureDeterminants",
    "bracket",
    "complete_frame",
    "constraint_bases",
    "gram",
    "hat",
    "inertia_apply",
    "killing_inner",
    "plucker_coords",
    "project_constraint_plane",
    "random_frame",
    "random_skew",
    "restricted_determinants",
    "skew",
    "so_coords",
    "so_dim",
    "so_matrix",
    "special_bracket",
    "special_normalization",
    "vee",
    "wedge",
]
