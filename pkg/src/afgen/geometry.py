"""Fisher-Rao / e-connection geometry of the probability simplex.

Every function acts on the last axis, so a single simplex point is a
``(c,)`` array and a point of the assignment manifold is an ``(n, c)``
array whose rows are simplex points. Leading batch axes broadcast.
"""

import numpy as np

from .errors import DomainError

#: entries of simplex points are clamped to this floor before renormalising
PROB_FLOOR = 1e-300
#: tolerance of the construction-time invariant checks
CHECK_TOL = 1e-12


def as_simplex(x):
    """Return ``x`` as strictly positive rows summing to one.

    Entries below :data:`PROB_FLOOR` are raised to it and the rows are
    renormalised; this is where the open manifold is numerically truncated.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise DomainError("simplex entries must be finite and nonnegative")
    x = np.maximum(x, PROB_FLOOR)
    x = x / x.sum(axis=-1, keepdims=True)
    if __debug__:
        assert np.all(np.abs(x.sum(axis=-1) - 1.0) < CHECK_TOL)
    return x


def as_tangent(v):
    v = np.asarray(v, dtype=float)
    if __debug__:
        scale = np.maximum(1.0, np.abs(v).max(axis=-1, initial=0.0))
        if np.any(np.abs(v.sum(axis=-1)) > CHECK_TOL * scale * v.shape[-1]):
            raise DomainError("tangent rows must sum to zero")
    return v


def barycenter(n, c):
    """The barycenter of the assignment manifold, every entry ``1/c``."""
    return np.full((n, c), 1.0 / c)


def project_tangent(x):
    """Orthogonal projection onto the zero-sum subspace (row mean removal)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("project_tangent: non-finite input")
    return x - x.mean(axis=-1, keepdims=True)


def softmax(x):
    x = np.asarray(x, dtype=float)
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def log_softmax(x):
    x = np.asarray(x, dtype=float)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def exp_e(p, v):
    """Exponential map of the e-connection, ``p * exp(v/p)`` normalised."""
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(p <= 0):
        raise DomainError("exp_e: base point must be strictly positive")
    u = v / p
    u = u - u.max(axis=-1, keepdims=True)
    return as_simplex(p * np.exp(u))


def replicator(p, f):
    """Replicator operator ``(Diag(p) - p p^T) f`` applied row-wise."""
    p = np.asarray(p, dtype=float)
    f = np.asarray(f, dtype=float)
    return p * (f - np.sum(p * f, axis=-1, keepdims=True))


def lift(p, v):
    """Lifting map ``exp_p = Exp_p o R_p``.

    Since ``R_p v / p = v - <p, v>``, this reduces to ``softmax(log p + v)``,
    which is how it is evaluated. At the barycenter it is the softmax of ``v``.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise DomainError("lift: base point must be strictly positive")
    return as_simplex(softmax(np.log(p) + np.asarray(v, dtype=float)))


def lift_inverse(p, w):
    """Inverse of :func:`lift` in its second argument: ``pi_0(log w - log p)``."""
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0) or np.any(p <= 0):
        raise DomainError("lift_inverse: arguments must be strictly positive")
    return project_tangent(np.log(w) - np.log(p))


def fr_inner(p, u, v):
    """Fisher-Rao inner product ``<u, Diag(p)^{-1} v>``.

    For ``(n, c)`` arguments this is the product metric (sum over nodes).
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise DomainError("fr_inner: base point must be strictly positive")
    return float(np.sum(np.asarray(u) * np.asarray(v) / p))


def helmert_basis(c):
    """Orthonormal basis of the zero-sum subspace of R^c as a ``(c, c-1)`` matrix.

    Column k is the normalised ``(1, ..., 1, -k, 0, ..., 0)`` with ``k`` ones.
    """
    B = np.zeros((c, c - 1))
    for k in range(1, c):
        B[:k, k - 1] = 1.0
        B[k, k - 1] = -k
        B[:, k - 1] /= np.sqrt(k * (k + 1))
    return B
