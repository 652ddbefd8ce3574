"""Dense brute-force oracle on the meta-simplex of joint distributions.

Joint distributions over ``[c]^n`` are stored as flat vectors of length
``N = c**n`` in lexicographic order of the configuration ``(a_1, ..., a_n)``
with the last node varying fastest, i.e. the C-order ravel of an
``(c,) * n`` tensor. Label configurations are 1-based throughout.
"""

import io
import itertools
import math
import struct
import warnings
from dataclasses import dataclass
from functools import reduce

import numpy as np

from . import geometry
from .errors import DomainError, GuardError

MAX_STATES = 2**24
_JOINT_MAGIC = b"AFGJ"


def check_guard(n, c):
    N = c**n
    if N > MAX_STATES:
        raise GuardError(f"c**n = {c}**{n} = {N} exceeds the dense limit {MAX_STATES}")
    return N


def as_labels(beta, c=None):
    """Validate a 1-based label configuration and return it as an int array."""
    beta = np.asarray(beta)
    if beta.size and not np.issubdtype(beta.dtype, np.integer):
        if not np.all(beta == np.round(beta)):
            raise DomainError("labels must be integers")
        beta = beta.astype(int)
    if np.any(beta < 1) or (c is not None and np.any(beta > c)):
        raise DomainError(f"labels must lie in 1..{c}")
    return beta.astype(int)


def config_index(beta, c):
    """Flat index of configuration ``beta`` (works on ``(..., n)`` batches)."""
    beta = as_labels(beta, c) - 1
    n = beta.shape[-1]
    weights = c ** np.arange(n - 1, -1, -1)
    return beta @ weights


def all_configs(n, c):
    """All configurations in storage order, shape ``(c**n, n)``, 1-based."""
    check_guard(n, c)
    return np.array(list(itertools.product(range(1, c + 1), repeat=n)), dtype=int).reshape(-1, n)


def to_extreme(beta, c):
    """Vertex of the closed assignment manifold encoded by ``beta`` (one-hot rows)."""
    beta = as_labels(beta, c)
    return np.eye(c)[beta - 1]


@dataclass
class DenseJoint:
    """Explicit joint distribution over ``[c]^n`` (small instances only)."""

    probs: np.ndarray
    n: int
    c: int

    def __post_init__(self):
        N = check_guard(self.n, self.c)
        self.probs = np.asarray(self.probs, dtype=float).reshape(-1)
        if self.probs.size != N:
            raise DomainError(f"expected {N} probabilities, got {self.probs.size}")
        if np.any(self.probs < 0) or not np.all(np.isfinite(self.probs)):
            raise DomainError("joint probabilities must be finite and nonnegative")
        if abs(self.probs.sum() - 1.0) > 1e-12 * max(1.0, math.sqrt(N)):
            raise DomainError(f"joint probabilities sum to {self.probs.sum()!r}")

    @property
    def N(self):
        return self.probs.size

    @classmethod
    def uniform(cls, n, c):
        N = check_guard(n, c)
        return cls(np.full(N, 1.0 / N), n, c)

    @classmethod
    def dirac(cls, beta, c):
        beta = as_labels(beta, c)
        N = check_guard(beta.size, c)
        p = np.zeros(N)
        p[config_index(beta, c)] = 1.0
        return cls(p, beta.size, c)

    def prob(self, beta):
        return self.probs[config_index(beta, self.c)]

    def tensor(self):
        return self.probs.reshape((self.c,) * self.n)

    def to_bytes(self):
        head = _JOINT_MAGIC + struct.pack("<III", self.n, self.c, 0)
        return head + self.probs.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data):
        if len(data) < 16 or data[:4] != _JOINT_MAGIC:
            raise DomainError("not an AFGJ joint distribution file")
        n, c, _ = struct.unpack("<III", data[4:16])
        check_guard(n, c)
        probs = np.frombuffer(data[16:], dtype="<f8")
        return cls(probs.astype(float), n, c)

    def save(self, path):
        from .io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def embed_T(w):
    """Segre embedding ``T(W)_a = prod_i W[i, a_i]`` as a :class:`DenseJoint`."""
    w = geometry.as_simplex(w)
    n, c = w.shape
    check_guard(n, c)
    probs = reduce(np.multiply.outer, list(w)).reshape(-1)
    return DenseJoint(probs / probs.sum(), n, c)


def embed_Q(v):
    """Tangent counterpart of the embedding, ``(QV)_a = sum_i V[i, a_i]``."""
    v = np.asarray(v, dtype=float)
    n, c = v.shape
    check_guard(n, c)
    return reduce(np.add.outer, list(v)).reshape(-1)


def marginalize(p):
    """Per-node marginals of a joint, ``(Mp)[i, j] = sum_{a: a_i = j} p_a``."""
    if isinstance(p, DenseJoint):
        n, c, x = p.n, p.c, p.probs
    else:
        raise TypeError("marginalize expects a DenseJoint; use marginalize_vector for raw arrays")
    return marginalize_vector(x, n, c)


def marginalize_vector(x, n, c):
    """Apply the linear marginalisation map to an arbitrary N-vector.

    As a linear map this is the adjoint ``Q^T`` of :func:`embed_Q`.
    """
    check_guard(n, c)
    t = np.asarray(x, dtype=float).reshape((c,) * n)
    axes = tuple(range(n))
    return np.stack([t.sum(axis=axes[:i] + axes[i + 1:]) for i in range(n)])


def q_matrix(n, c):
    """Explicit ``(N, n*c)`` matrix of Q; for tests on tiny instances."""
    N = check_guard(n, c)
    Q = np.zeros((N, n * c))
    for col in range(n * c):
        e = np.zeros(n * c)
        e[col] = 1.0
        Q[:, col] = embed_Q(e.reshape(n, c))
    return Q


def proj0(v, n, c):
    """Orthogonal projection of a zero-sum N-vector onto ``img Q``.

    ``proj0 v = Q_c Pi_0 Q_c^T v`` with ``Q_c = Q / sqrt(c**(n-1))``.
    """
    check_guard(n, c)
    v = np.asarray(v, dtype=float)
    u = geometry.project_tangent(marginalize_vector(v, n, c))
    return embed_Q(u) / c ** (n - 1)


def proj_to_T(q):
    """Project a strictly positive joint onto the factorising submanifold.

    The projection is ``softmax o proj0 o (pi_0 log)`` on the meta-simplex;
    the result is returned through its marginals ``W`` (so that
    ``embed_T(W)`` is the projected joint). Using ``Q^T = M`` the chart
    coordinates of ``W`` are ``Pi_0 M log q / c**(n-1)``.
    """
    if not isinstance(q, DenseJoint):
        raise TypeError("proj_to_T expects a DenseJoint")
    if np.any(q.probs <= 0):
        raise DomainError("proj_to_T requires a strictly positive joint")
    n, c = q.n, q.c
    x = geometry.project_tangent(marginalize_vector(np.log(q.probs), n, c)) / c ** (n - 1)
    return geometry.as_simplex(geometry.softmax(x))


def meta_lift(v):
    """Lifting map at the barycenter of the meta-simplex (a softmax over N)."""
    return geometry.softmax(v)


def lifting_map_lemma_check(v, tol=1e-10, rhs=None):
    """Check ``softmax(Q v) == T(softmax(v))`` entrywise within ``tol``.

    ``rhs`` overrides the right-hand side (used to test the checker itself).
    """
    v = np.asarray(v, dtype=float)
    lhs = meta_lift(embed_Q(v))
    if rhs is None:
        rhs = embed_T(geometry.lift(geometry.barycenter(*v.shape), v)).probs
    return bool(np.max(np.abs(lhs - rhs)) <= tol)


def _xlogx(p):
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def entropy(p):
    """Shannon entropy in nats."""
    x = p.probs if isinstance(p, DenseJoint) else np.asarray(p, dtype=float)
    return float(max(0.0, -_xlogx(x).sum()))


def kl(p, q):
    """``KL(p || q)`` in nats; ``inf`` (with a warning) if ``q`` misses p's support."""
    x = p.probs if isinstance(p, DenseJoint) else np.asarray(p, dtype=float)
    y = q.probs if isinstance(q, DenseJoint) else np.asarray(q, dtype=float)
    if x.shape != y.shape:
        raise DomainError("kl: distributions over different state spaces")
    support = x > 0
    if np.any(y[support] <= 0):
        warnings.warn("kl: q vanishes on the support of p", RuntimeWarning, stacklevel=2)
        return math.inf
    val = np.sum(x[support] * (np.log(x[support]) - np.log(y[support])))
    return float(max(0.0, val))


def mixture_estimate(samples):
    """Empirical mixture ``mean_k T(W_k)`` of factorising joints."""
    samples = list(samples)
    if not samples:
        raise DomainError("mixture_estimate needs at least one sample")
    acc = None
    for w in samples:
        t = embed_T(w)
        acc = t.probs.copy() if acc is None else acc + t.probs
    return DenseJoint(acc / acc.sum(), t.n, t.c)


def histogram(labels, n, c):
    """Empirical joint of 1-based label configurations (rows of ``labels``)."""
    N = check_guard(n, c)
    labels = np.asarray(labels).reshape(-1, n)
    if labels.shape[0] == 0:
        raise DomainError("histogram of an empty sample")
    counts = np.bincount(config_index(labels, c), minlength=N).astype(float)
    return DenseJoint(counts / counts.sum(), n, c)


def format_vector(x):
    buf = io.StringIO()
    np.savetxt(buf, np.atleast_2d(x), fmt="%.17g")
    return buf.getvalue()
