"""Likelihood of label configurations under a trained flow.

Densities live on the ``d = n (c - 1)`` dimensional chart, expressed in
orthonormal (Helmert) coordinates ``z`` per node, where the reference
measure is a standard normal. ``log nu_tmax`` is obtained by integrating
the flow backwards together with the divergence of the chart field, the
divergence being estimated with Hutchinson probes and central finite
differences. Discrete likelihoods then follow by importance sampling
with a chart-Gaussian proposal and a logsumexp reduction.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import geometry
from .errors import DomainError
from .flow_match import target_direction
from .integrate import IntegratorConfig, chart_field, dopri5, in_rounding_region
from .meta_simplex import DenseJoint, as_labels

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LikelihoodConfig:
    num_proposal_samples: int = 100
    num_hutchinson: int = 1
    hutchinson_dist: str = "rademacher"  # rademacher | gaussian | exact
    proposal_sigma: float = 1.0
    proposal_center_time: float = None  # defaults to t_max
    model_variant: str = "factorizing"  # factorizing | rounding
    lambda_rate: float = 1.0
    fd_eps: float = 1e-5

    def __post_init__(self):
        if self.num_proposal_samples < 1 or self.num_hutchinson < 1:
            raise DomainError("sample counts must be >= 1")
        if not self.proposal_sigma > 0:
            raise DomainError("proposal_sigma must be positive")
        if self.hutchinson_dist not in ("rademacher", "gaussian", "exact"):
            raise DomainError(f"unknown probe distribution {self.hutchinson_dist!r}")
        if self.model_variant not in ("factorizing", "rounding"):
            raise DomainError(f"unknown model variant {self.model_variant!r}")


@dataclass
class LogLikelihoodResult:
    log_prob: float
    std_error: float
    ess: float
    flags: list = field(default_factory=list)
    log_weights: np.ndarray = field(default=None, repr=False)


class Chart:
    """Orthonormal coordinates of the tangent space ``T_0`` for ``(n, c)``."""

    def __init__(self, n, c):
        self.n, self.c = n, c
        self.basis = geometry.helmert_basis(c)
        self.dim = n * (c - 1)

    def to_x(self, z):
        z = np.asarray(z, dtype=float)
        return z.reshape(z.shape[:-1] + (self.n, self.c - 1)) @ self.basis.T

    def to_z(self, x):
        x = np.asarray(x, dtype=float)
        z = x @ self.basis
        return z.reshape(z.shape[:-2] + (self.dim,))

    def field(self, model, z, t):
        return self.to_z(chart_field(model, self.to_x(z), t))


def base_log_density(z):
    """Standard normal log-density on the chart (last axis = coordinates)."""
    z = np.asarray(z, dtype=float)
    return -0.5 * z.shape[-1] * LOG_2PI - 0.5 * np.sum(z * z, axis=-1)


def draw_probes(rng, shape, dist):
    if dist == "rademacher":
        return rng.integers(0, 2, size=shape) * 2.0 - 1.0
    return rng.standard_normal(shape)


def probe_set(rng, K, d, config):
    """Probe vectors ``(K, P, d)``; ``exact`` uses the coordinate basis."""
    if config.hutchinson_dist == "exact":
        return np.broadcast_to(np.eye(d), (K, d, d))
    return draw_probes(rng, (K, config.num_hutchinson, d), config.hutchinson_dist)


def divergence_terms(model, chart, z, t, probes, eps=1e-5):
    """Per-probe ``<v, J v>`` of the chart field at ``z`` ``(K, d)``.

    ``J v`` is a central difference with step ``eps * max(1, ||z||)``.
    Returns an array ``(K, P)``.
    """
    K, P, d = probes.shape
    h = eps * np.maximum(1.0, np.linalg.norm(z, axis=-1))[:, None, None]
    zp = (z[:, None, :] + h * probes).reshape(K * P, d)
    zm = (z[:, None, :] - h * probes).reshape(K * P, d)
    both = chart.field(model, np.concatenate([zp, zm]), t)
    jv = (both[:K * P] - both[K * P:]).reshape(K, P, d) / (2.0 * h)
    return np.sum(probes * jv, axis=-1)


def log_density_batch(model, x_final, config=None, rng=None, integ=None, t_max=None):
    """``log nu_{t_max}`` at chart states ``x_final`` of shape ``(K, n, c)``.

    Integrates ``(z, D)`` from ``t_max`` back to 0 where ``dD/dt`` is the
    (estimated) divergence, and returns ``base(z(0)) + D(0)``.
    """
    config = config or LikelihoodConfig()
    integ = integ or IntegratorConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    t_max = integ.t_max if t_max is None else t_max
    x_final = np.asarray(x_final, dtype=float)
    K, n, c = x_final.shape
    chart = Chart(n, c)
    d = chart.dim
    probes = probe_set(rng, K, d, config)
    # basis probes give the trace as a sum, random probes as a mean
    reduce = np.sum if config.hutchinson_dist == "exact" else np.mean

    def rhs(t, y):
        z = y[:, :d]
        out = np.empty_like(y)
        out[:, :d] = chart.field(model, z, t)
        out[:, d] = reduce(divergence_terms(model, chart, z, t, probes, config.fd_eps), axis=1)
        return out

    y0 = np.concatenate([chart.to_z(x_final), np.zeros((K, 1))], axis=1)
    res = dopri5(rhs, y0, t_max, 0.0, rtol=integ.rtol, atol=integ.atol, h_init=integ.h_init,
                 h_min=integ.h_min, h_max=integ.h_max, max_steps=integ.max_steps)
    z0, D = res.y[:, :d], res.y[:, d]
    out = base_log_density(z0) + D
    if not np.all(np.isfinite(out)):
        raise DomainError("non-finite log-density")
    return out


def log_density_at(model, x_final, config=None, rng=None, integ=None):
    """``log nu_{t_max}(x)`` for a single chart state ``(n, c)``."""
    x = np.asarray(x_final, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("log_density_at: non-finite state")
    return float(log_density_batch(model, x[None], config, rng, integ)[0])


def logmeanexp_with_error(log_weights):
    """``log mean exp`` plus delta-method standard error and effective sample size."""
    lw = np.asarray(log_weights, dtype=float)
    K = lw.size
    if np.any(np.isnan(lw)):
        raise DomainError("NaN log-weight")
    if not np.any(np.isfinite(lw)):
        return -math.inf, math.inf, 0.0
    m = lw.max()
    w = np.exp(lw - m)
    mean = w.mean()
    log_mean = float(logsumexp(lw) - math.log(K))
    sd = w.std(ddof=1) if K > 1 else math.inf
    se = float(sd / (math.sqrt(K) * mean))
    ess = float(w.sum() ** 2 / np.sum(w * w))
    return log_mean, se, ess


def log_likelihood(model, beta, config=None, rng=None, integ=None):
    """Importance-sampled ``log p~_beta`` (nats) with its standard error."""
    config = config or LikelihoodConfig()
    integ = integ or IntegratorConfig(early_exit=False)
    rng = np.random.default_rng(0) if rng is None else rng
    c = model.arch.c
    beta = as_labels(beta, c)
    n = beta.size
    chart = Chart(n, c)
    K = config.num_proposal_samples
    center_time = integ.t_max if config.proposal_center_time is None else config.proposal_center_time
    mu = chart.to_z(center_time * config.lambda_rate * target_direction(beta, c))
    sigma = config.proposal_sigma
    eps = rng.standard_normal((K, chart.dim))
    z = mu + sigma * eps
    log_proposal = -0.5 * chart.dim * (LOG_2PI + 2.0 * math.log(sigma)) - 0.5 * np.sum(eps * eps, axis=1)
    x = chart.to_x(z)
    if config.model_variant == "factorizing":
        logw = geometry.log_softmax(x)
        term = np.take_along_axis(logw, (beta - 1)[None, :, None], axis=-1)[..., 0].sum(axis=1)
    else:
        term = np.where(in_rounding_region(geometry.softmax(x), beta), 0.0, -math.inf)
    flags = []
    lw = np.full(K, -math.inf)
    live = np.isfinite(term)
    if np.any(live):
        lw[live] = term[live] + log_density_batch(model, x[live], config, rng, integ) - log_proposal[live]
    else:
        flags.append("no_proposal_in_region")
    log_prob, se, ess = logmeanexp_with_error(lw)
    return LogLikelihoodResult(log_prob, se, ess, flags, lw)


def exact_log_prob(joint, beta):
    p = joint.prob(beta)
    return math.log(p) if p > 0 else -math.inf


def kl_surrogate(model, test_data, config=None, rng=None, integ=None):
    """Mean negative log-likelihood of ``test_data``.

    ``model`` is a trained payoff model or a :class:`DenseJoint` (exact
    oracle). Returns a dict with nats, bits/dim, the number of data with
    ``-inf`` likelihood and the per-datum results.
    """
    data = np.asarray(test_data)
    if data.ndim != 2 or data.shape[0] == 0:
        raise DomainError("kl_surrogate needs a nonempty (m, n) array of configurations")
    n = data.shape[1]
    rng = np.random.default_rng(0) if rng is None else rng
    results = []
    for beta in data:
        if isinstance(model, DenseJoint):
            results.append(LogLikelihoodResult(exact_log_prob(model, beta), 0.0, math.inf))
        else:
            results.append(log_likelihood(model, beta, config, rng, integ))
    logs = np.array([r.log_prob for r in results])
    failed = int(np.sum(~np.isfinite(logs)))
    finite = logs[np.isfinite(logs)]
    nats = float(-finite.mean()) if finite.size else math.inf
    if failed:
        nats = math.inf
    return {"nats": nats, "bits_per_dim": nats / (n * math.log(2.0)), "failed": failed,
            "results": results}
