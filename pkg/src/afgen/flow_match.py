"""Conditional probability paths and Riemannian conditional flow matching.

Conditional paths live in the barycenter chart: for a labelling ``beta``
the chart coordinates at time ``t`` are ``g + t * lam * V_beta`` with
``g ~ N(0, Pi_0)`` and ``V_beta = Pi_0 e_beta``; points of the assignment
manifold are their softmax. Training never integrates the flow.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import DomainError, NonFiniteError
from .meta_simplex import as_labels
from .payoff import Adam, loss_and_grad_arrays

log = logging.getLogger(__name__)


@dataclass
class FlowMatchConfig:
    lambda_rate: float = 1.0
    time_dist_rate: float = 0.5
    batch_size: int = 256
    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: str = "constant"
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.lambda_rate > 0 or not self.time_dist_rate > 0:
            raise DomainError("lambda_rate and time_dist_rate must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise DomainError("batch_size must be >= 1 and steps >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise DomainError(f"unknown lr_schedule {self.lr_schedule!r}")

    def learning_rate(self, step, horizon):
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(step, horizon) / horizon))
        return self.lr


@dataclass
class ConditionalSample:
    beta: np.ndarray
    t: float
    w: np.ndarray
    v_beta: np.ndarray
    g: np.ndarray = field(repr=False)


def target_direction(beta, c):
    """``V_beta = Pi_0 e_beta``: row ``i`` is ``e_{beta_i} - 1/c``.

    Accepts a single configuration ``(n,)`` or a batch ``(B, n)``.
    """
    beta = as_labels(beta, c)
    return np.eye(c)[beta - 1] - 1.0 / c


def sample_tangent_normal(rng, shape):
    """Draw from ``N(0, Pi_0)`` on the zero-sum rows of the given shape."""
    return geometry.project_tangent(rng.standard_normal(shape))


def sample_reference(rng, n, c, size=None):
    shape = (n, c) if size is None else (size, n, c)
    return geometry.softmax(sample_tangent_normal(rng, shape))


def conditional_chart(g, beta, t, lambda_rate, c):
    return g + np.asarray(t, dtype=float)[..., None, None] * lambda_rate * target_direction(beta, c)


def psi(g, beta, t, lambda_rate, c):
    """Conditional flow ``psi_t(g) = exp_1(g + t lam V_beta)``."""
    return geometry.softmax(conditional_chart(g, beta, t, lambda_rate, c))


def sample_conditional(beta, t, rng, c, lambda_rate=1.0):
    beta = as_labels(beta, c)
    if t < 0:
        raise DomainError("t must be nonnegative")
    n = beta.size
    g = sample_tangent_normal(rng, (n, c))
    v = target_direction(beta, c)
    w = geometry.as_simplex(geometry.softmax(g + t * lambda_rate * v))
    return ConditionalSample(beta=beta, t=float(t), w=w, v_beta=v, g=g)


def conditional_field(w, beta, lambda_rate):
    """``u_t(W | beta) = R_W[lam V_beta]`` (time independent)."""
    w = np.asarray(w, dtype=float)
    return geometry.replicator(w, lambda_rate * target_direction(beta, w.shape[-1]))


def draw_training_batch(rng, data, config, c):
    """One batch of ``(W, t, lam V_beta)`` for the flow-matching loss.

    ``beta`` is drawn uniformly from ``data``, one exponential ``t`` per example.
    """
    data = np.asarray(data)
    B = config.batch_size
    idx = rng.integers(0, data.shape[0], size=B)
    beta = data[idx]
    t = rng.exponential(1.0 / config.time_dist_rate, size=B)
    g = sample_tangent_normal(rng, (B, data.shape[1], c))
    v = config.lambda_rate * target_direction(beta, c)
    w = geometry.softmax(g + t[:, None, None] * v)
    return w, t, v


@dataclass
class TrainResult:
    model: object
    optimizer: Adam
    trace: list  # (step, wall_ms, loss)


def train(config, data, model, c=None, optimizer=None, start_step=0, callback=None):
    """Minimise the flow-matching loss with Adam.

    ``data`` is an ``(m, n)`` array of 1-based configurations. Randomness is
    drawn from one stream per step, seeded by ``(seed, step)``, so a run
    resumed from ``start_step`` with the saved optimizer continues exactly.
    ``config.steps`` is the total step count, so a resumed run trains steps
    ``start_step .. config.steps - 1`` on the same schedule.
    """
    data = as_labels(np.asarray(data))
    if data.ndim != 2 or data.shape[0] == 0:
        raise DomainError("training data must be a nonempty (m, n) array")
    c = model.arch.c if c is None else c
    if optimizer is None:
        optimizer = Adam(model.theta.size, config.lr, config.beta1, config.beta2, config.eps)
    trace = []
    t0 = time.perf_counter()
    horizon = config.steps
    if not 0 <= start_step <= horizon:
        raise DomainError(f"start_step {start_step} outside 0..{horizon}")
    for step in range(start_step, horizon):
        optimizer.lr = config.learning_rate(step, horizon)
        rng = np.random.default_rng([config.seed, step])
        w, t, v = draw_training_batch(rng, data, config, c)
        try:
            loss, grad = loss_and_grad_arrays(model, w, t, v)
        except NonFiniteError as exc:
            raise NonFiniteError(f"training diverged at step {step}: {exc}", where=step) from exc
        model = model.with_theta(optimizer.step(model.theta, grad))
        if (step + 1) % config.log_every == 0 or step == horizon - 1:
            wall = (time.perf_counter() - t0) * 1000.0
            trace.append((step + 1, wall, loss))
            log.debug("step %d loss %.6g", step + 1, loss)
            if callback is not None:
                callback(step + 1, loss)
    return TrainResult(model, optimizer, trace)

