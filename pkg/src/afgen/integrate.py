"""Sampling by geometric integration of the learned assignment flow.

The flow ``dW/dt = R_W[F(W, t)]`` is integrated in the global barycenter
chart ``W = softmax(x)``, where it reads ``dx/dt = Pi_0 F(softmax(x), t)``.
Every chart point lifts to a strictly positive assignment, so no
renormalisation or clipping is needed along the way.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import DomainError, IntegrationError, NonFiniteError
from .flow_match import sample_tangent_normal
from .meta_simplex import as_labels
from .payoff import forward

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

SAFETY = 0.9
FAC_MIN, FAC_MAX = 0.2, 5.0


@dataclass
class IntegratorConfig:
    t_max: float = 15.0
    rtol: float = 1e-6
    atol: float = 1e-8
    h_init: float = 1e-2
    h_min: float = 1e-12
    h_max: float = math.inf
    max_steps: int = 100_000
    early_exit: bool = True
    early_exit_tol: float = 1e-9

    def __post_init__(self):
        if not self.t_max > 0:
            raise DomainError("t_max must be positive")
        if not (self.rtol > 0 and self.atol > 0 and self.h_init > 0 and self.h_min > 0):
            raise DomainError("tolerances and step sizes must be positive")


@dataclass
class Trajectory:
    times: list
    chart_states: list
    accepted: int
    rejected: int
    early_exit: bool = False

    @property
    def final(self):
        return self.chart_states[-1]


@dataclass
class DopriResult:
    y: np.ndarray
    t_end: np.ndarray
    accepted: int
    rejected: int
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)


def _rms_error(delta, y_old, y_new, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    r = (delta / scale).reshape(delta.shape[0], -1)
    return np.sqrt(np.mean(r * r, axis=1))


def dopri5(f, y0, t0, t1, rtol=1e-6, atol=1e-8, h_init=1e-2, h_min=1e-12, h_max=math.inf,
           max_steps=100_000, done=None, record=False):
    """Integrate the batch ``y' = f(t, y)`` from ``t0`` to ``t1`` (either direction).

    ``y0`` has a leading batch axis; all members share one step size, chosen
    from the worst per-member error ``||delta / (atol + rtol |y|)||_rms``.
    ``done(y)`` (optional) returns a boolean mask of members that have
    converged; those are frozen and no longer evaluated.
    """
    y = np.array(y0, dtype=float)
    B = y.shape[0]
    direction = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)
    t_end = np.full(B, float(t1))
    active = np.arange(B)
    times, states = ([t0], [y.copy()]) if record else ([], [])
    if span == 0.0:
        return DopriResult(y, t_end, 0, 0, times, states)
    t = float(t0)
    h = min(h_init, h_max, span)
    accepted = rejected = 0
    ya = y[active]
    k1 = f(t, ya)
    while True:
        if accepted + rejected >= max_steps:
            raise IntegrationError(f"max_steps={max_steps} exceeded at t={t:.6g}", t=t)
        remaining = abs(t1 - t)
        last = h >= remaining * (1 - 1e-12)
        if last:
            h = remaining
        hs = direction * h
        ks = [k1]
        for i in range(1, 7):
            yi = ya + hs * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
            ks.append(f(t + _C[i] * hs, yi))
        y5 = ya + hs * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        delta = hs * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        if not np.all(np.isfinite(y5)):
            raise NonFiniteError(f"non-finite state at t={t:.6g}", where=t)
        err = float(_rms_error(delta, ya, y5, rtol, atol).max())
        fac = FAC_MAX if err == 0.0 else min(FAC_MAX, max(FAC_MIN, SAFETY * err ** -0.2))
        if err <= 1.0:
            accepted += 1
            t = float(t1) if last else t + hs
            ya = y5
            k1 = ks[6]
            y[active] = ya
            if record:
                times.append(t)
                states.append(y.copy())
            if last:
                break
            if done is not None:
                finished = done(ya)
                if np.any(finished):
                    t_end[active[finished]] = t
                    keep = ~finished
                    active, ya, k1 = active[keep], ya[keep], k1[keep]
                    if active.size == 0:
                        break
            h = min(h * fac, h_max)
        else:
            rejected += 1
            h = h * min(1.0, fac)
        if h < h_min:
            raise IntegrationError(f"step size {h:.3g} below h_min at t={t:.6g}", t=t)
    return DopriResult(y, t_end, accepted, rejected, times, states)


def chart_field(model, x, t):
    """``dx/dt = Pi_0 F(softmax(x), t)`` for chart states ``(n, c)`` or ``(B, n, c)``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("chart_field: non-finite state")
    F = forward(model, geometry.softmax(x), t)
    if not np.all(np.isfinite(F)):
        raise NonFiniteError("non-finite payoff")
    return geometry.project_tangent(F)


def near_vertex(x, tol=1e-9):
    """Mask of batch members whose every node has max probability >= 1 - tol."""
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    s = z.sum(axis=-1)
    return np.all((s - 1.0) / s <= tol, axis=-1)


def integrate_batch(model, x0, config, record=False, early_exit=None):
    """Integrate a batch of chart states ``(B, n, c)`` from 0 to ``t_max``."""
    early = config.early_exit if early_exit is None else early_exit
    done = (lambda y: near_vertex(y, config.early_exit_tol)) if early else None
    return dopri5(lambda t, y: chart_field(model, y, t), x0, 0.0, config.t_max,
                  rtol=config.rtol, atol=config.atol, h_init=config.h_init, h_min=config.h_min,
                  h_max=config.h_max, max_steps=config.max_steps, done=done, record=record)


def integrate(model, x0, config):
    """Integrate a single chart state ``(n, c)`` and return its trajectory."""
    x0 = np.asarray(x0, dtype=float)
    res = integrate_batch(model, x0[None], config, record=True)
    return Trajectory(times=list(res.times), chart_states=[s[0] for s in res.states],
                      accepted=res.accepted, rejected=res.rejected,
                      early_exit=bool(res.t_end[0] < config.t_max))


def round_assignment(w):
    """Per-node argmax as a 1-based configuration; ties go to the lowest class."""
    return np.argmax(np.asarray(w), axis=-1) + 1


def in_rounding_region(w, beta):
    """Whether every node of ``w`` puts (one of) its largest probabilities on ``beta``."""
    w = np.asarray(w, dtype=float)
    beta = np.broadcast_to(as_labels(beta, w.shape[-1]), w.shape[:-1])
    picked = np.take_along_axis(w, (beta - 1)[..., None], axis=-1)[..., 0]
    return np.all(picked >= w.max(axis=-1), axis=-1)


def draw_categorical(rng, w):
    """Sample one class per node from the rows of ``w`` (1-based)."""
    u = rng.random(w.shape[:-1])
    cdf = np.cumsum(w, axis=-1)
    cdf[..., -1] = 1.0
    return np.argmax(cdf > u[..., None], axis=-1) + 1


def sample_arrays(model, config, rng, count, n, variant="categorical", chunk_size=16384):
    """Draw ``count`` configurations; returns ``(labels, final chart states)``.

    Chunks are integrated as batches in a fixed order, so the output is a
    deterministic function of the rng state, ``count`` and ``chunk_size``.
    """
    if variant not in ("categorical", "rounding"):
        raise DomainError(f"unknown sampling variant {variant!r}")
    c = model.arch.c
    labels = np.zeros((count, n), dtype=int)
    states = np.zeros((count, n, c))
    for start in range(0, count, chunk_size):
        stop = min(count, start + chunk_size)
        x0 = sample_tangent_normal(rng, (stop - start, n, c))
        try:
            res = integrate_batch(model, x0, config)
        except (IntegrationError, NonFiniteError) as exc:
            raise IntegrationError(f"integration failed for samples {start}..{stop - 1}: {exc}",
                                   index=start) from exc
        w = geometry.softmax(res.y)
        labels[start:stop] = draw_categorical(rng, w) if variant == "categorical" else round_assignment(w)
        states[start:stop] = res.y
    return labels, states


def sample(model, config, rng, count, n, variant="categorical", chunk_size=16384):
    """List of ``(labels, final assignment)`` pairs."""
    labels, states = sample_arrays(model, config, rng, count, n, variant, chunk_size)
    return [(labels[k], geometry.softmax(states[k])) for k in range(count)]
