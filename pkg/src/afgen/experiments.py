"""Reference experiments: the two-node toy target and class scaling.

Both are plain functions returning numbers and records so the CLI, the
test-suite and scripts share one code path.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError
from .flow_match import FlowMatchConfig, train
from .integrate import IntegratorConfig, sample_arrays
from .meta_simplex import DenseJoint, MAX_STATES, config_index, embed_T, histogram, kl
from .payoff import Architecture, PayoffModel

log = logging.getLogger(__name__)

TOY_PROBS = (0.45, 0.05, 0.05, 0.45)


def toy_target():
    """Correlated two-node binary target with mass on the agreeing configurations."""
    return DenseJoint(np.array(TOY_PROBS), 2, 2)


def sample_joint(joint, count, rng):
    """Exact i.i.d. draws from a dense joint as ``(count, n)`` 1-based labels."""
    idx = rng.choice(joint.N, size=count, p=joint.probs)
    return np.stack(np.unravel_index(idx, (joint.c,) * joint.n), axis=-1) + 1


@dataclass
class FactorizingTarget:
    """Product of per-node marginals ``(n, c)``; dense form only on demand."""

    marginals: np.ndarray

    @property
    def n(self):
        return self.marginals.shape[0]

    @property
    def c(self):
        return self.marginals.shape[1]

    def log_prob(self, labels):
        labels = np.asarray(labels).reshape(-1, self.n)
        return np.log(self.marginals[np.arange(self.n), labels - 1]).sum(axis=1)

    def sample(self, count, rng):
        u = rng.random((count, self.n, 1))
        cdf = np.cumsum(self.marginals, axis=-1)
        cdf[:, -1] = 1.0
        return np.argmax(cdf[None] > u, axis=-1) + 1

    def dense(self):
        return embed_T(self.marginals)

    def uniform_kl(self):
        """Exact ``KL(uniform || target)``."""
        return float(np.sum(-math.log(self.c) - np.log(self.marginals).mean(axis=1)))


def random_factorizing_target(n, c, rng, alpha=1.0):
    """Per-node marginals drawn from a flat Dirichlet, floored away from zero."""
    m = rng.dirichlet(np.full(c, alpha), size=n)
    m = np.maximum(m, 1e-12)
    return FactorizingTarget(m / m.sum(axis=1, keepdims=True))


def noise_floor(num_states, num_samples):
    """Expected plug-in KL of an exact sample: ``(N - 1) / (2 M)``."""
    return (num_states - 1) / (2.0 * num_samples)


def sample_kl(labels, target):
    """``KL(histogram || target)`` in nats.

    Dense targets use the full histogram. Factorizing targets too large to
    enumerate are evaluated on the observed support only.
    """
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise DomainError("KL of an empty sample")
    if isinstance(target, DenseJoint):
        if labels.shape[1] != target.n or labels.max() > target.c:
            raise DomainError("samples and target disagree on (n, c)")
        return kl(histogram(labels, target.n, target.c), target)
    if labels.shape[1] != target.n or labels.max() > target.c:
        raise DomainError("samples and target disagree on (n, c)")
    keys, counts = np.unique(config_index(labels, target.c), return_counts=True)
    first = np.unique(config_index(labels, target.c), return_index=True)[1]
    h = counts / counts.sum()
    return float(max(0.0, np.sum(h * (np.log(h) - target.log_prob(labels[first])))))


def train_model(data, c, flow_config, hidden=64, context=True, node_bias=False, model=None):
    """Initialise (unless ``model`` is given) and train a payoff model."""
    if model is None:
        rng = np.random.default_rng(np.random.SeedSequence(flow_config.seed, spawn_key=(1,)))
        nodes = np.asarray(data).shape[1] if node_bias else 0
        model = PayoffModel.init(Architecture(c=c, hidden=hidden, context=context, nodes=nodes), rng)
    return train(flow_config, data, model, c=c)


def sampling_rng(seed):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))


def data_rng(seed):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))


@dataclass
class ToyConfig:
    num_train: int = 10_000
    hidden: int = 16
    steps: int = 6000
    batch_size: int = 512
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    lambda_rate: float = 1.0
    rtol: float = 1e-5
    atol: float = 1e-8
    t_max: float = 15.0
    seed: int = 0


def toy_flow_config(cfg):
    return FlowMatchConfig(lambda_rate=cfg.lambda_rate, batch_size=cfg.batch_size, steps=cfg.steps,
                           lr=cfg.lr, lr_schedule=cfg.lr_schedule, seed=cfg.seed)


def train_toy(cfg=None):
    """Train on ``num_train`` exact draws from :func:`toy_target`."""
    cfg = cfg or ToyConfig()
    data = sample_joint(toy_target(), cfg.num_train, data_rng(cfg.seed))
    return train_model(data, 2, toy_flow_config(cfg), hidden=cfg.hidden)


@dataclass
class ClassScalingConfig:
    classes: list = field(default_factory=lambda: [4, 16, 64])
    n: int = 4
    num_train: int = 10_000
    steps: int = 5000
    batch_size: int = 256
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    hidden: int = 32
    node_bias: bool = True
    lambda_rate: float = 1.0
    # per-c sample counts; classes not listed use default_samples
    num_samples: dict = field(default_factory=lambda: {4: 131072})
    default_samples: int = 65536
    dirichlet_alpha: float = 1.0
    rtol: float = 1e-5
    atol: float = 1e-8
    t_max: float = 15.0
    seed: int = 0

    def samples_for(self, c):
        return int(self.num_samples.get(c, self.num_samples.get(str(c), self.default_samples)))


RESULT_COLUMNS = ["c", "N", "num_samples", "kl_nats", "kl_method", "exact_sample_kl", "uniform_sample_kl",
                  "uniform_kl_exact", "noise_floor", "marginal_kl", "observed_states", "train_seconds",
                  "sample_seconds", "status", "error"]


def marginal_kl(labels, target):
    """Sum over nodes of ``KL(empirical node marginal || target marginal)``."""
    labels = np.asarray(labels)
    total = 0.0
    for i in range(target.n):
        h = np.bincount(labels[:, i] - 1, minlength=target.c) / labels.shape[0]
        total += kl(h, target.marginals[i])
    return total


def class_scaling_one(cfg, c):
    """Train and evaluate one class count; returns a result row."""
    seed = [cfg.seed, c]
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    target = random_factorizing_target(cfg.n, c, rng, cfg.dirichlet_alpha)
    data = target.sample(cfg.num_train, rng)
    N = c ** cfg.n
    M = cfg.samples_for(c)
    row = {"c": c, "N": N, "uniform_kl_exact": target.uniform_kl(), "noise_floor": noise_floor(N, M),
           "num_samples": M, "status": "ok", "error": ""}
    fc = FlowMatchConfig(lambda_rate=cfg.lambda_rate, batch_size=cfg.batch_size, steps=cfg.steps,
                         lr=cfg.lr, lr_schedule=cfg.lr_schedule, seed=cfg.seed + 7919 * c)
    t0 = time.perf_counter()
    model = train_model(data, c, fc, hidden=cfg.hidden, node_bias=cfg.node_bias).model
    row["train_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    integ = IntegratorConfig(t_max=cfg.t_max, rtol=cfg.rtol, atol=cfg.atol)
    labels, _ = sample_arrays(model, integ, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,))),
                              M, cfg.n)
    row["sample_seconds"] = time.perf_counter() - t0
    row["observed_states"] = int(np.unique(config_index(labels, c)).size)
    dense = N <= min(MAX_STATES, 1 << 16)
    ref = target.dense() if dense else target
    row["kl_method"] = "dense" if dense else "observed_support"
    row["kl_nats"] = sample_kl(labels, ref)
    row["marginal_kl"] = marginal_kl(labels, target)
    # same-size references: an exact sample and a uniform-model sample
    ref_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    row["exact_sample_kl"] = sample_kl(target.sample(M, ref_rng), ref)
    row["uniform_sample_kl"] = sample_kl(ref_rng.integers(1, c + 1, size=(M, cfg.n)), ref)
    return row


def run_class_scaling(cfg, on_row=None):
    """Run every class count; a failing stage is recorded and the sweep continues."""
    rows = []
    for c in cfg.classes:
        try:
            row = class_scaling_one(cfg, int(c))
        except Exception as exc:  # recorded per class, the sweep goes on
            log.exception("class scaling failed for c=%s", c)
            row = {"c": c, "N": int(c) ** cfg.n, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def config_dict(cfg):
    return asdict(cfg)
