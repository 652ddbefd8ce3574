"""Trainable payoff functions and their exact gradients.

The payoff is a per-node MLP with weights shared across nodes. Node ``i``
sees its own centred state ``pi_0 W_i``, a sinusoidal embedding of ``t``
and (optionally) the mean of all node states, which is what lets nodes
interact. The ``embedded`` variant wraps the MLP between a learnable
class embedding ``E`` (``L x c``) and its transpose. With ``nodes > 0``
every node also gets its own learned first-layer bias, which breaks the
node symmetry (needed when nodes have different marginals).

Reverse mode is written out by hand for this fixed architecture.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NonFiniteError

TIME_FREQS = 2.0 ** -np.arange(8)
TIME_DIM = 2 * TIME_FREQS.size
_CKPT_MAGIC = b"AFGP"
_CKPT_VERSION = 1


def time_embedding(t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    arg = t[:, None] * TIME_FREQS
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class Architecture:
    c: int
    hidden: int = 64
    context: bool = True
    variant: str = "plain"
    embed_dim: int = 0
    nodes: int = 0

    def __post_init__(self):
        if self.c < 2:
            raise DomainError("need at least 2 classes")
        if self.nodes < 0:
            raise DomainError("nodes must be >= 0")
        if self.variant not in ("plain", "embedded"):
            raise DomainError(f"unknown payoff variant {self.variant!r}")
        if self.variant == "embedded" and self.embed_dim <= 0:
            raise DomainError("embedded variant needs embed_dim > 0")
        if self.variant == "plain":
            self.embed_dim = 0

    @property
    def state_dim(self):
        return self.embed_dim if self.variant == "embedded" else self.c

    @property
    def input_dim(self):
        return self.state_dim * (2 if self.context else 1) + TIME_DIM

    def shapes(self):
        """Ordered parameter blocks as ``(name, shape)``."""
        d, H = self.state_dim, self.hidden
        blocks = [("E", (self.embed_dim, self.c))] if self.variant == "embedded" else []
        blocks += [
            ("A1", (self.input_dim, H)), ("b1", (H,)),
        ]
        if self.nodes:
            blocks.append(("N1", (self.nodes, H)))
        blocks += [
            ("A2", (H, H)), ("b2", (H,)),
            ("A3", (H, d)), ("b3", (d,)),
        ]
        return blocks

    @property
    def num_params(self):
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def to_json(self):
        return {"kind": "node-mlp", "activation": "softplus", "time_dim": TIME_DIM,
                "c": self.c, "hidden": self.hidden, "context": self.context,
                "variant": self.variant, "embed_dim": self.embed_dim, "nodes": self.nodes}

    @classmethod
    def from_json(cls, doc):
        if doc.get("kind") != "node-mlp" or doc.get("time_dim") != TIME_DIM:
            raise DomainError(f"unsupported architecture descriptor {doc!r}")
        return cls(c=doc["c"], hidden=doc["hidden"], context=doc["context"],
                   variant=doc["variant"], embed_dim=doc["embed_dim"], nodes=doc.get("nodes", 0))


@dataclass
class PayoffModel:
    arch: Architecture
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if self.theta.size != self.arch.num_params:
            raise DomainError(
                f"parameter count {self.theta.size} does not match architecture ({self.arch.num_params})")

    @classmethod
    def init(cls, arch, rng, zero_final=True):
        """He-uniform hidden layers; final layer zero so the initial field vanishes."""
        parts = []
        for name, shape in arch.shapes():
            if name == "E":
                w = rng.normal(size=shape) / np.sqrt(arch.c)
            elif name.startswith("A") and not (zero_final and name == "A3"):
                bound = np.sqrt(6.0 / shape[0])
                w = rng.uniform(-bound, bound, size=shape)
            else:
                w = np.zeros(shape)
            parts.append(w.ravel())
        return cls(arch, np.concatenate(parts))

    def params(self, theta=None):
        theta = self.theta if theta is None else theta
        out, k = {}, 0
        for name, shape in self.arch.shapes():
            size = int(np.prod(shape))
            out[name] = theta[k:k + size].reshape(shape)
            k += size
        return out

    def with_theta(self, theta):
        return PayoffModel(self.arch, theta)

    def __call__(self, w, t):
        return forward(self, w, t)


def _check_shape(arch, n, c):
    if c != arch.c:
        raise DomainError(f"model built for c={arch.c}, got c={c}")
    if arch.nodes and n != arch.nodes:
        raise DomainError(f"model built for n={arch.nodes}, got n={n}")


def _check(x, layer):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite activation in layer {layer}", where=layer)


def _forward_tape(model, w, t):
    arch = model.arch
    P = model.params()
    w = np.asarray(w, dtype=float)
    squeeze = w.ndim == 2
    if squeeze:
        w = w[None]
    B, n, c = w.shape
    _check_shape(arch, n, c)
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise DomainError("time must be finite")
    pw = w - 1.0 / c
    s = pw @ P["E"].T if arch.variant == "embedded" else pw
    d = arch.state_dim
    A1 = P["A1"]
    z1 = s @ A1[:d]
    if arch.context:
        ctx = s.mean(axis=1, keepdims=True)
        z1 = z1 + ctx @ A1[d + TIME_DIM:]
    temb = time_embedding(t)
    tz = temb @ A1[d:d + TIME_DIM] + P["b1"]
    z1 = z1 + (tz[:, None, :] if tz.shape[0] == B else tz[0])
    if arch.nodes:
        z1 = z1 + P["N1"]
    _check(z1, 1)
    h1 = _softplus(z1)
    z2 = h1 @ P["A2"] + P["b2"]
    _check(z2, 2)
    h2 = _softplus(z2)
    o = h2 @ P["A3"] + P["b3"]
    F = o @ P["E"] if arch.variant == "embedded" else o
    _check(F, 3)
    tape = dict(P=P, pw=pw, s=s, temb=temb, z1=z1, h1=h1, z2=z2, h2=h2, o=o)
    return (F[0] if squeeze else F), tape


def forward(model, w, t):
    """Payoff ``F(W, t)`` for ``W`` of shape ``(n, c)`` or ``(B, n, c)``.

    ``t`` is a scalar or a length-``B`` vector. Inference-only path: no tape
    is kept and activations are computed in place.
    """
    arch = model.arch
    P = model.params()
    w = np.asarray(w, dtype=float)
    squeeze = w.ndim == 2
    if squeeze:
        w = w[None]
    B, n, c = w.shape
    _check_shape(arch, n, c)
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise DomainError("time must be finite")
    d, H = arch.state_dim, arch.hidden
    A1 = P["A1"]
    pw = w - 1.0 / c
    s = pw @ P["E"].T if arch.variant == "embedded" else pw
    bias = time_embedding(t) @ A1[d:d + TIME_DIM] + P["b1"]
    if arch.context:
        bias = bias[:, None, :] + s.mean(axis=1, keepdims=True) @ A1[d + TIME_DIM:]
    elif bias.shape[0] == B:
        bias = bias[:, None, :]
    else:
        bias = bias[0]
    z = (s.reshape(B * n, d) @ A1[:d]).reshape(B, n, H)
    z += bias
    if arch.nodes:
        z += P["N1"]
    h = _softplus_(z).reshape(B * n, H)
    z = h @ P["A2"]
    z += P["b2"]
    h = _softplus_(z)
    o = h @ P["A3"]
    o += P["b3"]
    F = (o @ P["E"] if arch.variant == "embedded" else o).reshape(B, n, c)
    if not np.all(np.isfinite(F)):
        _forward_tape(model, w, t)  # raises with the first offending layer
        _check(F, 3)
    return F[0] if squeeze else F


def _softplus_(z):
    """In-place softplus; ``z`` is overwritten and returned."""
    tmp = np.abs(z)
    np.negative(tmp, out=tmp)
    np.exp(tmp, out=tmp)
    np.log1p(tmp, out=tmp)
    np.maximum(z, 0.0, out=z)
    z += tmp
    return z


def _backward(model, tape, dF):
    arch = model.arch
    P = tape["P"]
    d = arch.state_dim
    grads = {}
    if arch.variant == "embedded":
        grads["E"] = np.einsum("bnl,bnc->lc", tape["o"], dF)
        do = dF @ P["E"].T
    else:
        do = dF
    h2, h1 = tape["h2"], tape["h1"]
    grads["A3"] = np.einsum("bnh,bnd->hd", h2, do)
    grads["b3"] = do.sum(axis=(0, 1))
    dz2 = (do @ P["A3"].T) * _sigmoid(tape["z2"])
    grads["A2"] = np.einsum("bnh,bnk->hk", h1, dz2)
    grads["b2"] = dz2.sum(axis=(0, 1))
    dz1 = (dz2 @ P["A2"].T) * _sigmoid(tape["z1"])
    s = tape["s"]
    dA1 = np.zeros_like(P["A1"])
    dA1[:d] = np.einsum("bnd,bnh->dh", s, dz1)
    dz1_sum = dz1.sum(axis=1)
    dA1[d:d + TIME_DIM] = tape["temb"].T @ dz1_sum if tape["temb"].shape[0] == dz1.shape[0] \
        else np.outer(tape["temb"][0], dz1_sum.sum(axis=0))
    if arch.context:
        ctx = s.mean(axis=1)
        dA1[d + TIME_DIM:] = ctx.T @ dz1_sum
    grads["A1"] = dA1
    grads["b1"] = dz1_sum.sum(axis=0)
    if arch.nodes:
        grads["N1"] = dz1.sum(axis=0)
    if arch.variant == "embedded":
        A1 = P["A1"]
        ds = dz1 @ A1[:d].T
        if arch.context:
            n = s.shape[1]
            ds = ds + (dz1_sum @ A1[d + TIME_DIM:].T)[:, None, :] / n
        grads["E"] = grads["E"] + np.einsum("bnl,bnc->lc", ds, tape["pw"])
    return np.concatenate([grads[name].ravel() for name, _ in arch.shapes()])


def fr_residual_loss(w, d):
    """Per-example ``||R_W d||_W^2 = sum_ij W_ij (d_ij - <W_i, d_i>)^2``.

    Returns the losses and the derivative of their sum with respect to ``d``.
    """
    dbar = np.sum(w * d, axis=-1, keepdims=True)
    centred = d - dbar
    per = np.sum(w * centred**2, axis=(-2, -1))
    return per, 2.0 * w * centred


def loss_and_grad_arrays(model, w, t, v_target):
    """Mean flow-matching loss over a batch and its gradient in ``theta``.

    ``w``, ``v_target``: ``(B, n, c)``; ``t``: ``(B,)``.
    """
    w = np.asarray(w, dtype=float)
    B = w.shape[0]
    if B == 0:
        raise DomainError("empty batch")
    F, tape = _forward_tape(model, w, t)
    per, dd = fr_residual_loss(w, np.asarray(v_target, dtype=float) - F)
    bad = np.flatnonzero(~np.isfinite(per))
    if bad.size:
        raise NonFiniteError(f"non-finite loss at batch index {bad[0]}", where=int(bad[0]))
    loss = float(per.mean())
    grad = _backward(model, tape, -dd / B)
    return loss, grad


def loss_and_grad(model, batch):
    """Batch given as a list of ``(w, t, v_target)`` triples."""
    batch = list(batch)
    if not batch:
        raise DomainError("empty batch")
    w = np.stack([np.asarray(b[0], dtype=float) for b in batch])
    t = np.array([float(b[1]) for b in batch])
    v = np.stack([np.asarray(b[2], dtype=float) for b in batch])
    return loss_and_grad_arrays(model, w, t, v)


class Adam:
    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step_count = 0

    def step(self, theta, grad):
        self.step_count += 1
        k = self.step_count
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mhat = self.m / (1 - self.beta1**k)
        vhat = self.v / (1 - self.beta2**k)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step_count": self.step_count}


def adam_step(model, grad, opt):
    return model.with_theta(opt.step(model.theta, grad))


def sgd_step(model, grad, lr):
    return model.with_theta(model.theta - lr * np.asarray(grad))


def checkpoint_bytes(model, optimizer=None, meta=None):
    """Serialise ``model`` (and optionally the Adam state) in the AFGP format.

    Layout: ``b"AFGP"``, u32 version, u32 descriptor length, UTF-8 JSON
    descriptor, then little-endian float64 arrays: ``theta`` followed by
    any arrays listed under ``"trailing"`` in the descriptor.
    """
    desc = {"architecture": model.arch.to_json(), "num_params": model.theta.size,
            "trailing": [], "meta": meta or {}}
    arrays = [model.theta]
    if optimizer is not None:
        desc["adam"] = optimizer.state()
        desc["trailing"] = ["adam_m", "adam_v"]
        arrays += [optimizer.m, optimizer.v]
    text = json.dumps(desc, sort_keys=True).encode("utf-8")
    head = _CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(text)) + text
    return head + b"".join(a.astype("<f8").tobytes() for a in arrays)


def checkpoint_from_bytes(data):
    """Inverse of :func:`checkpoint_bytes`; returns ``(model, optimizer, meta)``."""
    if len(data) < 12 or data[:4] != _CKPT_MAGIC:
        raise DomainError("not an AFGP checkpoint")
    version, length = struct.unpack("<II", data[4:12])
    if version != _CKPT_VERSION:
        raise DomainError(f"unsupported checkpoint version {version}")
    desc = json.loads(data[12:12 + length].decode("utf-8"))
    flat = np.frombuffer(data[12 + length:], dtype="<f8").astype(float)
    P = desc["num_params"]
    if flat.size != P * (1 + len(desc["trailing"])):
        raise DomainError("checkpoint payload size does not match descriptor")
    model = PayoffModel(Architecture.from_json(desc["architecture"]), flat[:P])
    opt = None
    if "adam" in desc:
        a = desc["adam"]
        opt = Adam(P, a["lr"], a["beta1"], a["beta2"], a["eps"])
        opt.step_count = a["step_count"]
        opt.m, opt.v = flat[P:2 * P].copy(), flat[2 * P:3 * P].copy()
    return model, opt, desc.get("meta", {})


def save_checkpoint(path, model, optimizer=None, meta=None):
    from .io import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(model, optimizer, meta))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
