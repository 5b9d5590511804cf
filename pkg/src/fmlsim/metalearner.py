"""Model-agnostic meta-training of a small MLP, in plain numpy.

The network is fixed: input -> 80 -> 60 -> num_classes, ELU hidden
activations, mean softmax cross-entropy loss.  The meta-gradient of the
one-step-adapted loss F(theta) = f(theta - beta*grad f(theta, D), D') is

    (I - beta * H(theta, D'')) @ grad f(theta - beta*grad f(theta, D), D')

with three independent batches.  The Hessian-vector product is computed
exactly by a forward-over-reverse sweep, or optionally by symmetric
finite differences of the gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCoalition, ShapeMismatch

HIDDEN1 = 80
HIDDEN2 = 60


@dataclass
class MetaHyper:
    """Learning-rate and batching knobs for meta-training."""

    alpha: float = 1e-3  # outer (meta) step size
    beta: float = 1e-2   # inner (adaptation) step size
    tau: int = 10        # local meta-steps per round
    batch_size: int = 40
    exact_hvp: bool = True


@dataclass
class RoundContribution:
    """Per-round training summary: accumulated u statistic, step norms."""

    u: float
    grad_norms: list = field(default_factory=list)


class ModelParams:
    """Weights of the 3-layer MLP as a flat list [W1, b1, W2, b2, W3, b3]."""

    def __init__(self, arrays):
        self.arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    @property
    def input_dim(self) -> int:
        return self.arrays[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.arrays[4].shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams([a.copy() for a in self.arrays])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def from_flat(self, vec: np.ndarray) -> "ModelParams":
        out, off = [], 0
        for a in self.arrays:
            out.append(vec[off : off + a.size].reshape(a.shape))
            off += a.size
        if off != vec.size:
            raise ShapeMismatch(f"flat vector has {vec.size} entries, need {off}")
        return ModelParams(out)

    def save(self, path: str) -> None:
        """Write a one-line JSON shape header plus raw little-endian float64."""
        header = {"shapes": [list(a.shape) for a in self.arrays]}
        with open(path, "wb") as f:
            f.write((json.dumps(header) + "\n").encode("utf-8"))
            f.write(self.flat().astype("<f8").tobytes())

    @staticmethod
    def load(path: str) -> "ModelParams":
        with open(path, "rb") as f:
            header = json.loads(f.readline().decode("utf-8"))
            raw = np.frombuffer(f.read(), dtype="<f8")
        arrays, off = [], 0
        for shape in header["shapes"]:
            size = int(np.prod(shape))
            arrays.append(raw[off : off + size].reshape(shape).copy())
            off += size
        if off != raw.size:
            raise ShapeMismatch("payload size does not match shape header")
        return ModelParams(arrays)


def init_params(input_dim: int, num_classes: int, rng: np.random.Generator) -> ModelParams:
    """Xavier-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    dims = [(input_dim, HIDDEN1), (HIDDEN1, HIDDEN2), (HIDDEN2, num_classes)]
    arrays = []
    for fan_in, fan_out in dims:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        arrays.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        arrays.append(np.zeros(fan_out))
    return ModelParams(arrays)


def _elu(z):
    return np.where(z > 0, z, np.expm1(z))


def _elu_d1(z):
    return np.where(z > 0, 1.0, np.exp(z))


def _elu_d2(z):
    return np.where(z > 0, 0.0, np.exp(z))


def _forward_cache(params: ModelParams, X: np.ndarray):
    W1, b1, W2, b2, W3, b3 = params.arrays
    if X.shape[1] != W1.shape[0]:
        raise ShapeMismatch(f"features have dim {X.shape[1]}, model expects {W1.shape[0]}")
    z1 = X @ W1 + b1
    a1 = _elu(z1)
    z2 = a1 @ W2 + b2
    a2 = _elu(z2)
    z3 = a2 @ W3 + b3
    return z1, a1, z2, a2, z3


def _softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ModelParams, X: np.ndarray, y: np.ndarray):
    """Return (logits, mean cross-entropy loss)."""
    *_, z3 = _forward_cache(params, X)
    shifted = z3 - z3.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + z3.max(axis=1)
    loss = float(np.mean(logsumexp - z3[np.arange(len(y)), y]))
    return z3, loss


def accuracy(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    logits, _ = forward(params, X, y)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def grad(params: ModelParams, X: np.ndarray, y: np.ndarray):
    """Backprop; returns (list-of-arrays gradient, loss)."""
    W1, b1, W2, b2, W3, b3 = params.arrays
    n = len(y)
    z1, a1, z2, a2, z3 = _forward_cache(params, X)
    p = _softmax(z3)
    shifted = z3 - z3.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + z3.max(axis=1)
    loss = float(np.mean(logsumexp - z3[np.arange(n), y]))

    dz3 = p.copy()
    dz3[np.arange(n), y] -= 1.0
    dz3 /= n
    dW3 = a2.T @ dz3
    db3 = dz3.sum(axis=0)
    da2 = dz3 @ W3.T
    dz2 = da2 * _elu_d1(z2)
    dW2 = a1.T @ dz2
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ W2.T
    dz1 = da1 * _elu_d1(z1)
    dW1 = X.T @ dz1
    db1 = dz1.sum(axis=0)
    return [dW1, db1, dW2, db2, dW3, db3], loss


def hvp(params: ModelParams, X: np.ndarray, y: np.ndarray, v) -> list:
    """Exact Hessian-vector product via the forward-over-reverse recurrence.

    Runs the tangent (R) pass through the forward computation, then pushes
    the tangents through the backward pass; the R-derivatives of the
    gradient are exactly H @ v.
    """
    W1, b1, W2, b2, W3, b3 = params.arrays
    RW1, Rb1, RW2, Rb2, RW3, Rb3 = v
    n = len(y)
    z1, a1, z2, a2, z3 = _forward_cache(params, X)

    Rz1 = X @ RW1 + Rb1
    Ra1 = _elu_d1(z1) * Rz1
    Rz2 = a1 @ RW2 + Ra1 @ W2 + Rb2
    Ra2 = _elu_d1(z2) * Rz2
    Rz3 = a2 @ RW3 + Ra2 @ W3 + Rb3

    p = _softmax(z3)
    dz3 = p.copy()
    dz3[np.arange(n), y] -= 1.0
    dz3 /= n
    Rp = p * (Rz3 - (p * Rz3).sum(axis=1, keepdims=True))
    Rdz3 = Rp / n

    RdW3 = Ra2.T @ dz3 + a2.T @ Rdz3
    Rdb3 = Rdz3.sum(axis=0)

    da2 = dz3 @ W3.T
    Rda2 = Rdz3 @ W3.T + dz3 @ RW3.T
    dz2 = da2 * _elu_d1(z2)
    Rdz2 = Rda2 * _elu_d1(z2) + da2 * _elu_d2(z2) * Rz2
    RdW2 = Ra1.T @ dz2 + a1.T @ Rdz2
    Rdb2 = Rdz2.sum(axis=0)

    da1 = dz2 @ W2.T
    Rda1 = Rdz2 @ W2.T + dz2 @ RW2.T
    dz1 = da1 * _elu_d1(z1)
    Rdz1 = Rda1 * _elu_d1(z1) + da1 * _elu_d2(z1) * Rz1
    RdW1 = X.T @ Rdz1
    Rdb1 = Rdz1.sum(axis=0)
    return [RdW1, Rdb1, RdW2, Rdb2, RdW3, Rdb3]


def hvp_fd(params: ModelParams, X: np.ndarray, y: np.ndarray, v) -> list:
    """Symmetric finite-difference Hessian-vector product (cross-check path)."""
    vnorm = float(np.sqrt(sum(float((a * a).sum()) for a in v)))
    eps = 1e-4 * (1.0 + vnorm)
    plus = ModelParams([a + eps * d for a, d in zip(params.arrays, v)])
    minus = ModelParams([a - eps * d for a, d in zip(params.arrays, v)])
    gp, _ = grad(plus, X, y)
    gm, _ = grad(minus, X, y)
    return [(a - b) / (2.0 * eps) for a, b in zip(gp, gm)]


def meta_gradient_from_ops(theta: np.ndarray, beta: float, grad_a, grad_b, hvp_c) -> np.ndarray:
    """The bare meta-gradient rule on a flat vector with user-supplied oracles.

    grad_a/grad_b map theta -> gradient on the first/second batch; hvp_c
    maps (theta, v) -> Hessian-vector product on the third.  Returns
    (I - beta*H(theta)) @ grad_b(theta - beta*grad_a(theta)).
    """
    g2 = grad_b(theta - beta * grad_a(theta))
    return g2 - beta * hvp_c(theta, g2)


def meta_gradient(
    params: ModelParams,
    hyper: MetaHyper,
    batch_d,
    batch_d1,
    batch_d2,
) -> list:
    """One stochastic meta-gradient from three (X, y) batches.

    g1 = grad f(theta, D); g2 = grad f(theta - beta*g1, D');
    returns g2 - beta * H(theta, D'') @ g2.
    """
    X, y = batch_d
    g1, _ = grad(params, X, y)
    adapted = ModelParams([a - hyper.beta * g for a, g in zip(params.arrays, g1)])
    X1, y1 = batch_d1
    g2, _ = grad(adapted, X1, y1)
    X2, y2 = batch_d2
    hv = hvp(params, X2, y2, g2) if hyper.exact_hvp else hvp_fd(params, X2, y2, g2)
    return [g - hyper.beta * h for g, h in zip(g2, hv)]


def _draw_batches(rng: np.random.Generator, n: int, batch: int):
    """Three batches per step: disjoint when the shard allows, else with replacement."""
    if n >= 3 * batch:
        idx = rng.choice(n, size=3 * batch, replace=False)
        return idx[:batch], idx[batch : 2 * batch], idx[2 * batch :]
    return tuple(rng.choice(n, size=batch, replace=True) for _ in range(3))


def local_update(
    params: ModelParams,
    hyper: MetaHyper,
    train,
    rng: np.random.Generator,
    tau: int | None = None,
):
    """Run tau meta-steps on one shard; returns (new params, RoundContribution).

    The u statistic accumulates ||g||^2 - 2*(1 + 1/sqrt(batch))*||g|| per
    step and is clamped to [-1, 1] at the end.  tau=0 returns the
    parameters unchanged with u = 0.
    """
    steps = hyper.tau if tau is None else tau
    X, y = train.features, train.labels
    current = params.copy()
    u = 0.0
    norms = []
    penalty = 2.0 * (1.0 + 1.0 / np.sqrt(hyper.batch_size))
    for _ in range(steps):
        i0, i1, i2 = _draw_batches(rng, len(y), hyper.batch_size)
        g = meta_gradient(
            current, hyper, (X[i0], y[i0]), (X[i1], y[i1]), (X[i2], y[i2])
        )
        gnorm = float(np.sqrt(sum(float((a * a).sum()) for a in g)))
        norms.append(gnorm)
        u += gnorm * gnorm - penalty * gnorm
        current = ModelParams([a - hyper.alpha * d for a, d in zip(current.arrays, g)])
    return current, RoundContribution(u=float(np.clip(u, -1.0, 1.0)), grad_norms=norms)


def aggregate(models: list) -> ModelParams:
    """Unweighted mean of member models."""
    if not models:
        raise EmptyCoalition("no models to aggregate")
    out = []
    for k in range(len(models[0].arrays)):
        out.append(np.mean([m.arrays[k] for m in models], axis=0))
    return ModelParams(out)


def personalize(params: ModelParams, hyper: MetaHyper, support, steps: int = 1) -> ModelParams:
    """Adapt a meta-model with plain gradient steps (size beta) on support data."""
    X, y = support
    current = params
    for _ in range(steps):
        g, _ = grad(current, X, y)
        current = ModelParams([a - hyper.beta * d for a, d in zip(current.arrays, g)])
    return current


def embed(params: ModelParams, probe_X: np.ndarray) -> np.ndarray:
    """Mean post-activation of the 60-unit second hidden layer over a probe batch."""
    W1, b1, W2, b2, *_ = params.arrays
    if probe_X.shape[1] != W1.shape[0]:
        raise ShapeMismatch(f"probe dim {probe_X.shape[1]}, model expects {W1.shape[0]}")
    a1 = _elu(probe_X @ W1 + b1)
    a2 = _elu(a1 @ W2 + b2)
    return a2.mean(axis=0)
