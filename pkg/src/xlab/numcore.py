"""Dense float64 numerical kernel: softmax, cross-entropy, momentum SGD, seeded streams.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Everything here is a pure function of its inputs except ``RngStream``,
which owns a counter-based Philox generator.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericInputError, ShapeError

__all__ = [
    "RngStream",
    "SgdHyper",
    "as_matrix",
    "derive_seed",
    "cross_entropy_batch",
    "cross_entropy_grad",
    "lr_at_epoch",
    "sgd_step",
    "softmax",
    "softmax_rows",
]


def as_matrix(values, name="matrix") -> np.ndarray:
    """Coerce ``values`` to a finite, C-ordered float64 2-D array."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericInputError(f"{name} contains non-finite entries")
    return arr


def _check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise NumericInputError(f"{name} contains non-finite entries")


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a single logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ShapeError("softmax expects a non-empty 1-D vector")
    _check_finite(z, "logits")
    e = np.exp(z - z.max())
    return e / math.fsum(e)


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax of an ``(n, K)`` logit matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] == 0:
        raise ShapeError("softmax_rows expects an (n, K) matrix with K >= 1")
    _check_finite(z, "logits")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_grad(logits, label: int) -> tuple[float, np.ndarray]:
    """Loss ``-log softmax(logits)[label]`` and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ShapeError("cross_entropy_grad expects a non-empty 1-D vector")
    if not 0 <= label < z.size:
        raise IndexError(f"label {label} out of range for {z.size} classes")
    _check_finite(z, "logits")
    shifted = z - z.max()
    log_norm = math.log(math.fsum(np.exp(shifted)))
    loss = log_norm - shifted[label]
    grad = np.exp(shifted - log_norm)
    grad[label] -= 1.0
    return float(loss), grad


def cross_entropy_batch(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and the gradient of that mean w.r.t. logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeError(f"logits {z.shape} and labels {y.shape} disagree")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise IndexError("label out of range")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, y]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, y] -= 1.0
    grad /= n
    return loss, grad


@dataclass(frozen=True)
class SgdHyper:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 10.0
    decay_every: int = 30

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not self.decay_factor > 1:
            raise ConfigError("decay_factor must exceed 1")
        if int(self.decay_every) != self.decay_every or self.decay_every < 1:
            raise ConfigError("decay_every must be an integer >= 1")

    def replace(self, **changes) -> "SgdHyper":
        fields = {**self.__dict__, **changes}
        return SgdHyper(**fields)


def lr_at_epoch(hyper: SgdHyper, epoch: int) -> float:
    """Step-decayed learning rate for a 0-based epoch index."""
    if epoch < 0:
        raise ConfigError("epoch must be nonnegative")
    return hyper.learning_rate / hyper.decay_factor ** (epoch // hyper.decay_every)


def sgd_step(params, grads, velocity, hyper: SgdHyper, lr: float | None = None):
    """One momentum-SGD update with L2 weight decay folded into the gradient.

    ``v <- momentum * v + (grad + weight_decay * param)``;
    ``param <- param - lr * v``. Inputs are not modified; returns
    ``(new_params, new_velocity)``. ``lr`` overrides ``hyper.learning_rate``
    so callers can apply a schedule.
    """
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    v = np.asarray(velocity, dtype=np.float64)
    if not (p.shape == g.shape == v.shape):
        raise ShapeError(f"shape mismatch: params {p.shape}, grads {g.shape}, velocity {v.shape}")
    _check_finite(g, "grads")
    step = hyper.learning_rate if lr is None else lr
    new_v = hyper.momentum * v + (g + hyper.weight_decay * p)
    new_p = p - step * new_v
    _check_finite(new_p, "params")
    return new_p, new_v


def _purpose_key(purpose) -> int:
    if isinstance(purpose, (int, np.integer)):
        if purpose < 0:
            raise ConfigError("stream keys must be nonnegative")
        return int(purpose)
    return zlib.crc32(str(purpose).encode("utf-8"))


def derive_seed(seed: int, *purpose) -> int:
    """Deterministic 64-bit seed for a named sub-purpose of ``seed``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_purpose_key(p) for p in purpose))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


class RngStream:
    """Seeded Philox stream; ``child(purpose)`` derives an independent substream.

    The same ``(seed, path)`` always yields the same draws regardless of how
    many other streams were created or consumed before it.
    """

    def __init__(self, seed: int, path: tuple = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self.path = tuple(path)
        seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(_purpose_key(p) for p in self.path))
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *purpose) -> "RngStream":
        return RngStream(self.seed, self.path + purpose)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path!r})"

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def random(self, size=None):
        return self._gen.random(size)
