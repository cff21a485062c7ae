"""Dense numeric kernel: affine maps, stable softmax, cross-entropy, SGD with
global-norm gradient clipping, and a fully specified deterministic RNG.

Everything operates on float64 numpy arrays: vectors are 1-d, matrices 2-d
row-major. The Rng below is the single entropy source for the whole package.
It is a counter-based splitmix64 stream rather than any standard library
generator, so the exact draw sequence is pinned by this file and reproduces
across platforms and interpreter versions.
"""

from __future__ import annotations

import hashlib
import math
from typing import Mapping, MutableSequence

import numpy as np

from .errors import ConfigError, ShapeError

# Additive floor inside log() so fused or hand-built distributions with
# exact zeros stay finite.
LOG_EPS = 1e-12

# Scale of every freshly initialized weight in the package.
INIT_SCALE = 0.08

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, elementwise on uint64."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based splitmix64 stream.

    Draw number k (1-based) is ``mix64((seed + k * 0x9E3779B97F4A7C15) mod 2^64)``
    where ``mix64`` is

        z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
        z ^= z >> 27;  z *= 0x94D049BB133111EB
        z ^= z >> 31

    Integer and uniform draws are bit-exact on any platform. Gaussian draws
    are Box-Muller over consecutive uniform pairs and therefore go through
    libm log/cos; they are stable in practice but pinned to the last ulp
    only within one platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * _GAMMA)

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def random(self) -> float:
        """Uniform double in [0, 1) built from the top 53 bits of one draw."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float, shape=None):
        """Uniform scalar (shape=None) or float64 array over [lo, hi)."""
        if shape is None:
            return lo + (hi - lo) * self.random()
        n = int(np.prod(shape))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + (hi - lo) * u).reshape(shape)

    def normal(self, shape=None, mu: float = 0.0, sigma: float = 1.0):
        """Gaussian draws via Box-Muller (cosine branch, two uniforms each)."""
        n = 1 if shape is None else int(np.prod(shape))
        u1 = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u2 = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        out = mu + sigma * z
        return float(out[0]) if shape is None else out.reshape(shape)

    def randint(self, n: int) -> int:
        """Integer in [0, n). Modulo reduction; bias is O(n / 2^64)."""
        if n <= 0:
            raise ConfigError(f"randint needs n >= 1, got {n}")
        return self.next_u64() % n

    def shuffle(self, items: MutableSequence) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def init_weights(self, shape) -> np.ndarray:
        """Fresh parameter tensor, uniform over [-INIT_SCALE, INIT_SCALE)."""
        return self.uniform(-INIT_SCALE, INIT_SCALE, shape)

    def child(self, tag: str) -> "Rng":
        """Derived independent stream keyed by (seed, tag).

        Depends only on the parent seed, never on how many draws the parent
        has consumed, so training phases can be replayed in isolation.
        """
        digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
        h = int.from_bytes(digest, "little")
        with np.errstate(over="ignore"):
            derived = int(_mix64(np.uint64((self.seed ^ h) & _MASK64)))
        return Rng(derived)


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = W x + b for an (m, n) matrix, length-n vector and length-m bias."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise ShapeError(
            f"affine expects matrix, vector, vector; got {W.shape}, {x.shape}, {b.shape}"
        )
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ShapeError(
            f"affine shape mismatch: W is {W.shape[0]}x{W.shape[1]}, "
            f"x has length {x.shape[0]}, b has length {b.shape[0]}"
        )
    return W @ x + b


def softmax(logits: np.ndarray) -> np.ndarray:
    """Probability vector exp(z_i - max z) / sum, stable for any finite z."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ShapeError(f"softmax expects a nonempty vector, got shape {z.shape}")
    e = np.exp(z - z.max())
    return e / e.sum()


def cross_entropy(dist: np.ndarray, target_id: int) -> float:
    """-ln(dist[target_id] + LOG_EPS); the floor guards exact zeros."""
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 1:
        raise ShapeError(f"cross_entropy expects a vector, got shape {d.shape}")
    if not 0 <= target_id < d.shape[0]:
        raise IndexError(
            f"target id {target_id} out of range for distribution of length {d.shape[0]}"
        )
    return -math.log(float(d[target_id]) + LOG_EPS)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """L2 norm of all gradient tensors flattened together."""
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    clip_norm: float,
) -> Mapping[str, np.ndarray]:
    """In-place p <- p - lr * g after global-norm clipping.

    If the joint L2 norm of all gradients exceeds clip_norm, every gradient
    is scaled by clip_norm / norm first. lr = 0 leaves params bitwise
    untouched.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    if clip_norm <= 0:
        raise ConfigError(f"clip_norm must be > 0, got {clip_norm}")
    if set(params.keys()) != set(grads.keys()):
        missing = set(params) ^ set(grads)
        raise ShapeError(f"params/grads key mismatch: {sorted(missing)}")
    for name, p in params.items():
        if p.shape != grads[name].shape:
            raise ShapeError(
                f"gradient shape {grads[name].shape} does not match "
                f"parameter '{name}' of shape {p.shape}"
            )
    norm = global_norm(grads)
    scale = clip_norm / norm if norm > clip_norm else 1.0
    step = lr * scale
    if step != 0.0:
        for name, p in params.items():
            p -= step * grads[name]
    return params
