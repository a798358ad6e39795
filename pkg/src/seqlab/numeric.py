"""Dense float64 arithmetic, nonlinearities and a portable seeded generator.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64
(2-d row-major and 1-d respectively). The functions here check shapes and
raise :class:`~seqlab.errors.ContractError` on mismatch; the batched model
code calls numpy directly in its inner loops and relies on these only for
the per-step reference operations.
"""

import numpy as np

from .errors import ContractError

__all__ = [
    "Rng",
    "matvec",
    "sigmoid",
    "tanh_vec",
    "softmax",
    "hadamard",
    "init_uniform",
]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class Rng:
    """SplitMix64 generator.

    Output ``k`` (1-based) for seed ``s`` is ``mix(s + k * 0x9E3779B97F4A7C15)``
    where ``mix`` is the xor-shift/multiply finalizer::

        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        z =  z ^ (z >> 31)

    all modulo 2**64. Because each output is a pure function of a counter,
    bulk draws vectorize in numpy and the stream is identical on every
    platform. The state is the 64-bit counter.
    """

    algorithm = "splitmix64"

    def __init__(self, seed=0):
        self.state = int(seed) & _MASK64

    def spawn(self, stream):
        """Independent child generator, a deterministic function of (state, stream)."""
        child_seed = _mix_scalar((self.state + (int(stream) + 1) * _MIX1) & _MASK64)
        return Rng(child_seed)

    def next_u64(self, n=None):
        """Next 64-bit output, or an array of ``n`` of them."""
        if n is None:
            return int(self.next_u64(1)[0])
        n = int(n)
        if n < 0:
            raise ContractError(f"cannot draw {n} values")
        with np.errstate(over="ignore"):
            k = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + k * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return z

    def uniform(self, size=None):
        """Floats in [0, 1) with 53 random bits each."""
        if size is None:
            return float(self.uniform(1)[0])
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        if n < 2:
            return perm
        draws = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def normal(self, size):
        """Standard normal draws (Box-Muller on pairs of uniforms)."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(2, m)
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        theta = 2.0 * np.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)


def _mix_scalar(z):
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def matvec(m, v):
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ContractError(f"matvec shape mismatch: matrix {m.shape} x vector {v.shape}")
    return m @ v


def sigmoid(v):
    """Logistic function, evaluated without overflow for large |x|."""
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh_vec(v):
    return np.tanh(np.asarray(v, dtype=np.float64))


def softmax(v):
    """Softmax over the last axis, max-shifted for stability."""
    v = np.asarray(v, dtype=np.float64)
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def hadamard(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"hadamard length mismatch: {a.shape} vs {b.shape}")
    return a * b


def init_uniform(rng, rows, cols, scale):
    """Matrix with i.i.d. entries uniform in [-scale, scale]."""
    if not scale > 0:
        raise ContractError(f"init scale must be positive, got {scale}")
    u = rng.uniform((rows, cols))
    return (2.0 * u - 1.0) * scale
