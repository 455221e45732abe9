"""Small numeric kernel: vector algebra, seeded random streams and DFTs.

Everything works in float64. Random streams use numpy's Philox4x64
counter-based generator so a seed reproduces the same draws on every
platform.
"""

import numpy as np

from .errors import NormalizationError, ShapeError


def _as_vector(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    return v


def l2_normalize(v):
    """Scale ``v`` to unit Euclidean norm."""
    v = _as_vector(v)
    n = np.linalg.norm(v)
    if not n > 0.0:
        raise NormalizationError("cannot normalize a zero-norm vector")
    return v / n


def cosine_similarity(a, b):
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if not (na > 0.0 and nb > 0.0):
        raise NormalizationError("cosine similarity of a zero vector")
    s = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, s))


def dft(signal):
    """Forward DFT of a real or complex signal of any length >= 1."""
    x = np.asarray(signal)
    if x.ndim != 1 or x.size == 0:
        raise ShapeError("dft needs a non-empty 1-D signal")
    return np.fft.fft(x.astype(np.complex128))


def idft(spectrum):
    """Inverse of :func:`dft`; returns the real part."""
    X = np.asarray(spectrum, dtype=np.complex128)
    if X.ndim != 1 or X.size == 0:
        raise ShapeError("idft needs a non-empty 1-D spectrum")
    return np.fft.ifft(X).real


def naive_dft(signal):
    """Direct O(n^2) DFT, kept as a cross-check for :func:`dft`."""
    x = np.asarray(signal, dtype=np.complex128)
    n = x.size
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


def rng(seed):
    """Deterministic random stream for ``seed``.

    The returned ``numpy.random.Generator`` offers ``uniform``, ``normal``,
    ``permutation`` and friends. One stream must not be shared across
    threads.
    """
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn(stream, n=1):
    """Derive ``n`` independent child streams from ``stream``."""
    seeds = stream.integers(0, 2**63 - 1, size=n)
    return [rng(int(s)) for s in seeds]
