"""Seeded sampling and the small dense linear-algebra surface.

Every random draw in the package goes through an :class:`RngStream`. A stream is
a value ``(seed, stream_id)`` mapped onto a Philox counter-based generator, so a
stream always reproduces the same sequence no matter which worker or thread
consumes it. Children are derived with :meth:`RngStream.fork`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream_id <= _MASK64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = self.seed | (self.stream_id << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def fork(self, *path: int) -> "RngStream":
        """Disjoint child stream addressed by an integer path."""
        ss = np.random.SeedSequence([self.seed, self.stream_id, len(path), *path])
        child_id = int(ss.generate_state(1, dtype=np.uint64)[0])
        return RngStream(self.seed, child_id)


def _check_dims(*dims: int) -> None:
    for n in dims:
        if int(n) < 1:
            raise ValueError(f"dimensions must be positive, got {dims}")


def gaussian_mat(rng: RngStream, rows: int, cols: int, variance: float) -> np.ndarray:
    """``rows x cols`` matrix of i.i.d. N(0, variance) entries."""
    _check_dims(rows, cols)
    if not variance > 0:
        raise ValueError("variance must be positive")
    return rng.generator().standard_normal((rows, cols)) * np.sqrt(variance)


def gaussian_vec(rng: RngStream, n: int, variance: float = 1.0) -> np.ndarray:
    return gaussian_mat(rng, 1, n, variance)[0]


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def sample_sphere(rng: RngStream, d: int, n: int | None = None) -> np.ndarray:
    """Uniform sample(s) on the unit sphere in R^d.

    Returns a single vector when ``n`` is None, else an ``(n, d)`` array.
    """
    _check_dims(d)
    g = rng.generator()
    shape = (1 if n is None else n, d)
    out = g.standard_normal(shape)
    norms = np.linalg.norm(out, axis=1)
    # a Gaussian draw of exactly zero is a measure-zero event; redraw to be safe
    while np.any(norms == 0):
        bad = norms == 0
        out[bad] = g.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(out, axis=1)
    out /= norms[:, None]
    return out[0] if n is None else out


def sample_sphere_radius(rng: RngStream, d: int, radius: float, n: int | None = None) -> np.ndarray:
    if not radius > 0:
        raise ValueError("radius must be positive")
    return radius * sample_sphere(rng, d, n)


def fro_norm(m: np.ndarray) -> float:
    v = np.ravel(m)
    return float(np.sqrt(v @ v))


def spectral_norm_est(m: np.ndarray, iters: int = 200) -> float:
    """Top singular value by power iteration on ``m^T m``.

    The start vector is the normalized all-ones vector plus a fixed ramp, so the
    estimate is deterministic and only fails for inputs whose top right singular
    vector is exactly orthogonal to it.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    m = np.asarray(m, dtype=float)
    n = m.shape[1]
    v = np.ones(n) + np.linspace(0.0, 1.0, n)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = m @ v
        w = m.T @ u
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        sigma = np.sqrt(nw)
    return float(sigma)
