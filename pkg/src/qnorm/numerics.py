"""Deterministic numerical substrate.

Matrices are plain 2-D ``float64`` numpy arrays (rows = batch samples,
columns = neurons). All reductions that feed into reported numbers use a
fixed summation order so outputs are bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when two operands have incompatible shapes."""


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Validate external input and return it as a 2-D float64 array.

    Rejects empty shapes and non-finite entries.
    """
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got {arr.ndim}-D")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must have rows >= 1 and cols >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def matmul(A: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation order.

    Each output element is accumulated as ``((0 + a0*w0) + a1*w1) + ...``,
    which is exactly what a naive triple loop computes. Non-finite values
    are propagated, not rejected, so exploding networks can be observed.
    """
    if A.ndim != 2 or W.ndim != 2 or A.shape[1] != W.shape[0]:
        raise ShapeError(f"cannot multiply {A.shape} by {W.shape}")
    out = np.zeros((A.shape[0], W.shape[1]))
    tmp = np.empty_like(out)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(A.shape[1]):
            np.multiply(A[:, k : k + 1], W[k : k + 1, :], out=tmp)
            out += tmp
    return out


@dataclass
class RngStream:
    """Independent random stream keyed by ``(seed, stream_id)``.

    Two streams with the same key produce the same sequence regardless of
    which thread draws from them. A stream must only be used by one thread.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def sample_uniform(rng: RngStream, lo: float, hi: float, rows: int, cols: int) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"sample_uniform needs lo < hi, got lo={lo}, hi={hi}")
    return rng.generator.uniform(lo, hi, size=(rows, cols))


def sample_normal(rng: RngStream, mean: float, sd: float, rows: int, cols: int) -> np.ndarray:
    if not sd > 0:
        raise ValueError(f"sample_normal needs sd > 0, got {sd}")
    return rng.generator.normal(mean, sd, size=(rows, cols))


def column_stats(M: np.ndarray, divisor: str = "B") -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and variance.

    ``divisor="B"`` gives the biased variance used inside BatchNorm;
    ``divisor="B-1"`` gives the unbiased variance used for reporting.
    """
    if divisor not in ("B", "B-1"):
        raise ValueError(f"divisor must be 'B' or 'B-1', got {divisor!r}")
    n = M.shape[0]
    ddof = 0 if divisor == "B" else 1
    if n - ddof < 1:
        raise ValueError(f"column_stats with divisor {divisor} needs more than {ddof} rows")
    means = M.sum(axis=0) / n
    centred = M - means
    var = (centred * centred).sum(axis=0) / (n - ddof)
    return means, var


@dataclass(frozen=True)
class Moments:
    """Count, mean and sum of squared deviations of a sample; mergeable."""

    n: int
    mean: float
    m2: float

    @classmethod
    def from_array(cls, x) -> "Moments":
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return cls(0, 0.0, 0.0)
        mean = x.sum() / x.size
        d = x - mean
        return cls(x.size, float(mean), float((d * d).sum()))

    def merge(self, other: "Moments") -> "Moments":
        # Chan et al. pairwise combination
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return Moments(n, mean, m2)

    @property
    def var(self) -> float:
        if self.n < 2:
            raise ValueError(f"variance needs at least 2 samples, got {self.n}")
        return self.m2 / (self.n - 1)


def pooled_moments_variance(groups: list[Moments]) -> tuple[float, float]:
    """Pooled unbiased variance over groups and stderr from the per-group spread."""
    total = Moments(0, 0.0, 0.0)
    for g in groups:
        total = total.merge(g)
    var = total.var
    usable = [g.var for g in groups if g.n >= 2]
    if len(usable) >= 2:
        with np.errstate(over="ignore", invalid="ignore"):
            stderr = float(np.sqrt(np.var(usable, ddof=1) / len(usable)))
    else:
        stderr = float("nan")
    return var, stderr


def pooled_variance(samples) -> tuple[float, float]:
    """Unbiased variance of samples pooled across groups, with standard error.

    ``samples`` is either a flat array-like of reals, or a sequence of
    arrays with one array per replication. For grouped input the standard
    error is ``sqrt(var(per-group variances) / n_groups)``; for flat input
    it falls back to the fourth-moment formula ``sqrt((m4 - s^4) / n)``.
    """
    grouped = (
        isinstance(samples, (list, tuple))
        and len(samples) > 1
        and all(np.ndim(s) > 0 for s in samples)
    )
    if grouped:
        groups = [Moments.from_array(s) for s in samples]
        if sum(g.n for g in groups) < 2:
            raise ValueError("pooled_variance needs at least 2 samples")
        if all(g.n >= 2 for g in groups):
            return pooled_moments_variance(groups)
        samples = np.concatenate([np.ravel(s) for s in samples])

    flat = np.asarray(samples, dtype=np.float64).ravel()
    n = flat.size
    if n < 2:
        raise ValueError(f"pooled_variance needs at least 2 samples, got {n}")
    m = Moments.from_array(flat)
    d = flat - m.mean
    m4 = float((d ** 4).sum() / n)
    stderr = float(np.sqrt(max(m4 - (m.m2 / n) ** 2, 0.0) / n))
    return m.var, stderr
