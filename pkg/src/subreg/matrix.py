"""Dense-matrix substrate: float64 arrays, seeded sampling, distance kernels.

Conventions used across the package:

* every matrix is a 2-D, C-contiguous (row-major), float64 ``numpy.ndarray``;
* vectors are column vectors, so a linear map is ``h = W @ x`` with
  ``W`` of shape ``(d_out, d_in)``;
* batches store samples as columns, shape ``(d, N)``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Rng",
    "as_matrix",
    "matmul",
    "frobenius_norm",
    "pairwise_sq_dists",
    "randn",
]


class Rng:
    """Deterministic random stream.

    Wraps ``numpy.random.Generator`` with the PCG64 bit generator seeded
    through ``SeedSequence([seed, stream])``, so the same ``(seed, stream)``
    pair yields a bit-identical stream on every platform. Normal variates
    come from ``Generator.standard_normal`` (ziggurat transform).

    A generator is single-owner: do not share one instance across threads.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, self.stream]))
        )

    def normal(self, shape: tuple[int, ...]) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 C-order array, validating shape."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={m.ndim}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: a is {a.shape[0]}x{a.shape[1]}, "
            f"b is {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def frobenius_norm(m: np.ndarray) -> float:
    """sqrt of the sum of squared entries."""
    m = as_matrix(m, "m")
    return float(np.sqrt(np.sum(m * m)))


def pairwise_sq_dists(cols_of: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between the columns of a d x N matrix.

    Returns an N x N matrix that is exactly symmetric with an exactly zero
    diagonal; off-diagonal entries are clipped at zero to absorb the
    cancellation error of the norms expansion.
    """
    x = as_matrix(cols_of, "cols_of")
    sq = np.sum(x * x, axis=0)
    d = sq[:, None] + sq[None, :] - 2.0 * (x.T @ x)
    d = 0.5 * (d + d.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def randn(rng: Rng, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
    """i.i.d. normal matrix with standard deviation ``std`` (``std >= 0``)."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    return std * rng.normal((int(rows), int(cols)))
