"""Low-rank adapters and their rank-1 subspace decomposition.

An adapter augments a frozen base weight ``w0`` (d_out x d_in) with a
trainable low-rank update ``b @ a`` where ``b`` is d_out x r and ``a`` is
r x d_in. Column i of ``b`` together with row i of ``a`` forms the i-th
rank-1 subspace: ``W_i = outer(b[:, i], a[i, :])`` and the update is the
sum of the r subspace matrices. On a batch ``X`` (d_in x N) the i-th
subspace contributes ``dH_i = outer(b[:, i], a[i, :] @ X)``, and the full
update output is the sum of the per-subspace contributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matrix import Rng, as_matrix, randn

__all__ = [
    "LowRankAdapter",
    "SubspaceFeatureSet",
    "init_adapter",
    "random_adapter",
    "decompose",
    "subspace_forward",
    "merge",
]


def _readonly(m: np.ndarray) -> np.ndarray:
    v = m.view()
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class LowRankAdapter:
    """Frozen base weight plus trainable factors ``b`` (d_out x r) and ``a`` (r x d_in).

    All three arrays are held as read-only views; training replaces ``b``
    and ``a`` wholesale (see ``dataclasses.replace``) and never touches
    ``w0``.
    """

    w0: np.ndarray
    b: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        w0 = as_matrix(self.w0, "w0")
        b = as_matrix(self.b, "b")
        a = as_matrix(self.a, "a")
        d_out, d_in = w0.shape
        r = b.shape[1]
        if b.shape[0] != d_out or a.shape[0] != r or a.shape[1] != d_in:
            raise ValueError(
                f"factor shapes inconsistent: w0 {w0.shape}, b {b.shape}, a {a.shape}"
            )
        if not 1 <= r <= min(d_in, d_out):
            raise ValueError(f"rank must satisfy 1 <= r <= min(d_in, d_out), got r={r}")
        object.__setattr__(self, "w0", _readonly(w0))
        object.__setattr__(self, "b", _readonly(b))
        object.__setattr__(self, "a", _readonly(a))

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    @property
    def rank(self) -> int:
        return self.b.shape[1]


@dataclass(frozen=True)
class SubspaceFeatureSet:
    """Per-subspace batch features plus the context to backpropagate through them.

    ``per_subspace[i]`` holds the feature matrix of subspace i and ``total``
    their sum. For feature-level sets the matrices are d_out x N with
    samples as columns; weight-level sets reuse the same container (see
    ``regularizers.weight_level_features``). ``level`` records how the
    features were built, which fixes the chain rule back to the factors:

    * ``"feature"``    dH_i = outer(b[:, i], coeffs[i]) with coeffs = a @ X
    * ``"weight_set"`` features are the rank-1 matrices W_i themselves
    * ``"weight_vec"`` features are vec(W_i) as a single-sample column
    """

    per_subspace: tuple[np.ndarray, ...]
    total: np.ndarray
    adapter: LowRankAdapter
    level: str = "feature"
    x_batch: np.ndarray | None = None
    coeffs: np.ndarray | None = None  # a @ X, r x N (feature level only)
    base_output: np.ndarray | None = None  # w0 @ X when requested

    @property
    def rank(self) -> int:
        return len(self.per_subspace)

    @property
    def n_samples(self) -> int:
        return self.per_subspace[0].shape[1]


def init_adapter(
    rng: Rng,
    d_in: int,
    d_out: int,
    r: int,
    init_std: float = 0.02,
    w0: np.ndarray | None = None,
) -> LowRankAdapter:
    """Fresh adapter: ``a`` ~ N(0, init_std^2), ``b`` = 0, so the initial update is zero.

    ``w0`` defaults to the zero matrix; training code passes the task's
    frozen base weight. Either way the adapted map starts out identical to
    the base map.
    """
    if not 1 <= r <= min(d_in, d_out):
        raise ValueError(f"rank must satisfy 1 <= r <= min(d_in, d_out), got r={r}")
    if w0 is None:
        w0 = np.zeros((d_out, d_in))
    else:
        w0 = as_matrix(w0, "w0")
        if w0.shape != (d_out, d_in):
            raise ValueError(f"w0 has shape {w0.shape}, expected ({d_out}, {d_in})")
    a = randn(rng, r, d_in, std=init_std)
    b = np.zeros((d_out, r))
    return LowRankAdapter(w0=w0, b=b, a=a)


def random_adapter(
    rng: Rng, d_in: int, d_out: int, r: int, std: float = 1.0
) -> LowRankAdapter:
    """Adapter with both factors random: nonzero features for checks and oracles."""
    if not 1 <= r <= min(d_in, d_out):
        raise ValueError(f"rank must satisfy 1 <= r <= min(d_in, d_out), got r={r}")
    w0 = randn(rng, d_out, d_in, std=1.0 / np.sqrt(d_in))
    b = randn(rng, d_out, r, std=std)
    a = randn(rng, r, d_in, std=std)
    return LowRankAdapter(w0=w0, b=b, a=a)


def decompose(adapter: LowRankAdapter) -> list[np.ndarray]:
    """The r rank-1 matrices W_i = outer(b[:, i], a[i, :]); they sum to b @ a."""
    return [np.outer(adapter.b[:, i], adapter.a[i, :]) for i in range(adapter.rank)]


def subspace_forward(
    adapter: LowRankAdapter, x_batch: np.ndarray, include_base: bool = False
) -> SubspaceFeatureSet:
    """Per-subspace update outputs on a batch (samples as columns).

    ``total`` is computed as the sum of the per-subspace matrices, so the
    decomposition identity holds exactly by construction. Pass
    ``include_base=True`` to also get ``w0 @ x_batch``.
    """
    x = as_matrix(x_batch, "x_batch")
    if x.shape[0] != adapter.d_in:
        raise ValueError(
            f"x_batch has {x.shape[0]} rows, adapter expects d_in={adapter.d_in}"
        )
    coeffs = adapter.a @ x  # r x N
    feats = tuple(
        np.outer(adapter.b[:, i], coeffs[i, :]) for i in range(adapter.rank)
    )
    total = np.zeros_like(feats[0])
    for f in feats:
        total += f
    base = adapter.w0 @ x if include_base else None
    return SubspaceFeatureSet(
        per_subspace=feats,
        total=total,
        adapter=adapter,
        level="feature",
        x_batch=x,
        coeffs=coeffs,
        base_output=base,
    )


def merge(adapter: LowRankAdapter) -> np.ndarray:
    """Reparameterized weight ``w0 + b @ a``: one matrix, no adapter path at inference."""
    return adapter.w0 + adapter.b @ adapter.a
