"""Subspace redundancy measures with exact gradients.

Four measures score the overlap between the batch features of an adapter's
rank-1 subspaces. With ``dh_i^n`` the feature of subspace i on sample n and
``DH_i`` the d x N matrix of all N features of subspace i:

* euclidean (pairwise):
    (1/N) sum_n sum_{i<j} exp(-beta * ||dh_i^n - dh_j^n||^2)
* cosine (pairwise):
    (1/N) sum_n sum_{i<j} <dh_i^n, dh_j^n> / (||dh_i^n|| * ||dh_j^n|| + eps)
* linear (set-to-set):
    sum_{i<j} ||DH_i DH_j^T||_F^2 / (||DH_i DH_i^T||_F ||DH_j DH_j^T||_F + eps)
* nonlinear (set-to-set, RBF kernel):
    sum_{i<j} tr(K_i M K_j M) / (sqrt(tr((K_i M)^2) tr((K_j M)^2)) + eps)
  with K_i[p, q] = exp(-||dh_i^p - dh_i^q||^2 / (2 sigma_i^2)), M the
  centering matrix I - (1/N) 11^T, and sigma_i a per-subspace fraction of
  the median pairwise sample distance.

Every measure returns its value together with the exact gradients with
respect to the adapter factors ``b`` and ``a``, obtained by hand-derived
differentiation through the feature construction. The kernel bandwidths
sigma_i are treated as constants during differentiation (the median is
piecewise constant), so pass frozen bandwidths when comparing against
finite differences.

Values sum over unordered subspace pairs and are not normalized by the
pair count; only the pairwise measures average over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import LowRankAdapter, SubspaceFeatureSet, subspace_forward
from .matrix import as_matrix, pairwise_sq_dists

__all__ = [
    "MEASURES",
    "LEVELS",
    "RegularizerSpec",
    "RegularizerValue",
    "KernelMatrix",
    "rbf_kernel",
    "median_bandwidth",
    "reg_euclidean",
    "reg_cosine",
    "reg_linear",
    "reg_nonlinear",
    "weight_level_features",
    "regularize",
]

MEASURES = ("euclidean", "cosine", "linear", "nonlinear")
LEVELS = ("feature", "weight")


@dataclass(frozen=True)
class RegularizerSpec:
    """Which measure to apply, at which level, with its scale parameters."""

    measure: str = "linear"
    level: str = "feature"
    beta: float = 1.0
    sigma_fraction: float = 1.0
    sigma_floor: float = 1e-6
    eps: float = 1e-12
    center_linear: bool = False

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise ValueError(f"measure must be one of {MEASURES}, got {self.measure!r}")
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level!r}")
        for name in ("beta", "sigma_fraction", "sigma_floor", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class RegularizerValue:
    """Scalar penalty plus its gradients with respect to the adapter factors."""

    value: float
    grad_b: np.ndarray  # d_out x r
    grad_a: np.ndarray  # r x d_in


@dataclass(frozen=True)
class KernelMatrix:
    """RBF Gram matrix of one subspace's samples, with the bandwidth used."""

    k: np.ndarray  # N x N
    sigma: float


def median_bandwidth(
    features_i: np.ndarray, sigma_fraction: float = 1.0, sigma_floor: float = 1e-6
) -> float:
    """Bandwidth as a fraction of the median pairwise sample distance.

    ``features_i`` is d x N with samples as columns. The median runs over
    the N(N-1)/2 distinct pairwise Euclidean distances; with fewer than two
    samples, or all samples identical, the result falls back to
    ``sigma_floor``. The floor is also applied as a lower bound.
    """
    f = as_matrix(features_i, "features_i")
    n = f.shape[1]
    if n < 2:
        return float(sigma_floor)
    d2 = pairwise_sq_dists(f)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return max(sigma_fraction * med, float(sigma_floor))


def rbf_kernel(features_i: np.ndarray, sigma: float) -> KernelMatrix:
    """Gaussian kernel K[p, q] = exp(-||f_p - f_q||^2 / (2 sigma^2)) over columns."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    d2 = pairwise_sq_dists(features_i)
    return KernelMatrix(k=np.exp(-d2 / (2.0 * sigma * sigma)), sigma=float(sigma))


# ---------------------------------------------------------------------------
# Core measure math on raw feature lists.
#
# Each function takes the list of per-subspace feature matrices (uniform
# shapes d x N) and returns (value, grads) where grads[i] is the partial
# derivative of the value with respect to feature matrix i. Chaining those
# partials back to the adapter factors is the caller's job.
# ---------------------------------------------------------------------------


def euclidean_measure(
    feats: list[np.ndarray] | tuple[np.ndarray, ...], beta: float
) -> tuple[float, list[np.ndarray]]:
    r = len(feats)
    n = feats[0].shape[1]
    grads = [np.zeros_like(f) for f in feats]
    value = 0.0
    for i in range(r):
        for j in range(i + 1, r):
            diff = feats[i] - feats[j]  # d x N
            e = np.exp(-beta * np.sum(diff * diff, axis=0))  # N
            value += float(np.sum(e)) / n
            coef = (-2.0 * beta / n) * e
            g = diff * coef[None, :]
            grads[i] += g
            grads[j] -= g
    return value, grads


def cosine_measure(
    feats: list[np.ndarray] | tuple[np.ndarray, ...], eps: float
) -> tuple[float, list[np.ndarray]]:
    r = len(feats)
    n = feats[0].shape[1]
    norms = [np.sqrt(np.sum(f * f, axis=0)) for f in feats]  # each N
    # unit vectors with zero-norm columns mapped to zero
    units = []
    for f, nf in zip(feats, norms):
        safe = np.where(nf > 0.0, nf, 1.0)
        units.append(np.where(nf[None, :] > 0.0, f / safe[None, :], 0.0))
    grads = [np.zeros_like(f) for f in feats]
    value = 0.0
    for i in range(r):
        for j in range(i + 1, r):
            den = norms[i] * norms[j] + eps  # N
            dot = np.sum(feats[i] * feats[j], axis=0)
            c = dot / den
            value += float(np.sum(c)) / n
            # d c / d u = v / den - c * ||v|| * u_hat / den   (u_hat = 0 at ||u|| = 0)
            gi = (feats[j] - (c * norms[j])[None, :] * units[i]) / den[None, :]
            gj = (feats[i] - (c * norms[i])[None, :] * units[j]) / den[None, :]
            grads[i] += gi / n
            grads[j] += gj / n
    return value, grads


def _center_columns(f: np.ndarray) -> np.ndarray:
    return f - np.mean(f, axis=1, keepdims=True)


def linear_measure(
    feats: list[np.ndarray] | tuple[np.ndarray, ...],
    eps: float,
    centered: bool = False,
) -> tuple[float, list[np.ndarray]]:
    r = len(feats)
    work = [_center_columns(f) for f in feats] if centered else list(feats)
    # per-subspace self products: Q_i = DH_i DH_i^T, g_i = ||Q_i||_F, T_i = Q_i DH_i
    q = [f @ f.T for f in work]
    g = [float(np.sqrt(np.sum(qi * qi))) for qi in q]
    t = [qi @ f for qi, f in zip(q, work)]
    grads = [np.zeros_like(f) for f in work]
    value = 0.0
    for i in range(r):
        for j in range(i + 1, r):
            p = work[i] @ work[j].T
            num = float(np.sum(p * p))
            den = g[i] * g[j] + eps
            value += num / den
            grads[i] += (2.0 / den) * (p @ work[j])
            grads[j] += (2.0 / den) * (p.T @ work[i])
            if g[i] > 0.0:
                grads[i] -= (2.0 * num * g[j] / (den * den * g[i])) * t[i]
            if g[j] > 0.0:
                grads[j] -= (2.0 * num * g[i] / (den * den * g[j])) * t[j]
    if centered:
        # chain through the column centering: right-multiply by M = I - (1/N) 11^T
        grads = [gr - np.mean(gr, axis=1, keepdims=True) for gr in grads]
    return value, grads


def _double_center(k: np.ndarray) -> np.ndarray:
    """M K M without forming M: subtract row and column means, add back the grand mean."""
    row = np.mean(k, axis=1, keepdims=True)
    col = np.mean(k, axis=0, keepdims=True)
    return k - row - col + np.mean(k)


def nonlinear_measure(
    feats: list[np.ndarray] | tuple[np.ndarray, ...],
    sigma_fraction: float,
    sigma_floor: float,
    eps: float,
    sigmas: list[float] | None = None,
) -> tuple[float, list[np.ndarray], list[float]]:
    """Kernel-alignment measure; returns (value, grads, sigmas actually used).

    Pass ``sigmas`` to reuse bandwidths computed at a reference point; the
    gradients always treat the bandwidths as constants.
    """
    r = len(feats)
    n = feats[0].shape[1]
    if n < 2:
        raise ValueError("nonlinear measure needs at least 2 samples to center")
    if sigmas is None:
        sigmas = [median_bandwidth(f, sigma_fraction, sigma_floor) for f in feats]
    kmats = [rbf_kernel(f, s).k for f, s in zip(feats, sigmas)]
    cmats = [_double_center(k) for k in kmats]
    traces = [float(np.sum(c * c)) for c in cmats]  # tr((K_i M)^2)
    grads = [np.zeros_like(f) for f in feats]
    value = 0.0
    for i in range(r):
        for j in range(i + 1, r):
            num = float(np.sum(cmats[i] * cmats[j]))  # tr(K_i M K_j M)
            root = np.sqrt(traces[i] * traces[j])
            den = root + eps
            value += num / den
            for p, q in ((i, j), (j, i)):
                # dS/dK_p, using d num / dK_p = C_q and d tr_p / dK_p = 2 C_p
                gk = cmats[q] / den
                if root > 0.0:
                    gk = gk - (num * traces[q] / (den * den * root)) * cmats[p]
                # through K = exp(-D / (2 sigma^2)) to squared distances
                w = gk * kmats[p] * (-1.0 / (2.0 * sigmas[p] * sigmas[p]))
                # through D[p, q] = ||f_p - f_q||^2 to the feature columns
                rowsum = np.sum(w, axis=1)
                grads[p] += 4.0 * (feats[p] * rowsum[None, :] - feats[p] @ w)
    return value, grads, sigmas


_MEASURE_IS_PAIRWISE = {"euclidean": True, "cosine": True, "linear": False, "nonlinear": False}


# ---------------------------------------------------------------------------
# Chaining feature gradients back to the adapter factors.
# ---------------------------------------------------------------------------


def _chain_to_factors(
    fs: SubspaceFeatureSet, feat_grads: list[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    ad = fs.adapter
    grad_b = np.zeros_like(ad.b)
    grad_a = np.zeros_like(ad.a)
    if fs.level == "feature":
        x = fs.x_batch
        coeffs = fs.coeffs
        for i, g in enumerate(feat_grads):
            # dH_i = outer(b[:, i], coeffs[i]); coeffs[i] = a[i] @ X
            grad_b[:, i] = g @ coeffs[i, :]
            grad_a[i, :] = (ad.b[:, i] @ g) @ x.T
    else:
        for i, g in enumerate(feat_grads):
            if fs.level == "weight_vec":
                g = g.reshape(ad.d_out, ad.d_in)  # row-major vec convention
            # W_i = outer(b[:, i], a[i, :])
            grad_b[:, i] = g @ ad.a[i, :]
            grad_a[i, :] = ad.b[:, i] @ g
    return grad_b, grad_a


def _zero_value(adapter: LowRankAdapter) -> RegularizerValue:
    return RegularizerValue(
        value=0.0, grad_b=np.zeros_like(adapter.b), grad_a=np.zeros_like(adapter.a)
    )


def reg_euclidean(features: SubspaceFeatureSet, beta: float = 1.0) -> RegularizerValue:
    """Batch-averaged Gaussian affinity between subspace features, summed over pairs."""
    if features.rank < 2:
        return _zero_value(features.adapter)
    value, grads = euclidean_measure(features.per_subspace, beta)
    grad_b, grad_a = _chain_to_factors(features, grads)
    return RegularizerValue(value=value, grad_b=grad_b, grad_a=grad_a)


def reg_cosine(features: SubspaceFeatureSet, eps: float = 1e-12) -> RegularizerValue:
    """Batch-averaged cosine similarity between subspace features, summed over pairs.

    The gradient of each pair term with respect to one feature vector is
    (v - cos(theta) ||v|| u_hat) / (||u|| ||v|| + eps): zero at perfectly
    aligned pairs, and pointing the vectors apart when they are similar.
    """
    if features.rank < 2:
        return _zero_value(features.adapter)
    value, grads = cosine_measure(features.per_subspace, eps)
    grad_b, grad_a = _chain_to_factors(features, grads)
    return RegularizerValue(value=value, grad_b=grad_b, grad_a=grad_a)


def reg_linear(
    features: SubspaceFeatureSet, eps: float = 1e-12, centered: bool = False
) -> RegularizerValue:
    """Normalized cross-correlation of the feature sets (uncentered by default)."""
    if features.rank < 2:
        return _zero_value(features.adapter)
    value, grads = linear_measure(features.per_subspace, eps, centered=centered)
    grad_b, grad_a = _chain_to_factors(features, grads)
    return RegularizerValue(value=value, grad_b=grad_b, grad_a=grad_a)


def reg_nonlinear(
    features: SubspaceFeatureSet,
    sigma_fraction: float = 1.0,
    eps: float = 1e-12,
    sigma_floor: float = 1e-6,
    sigmas: list[float] | None = None,
) -> RegularizerValue:
    """Centered kernel alignment between subspace feature sets, summed over pairs."""
    if features.rank < 2:
        return _zero_value(features.adapter)
    value, grads, _ = nonlinear_measure(
        features.per_subspace, sigma_fraction, sigma_floor, eps, sigmas=sigmas
    )
    grad_b, grad_a = _chain_to_factors(features, grads)
    return RegularizerValue(value=value, grad_b=grad_b, grad_a=grad_a)


def weight_level_features(
    adapter: LowRankAdapter, measure: str = "linear"
) -> SubspaceFeatureSet:
    """Subspace features built from the rank-1 weight matrices themselves.

    Pairwise measures compare the matrices as flattened vectors, one sample
    per subspace; set-to-set measures treat each W_i (d_out x d_in) as a
    feature set whose samples are its d_in columns. This makes the
    weight-level linear score coincide with the feature-level score on an
    identity input batch.
    """
    if measure not in MEASURES:
        raise ValueError(f"measure must be one of {MEASURES}, got {measure!r}")
    mats = [np.outer(adapter.b[:, i], adapter.a[i, :]) for i in range(adapter.rank)]
    if _MEASURE_IS_PAIRWISE[measure]:
        feats = tuple(m.reshape(-1, 1) for m in mats)
        level = "weight_vec"
    else:
        feats = tuple(mats)
        level = "weight_set"
    total = np.zeros_like(feats[0])
    for f in feats:
        total += f
    return SubspaceFeatureSet(
        per_subspace=feats, total=total, adapter=adapter, level=level
    )


def regularize(
    adapter: LowRankAdapter,
    x_batch: np.ndarray | None,
    spec: RegularizerSpec,
    frozen_sigmas: list[float] | None = None,
) -> RegularizerValue:
    """Evaluate the measure selected by ``spec`` on an adapter and batch.

    ``x_batch`` is required at feature level and ignored at weight level.
    ``frozen_sigmas`` pins the nonlinear bandwidths to externally computed
    values, which finite-difference checks use to keep the function smooth
    under perturbation.
    """
    if adapter.rank < 2:
        return _zero_value(adapter)
    if spec.level == "feature":
        if x_batch is None:
            raise ValueError("feature-level regularization needs an input batch")
        features = subspace_forward(adapter, x_batch)
    else:
        features = weight_level_features(adapter, spec.measure)
    if spec.measure == "euclidean":
        return reg_euclidean(features, beta=spec.beta)
    if spec.measure == "cosine":
        return reg_cosine(features, eps=spec.eps)
    if spec.measure == "linear":
        return reg_linear(features, eps=spec.eps, centered=spec.center_linear)
    return reg_nonlinear(
        features,
        sigma_fraction=spec.sigma_fraction,
        eps=spec.eps,
        sigma_floor=spec.sigma_floor,
        sigmas=frozen_sigmas,
    )
