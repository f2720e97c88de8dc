"""Pairwise redundancy matrices, summaries, and heatmap rendering.

The redundancy matrix scores every subspace pair under one measure:
pairwise measures (euclidean, cosine) report their batch-mean pair term,
set-to-set measures (linear, nonlinear) their set score. All entries,
including the diagonal, come from the same per-pair formula, so for
non-degenerate features the diagonal sits at 1 up to the eps guard.

Heatmaps are emitted as standalone SVG documents: hand-written markup, no
raster dependencies, byte-deterministic for golden-file comparison.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .adapter import SubspaceFeatureSet
from .matrix import pairwise_sq_dists
from .regularizers import MEASURES, median_bandwidth, rbf_kernel, _double_center

__all__ = [
    "RedundancyMatrix",
    "RedundancySummary",
    "redundancy_matrix",
    "summarize",
    "render_heatmap",
    "scores_to_csv",
]


@dataclass(frozen=True)
class RedundancyMatrix:
    scores: np.ndarray  # r x r, symmetric
    measure: str
    subject: str = ""


@dataclass(frozen=True)
class RedundancySummary:
    mean_offdiag: float
    max_offdiag: float
    measure: str


def _pair_euclidean(fi: np.ndarray, fj: np.ndarray, beta: float) -> float:
    diff = fi - fj
    return float(np.mean(np.exp(-beta * np.sum(diff * diff, axis=0))))


def _pair_cosine(fi: np.ndarray, fj: np.ndarray, eps: float) -> float:
    ni = np.sqrt(np.sum(fi * fi, axis=0))
    nj = np.sqrt(np.sum(fj * fj, axis=0))
    return float(np.mean(np.sum(fi * fj, axis=0) / (ni * nj + eps)))


def _pair_linear(fi: np.ndarray, fj: np.ndarray, eps: float) -> float:
    p = fi @ fj.T
    gi = np.sqrt(np.sum((fi @ fi.T) ** 2))
    gj = np.sqrt(np.sum((fj @ fj.T) ** 2))
    return float(np.sum(p * p) / (gi * gj + eps))


def redundancy_matrix(
    features: SubspaceFeatureSet,
    measure: str,
    subject: str = "",
    beta: float = 1.0,
    sigma_fraction: float = 1.0,
    sigma_floor: float = 1e-6,
    eps: float = 1e-12,
) -> RedundancyMatrix:
    """Score all subspace pairs of a feature set under one measure."""
    if measure not in MEASURES:
        raise ValueError(f"measure must be one of {MEASURES}, got {measure!r}")
    feats = features.per_subspace
    r = len(feats)
    scores = np.zeros((r, r))
    if measure == "nonlinear":
        if features.n_samples < 2:
            raise ValueError("nonlinear redundancy needs at least 2 samples")
        cmats = []
        for f in feats:
            sigma = median_bandwidth(f, sigma_fraction, sigma_floor)
            cmats.append(_double_center(rbf_kernel(f, sigma).k))
        traces = [float(np.sum(c * c)) for c in cmats]
        for i in range(r):
            for j in range(i, r):
                num = float(np.sum(cmats[i] * cmats[j]))
                scores[i, j] = num / (np.sqrt(traces[i] * traces[j]) + eps)
                scores[j, i] = scores[i, j]
        return RedundancyMatrix(scores=scores, measure=measure, subject=subject)
    if measure == "linear":
        pair = lambda fi, fj: _pair_linear(fi, fj, eps)
    elif measure == "cosine":
        pair = lambda fi, fj: _pair_cosine(fi, fj, eps)
    else:
        pair = lambda fi, fj: _pair_euclidean(fi, fj, beta)
    for i in range(r):
        for j in range(i, r):
            scores[i, j] = pair(feats[i], feats[j])
            scores[j, i] = scores[i, j]
    return RedundancyMatrix(scores=scores, measure=measure, subject=subject)


def summarize(m: RedundancyMatrix) -> RedundancySummary:
    """Mean and max over the strict upper triangle; needs r >= 2."""
    r = m.scores.shape[0]
    if r < 2:
        raise ValueError("summary needs at least 2 subspaces")
    iu = np.triu_indices(r, k=1)
    vals = m.scores[iu]
    return RedundancySummary(
        mean_offdiag=float(np.mean(vals)),
        max_offdiag=float(np.max(vals)),
        measure=m.measure,
    )


def scores_to_csv(m: RedundancyMatrix, path) -> None:
    """Write all r x r scores as rows ``i,j,score`` (floats via repr)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "score"])
        r = m.scores.shape[0]
        for i in range(r):
            for j in range(r):
                w.writerow([i, j, repr(float(m.scores[i, j]))])


# --- SVG rendering ---------------------------------------------------------

_CELL = 56
_MARGIN = 44
_TITLE_H = 28

# three-stop scale: white -> steel blue -> dark navy
_STOPS = [(255, 255, 255), (70, 130, 180), (8, 24, 88)]


def _color(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    if t <= 0.5:
        lo, hi, u = _STOPS[0], _STOPS[1], t * 2.0
    else:
        lo, hi, u = _STOPS[1], _STOPS[2], (t - 0.5) * 2.0
    rgb = [round(l + (h - l) * u) for l, h in zip(lo, hi)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_heatmap(m: RedundancyMatrix, path) -> str:
    """Write an r x r heatmap as a standalone SVG and return the markup.

    Color is a linear scale over [0, 1]; cosine scores are mapped through
    their absolute value for color while the signed value is printed in
    the cell.
    """
    r = m.scores.shape[0]
    width = _MARGIN + r * _CELL + 16
    height = _TITLE_H + _MARGIN - 16 + r * _CELL + 24
    title = f"{m.measure} redundancy"
    if m.subject:
        title += f" ({m.subject})"
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="20" text-anchor="middle" '
        f'font-family="monospace" font-size="14">{title}</text>',
    ]
    x0, y0 = _MARGIN, _TITLE_H + _MARGIN - 16
    for j in range(r):
        cx = x0 + j * _CELL + _CELL // 2
        lines.append(
            f'<text x="{cx}" y="{y0 - 8}" text-anchor="middle" '
            f'font-family="monospace" font-size="11">{j}</text>'
        )
    for i in range(r):
        cy = y0 + i * _CELL + _CELL // 2
        lines.append(
            f'<text x="{x0 - 10}" y="{cy + 4}" text-anchor="end" '
            f'font-family="monospace" font-size="11">{i}</text>'
        )
        for j in range(r):
            v = float(m.scores[i, j])
            t = abs(v) if m.measure == "cosine" else v
            fill = _color(t)
            tx = "white" if min(max(t, 0.0), 1.0) > 0.55 else "black"
            x, y = x0 + j * _CELL, y0 + i * _CELL
            lines.append(
                f'<rect x="{x}" y="{y}" width="{_CELL}" height="{_CELL}" '
                f'fill="{fill}" stroke="#cccccc" stroke-width="1"/>'
            )
            lines.append(
                f'<text x="{x + _CELL // 2}" y="{y + _CELL // 2 + 4}" '
                f'text-anchor="middle" font-family="monospace" font-size="11" '
                f'fill="{tx}">{v:.3f}</text>'
            )
    lines.append("</svg>")
    doc = "\n".join(lines) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(doc)
    return doc
