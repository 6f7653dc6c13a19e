"""Accuracy, agreement and representation-separability diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import DegenerateInputError, ShapeError, UndefinedMetricError
from .numcore import RngStream, as_matrix

SILHOUETTE_MAX_POINTS = 2000
PCA_MAX_ITER = 1000
PCA_TOL = 1e-9


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    agreement: float
    n_test: int


@dataclass(frozen=True, eq=False)
class SeparabilityReport:
    silhouette: float
    projection_2d: np.ndarray
    labels: np.ndarray
    source: str  # "backbone_penultimate" or "model_final"


def _paired(a, b):
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ShapeError("empty label sequences")
    return a, b


def accuracy(predictions, truth) -> float:
    p, t = _paired(predictions, truth)
    return int(np.count_nonzero(p == t)) / p.size


def agreement(thief_predictions, victim_predictions) -> float:
    """Fraction of positions where thief and victim predict the same class."""
    p, q = _paired(thief_predictions, victim_predictions)
    return int(np.count_nonzero(p == q)) / p.size


def evaluate(thief_predictions, victim_predictions, truth) -> EvalResult:
    return EvalResult(
        accuracy=accuracy(thief_predictions, truth),
        agreement=agreement(thief_predictions, victim_predictions),
        n_test=len(truth),
    )


def _pairwise_distances(x):
    # explicit differences; the Gram-matrix shortcut loses precision under translation
    return squareform(pdist(x, "euclidean"))


def silhouette(features, labels, *, max_points: int = SILHOUETTE_MAX_POINTS, seed: int = 0) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Samples in singleton classes score 0. Inputs larger than ``max_points``
    rows are subsampled without replacement using ``seed``.
    """
    x = as_matrix(features, "features")
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise ShapeError("features and labels differ in length")
    if np.unique(y).size < 2:
        raise UndefinedMetricError("silhouette needs at least two classes")
    if x.shape[0] > max_points:
        keep = np.sort(RngStream(seed, ("silhouette-subsample",)).choice(x.shape[0], max_points))
        x, y = x[keep], y[keep]
        if np.unique(y).size < 2:
            raise UndefinedMetricError("subsample left a single class")
    dist = _pairwise_distances(x)
    classes, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    # sums[i, c] = total distance from sample i to members of class c
    onehot = np.zeros((x.shape[0], classes.size))
    onehot[np.arange(x.shape[0]), inverse] = 1.0
    sums = dist @ onehot
    own = counts[inverse]
    a = np.where(own > 1, sums[np.arange(x.shape[0]), inverse] / np.maximum(own - 1, 1), 0.0)
    means = sums / counts[None, :]
    means[np.arange(x.shape[0]), inverse] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.mean(s))


def _orthogonalize(w, basis):
    if basis is None:
        return w
    # two passes: a single projection leaves round-off along the basis
    for _ in range(2):
        w = w - basis.T @ (basis @ w)
    return w


def _power_iteration(cov, start, basis=None, scale=1.0):
    v = _orthogonalize(start, basis)
    v = v / np.linalg.norm(v)
    for _ in range(PCA_MAX_ITER):
        w = _orthogonalize(cov @ v, basis)
        norm = np.linalg.norm(w)
        if norm <= scale * 1e-13:
            # remaining spectrum is numerically zero; any orthogonal direction will do
            return v, 0.0
        w /= norm
        if w @ v < 0:
            w = -w
        if np.linalg.norm(w - v) < PCA_TOL:
            v = w
            break
        v = w
    return v, float(v @ cov @ v)


def principal_directions(features, k: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``k`` principal directions by power iteration with deflation.

    Returns ``(mean, directions (k, d), variances (k,))``. Each direction is
    signed so that its largest-magnitude coordinate is positive.
    """
    x = as_matrix(features, "features")
    if x.shape[0] < 2:
        raise DegenerateInputError("need at least two samples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    scale = float(np.abs(cov).max())
    if scale == 0.0:
        raise DegenerateInputError("all samples are identical")
    d = x.shape[1]
    start_rng = RngStream(0, ("pca-start",))
    dirs, variances = [], []
    deflated = cov.copy()
    for i in range(k):
        if i >= d:
            dirs.append(np.zeros(d))
            variances.append(0.0)
            continue
        start = start_rng.normal(size=d)
        # deflation alone leaks round-off back into found directions
        basis = np.array(dirs) if dirs else None
        v, _ = _power_iteration(deflated, start, basis, scale)
        lam = float(v @ cov @ v)
        if lam <= scale * 1e-15:
            lam = 0.0
        v = v * np.sign(v[np.argmax(np.abs(v))])
        dirs.append(v)
        variances.append(lam)
        deflated = deflated - lam * np.outer(v, v)
    return mean, np.array(dirs), np.array(variances)


def project_2d(features) -> np.ndarray:
    """Mean-centred projection onto the top two principal directions."""
    x = as_matrix(features, "features")
    mean, dirs, _ = principal_directions(x, 2)
    return (x - mean) @ dirs.T


def separability_report(features, labels, source: str, seed: int = 0) -> SeparabilityReport:
    if source not in ("backbone_penultimate", "model_final"):
        raise ValueError(f"unknown embedding source {source!r}")
    y = np.asarray(labels).reshape(-1)
    return SeparabilityReport(silhouette(features, y, seed=seed), project_2d(features), y, source)


def export_projection(report: SeparabilityReport, path) -> None:
    """CSV with columns ``x, y, label``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "label"])
        for (px, py), lab in zip(report.projection_2d, report.labels):
            writer.writerow([repr(float(px)), repr(float(py)), int(lab)])
