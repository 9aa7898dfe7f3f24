"""Dominant-color extraction.

Two stages: K-means over the image's pixels under a Mahalanobis metric
whose covariance comes from a robust MCD estimate, then the largest
cluster's center snaps to the nearest of ten predefined palette colors.
"""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

# sRGB palette in [0, 1]: the ten color names also serve as attribute levels.
PALETTE_NAMES = ("black", "white", "red", "orange", "yellow",
                 "green", "cyan", "blue", "purple", "gray")
DEFAULT_PALETTE = np.array([
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.5, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 0.5, 0.0],
    [0.0, 1.0, 1.0],
    [0.0, 0.0, 1.0],
    [0.5, 0.0, 0.5],
    [0.5, 0.5, 0.5],
])

_DEGENERATE_DET = 1e-24


def mcd_covariance(points, h_fraction=0.75, n_starts=20, seed=0, max_steps=100):
    """Minimum-covariance-determinant estimate via concentration steps.

    Each start draws a random h-subset, then repeatedly re-fits mean/cov on
    the h points with smallest Mahalanobis distance until the determinant
    stops shrinking. Returns None when every candidate covariance is degenerate
    (e.g. a constant image), which callers treat as "use Euclidean".
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    h = max(int(h_fraction * n), d + 1)
    if h > n:
        return None
    best_det, best_cov = np.inf, None
    for start in range(n_starts):
        rng = np.random.default_rng([seed, 7, start])
        subset = rng.choice(n, size=h, replace=False)
        prev_det = np.inf
        for _ in range(max_steps):
            sel = points[subset]
            mean = sel.mean(axis=0)
            cov = np.cov(sel.T, bias=True).reshape(d, d)
            det = float(np.linalg.det(cov))
            if det < _DEGENERATE_DET:
                break
            if det >= prev_det - 1e-15 * max(prev_det, 1.0) and np.isfinite(prev_det):
                break
            prev_det = det
            inv = np.linalg.inv(cov)
            delta = points - mean
            dist = np.einsum("ij,jk,ik->i", delta, inv, delta)
            subset = np.argsort(dist, kind="stable")[:h]
        if np.isfinite(prev_det) and prev_det < best_det:
            best_det = prev_det
            best_cov = np.cov(points[subset].T, bias=True).reshape(d, d)
    if best_cov is None or float(np.linalg.det(best_cov)) < _DEGENERATE_DET:
        return None
    return best_cov


def _whitener(cov):
    """Symmetric inverse square root of the covariance, or None if degenerate."""
    vals, vecs = np.linalg.eigh(cov)
    if np.any(vals <= 1e-12 * max(float(vals.max()), 1e-30)):
        return None
    return (vecs / np.sqrt(vals)) @ vecs.T


def kmeans_cluster(points, k, seed=0, cov=None, max_iter=100, tol=1e-6):
    """Lloyd iterations with k-means++ init; distances are Mahalanobis when a
    covariance is given, Euclidean otherwise.

    Returns (centers in the original space, member counts). Duplicate points
    cap the effective k at the number of distinct values.
    """
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    distinct = np.unique(points, axis=0)
    k = min(k, len(distinct))
    work = points
    if cov is not None:
        wmat = _whitener(cov)
        if wmat is None:
            logger.warning("degenerate covariance; falling back to Euclidean distance")
        else:
            work = points @ wmat
    rng = np.random.default_rng([seed, 11])
    centers = _kmeanspp_init(work, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = ((work[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        labels = d2.argmin(axis=1)
        new_centers = np.empty_like(centers)
        for j in range(k):
            members = work[labels == j]
            if len(members) == 0:
                # reseed an empty cluster at the farthest point
                far = d2[np.arange(len(work)), labels].argmax()
                new_centers[j] = work[far]
            else:
                new_centers[j] = members.mean(axis=0)
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if shift < tol:
            break
    d2 = ((work[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    labels = d2.argmin(axis=1)
    counts = np.bincount(labels, minlength=k)
    orig_centers = np.empty((k, points.shape[1]))
    for j in range(k):
        members = points[labels == j]
        orig_centers[j] = members.mean(axis=0) if len(members) else points[0]
    return orig_centers, counts


def _kmeanspp_init(points, k, rng):
    n = len(points)
    centers = [points[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.array(centers)[None, :, :]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(points[int(rng.integers(n))])
            continue
        centers.append(points[int(rng.choice(n, p=d2 / total))])
    return np.array(centers)


def dominant_color(image, palette=None, k=4, seed=0):
    """Palette index of the image's dominant color.

    The biggest K-means cluster (MCD-Mahalanobis metric) yields an
    intermediate color, which maps to the nearest palette entry by
    Euclidean distance; ties break toward the lower index.
    """
    palette = DEFAULT_PALETTE if palette is None else np.asarray(palette, dtype=np.float64)
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got {img.shape}")
    pixels = img.reshape(3, -1).T
    cov = mcd_covariance(pixels, seed=seed)
    centers, counts = kmeans_cluster(pixels, k=k, seed=seed, cov=cov)
    intermediate = centers[int(counts.argmax())]
    d2 = ((palette - intermediate[None, :]) ** 2).sum(axis=1)
    return int(d2.argmin())
