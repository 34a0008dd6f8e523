"""Depth-image segmentation into regions of spatially proximate 3D points.

Every stride-th pixel with valid depth is back-projected to camera-frame
meters and grouped with k-means. Clustering happens in 3D (not on raw pixel
plus disparity values) so that a cluster can be read as one object surface
sharing a motion constraint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional, numpy path below
    _HAVE_NUMBA = False

from . import geometry
from .geometry import CameraIntrinsics

DEFAULT_CLUSTERS = 24
DEFAULT_STRIDE = 4
DEFAULT_SEED = 42
CONVERGENCE_SHIFT = 1e-3  # meters
MAX_ITERATIONS = 25


class DegenerateDepthError(ValueError):
    """Depth image has fewer valid samples than requested clusters."""


def _assign_numpy(points, pts_sq, centroids, labels_out, sums, counts):
    d2 = points @ centroids.T
    d2 *= -2.0
    d2 += pts_sq[:, None]
    d2 += (centroids**2).sum(axis=1)[None, :]
    lab = d2.argmin(axis=1).astype(np.int32)
    labels_out[:] = lab
    counts[:] = np.bincount(lab, minlength=len(centroids))
    for d in range(3):
        sums[:, d] = np.bincount(lab, weights=points[:, d], minlength=len(centroids))
    return float(d2[np.arange(len(points)), lab].sum())


if _HAVE_NUMBA:

    @njit(cache=True)
    def _assign_compiled(points, pts_sq, centroids, labels_out, sums, counts):  # pragma: no cover
        n = points.shape[0]
        k = centroids.shape[0]
        sums[:] = 0.0
        counts[:] = 0
        obj = 0.0
        for i in range(n):
            px, py, pz = points[i, 0], points[i, 1], points[i, 2]
            best = np.inf
            bk = 0
            for j in range(k):
                dx = px - centroids[j, 0]
                dy = py - centroids[j, 1]
                dz = pz - centroids[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
                    bk = j
            labels_out[i] = bk
            obj += best
            sums[bk, 0] += px
            sums[bk, 1] += py
            sums[bk, 2] += pz
            counts[bk] += 1
        return obj

    _assign_step = _assign_compiled
else:
    _assign_step = _assign_numpy


@dataclass
class ClusterMap:
    """K-means result over the subsampled depth grid.

    ``labels`` covers the sampled grid (rows ``v = i*stride``), -1 where the
    depth was invalid. ``centroids`` are camera-frame meters.
    """

    labels: np.ndarray  # (H_s, W_s) int32, -1 invalid
    centroids: np.ndarray  # (N, 3)
    counts: np.ndarray  # (N,)
    n_clusters: int
    stride: int
    image_shape: tuple[int, int]
    objective_history: list[float]

    @property
    def grid_points(self) -> np.ndarray:
        """Sampled pixel coordinates (u, v) for each grid position."""
        hs, ws = self.labels.shape
        us = np.arange(ws) * self.stride
        vs = np.arange(hs) * self.stride
        return us, vs


def kmeans_points(
    points: np.ndarray,
    n_clusters: int,
    seed: int = DEFAULT_SEED,
    tol: float = CONVERGENCE_SHIFT,
    max_iter: int = MAX_ITERATIONS,
):
    """Seeded k-means++ then Lloyd iterations on (N, 3) points.

    Returns (labels, centroids, counts, objective_history). The final labels
    are re-assigned against the final centroids, so every point is at least
    as close to its own centroid as to any other. Empty clusters keep their
    centroid and report count 0.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = len(points)
    if n < n_clusters:
        raise DegenerateDepthError(f"{n} points cannot form {n_clusters} clusters")
    rng = np.random.default_rng(seed)

    # k-means++ seeding: next centroid drawn proportional to squared distance
    centroids = np.empty((n_clusters, 3))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, n_clusters):
        cum = np.cumsum(d2)
        if cum[-1] <= 0:
            centroids[k:] = points[first]
            break
        idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        idx = min(idx, n - 1)
        centroids[k] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[k]) ** 2).sum(axis=1))

    pts_sq = (points**2).sum(axis=1)
    labels = np.zeros(n, dtype=np.int32)
    sums = np.zeros((n_clusters, 3))
    counts = np.zeros(n_clusters, dtype=np.int64)

    history: list[float] = []
    for _ in range(max_iter):
        obj = _assign_step(points, pts_sq, centroids, labels, sums, counts)
        history.append(float(obj))
        nonempty = counts > 0
        new_centroids = centroids.copy()
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty][:, None]
        shift = float(np.linalg.norm(new_centroids - centroids, axis=1).max())
        centroids = new_centroids
        if shift < tol:
            break

    obj = _assign_step(points, pts_sq, centroids, labels, sums, counts)
    history.append(float(obj))
    return labels.copy(), centroids, counts.copy(), history


def cluster_depth(
    depth: np.ndarray,
    intr: CameraIntrinsics,
    n_clusters: int = DEFAULT_CLUSTERS,
    stride: int = DEFAULT_STRIDE,
    seed: int = DEFAULT_SEED,
    min_depth: float = geometry.DEFAULT_MIN_DEPTH,
    max_depth: float = geometry.DEFAULT_MAX_DEPTH,
) -> ClusterMap:
    """Segment a raw depth image; deterministic for fixed (image, N, stride, seed)."""
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    sampled = depth[::stride, ::stride]
    hs, ws = sampled.shape
    z, valid = geometry.depth_to_meters(sampled, intr, min_depth, max_depth)
    vv, uu = np.nonzero(valid)
    if len(vv) < n_clusters:
        raise DegenerateDepthError(
            f"only {len(vv)} valid depth samples for {n_clusters} clusters"
        )
    pts = geometry.backproject_grid(
        (uu * stride).astype(np.float64), (vv * stride).astype(np.float64), z[vv, uu], intr
    )
    flat_labels, centroids, counts, history = kmeans_points(pts, n_clusters, seed)
    labels = np.full((hs, ws), -1, dtype=np.int32)
    labels[vv, uu] = flat_labels
    return ClusterMap(
        labels=labels,
        centroids=centroids,
        counts=counts,
        n_clusters=n_clusters,
        stride=stride,
        image_shape=depth.shape,
        objective_history=history,
    )


def cluster_of(cmap: ClusterMap, pixel) -> int | None:
    """Cluster label at the nearest valid sampled grid position within one
    stride radius of ``pixel``; None when no valid sample is close enough."""
    u, v = float(pixel[0]), float(pixel[1])
    h, w = cmap.image_shape
    if not (0 <= u < w and 0 <= v < h):
        raise ValueError(f"pixel ({u}, {v}) outside image {w}x{h}")
    return _lookup_one(cmap, u, v)


def _lookup_one(cmap: ClusterMap, u: float, v: float) -> int | None:
    s = cmap.stride
    hs, ws = cmap.labels.shape
    gu = u / s
    gv = v / s
    lo_u = max(0, int(np.ceil(gu - 1)))
    hi_u = min(ws - 1, int(np.floor(gu + 1)))
    lo_v = max(0, int(np.ceil(gv - 1)))
    hi_v = min(hs - 1, int(np.floor(gv + 1)))
    best = None
    best_d2 = (s * s) + 1e-9  # radius = stride, inclusive
    for gj in range(lo_v, hi_v + 1):
        for gi in range(lo_u, hi_u + 1):
            if cmap.labels[gj, gi] < 0:
                continue
            du = gi * s - u
            dv = gj * s - v
            d2 = du * du + dv * dv
            if d2 < best_d2 - 1e-12:
                best_d2 = d2
                best = int(cmap.labels[gj, gi])
    return best


def clusters_of(cmap: ClusterMap, pixels: np.ndarray) -> np.ndarray:
    """Vectorized ``cluster_of`` for (N, 2) pixels; -1 where None."""
    out = np.full(len(pixels), -1, dtype=np.int32)
    for i, (u, v) in enumerate(np.asarray(pixels, dtype=np.float64)):
        c = _lookup_one(cmap, u, v)
        out[i] = -1 if c is None else c
    return out
