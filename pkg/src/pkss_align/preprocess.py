"""Outlier culling, uniform resampling, and mapping onto the pre-shape space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, SpatialIndex


class DegenerateCloudError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    knn_k: int = 12
    target_count: int = 3000

    def __post_init__(self):
        if not 1 <= self.knn_k < self.target_count:
            raise ValueError("need 1 <= knn_k < target_count")


@dataclass(frozen=True, eq=False)
class PreShape:
    """Centred, unit-Frobenius-norm ``(m, 3)`` representation of a cloud.

    ``centroid`` and ``scale`` undo the normalisation; ``source_indices[i]`` is
    the index in the originating cloud of row ``i``.
    """

    rows: np.ndarray
    centroid: np.ndarray
    scale: float
    source_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)

    def to_model(self, rows) -> np.ndarray:
        return np.asarray(rows) * self.scale + self.centroid


def mutual_knn_outliers(neighbors: np.ndarray) -> np.ndarray:
    """Boolean mask of points that have a neighbour which does not list them back."""
    n = len(neighbors)
    back = neighbors[neighbors]  # (n, k, k): neighbourhoods of each neighbour
    listed = np.any(back == np.arange(n)[:, None, None], axis=2)
    return ~np.all(listed, axis=1)


def cull_outliers(cloud: PointCloud, k: int = 12) -> tuple[PointCloud, np.ndarray]:
    """Drop points whose k-neighbourhood relation is not mutual.

    A point is an outlier when some point in its neighbourhood does not have
    it as a neighbour in return. The test runs once over the input cloud; it
    is not repeated on the survivors.

    Returns:
        The surviving cloud (input order preserved) and the removed indices.
    """
    if len(cloud) <= k:
        raise ValueError(f"cloud of {len(cloud)} points is too small for k={k}")
    nbrs = SpatialIndex(cloud.points).neighbors_of_members(k)
    outliers = mutual_knn_outliers(nbrs)
    if outliers.all():
        raise DegenerateCloudError("degenerate cloud: no mutual neighbors")
    return cloud.subset(np.flatnonzero(~outliers)), np.flatnonzero(outliers)


def farthest_point_order(points: np.ndarray, m: int) -> np.ndarray:
    """Indices of ``m`` farthest-point samples, seeded at the point nearest the centroid."""
    pts = np.asarray(points, dtype=np.float64)
    centroid = pts.mean(axis=0)
    seed = int(np.argmin(np.sum((pts - centroid) ** 2, axis=1)))
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = seed
    mind = np.sum((pts - pts[seed]) ** 2, axis=1)
    for i in range(1, m):
        # argmax returns the first maximum, i.e. the lowest index on ties
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1), out=mind)
    return chosen


def resample(cloud: PointCloud, m: int) -> PointCloud:
    """Reduce ``cloud`` to ``m`` points by farthest-point sampling.

    Clouds with at most ``m`` points are returned unchanged. The output keeps
    selection order and only contains input points.
    """
    if m < 1:
        raise ValueError("target count must be positive")
    if len(cloud) <= m:
        return cloud
    return cloud.subset(farthest_point_order(cloud.points, m))


def to_preshape(cloud: PointCloud, source_indices=None) -> PreShape:
    """Remove translation and scale: rows are ``(x - centroid) / ||X - centroid||_F``."""
    pts = cloud.points
    if len(pts) < 2:
        raise DegenerateCloudError("need at least two points for a pre-shape")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.sqrt(np.sum(centered**2)))
    if scale == 0.0:
        raise DegenerateCloudError("zero shape scale")
    if source_indices is None:
        source_indices = np.arange(len(pts))
    return PreShape(centered / scale, centroid, scale, np.asarray(source_indices, dtype=np.intp))
