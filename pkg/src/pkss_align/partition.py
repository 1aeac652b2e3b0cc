"""Spherical partition of a pre-shape and per-cell representative samples.

The unit ball around the pre-shape centre is cut into azimuth x elevation
cells. Each cell contributes at most one contour sample (the row farthest
from the centre) and at most one feature sample (the row with the largest
distance to its local PCA plane). Cells with the same id in two clouds are
treated as corresponding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, SpatialIndex, _batched_plane_normals
from .preprocess import PreShape

MIN_MATCHED_CELLS = 4


class InsufficientCorrespondence(ValueError):
    pass


@dataclass(frozen=True)
class PartitionLayout:
    azimuth_bins: int = 12
    elevation_bins: int = 6

    def __post_init__(self):
        if self.azimuth_bins < 1 or self.elevation_bins < 1:
            raise ValueError("bin counts must be positive")

    @property
    def n_cells(self) -> int:
        return self.azimuth_bins * self.elevation_bins

    def cell_id(self, azimuth_bin, elevation_bin):
        return np.asarray(azimuth_bin) * self.elevation_bins + np.asarray(elevation_bin)

    def split(self, cell_id):
        return np.divmod(np.asarray(cell_id), self.elevation_bins)


@dataclass(frozen=True)
class FeatureConfig:
    pca_k: int = 12
    feature_fraction: float = 0.15

    def __post_init__(self):
        if not 0 < self.feature_fraction <= 1:
            raise ValueError("feature_fraction must lie in (0, 1]")
        if self.pca_k < 3:
            raise ValueError("pca_k must be at least 3")


@dataclass(frozen=True, eq=False)
class CellSamples:
    """One sample per occupied cell, sorted by cell id."""

    cells: np.ndarray
    rows: np.ndarray
    points: np.ndarray

    @classmethod
    def empty(cls) -> CellSamples:
        return cls(np.empty(0, np.intp), np.empty(0, np.intp), np.empty((0, 3)))

    def __len__(self) -> int:
        return len(self.cells)

    def as_dict(self) -> dict[int, tuple[int, np.ndarray]]:
        return {int(c): (int(r), p) for c, r, p in zip(self.cells, self.rows, self.points)}


@dataclass(frozen=True, eq=False)
class PartitionProfile:
    contour: CellSamples
    features: CellSamples = field(default_factory=CellSamples.empty)
    layout: PartitionLayout = field(default_factory=PartitionLayout)


def cell_ids(rows, layout: PartitionLayout) -> np.ndarray:
    """Cell id of every row (any leading shape, trailing axis of length 3).

    Azimuth is measured in ``[0, 2*pi)`` from +x towards +y and elevation in
    ``[0, pi]`` from +z. The origin and the poles fall in azimuth bin 0.
    """
    rows = np.asarray(rows, dtype=np.float64)
    x, y, z = rows[..., 0], rows[..., 1], rows[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    azimuth = np.arctan2(y, x)
    azimuth = np.where(azimuth < 0, azimuth + 2 * np.pi, azimuth)
    with np.errstate(invalid="ignore", divide="ignore"):
        elevation = np.arccos(np.clip(np.where(r > 0, z / r, 1.0), -1.0, 1.0))
    az_bin = np.minimum((azimuth * layout.azimuth_bins / (2 * np.pi)).astype(np.intp), layout.azimuth_bins - 1)
    el_bin = np.minimum((elevation * layout.elevation_bins / np.pi).astype(np.intp), layout.elevation_bins - 1)
    return az_bin * layout.elevation_bins + el_bin


def assign_cells(shape: PreShape, layout: PartitionLayout) -> dict[int, list[int]]:
    ids = cell_ids(shape.rows, layout)
    out: dict[int, list[int]] = {}
    for row, cell in enumerate(ids):
        out.setdefault(int(cell), []).append(row)
    return out


def best_per_cell(cells: np.ndarray, score: np.ndarray, rows: np.ndarray | None = None):
    """For each distinct cell, the row with the highest score (lowest row on ties).

    Returns ``(cells, rows)`` sorted by cell id.
    """
    cells = np.asarray(cells)
    if rows is None:
        rows = np.arange(len(cells))
    if len(cells) == 0:
        return np.empty(0, np.intp), np.empty(0, np.intp)
    order = np.lexsort((rows, -np.asarray(score), cells))
    sorted_cells = cells[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_cells[1:] != sorted_cells[:-1]
    return sorted_cells[first].astype(np.intp), np.asarray(rows)[order][first].astype(np.intp)


def _samples(shape: PreShape, cells, rows) -> CellSamples:
    return CellSamples(cells, rows, shape.rows[rows])


def extract_contour(shape: PreShape, layout: PartitionLayout) -> CellSamples:
    """Per occupied cell, the row farthest from the centre."""
    norms = np.linalg.norm(shape.rows, axis=1)
    cells, rows = best_per_cell(cell_ids(shape.rows, layout), norms)
    return _samples(shape, cells, rows)


def d_pca_all(cloud: PointCloud, k: int = 12, index: SpatialIndex | None = None) -> np.ndarray:
    """Distance of every point to the least-squares plane of its k neighbours.

    The point itself is not part of its neighbourhood. Neighbourhoods whose
    points all coincide give 0.
    """
    if len(cloud) <= k:
        raise ValueError(f"cloud of {len(cloud)} points is too small for k={k}")
    index = index or SpatialIndex(cloud.points)
    nbrs = index.neighbors_of_members(k)
    centroid, normal, spread = _batched_plane_normals(cloud.points[nbrs])
    dist = np.abs(np.einsum("ni,ni->n", cloud.points - centroid, normal))
    dist[spread == 0] = 0.0
    return dist


def d_pca(cloud: PointCloud, index: int, k: int = 12) -> float:
    return float(d_pca_all(cloud, k)[index])


def feature_candidates(scores: np.ndarray, fraction: float) -> np.ndarray:
    """Rows whose score is strictly above the ``1 - fraction`` order statistic."""
    n = len(scores)
    count = round(fraction * n)
    if count >= n:
        return np.arange(n)
    if count <= 0:
        return np.empty(0, np.intp)
    threshold = np.sort(scores)[n - count - 1]
    return np.flatnonzero(scores > threshold)


def extract_features(
    cloud: PointCloud,
    shape: PreShape,
    layout: PartitionLayout,
    cfg: FeatureConfig,
    scores: np.ndarray | None = None,
) -> CellSamples:
    """Per occupied cell, the feature candidate with the largest plane distance.

    ``cloud`` must be row-aligned with ``shape``. Precomputed plane distances
    may be passed as ``scores``.
    """
    if len(cloud) != len(shape):
        raise ValueError("cloud and pre-shape must be row-aligned")
    if scores is None:
        scores = d_pca_all(cloud, cfg.pca_k)
    cand = feature_candidates(scores, cfg.feature_fraction)
    cells, rows = best_per_cell(cell_ids(shape.rows[cand], layout), scores[cand], cand)
    return _samples(shape, cells, rows)


def build_profile(
    cloud: PointCloud,
    shape: PreShape,
    layout: PartitionLayout | None = None,
    cfg: FeatureConfig | None = None,
    scores: np.ndarray | None = None,
    use_features: bool = True,
) -> PartitionProfile:
    layout = layout or PartitionLayout()
    cfg = cfg or FeatureConfig()
    contour = extract_contour(shape, layout)
    features = extract_features(cloud, shape, layout, cfg, scores) if use_features else CellSamples.empty()
    return PartitionProfile(contour, features, layout)


def matched_pairs(a: PartitionProfile, b: PartitionProfile, which: str = "contour"):
    """Sample points of ``a`` and ``b`` from cells occupied in both, by ascending cell id.

    Raises:
        InsufficientCorrespondence: fewer than four shared cells.
    """
    if a.layout != b.layout:
        raise ValueError("profiles were built with different layouts")
    if which not in ("contour", "features"):
        raise ValueError(f"unknown sample set {which!r}")
    sa, sb = getattr(a, which), getattr(b, which)
    common, ia, ib = np.intersect1d(sa.cells, sb.cells, assume_unique=True, return_indices=True)
    if len(common) < MIN_MATCHED_CELLS:
        raise InsufficientCorrespondence(f"insufficient correspondence: {len(common)} shared cells")
    return sa.points[ia], sb.points[ib]
