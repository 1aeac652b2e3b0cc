"""Core geometric types and kernels shared by every stage of the pipeline."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ORTHO_TOL = 1e-9


class InsufficientPointsError(ValueError):
    """Raised when a neighbourhood query asks for more points than exist."""


def as_points(points) -> np.ndarray:
    """Coerce ``points`` to a finite ``(n, 3)`` float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array of points, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point coordinates must be finite")
    return arr


def check_rotation(matrix, tol: float = ORTHO_TOL) -> np.ndarray:
    """Validate ``matrix`` as an element of SO(3) and return it as an array.

    Raises:
        ValueError: if the matrix is not 3x3, not orthonormal, or a reflection.
    """
    rot = np.asarray(matrix, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rot.shape}")
    if not np.all(np.isfinite(rot)):
        raise ValueError("rotation entries must be finite")
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > tol:
        raise ValueError("matrix is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > tol:
        raise ValueError("matrix determinant is not +1")
    return rot


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_zyx(ax: float, ay: float, az: float) -> np.ndarray:
    """Rotation ``Rz(az) @ Ry(ay) @ Rx(ax)``."""
    return rot_z(az) @ rot_y(ay) @ rot_x(ax)


def rotation_angle(rot) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    cos = (np.trace(np.asarray(rot)) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Unordered 3D points with optional per-point unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = as_points(self.points)
        if len(pts) < 1:
            raise ValueError("a point cloud needs at least one point")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals must align index-wise with points")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, indices) -> PointCloud:
        idx = np.asarray(indices, dtype=np.intp)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """``p -> scale * rotation @ p + translation``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> SimilarityTransform:
        """Decompose a 4x4 homogeneous similarity matrix."""
        mat = np.asarray(matrix, dtype=np.float64)
        linear = mat[:3, :3]
        scale = float(np.cbrt(np.linalg.det(linear)))
        return cls(scale, linear / scale, mat[:3, 3])

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.scale * self.rotation
        mat[:3, 3] = self.translation
        return mat

    def apply_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation

    def compose(self, inner: SimilarityTransform) -> SimilarityTransform:
        """Return ``self o inner`` (``inner`` is applied first)."""
        return SimilarityTransform(
            self.scale * inner.scale,
            self.rotation @ inner.rotation,
            self.scale * self.rotation @ inner.translation + self.translation,
        )

    def inverse(self) -> SimilarityTransform:
        rot_t = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rot_t, -(rot_t @ self.translation) / self.scale)


def apply_transform(transform: SimilarityTransform, cloud: PointCloud) -> PointCloud:
    """Map every point by the similarity transform; normals are rotated only."""
    points = transform.apply_points(cloud.points)
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ transform.rotation.T
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(points, normals)


class SpatialIndex:
    """Static k-nearest-neighbour index over a fixed point set.

    Results are exact and ties are broken by ascending point index, so the
    answer matches an exhaustive scan regardless of tree layout. Queries are
    read-only and may be issued from several threads at once.
    """

    _MARGIN = 4

    def __init__(self, points):
        self.points = as_points(points)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries, k: int, exclude=None) -> np.ndarray:
        """Indices of the ``k`` nearest points to each query.

        Args:
            queries: ``(q, 3)`` query coordinates.
            k: neighbours per query.
            exclude: optional length-``q`` array of point indices to leave out
                of the corresponding query's result (``-1`` for none).

        Returns:
            ``(q, k)`` integer array sorted by (distance, index).
        """
        queries = as_points(queries)
        n = len(self.points)
        if exclude is None:
            exclude = np.full(len(queries), -1, dtype=np.intp)
        exclude = np.asarray(exclude, dtype=np.intp)
        available = n - (exclude >= 0).astype(int)
        if k < 1 or np.any(k > available):
            raise InsufficientPointsError(f"insufficient points: k={k} but only {available.min()} available")
        if len(queries) == 0:
            return np.empty((0, k), dtype=np.intp)

        kk = min(n, k + 1 + self._MARGIN)
        _, cand = self._tree.query(queries, k=kk)
        cand = np.asarray(cand, dtype=np.intp).reshape(len(queries), kk)
        d2 = np.sum((self.points[cand] - queries[:, None, :]) ** 2, axis=2)
        d2[cand == exclude[:, None]] = np.inf
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        out = cand[:, :k].copy()
        if kk < n:
            # A tie straddling the candidate boundary could hide a lower index.
            last = np.where(np.isinf(d2[:, -1]), d2[:, -2], d2[:, -1])
            for qi in np.flatnonzero(d2[:, k - 1] >= last):
                out[qi] = brute_force_knn(self.points, queries[qi], k, exclude[qi])
        return out

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Distance to and index of the closest member for each query."""
        dist, idx = self._tree.query(as_points(queries), k=1)
        return np.asarray(dist, dtype=np.float64), np.asarray(idx, dtype=np.intp)

    def neighbors_of_members(self, k: int) -> np.ndarray:
        """k-NN table for every member point, excluding the point itself."""
        return self.query(self.points, k, exclude=np.arange(len(self.points)))


def brute_force_knn(points, query, k: int, exclude: int = -1) -> np.ndarray:
    """Exhaustive k-NN scan with (distance, index) ordering."""
    pts = np.asarray(points, dtype=np.float64)
    d2 = np.sum((pts - np.asarray(query, dtype=np.float64)) ** 2, axis=1)
    idx = np.arange(len(pts))
    if exclude >= 0:
        keep = idx != exclude
        idx, d2 = idx[keep], d2[keep]
    if k > len(idx):
        raise InsufficientPointsError(f"insufficient points: k={k} but only {len(idx)} available")
    order = np.lexsort((idx, d2))
    return idx[order[:k]]


def knn(cloud: PointCloud, query, k: int, index: SpatialIndex | None = None) -> np.ndarray:
    """Indices of the ``k`` points of ``cloud`` nearest to ``query``.

    If ``query`` coincides exactly with a member of the cloud, the first such
    member is excluded from its own neighbourhood.
    """
    q = as_points(query)[0]
    hits = np.flatnonzero(np.all(cloud.points == q, axis=1))
    exclude = int(hits[0]) if len(hits) else -1
    if index is None:
        index = SpatialIndex(cloud.points)
    return index.query(q[None, :], k, exclude=np.array([exclude]))[0]


@dataclass(frozen=True, eq=False)
class PcaFrame:
    """Centroid plus principal axes ``u, v, w`` with descending eigenvalues."""

    mean: np.ndarray
    axes: np.ndarray  # rows are u, v, w
    eigenvalues: np.ndarray

    @property
    def u(self) -> np.ndarray:
        return self.axes[0]

    @property
    def v(self) -> np.ndarray:
        return self.axes[1]

    @property
    def w(self) -> np.ndarray:
        return self.axes[2]


def _fix_sign(vec: np.ndarray) -> np.ndarray:
    s = vec.sum()
    if s == 0.0:
        nz = np.flatnonzero(vec)
        s = vec[nz[0]] if len(nz) else 1.0
    return vec if s > 0 else -vec


def pca(points) -> PcaFrame:
    """Principal component frame of a point set.

    Each eigenvector is oriented to have a non-negative dot product with
    ``(1, 1, 1)``; an exact zero falls back to the first non-zero component
    being positive.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty point set")
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / len(pts)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals[::-1], 0.0, None)
    axes = np.array([_fix_sign(vecs[:, i]) for i in (2, 1, 0)])
    return PcaFrame(mean, axes, vals)


def _batched_plane_normals(neigh: np.ndarray):
    """Centroids, smallest-eigenvalue normals and covariance traces of ``(n, k, 3)`` neighbourhoods."""
    centroid = neigh.mean(axis=1)
    centered = neigh - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / neigh.shape[1]
    _, vecs = np.linalg.eigh(cov)
    return centroid, vecs[:, :, 0], np.trace(cov, axis1=1, axis2=2)


def orient_normals(points: np.ndarray, normals: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Make normal orientation consistent by breadth-first propagation.

    Each connected component of the symmetrised k-NN graph is seeded at its
    highest-z point, whose normal is turned to +z; every other normal is
    flipped to agree with the normal of the node that discovered it.
    """
    n = len(points)
    adj: list[set[int]] = [set() for _ in range(n)]
    for i, row in enumerate(neighbors):
        for j in row:
            adj[i].add(int(j))
            adj[int(j)].add(i)
    out = normals.copy()
    visited = np.zeros(n, dtype=bool)
    for start in np.lexsort((np.arange(n), -points[:, 2])):
        if visited[start]:
            continue
        if out[start, 2] < 0:
            out[start] = -out[start]
        visited[start] = True
        queue = deque([int(start)])
        while queue:
            i = queue.popleft()
            for j in sorted(adj[i]):
                if not visited[j]:
                    if out[j] @ out[i] < 0:
                        out[j] = -out[j]
                    visited[j] = True
                    queue.append(j)
    return out


def estimate_normals(cloud: PointCloud, k: int = 12, index: SpatialIndex | None = None) -> PointCloud:
    """Return a copy of ``cloud`` with PCA normals over each point and its k neighbours."""
    if len(cloud) <= k:
        raise InsufficientPointsError(f"insufficient points: need more than k={k}")
    index = index or SpatialIndex(cloud.points)
    nbrs = index.neighbors_of_members(k)
    hood = np.concatenate([cloud.points[:, None, :], cloud.points[nbrs]], axis=1)
    _, normals, _ = _batched_plane_normals(hood)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    normals = orient_normals(cloud.points, normals, nbrs)
    return PointCloud(cloud.points, normals)
