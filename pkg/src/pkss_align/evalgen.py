"""Perturbation generators and registration quality metrics.

Every generator is a pure function of its input, its spec and an integer
seed, so a corpus can be regenerated bit for bit from its records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, SimilarityTransform, SpatialIndex, apply_transform, estimate_normals, euler_zyx

GT_COS_THRESHOLD = 0.8
MSE_THRESHOLD = 1e-3
AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Metrics:
    mse: float
    mse_n: float
    gt_cos: float
    success: bool

    def to_dict(self) -> dict:
        return {"mse": self.mse, "mse_n": self.mse_n, "gt_cos": self.gt_cos, "success": self.success}


def is_success(gt_cos: float, mse: float, use_mse_condition: bool = True) -> bool:
    ok = gt_cos > GT_COS_THRESHOLD
    if use_mse_condition:
        ok = ok and mse < MSE_THRESHOLD
    return bool(ok)


@dataclass(frozen=True)
class NoiseSpec:
    """Displacement along the normal with ``sigma = r * l_k``.

    ``kind`` is ``"gaussian"`` (N(0, sigma^2)) or ``"mean"`` (U(-sigma, sigma)).
    """

    kind: str = "gaussian"
    r: float = 0.2
    k: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "mean"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.r > 0:
            raise ValueError("noise range r must be positive")
        if self.k < 1:
            raise ValueError("k must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "r": self.r, "k": self.k, "seed": self.seed}


@dataclass(frozen=True)
class BandSpec:
    """Slab layout for band decimation.

    ``origin`` and ``extent`` fix the slabs in absolute coordinates; leave
    them unset to take them from the bounding box of the cloud being cut.
    """

    bands: int = 4
    axis: str = "longest"
    origin: float | None = None
    extent: float | None = None

    def __post_init__(self):
        if self.bands < 2:
            raise ValueError("bands must be at least 2")
        if self.axis not in ("x", "y", "z", "longest"):
            raise ValueError(f"unknown axis {self.axis!r}")

    def resolve(self, cloud: PointCloud) -> BandSpec:
        """A copy with the axis and slab bounds pinned to ``cloud``."""
        lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
        axis = self.axis
        if axis == "longest":
            axis = "xyz"[int(np.argmax(hi - lo))]
        a = AXES[axis]
        origin = float(lo[a]) if self.origin is None else self.origin
        extent = float(hi[a] - lo[a]) if self.extent is None else self.extent
        return BandSpec(self.bands, axis, origin, extent)

    def to_dict(self) -> dict:
        return {"bands": self.bands, "axis": self.axis, "origin": self.origin, "extent": self.extent}


@dataclass(frozen=True, eq=False)
class PerturbationRecord:
    """Everything needed to regenerate a perturbed cloud and score a registration."""

    transform: SimilarityTransform
    noise: NoiseSpec | None = None
    defect_fraction: float | None = None
    bands: BandSpec | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        t = self.transform
        return {
            "transform": {
                "scale": t.scale,
                "rotation": t.rotation.tolist(),
                "translation": t.translation.tolist(),
                "matrix": t.as_matrix().tolist(),
            },
            "noise": None if self.noise is None else self.noise.to_dict(),
            "defect_fraction": self.defect_fraction,
            "bands": None if self.bands is None else self.bands.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> PerturbationRecord:
        t = data["transform"]
        transform = SimilarityTransform(t["scale"], np.array(t["rotation"]), np.array(t["translation"]))
        noise = None if data.get("noise") is None else NoiseSpec(**data["noise"])
        bands = None if data.get("bands") is None else BandSpec(**data["bands"])
        return cls(transform, noise, data.get("defect_fraction"), bands, int(data.get("seed", 0)))


def random_similarity(
    seed: int,
    rotation_range=(-np.pi, np.pi),
    scale_range=(0.5, 2.0),
    translation_frac: float = 0.5,
    diagonal: float = 1.0,
) -> SimilarityTransform:
    """Random similarity: Euler angles ``Rz Ry Rx`` with each angle uniform in
    ``rotation_range``, uniform scale, and a per-axis uniform translation in
    ``+-translation_frac * diagonal``."""
    rng = np.random.default_rng(seed)
    angles = rng.uniform(rotation_range[0], rotation_range[1], 3)
    scale = rng.uniform(scale_range[0], scale_range[1])
    translation = rng.uniform(-1.0, 1.0, 3) * translation_frac * diagonal
    return SimilarityTransform(float(scale), euler_zyx(*angles), translation)


def mean_knn_distance(cloud: PointCloud, k: int = 12, index: SpatialIndex | None = None) -> float:
    """``l_k``: mean distance from each point to its k nearest neighbours."""
    index = index or SpatialIndex(cloud.points)
    nbrs = index.neighbors_of_members(k)
    return float(np.mean(np.linalg.norm(cloud.points[nbrs] - cloud.points[:, None], axis=2)))


def add_noise(cloud: PointCloud, spec: NoiseSpec) -> PointCloud:
    """Displace every point along its normal by a random signed offset.

    Missing normals are estimated first; the output keeps them.
    """
    index = SpatialIndex(cloud.points)
    if not cloud.has_normals:
        cloud = estimate_normals(cloud, spec.k, index)
    sigma = spec.r * mean_knn_distance(cloud, spec.k, index)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian":
        offsets = rng.normal(0.0, sigma, len(cloud))
    else:
        offsets = rng.uniform(-sigma, sigma, len(cloud))
    return PointCloud(cloud.points + cloud.normals * offsets[:, None], cloud.normals)


def defect_indices(cloud: PointCloud, fraction: float, seed: int) -> np.ndarray:
    """Indices of the ``ceil(fraction * n)`` points nearest a random seed point."""
    if not 0 <= fraction < 1:
        raise ValueError("defect fraction must lie in [0, 1)")
    n = len(cloud)
    count = math.ceil(round(fraction * n, 9))
    if count == 0:
        return np.empty(0, np.intp)
    rng = np.random.default_rng(seed)
    centre = cloud.points[int(rng.integers(n))]
    dist = np.sum((cloud.points - centre) ** 2, axis=1)
    order = np.lexsort((np.arange(n), dist))
    return np.sort(order[:count])


def make_defect(cloud: PointCloud, fraction: float, seed: int) -> PointCloud:
    """Cut a ball-shaped hole; survivors keep their input order."""
    removed = defect_indices(cloud, fraction, seed)
    if len(removed) == 0:
        return cloud
    return cloud.subset(np.setdiff1d(np.arange(len(cloud)), removed))


def band_index(cloud: PointCloud, spec: BandSpec) -> np.ndarray:
    """Slab index of every point under a resolved spec."""
    if spec.origin is None or spec.extent is None or spec.axis == "longest":
        spec = spec.resolve(cloud)
    slabs = 2 * spec.bands
    coord = cloud.points[:, AXES[spec.axis]]
    if spec.extent <= 0:
        return np.zeros(len(cloud), np.intp)
    idx = np.floor((coord - spec.origin) * slabs / spec.extent).astype(np.intp)
    return np.clip(idx, 0, slabs - 1)


def band_decimate(cloud: PointCloud, spec: BandSpec) -> PointCloud:
    """Keep only points in even-indexed slabs along the band axis.

    Raises:
        ValueError: if no point survives.
    """
    keep = np.flatnonzero(band_index(cloud, spec) % 2 == 0)
    if len(keep) == 0:
        raise ValueError("band decimation removed every point")
    return cloud.subset(keep)


def perturb(
    cloud: PointCloud,
    seed: int,
    transform: bool = True,
    rotation_range=(-np.pi, np.pi),
    scale_range=(0.5, 2.0),
    translation_frac: float = 0.5,
    noise: NoiseSpec | None = None,
    defect_fraction: float | None = None,
    bands: BandSpec | None = None,
) -> tuple[PointCloud, PerturbationRecord]:
    """Apply transform, noise, defect and decimation in that order.

    Each stage draws from its own child of ``seed``.
    """
    t_seed, n_seed, d_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3))
    if transform:
        tg = random_similarity(t_seed, rotation_range, scale_range, translation_frac, cloud.bbox_diagonal())
    else:
        tg = SimilarityTransform.identity()
    out = apply_transform(tg, cloud)
    if noise is not None:
        noise = NoiseSpec(noise.kind, noise.r, noise.k, n_seed)
        out = add_noise(out, noise)
    if defect_fraction:
        out = make_defect(out, defect_fraction, d_seed)
    if bands is not None:
        bands = bands.resolve(out)
        out = band_decimate(out, bands)
    return out, PerturbationRecord(tg, noise, defect_fraction, bands, seed)


def mse_closest_point(aligned: PointCloud, template: PointCloud) -> float:
    """Mean squared distance from each aligned point to its nearest template point."""
    dist, _ = SpatialIndex(template.points).nearest(aligned.points)
    return float(np.mean(dist**2))


def mse_normal(aligned: PointCloud, template: PointCloud) -> float:
    """Mean of ``1 - n_s . n_t`` over aligned points, ``n_t`` from the nearest template point."""
    if not (aligned.has_normals and template.has_normals):
        raise ValueError("both clouds need normals")
    _, idx = SpatialIndex(template.points).nearest(aligned.points)
    return float(np.mean(1.0 - np.einsum("ij,ij->i", aligned.normals, template.normals[idx])))


def gt_cosine(t_g, t_r) -> float:
    """Normalised trace similarity ``tr(T_g^T T') / 3`` of two rotations."""
    return float(np.trace(np.asarray(t_g).T @ np.asarray(t_r)) / 3.0)


def compute_metrics(
    aligned: PointCloud,
    template: PointCloud,
    gt_rotation,
    recovered_rotation,
    use_mse_condition: bool = True,
) -> Metrics:
    """Score an aligned source against its template.

    ``gt_rotation`` and ``recovered_rotation`` must act in the same direction.
    Normals are estimated where missing.
    """
    mse = mse_closest_point(aligned, template)
    if not aligned.has_normals:
        aligned = estimate_normals(aligned)
    if not template.has_normals:
        template = estimate_normals(template)
    mse_n = mse_normal(aligned, template)
    gt = gt_cosine(gt_rotation, recovered_rotation)
    return Metrics(mse, mse_n, gt, is_success(gt, mse, use_mse_condition))


def registration_recall(records, use_mse_condition: bool = True) -> float:
    """Fraction of records meeting the success conditions."""
    records = list(records)
    if not records:
        raise ValueError("registration recall needs at least one record")
    return sum(is_success(m.gt_cos, m.mse, use_mse_condition) for m in records) / len(records)
