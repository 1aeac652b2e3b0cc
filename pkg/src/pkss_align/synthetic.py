"""Procedural test shapes for benchmarks and acceptance runs.

Shapes are sampled uniformly (by area) from unions of primitive surfaces:
ellipsoids, boxes and capped cylinders, each with its own pose.
"""

from __future__ import annotations

import numpy as np

from .geometry import PointCloud, euler_zyx


def _sample_ellipsoid(rng, n, radii):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radii


def _ellipsoid_area(radii):
    a, b, c = radii
    p = 1.6075
    return 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def _sample_box(rng, n, half):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, size=(n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * np.asarray(half)[axis]
    return pts


def _box_area(half):
    hx, hy, hz = half
    return 8 * (hx * hy + hy * hz + hx * hz)


def _sample_cylinder(rng, n, radius, half_height):
    side = 2 * np.pi * radius * 2 * half_height
    cap = np.pi * radius**2
    kind = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(kind == 0, radius, radius * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(kind == 0, rng.uniform(-half_height, half_height, n), np.where(kind == 1, half_height, -half_height))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cylinder_area(radius, half_height):
    return 2 * np.pi * radius * 2 * half_height + 2 * np.pi * radius**2


def _random_pose(rng):
    return euler_zyx(*rng.uniform(-np.pi, np.pi, 3))


def compose_parts(rng, parts, n_points: int) -> np.ndarray:
    """Sample ``n_points`` over a list of ``(kind, params, rotation, offset)`` parts by area."""
    areas = []
    for kind, params, _, _ in parts:
        if kind == "ellipsoid":
            areas.append(_ellipsoid_area(params))
        elif kind == "box":
            areas.append(_box_area(params))
        else:
            areas.append(_cylinder_area(*params))
    areas = np.asarray(areas)
    counts = rng.multinomial(n_points, areas / areas.sum())
    chunks = []
    for (kind, params, rot, offset), cnt in zip(parts, counts):
        if kind == "ellipsoid":
            pts = _sample_ellipsoid(rng, cnt, np.asarray(params))
        elif kind == "box":
            pts = _sample_box(rng, cnt, np.asarray(params))
        else:
            pts = _sample_cylinder(rng, cnt, *params)
        chunks.append(pts @ rot.T + offset)
    return np.concatenate(chunks)


def asymmetric_shape(seed: int, n_points: int = 3000) -> PointCloud:
    """A body with several randomly posed attachments; no rotational symmetry."""
    rng = np.random.default_rng(seed)
    parts = [("ellipsoid", rng.uniform([0.8, 0.5, 0.3], [1.2, 0.8, 0.5]), np.eye(3), np.zeros(3))]
    for _ in range(int(rng.integers(2, 4))):
        kind = rng.choice(["box", "cylinder", "ellipsoid"])
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = direction * rng.uniform(0.5, 1.0)
        if kind == "box":
            params = rng.uniform(0.1, 0.35, 3)
        elif kind == "cylinder":
            params = (rng.uniform(0.08, 0.2), rng.uniform(0.2, 0.5))
        else:
            params = rng.uniform(0.15, 0.4, 3)
        parts.append((str(kind), params, _random_pose(rng), offset))
    return PointCloud(compose_parts(rng, parts, n_points))


def symmetric_contour_shape(seed: int, n_points: int = 3000) -> PointCloud:
    """A thin spherical shell enclosing asymmetric internal plates.

    Every sample has its mirror image through the origin, so the centroid is
    the shell centre and the outer contour carries no pose information; only
    the interior plates, whose edges carry large local-plane distances, fix
    the pose. Point mirroring is not a rotation, so the pose stays unique.
    """
    rng = np.random.default_rng(seed)
    parts = [("ellipsoid", np.array([1.0, 1.0, 1.0]), np.eye(3), np.zeros(3))]
    for _ in range(3):
        half = np.array([rng.uniform(0.25, 0.45), rng.uniform(0.1, 0.3), 0.01])
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        parts.append(("box", half, _random_pose(rng), direction * rng.uniform(0.2, 0.45)))
    half = compose_parts(rng, parts, n_points // 2)
    pts = np.concatenate([half, -half])
    if n_points % 2:
        pts = np.concatenate([pts, sphere_points(1, seed)])
    return PointCloud(pts)


def sphere_points(n: int, seed: int = 0, radius: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return _sample_ellipsoid(rng, n, np.full(3, radius))
