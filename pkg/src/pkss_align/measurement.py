"""Shape distance between pre-shapes with an optimal local rotation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .partition import InsufficientCorrespondence, PartitionProfile, matched_pairs
from .preprocess import PreShape

MIN_PAIRS = 4


class DegenerateCorrespondence(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LocalAlignment:
    """Result of aligning two row-matched sample sets.

    ``rotation`` maps centred B samples onto centred A samples,
    ``scale`` is ``s(A) / s(B)``, and the centroids let callers rebuild the
    full similarity ``a ~ centroid_a + scale * rotation @ (b - centroid_b)``.
    """

    measure: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    scale: float = 1.0
    matched_count: int = 0
    centroid_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    centroid_b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def valid(self) -> bool:
        return self.matched_count >= MIN_PAIRS and self.measure < np.pi


INVALID = LocalAlignment(np.pi)


def solve_local_rotation(a, b) -> tuple[np.ndarray, float]:
    """Rotation ``R`` in SO(3) maximising ``<A, B R^T>`` for row-aligned A, B.

    With ``A^T B = U S V^T`` the maximiser is ``U diag(1, 1, d) V^T`` where
    ``d = sign(det(U V^T))``, and the attained inner product is
    ``s1 + s2 + d * s3``.

    Raises:
        DegenerateCorrespondence: if ``A^T B`` vanishes.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError("A and B must be row-aligned (k, 3) arrays")
    cross = a.T @ b
    u, s, vt = np.linalg.svd(cross)
    if s[0] <= 0.0:
        raise DegenerateCorrespondence("degenerate correspondence")
    d = 1.0 if np.linalg.det(u @ vt) >= 0 else -1.0
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    return rot, float(s[0] + s[1] + d * s[2])


def _normalise(samples: np.ndarray):
    centroid = samples.mean(axis=0)
    centered = samples - centroid
    size = float(np.sqrt(np.sum(centered**2)))
    if size == 0.0:
        raise DegenerateCorrespondence("degenerate correspondence: samples coincide")
    return centered / size, centroid, size


def measure_pair(samp_a, samp_b) -> LocalAlignment:
    """Shape distance ``arccos <A~, R B~>`` between two matched sample sets.

    Both sets are re-centred and re-scaled to unit Frobenius norm first, so
    the result is invariant to a similarity transform of either set.
    Fewer than four pairs yields the sentinel distance ``pi``.
    """
    samp_a = np.asarray(samp_a, dtype=np.float64)
    samp_b = np.asarray(samp_b, dtype=np.float64)
    if len(samp_a) != len(samp_b):
        raise ValueError("sample sets must have equal length")
    if len(samp_a) < MIN_PAIRS:
        return INVALID
    a, ca, sa = _normalise(samp_a)
    b, cb, sb = _normalise(samp_b)
    rot, trace = solve_local_rotation(a, b)
    measure = float(np.arccos(np.clip(trace, -1.0, 1.0)))
    return LocalAlignment(measure, rot, sa / sb, len(samp_a), ca, cb)


def combined_measure(
    shape_a: PreShape | None,
    profile_a: PartitionProfile,
    shape_b: PreShape | None,
    profile_b: PartitionProfile,
) -> tuple[float, LocalAlignment]:
    """Larger of the contour and feature distances, plus the contour alignment.

    The feature term only participates when at least four feature cells are
    shared. If the contour sets share fewer than four cells the result is
    ``(pi, INVALID)``.
    """
    try:
        pa, pb = matched_pairs(profile_a, profile_b, "contour")
    except InsufficientCorrespondence:
        return float(np.pi), INVALID
    contour = measure_pair(pa, pb)
    g = contour.measure
    try:
        fa, fb = matched_pairs(profile_a, profile_b, "features")
    except InsufficientCorrespondence:
        return g, contour
    try:
        feat = measure_pair(fa, fb)
    except DegenerateCorrespondence:
        return g, contour
    return max(g, feat.measure), contour
