"""Exhaustive pose search over candidate rotations and centre offsets.

Every (rotation, offset) pair is scored by re-binning the source's
representative rows in the candidate pose and measuring them against the
template profile. Scores for one offset and the whole rotation set are
computed together with array operations, and offsets are distributed over a
thread pool. Each candidate's score depends only on its own inputs, so the
argmin is the same for any worker count.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import PcaFrame, SimilarityTransform, check_rotation, euler_zyx, pca
from .measurement import MIN_PAIRS, LocalAlignment, combined_measure
from .partition import (
    CellSamples,
    PartitionLayout,
    PartitionProfile,
    best_per_cell,
    cell_ids,
)
from .preprocess import PreShape

logger = logging.getLogger(__name__)


TIE_TOLERANCE = 1e-12


class RegistrationFailed(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CandidateGrid:
    rotations: np.ndarray  # (rotation_steps**3, 3, 3)
    translations: np.ndarray  # (translation_steps**3, 3), source pre-shape units
    rotation_steps: int = 12
    translation_steps: int = 5
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))  # PCA axes u, v, w as rows
    offset_step: float = 0.0  # spacing of the offset coefficients
    offset_bound: float = 0.0  # largest allowed |coefficient| along any axis

    @property
    def size(self) -> int:
        return len(self.rotations) * len(self.translations)

    def rotation_index(self, nx: int, ny: int, nz: int) -> int:
        s = self.rotation_steps
        return (nx * s + ny) * s + nz

    def translation_index(self, nu: int, nv: int, nw: int) -> int:
        s = self.translation_steps
        return (nu * s + nv) * s + nw


@dataclass(frozen=True)
class SearchConfig:
    use_features: bool = True
    workers: int = 0  # 0 -> os.cpu_count()
    # "profile": the source's own representative rows; "full": every row
    contour_pool: str = "profile"

    def __post_init__(self):
        if self.contour_pool not in ("profile", "full"):
            raise ValueError(f"unknown contour pool {self.contour_pool!r}")

    def worker_count(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True, eq=False)
class SearchResult:
    best_measure: float
    best_rotation_index: int
    best_translation_index: int
    rotation: np.ndarray  # O_f
    translation: np.ndarray  # S_i
    local_rotation: np.ndarray  # O_r
    local_scale: float
    evaluations: int
    alignment: LocalAlignment = field(repr=False, default=None)
    pose_norm: float = 1.0
    measures: np.ndarray | None = field(repr=False, default=None)
    contour_measures: np.ndarray | None = field(repr=False, default=None)


def build_rotation_grid(steps: int = 12) -> np.ndarray:
    """``Rz(nz t) Ry(ny t) Rx(nx t)`` for ``t = 2 pi / steps``, lexicographic in (nx, ny, nz)."""
    if steps < 1:
        raise ValueError("steps must be positive")
    theta = 2 * np.pi / steps
    grid = np.empty((steps**3, 3, 3))
    i = 0
    for nx in range(steps):
        for ny in range(steps):
            for nz in range(steps):
                grid[i] = euler_zyx(nx * theta, ny * theta, nz * theta)
                i += 1
    return grid


def principal_extent(rows: np.ndarray, frame: PcaFrame) -> float:
    proj = (np.asarray(rows) - frame.mean) @ frame.u
    return float(proj.max() - proj.min())


def build_translation_grid(frame: PcaFrame, steps: int = 5, extent: float = 1.0) -> np.ndarray:
    """Centre offsets along the PCA axes, each coefficient within ``+-extent/4``.

    ``extent`` is the length of the source pre-shape along its first
    principal axis. Offsets are enumerated lexicographically in (u, v, w).
    """
    if steps < 1 or steps % 2 == 0:
        raise ValueError("zero offset must be a grid member: steps must be odd")
    if steps == 1:
        coeffs = np.zeros(1)
    else:
        coeffs = -extent / 4 + np.arange(steps) * (extent / 2) / (steps - 1)
        coeffs[steps // 2] = 0.0
    cu, cv, cw = np.meshgrid(coeffs, coeffs, coeffs, indexing="ij")
    c = np.stack([cu.ravel(), cv.ravel(), cw.ravel()], axis=1)
    return c @ frame.axes


def build_grid(source: PreShape, rotation_steps: int = 12, translation_steps: int = 5) -> CandidateGrid:
    frame = pca(source.rows)
    extent = principal_extent(source.rows, frame)
    spacing = extent / 2 / (translation_steps - 1) if translation_steps > 1 else extent / 4
    return CandidateGrid(
        build_rotation_grid(rotation_steps),
        build_translation_grid(frame, translation_steps, extent),
        rotation_steps,
        translation_steps,
        frame.axes,
        spacing,
        extent / 4,
    )


@dataclass(frozen=True, eq=False)
class SourceModel:
    """Search-time view of the source: pre-shape rows plus representative pools."""

    shape: PreShape
    contour_rows: np.ndarray
    feature_rows: np.ndarray  # sorted by descending plane distance
    feature_scores: np.ndarray


def make_source_model(
    shape: PreShape,
    profile: PartitionProfile,
    scores: np.ndarray | None,
    candidates: np.ndarray | None,
    cfg: SearchConfig,
) -> SourceModel:
    if cfg.contour_pool == "full":
        contour_rows = np.arange(len(shape))
    else:
        contour_rows = np.sort(profile.contour.rows)
    if cfg.use_features and scores is not None and candidates is not None and len(candidates):
        cand = np.asarray(candidates)
        order = np.lexsort((cand, -scores[cand]))
        feature_rows = cand[order]
        feature_scores = scores[feature_rows]
    else:
        feature_rows = np.empty(0, np.intp)
        feature_scores = np.empty(0)
    return SourceModel(shape, contour_rows, feature_rows, feature_scores)


def _dense(samples: CellSamples, n_cells: int):
    pts = np.zeros((n_cells, 3))
    mask = np.zeros(n_cells, dtype=bool)
    pts[samples.cells] = samples.points
    mask[samples.cells] = True
    return pts, mask


def _rotate(rotations: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """``rotations[n] @ pts[p]`` for all n, p as an ``(N, P, 3)`` array."""
    return np.matmul(pts[None], rotations.transpose(0, 2, 1))


def _representatives(posed: np.ndarray, layout: PartitionLayout):
    """First pool row (in pool order) landing in each cell, per rotation.

    Returns the ``(N, K, 3)`` representative points and the ``(N, K)`` mask.
    """
    n_rot, n_pool, _ = posed.shape
    n_cells = layout.n_cells
    cells = cell_ids(posed, layout)
    flat = cells + (np.arange(n_rot) * n_cells)[:, None]
    first = np.full(n_rot * n_cells, n_pool, dtype=np.intp)
    np.minimum.at(first, flat.ravel(), np.broadcast_to(np.arange(n_pool), (n_rot, n_pool)).ravel())
    first = first.reshape(n_rot, n_cells)
    mask = first < n_pool
    reps = posed[np.arange(n_rot)[:, None], np.minimum(first, n_pool - 1)]
    return reps, mask


def _batched_alignment(tmpl_pts, tmpl_mask, reps, rep_mask, full: bool):
    """Masked similarity Procrustes between a fixed template and N candidate sample sets."""
    w = (rep_mask & tmpl_mask[None, :]).astype(np.float64)
    count = w.sum(axis=1)
    safe = np.maximum(count, 1.0)[:, None]
    ca = (w @ tmpl_pts) / safe
    cb = np.matmul(w[:, None, :], reps)[:, 0, :] / safe
    ac = (tmpl_pts[None] - ca[:, None, :]) * w[..., None]
    bc = (reps - cb[:, None, :]) * w[..., None]
    sa = np.sqrt(np.einsum("nki,nki->n", ac, ac))
    sb = np.sqrt(np.einsum("nki,nki->n", bc, bc))
    ok = (count >= MIN_PAIRS) & (sa > 0) & (sb > 0)
    denom = np.where(ok, sa * sb, 1.0)
    cross = np.matmul(ac.transpose(0, 2, 1), bc) / denom[:, None, None]
    u, s, vt = np.linalg.svd(cross)
    d = np.where(np.linalg.det(u @ vt) >= 0, 1.0, -1.0)
    trace = s[:, 0] + s[:, 1] + d * s[:, 2]
    ok &= s[:, 0] > 0
    measure = np.where(ok, np.arccos(np.clip(trace, -1.0, 1.0)), np.pi)
    if not full:
        return measure, ok
    u = u.copy()
    u[:, :, 2] *= d[:, None]
    rot = u @ vt
    scale = np.where(ok, sa / np.where(sb > 0, sb, 1.0), 1.0)
    return measure, ok, rot, scale, ca, cb, count.astype(np.intp)


class CandidateScorer:
    """Scores candidate poses of a source against a fixed template profile."""

    def __init__(self, template: PartitionProfile, source: SourceModel, layout: PartitionLayout):
        self.layout = layout
        self.source = source
        self.t_contour = _dense(template.contour, layout.n_cells)
        self.t_features = _dense(template.features, layout.n_cells)
        self._use_features = len(source.feature_rows) > 0 and len(template.features) >= MIN_PAIRS

    def _contour_pool(self, offset: np.ndarray):
        rows = self.source.shape.rows[self.source.contour_rows] - offset
        norms = np.sqrt(np.sum(rows * rows, axis=1))
        order = np.lexsort((self.source.contour_rows, -norms))
        return rows[order]

    def score(self, rotations: np.ndarray, offset: np.ndarray, full: bool = False, with_contour: bool = False):
        """Combined measure for each rotation at one centre offset.

        With ``full`` also returns the contour alignment arrays; with
        ``with_contour`` returns the pair (combined, contour-only) instead.
        """
        pool = self._contour_pool(offset)
        reps, mask = _representatives(_rotate(rotations, pool), self.layout)
        contour = _batched_alignment(*self.t_contour, reps, mask, full)
        measure = contour[0]
        if self._use_features:
            fpool = self.source.shape.rows[self.source.feature_rows] - offset
            freps, fmask = _representatives(_rotate(rotations, fpool), self.layout)
            fmeasure, fok = _batched_alignment(*self.t_features, freps, fmask, False)
            measure = np.where(fok & contour[1], np.maximum(measure, fmeasure), measure)
        if with_contour:
            return measure, contour[0]
        if not full:
            return measure
        return (measure,) + tuple(contour[1:])

    def pose_norm(self, offset: np.ndarray) -> float:
        return float(np.sqrt(np.sum((self.source.shape.rows - offset) ** 2)))


def evaluate_candidate(
    template_shape: PreShape,
    template_profile: PartitionProfile,
    source: SourceModel,
    rotation,
    offset,
    layout: PartitionLayout,
) -> tuple[float, LocalAlignment]:
    """Score one candidate pose through the scalar partition/measurement path.

    The posed rows are ``R (rows - offset)`` divided by their Frobenius norm,
    without re-centring. Representatives are re-selected among the source's
    pooled rows after binning in the new pose.
    """
    rotation = check_rotation(rotation)
    shifted = source.shape.rows - np.asarray(offset)
    posed = shifted @ rotation.T
    posed /= np.sqrt(np.sum(posed**2))
    crow = source.contour_rows
    cells, rows = best_per_cell(cell_ids(posed[crow], layout), np.linalg.norm(posed[crow], axis=1), crow)
    contour = CellSamples(cells, rows, posed[rows])
    features = CellSamples.empty()
    if len(source.feature_rows):
        frow = source.feature_rows
        cells, rows = best_per_cell(cell_ids(posed[frow], layout), source.feature_scores, frow)
        features = CellSamples(cells, rows, posed[rows])
    profile = PartitionProfile(contour, features, layout)
    return combined_measure(template_shape, template_profile, None, profile)


def global_search(
    template_profile: PartitionProfile,
    source: SourceModel,
    grid: CandidateGrid,
    layout: PartitionLayout,
    cfg: SearchConfig | None = None,
) -> SearchResult:
    """Evaluate every candidate pose and return the minimum-measure one.

    Measures within ``TIE_TOLERANCE`` of the minimum are ties, resolved toward
    the smallest (translation index, rotation index).

    Raises:
        RegistrationFailed: if no candidate has enough shared cells.
    """
    cfg = cfg or SearchConfig()
    scorer = CandidateScorer(template_profile, source, layout)
    n_t = len(grid.translations)
    measures = np.empty((n_t, len(grid.rotations)))
    contour = np.empty_like(measures)

    def run(ti: int):
        measures[ti], contour[ti] = scorer.score(grid.rotations, grid.translations[ti], with_contour=True)

    workers = cfg.worker_count()
    if workers == 1:
        for ti in range(n_t):
            run(ti)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(n_t)))

    flat = measures.ravel()
    # measures this close are float noise apart; index order decides
    best = int(np.flatnonzero(flat <= flat.min() + TIE_TOLERANCE)[0])
    if not flat[best] < np.pi:
        raise RegistrationFailed("registration failed: no valid correspondence")
    ti, ri = divmod(best, len(grid.rotations))
    logger.debug("best candidate t=%d r=%d measure=%.6g", ti, ri, flat[best])
    res = _result_at(scorer, grid.rotations[ri], grid.translations[ti], ri, ti, flat.size, measures)
    return dataclasses.replace(res, contour_measures=contour)


def rescore(template_profile: PartitionProfile, source: SourceModel, layout: PartitionLayout, result: SearchResult):
    """The same pose as ``result``, measured and aligned under another source model."""
    scorer = CandidateScorer(template_profile, source, layout)
    res = _result_at(
        scorer,
        result.rotation,
        result.translation,
        result.best_rotation_index,
        result.best_translation_index,
        result.evaluations,
        result.measures,
    )
    return dataclasses.replace(res, contour_measures=result.contour_measures)


def _result_at(scorer, rotation, offset, ri, ti, evaluations, measures=None) -> SearchResult:
    m, _, o_r, scale, ca, cb, count = scorer.score(rotation[None], offset, full=True)
    nrm = scorer.pose_norm(offset)
    # template samples are unit-norm rows already; posed source samples are not
    local_scale = float(scale[0] * nrm)
    align = LocalAlignment(float(m[0]), o_r[0], local_scale, int(count[0]), ca[0], cb[0] / nrm)
    return SearchResult(
        best_measure=float(m[0]),
        best_rotation_index=ri,
        best_translation_index=ti,
        rotation=np.array(rotation, dtype=np.float64),
        translation=np.array(offset, dtype=np.float64),
        local_rotation=o_r[0],
        local_scale=local_scale,
        evaluations=evaluations,
        alignment=align,
        pose_norm=nrm,
        measures=measures,
    )


def local_rotation_grid(half_width: float, steps: int) -> np.ndarray:
    """Small Euler-angle perturbations in ``[-half_width, half_width]^3``; identity first."""
    angles = np.linspace(-half_width, half_width, steps)
    grid = [np.eye(3)]
    for ax in angles:
        for ay in angles:
            for az in angles:
                if ax == 0 and ay == 0 and az == 0:
                    continue
                grid.append(euler_zyx(ax, ay, az))
    return np.array(grid)


def distinct_candidates(measures: np.ndarray, rotations: np.ndarray, count: int, min_angle: float):
    """Up to ``count`` (translation, rotation) index pairs in ascending measure.

    A candidate is skipped when its rotation lies within ``min_angle`` of an
    already selected one, so each pick seeds a different basin.
    """
    n_rot = measures.shape[1]
    order = np.argsort(measures, axis=None, kind="stable")
    picked: list[tuple[int, int]] = []
    cos_limit = 1 + 2 * np.cos(min_angle)
    for flat in order:
        if len(picked) >= count or not measures.flat[flat] < np.pi:
            break
        ti, ri = divmod(int(flat), n_rot)
        rot = rotations[ri]
        if any(np.sum(rotations[pr] * rot) > cos_limit for _, pr in picked):
            continue
        picked.append((ti, ri))
    return picked


def refine_pose(
    template_profile: PartitionProfile,
    source: SourceModel,
    result: SearchResult,
    layout: PartitionLayout,
    half_width: float,
    levels: int = 6,
    steps: int = 5,
    axes: np.ndarray | None = None,
    offset_step: float = 0.0,
    offset_bound: float = np.inf,
    max_rounds: int = 40,
) -> SearchResult:
    """Pattern search on the pose around a grid candidate.

    Each round scores ``steps**3`` Euler perturbations of the current
    rotation within ``+-half_width``, then the 26 neighbouring centre offsets
    at ``+-offset_step`` along ``axes``, kept within ``+-offset_bound`` per
    axis like the offset grid itself. A width is halved only when its sweep
    fails to improve, and the search stops once both have been halved
    ``levels`` times. The incumbent always competes, so the measure never
    increases.
    """
    scorer = CandidateScorer(template_profile, source, layout)
    rotation = result.rotation
    offset = result.translation
    current = float(scorer.score(rotation[None], offset)[0])
    evaluations = result.evaluations
    moves = []
    if axes is not None and offset_step > 0:
        grid = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), -1).reshape(-1, 3)
        moves = [m @ axes for m in grid if np.any(m)]
    width, step = half_width, offset_step
    rot_halvings = 0
    off_halvings = 0 if moves else levels
    for _ in range(max_rounds):
        if rot_halvings >= levels and off_halvings >= levels:
            break
        if rot_halvings < levels:
            cands = local_rotation_grid(width, steps) @ rotation
            scores = scorer.score(cands, offset)
            evaluations += len(cands)
            best = int(np.argmin(scores))
            if scores[best] < current:
                current, rotation = float(scores[best]), cands[best]
            else:
                width /= 2
                rot_halvings += 1
        if off_halvings < levels:
            centre, improved = offset, False
            for move in moves:
                trial = centre + step * move
                if np.any(np.abs(axes @ trial) > offset_bound * (1 + 1e-12)):
                    continue
                score = float(scorer.score(rotation[None], trial)[0])
                evaluations += 1
                if score < current:
                    current, offset, improved = score, trial, True
            if not improved:
                step /= 2
                off_halvings += 1
    return _result_at(
        scorer,
        rotation,
        offset,
        result.best_rotation_index,
        result.best_translation_index,
        evaluations,
        result.measures,
    )


def compose_final_transform(template: PreShape, source: PreShape, result: SearchResult) -> SimilarityTransform:
    """Flatten the pipeline into one source-to-template similarity in model units.

    Chain: normalise the source, shift its centre by ``-S_i``, rotate by
    ``O_f``, divide by the posed norm, align the matched contour samples
    (rotation ``O_r`` about their centroids with the local scale), and
    de-normalise into the template frame.
    """
    align = result.alignment
    rot = result.local_rotation @ result.rotation
    k = template.scale * result.local_scale / result.pose_norm
    scale = k / source.scale
    # a = ca + ls * O_r (O_f (r - S) / nrm - cb);  x_t = centroid_t + s_t * a
    translation = (
        template.centroid
        + template.scale * align.centroid_a
        - template.scale * result.local_scale * (result.local_rotation @ align.centroid_b)
        - k * (rot @ result.translation)
        - scale * (rot @ source.centroid)
    )
    return SimilarityTransform(scale, rot, translation)
