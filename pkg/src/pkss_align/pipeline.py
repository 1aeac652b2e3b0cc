"""End-to-end registration: preprocessing, profiles, global search, composition."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, SimilarityTransform
from .partition import (
    FeatureConfig,
    PartitionLayout,
    PartitionProfile,
    build_profile,
    d_pca_all,
    feature_candidates,
)
from .preprocess import PreShape, cull_outliers, farthest_point_order, to_preshape
from .search import (
    CandidateGrid,
    SearchConfig,
    SearchResult,
    build_grid,
    compose_final_transform,
    distinct_candidates,
    global_search,
    make_source_model,
    refine_pose,
    rescore,
)


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a registration run."""

    target_count: int = 3000
    rotation_steps: int = 12
    translation_steps: int = 5
    azimuth_bins: int = 12
    elevation_bins: int = 6
    feature_fraction: float = 0.15
    knn_k: int = 12
    worker_count: int = 0
    seed: int = 0
    enable_mse_condition: bool = True
    use_features: bool = True
    cull: bool = True
    contour_pool: str = "profile"
    refine_levels: int = 6
    refine_starts: int = 8
    centred_starts: int = 4
    feature_gate: float = 0.35

    def __post_init__(self):
        if self.target_count < 1 or self.rotation_steps < 1 or self.knn_k < 1:
            raise ValueError("target_count, rotation_steps and knn_k must be positive")
        if self.translation_steps < 1 or self.translation_steps % 2 == 0:
            raise ValueError("zero offset must be a grid member: translation_steps must be odd")
        if self.worker_count < 0 or min(self.refine_levels, self.refine_starts, self.centred_starts) < 0:
            raise ValueError("worker_count and refinement counts must not be negative")
        if not self.feature_gate >= 0:
            raise ValueError("feature_gate must not be negative")
        PartitionLayout(self.azimuth_bins, self.elevation_bins)
        FeatureConfig(self.knn_k, self.feature_fraction)
        SearchConfig(self.use_features, self.worker_count, self.contour_pool)

    @property
    def layout(self) -> PartitionLayout:
        return PartitionLayout(self.azimuth_bins, self.elevation_bins)

    @property
    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.knn_k, self.feature_fraction)

    @property
    def search_config(self) -> SearchConfig:
        return SearchConfig(self.use_features, self.worker_count, self.contour_pool)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class PreparedCloud:
    """A cloud after culling and resampling, with its pre-shape and profile."""

    cloud: PointCloud
    shape: PreShape
    profile: PartitionProfile
    scores: np.ndarray
    candidates: np.ndarray


def prepare(cloud: PointCloud, cfg: RunConfig) -> PreparedCloud:
    indices = np.arange(len(cloud))
    if cfg.cull and len(cloud) > cfg.knn_k:
        kept, removed = cull_outliers(cloud, cfg.knn_k)
        indices = np.delete(indices, removed)
        cloud = kept
    if len(cloud) > cfg.target_count:
        picked = farthest_point_order(cloud.points, cfg.target_count)
        cloud = cloud.subset(picked)
        indices = indices[picked]
    shape = to_preshape(cloud, indices)
    fcfg = cfg.feature_config
    if cfg.use_features and len(cloud) > fcfg.pca_k:
        scores = d_pca_all(cloud, fcfg.pca_k)
        candidates = feature_candidates(scores, fcfg.feature_fraction)
    else:
        scores = np.zeros(len(cloud))
        candidates = np.empty(0, np.intp)
    profile = build_profile(cloud, shape, cfg.layout, fcfg, scores, use_features=cfg.use_features)
    return PreparedCloud(cloud, shape, profile, scores, candidates)


@dataclass(frozen=True, eq=False)
class RegistrationReport:
    transform: SimilarityTransform  # source -> template, model units
    final_measure: float
    search: SearchResult
    timings: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    source: PreparedCloud | None = field(default=None, repr=False)
    template: PreparedCloud | None = field(default=None, repr=False)


def _refine(prep_t: PreparedCloud, model, grid: CandidateGrid, result: SearchResult, measures, cfg: RunConfig):
    """Polish the best few distinct grid poses of ``measures`` and keep the lowest.

    Each start is refined from its own offset and from the zero offset, since
    a wrong offset can pull a correct rotation into a poor local minimum.
    """
    width = np.pi / cfg.rotation_steps
    zero = int(np.argmin(np.linalg.norm(grid.translations, axis=1)))
    seeds = []
    for ti, ri in distinct_candidates(measures, grid.rotations, cfg.refine_starts, 2 * width):
        seeds.append((ti, ri))
        if ti != zero:
            seeds.append((zero, ri))
    # The uncorrected centre is right for complete clouds, so its own ranking
    # gets a few dedicated starts.
    centred = measures[zero : zero + 1]
    for _, ri in distinct_candidates(centred, grid.rotations, cfg.centred_starts, 2 * width):
        if (zero, ri) not in seeds:
            seeds.append((zero, ri))
    best = None
    for ti, ri in seeds:
        seed = dataclasses.replace(
            result,
            rotation=grid.rotations[ri],
            translation=grid.translations[ti],
            best_rotation_index=ri,
            best_translation_index=ti,
        )
        cand = refine_pose(
            prep_t.profile,
            model,
            seed,
            cfg.layout,
            width,
            cfg.refine_levels,
            axes=grid.axes,
            offset_step=grid.offset_step,
            offset_bound=grid.offset_bound,
        )
        if best is None or cand.best_measure < best.best_measure:
            best = cand
    return best


def _gated(prep_t: PreparedCloud, prep_s: PreparedCloud, grid: CandidateGrid, result: SearchResult, cfg: RunConfig):
    """Refine the feature-driven pose, falling back to contour-only when it fits the contour badly.

    The feature pose is kept while its contour measure stays within a factor
    ``1 + feature_gate`` of the best contour-only pose; beyond that the
    feature term is judged to be chasing noise or missing parts.
    """
    pool = dataclasses.replace(cfg.search_config, contour_pool="full")
    full = make_source_model(prep_s.shape, prep_s.profile, prep_s.scores, prep_s.candidates, pool)
    plain = make_source_model(
        prep_s.shape, prep_s.profile, prep_s.scores, prep_s.candidates, dataclasses.replace(pool, use_features=False)
    )
    features_active = cfg.use_features and not np.array_equal(result.measures, result.contour_measures)
    if cfg.refine_levels > 0:
        feat = _refine(prep_t, full, grid, result, result.measures, cfg)
    else:
        feat = result
    if not features_active:
        return feat
    if cfg.refine_levels > 0:
        cont = _refine(prep_t, plain, grid, result, result.contour_measures, cfg)
    else:
        ti, ri = divmod(int(np.argmin(result.contour_measures)), len(grid.rotations))
        seed = dataclasses.replace(
            result, rotation=grid.rotations[ri], translation=grid.translations[ti], best_rotation_index=ri,
            best_translation_index=ti,
        )  # fmt: skip
        cont = rescore(prep_t.profile, plain, cfg.layout, seed)
    feat_contour = rescore(prep_t.profile, plain, cfg.layout, feat).best_measure
    if feat_contour <= (1 + cfg.feature_gate) * cont.best_measure:
        return feat
    return rescore(prep_t.profile, full, cfg.layout, cont)


def register(source: PointCloud, template: PointCloud, cfg: RunConfig | None = None) -> RegistrationReport:
    """Estimate the similarity transform that maps ``source`` onto ``template``."""
    cfg = cfg or RunConfig()
    timings = {}
    t0 = time.perf_counter()
    prep_t = prepare(template, cfg)
    prep_s = prepare(source, cfg)
    t1 = time.perf_counter()
    timings["preprocess_s"] = t1 - t0

    grid: CandidateGrid = build_grid(prep_s.shape, cfg.rotation_steps, cfg.translation_steps)
    model = make_source_model(prep_s.shape, prep_s.profile, prep_s.scores, prep_s.candidates, cfg.search_config)
    result = global_search(prep_t.profile, model, grid, cfg.layout, cfg.search_config)
    result = _gated(prep_t, prep_s, grid, result, cfg)
    t2 = time.perf_counter()
    timings["search_s"] = t2 - t1

    transform = compose_final_transform(prep_t.shape, prep_s.shape, result)
    timings["compose_s"] = time.perf_counter() - t2
    timings["total_s"] = time.perf_counter() - t0
    return RegistrationReport(transform, result.best_measure, result, timings, cfg.to_dict(), prep_s, prep_t)
