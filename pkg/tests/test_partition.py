import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkss_align.geometry import PointCloud, SimilarityTransform, apply_transform, euler_zyx, rot_z
from pkss_align.partition import (
    CellSamples,
    FeatureConfig,
    InsufficientCorrespondence,
    PartitionLayout,
    PartitionProfile,
    assign_cells,
    build_profile,
    cell_ids,
    d_pca,
    d_pca_all,
    extract_contour,
    extract_features,
    feature_candidates,
    matched_pairs,
)
from pkss_align.preprocess import PreShape, to_preshape
from pkss_align.synthetic import asymmetric_shape, sphere_points

LAYOUT = PartitionLayout()


def raw_shape(rows):
    rows = np.asarray(rows, dtype=float)
    return PreShape(rows, np.zeros(3), 1.0, np.arange(len(rows)))


def oracle_cell(p, az_bins=12, el_bins=6):
    x, y, z = p
    r = np.sqrt(x * x + y * y + z * z)
    if r == 0:
        return 0
    az = np.arctan2(y, x) % (2 * np.pi)
    el = np.arccos(np.clip(z / r, -1, 1))
    a = min(int(np.floor(az / (2 * np.pi / az_bins))), az_bins - 1)
    e = min(int(np.floor(el / (np.pi / el_bins))), el_bins - 1)
    return a * el_bins + e


def oracle_best(cells, score):
    best = {}
    for row, (c, s) in enumerate(zip(cells, score)):
        if c not in best or s > score[best[c]]:
            best[c] = row
    return best


class TestCells:
    def test_axis_directions(self):
        ids = cell_ids(np.array([[1.0, 0, 0], [0, 0, 1], [0, 0, -1], [0, 0, 0]]), LAYOUT)
        assert LAYOUT.split(ids[0]) == (0, 3)
        assert list(ids[1:]) == [0, 5, 0]

    def test_total_and_matches_oracle(self):
        rows = np.random.default_rng(0).normal(size=(2000, 3))
        ids = cell_ids(rows, LAYOUT)
        assert np.all((ids >= 0) & (ids < LAYOUT.n_cells))
        assert list(ids) == [oracle_cell(p) for p in rows]

    def test_dense_sphere_fills_every_cell(self):
        ids = cell_ids(sphere_points(7200, seed=1), LAYOUT)
        assert len(np.unique(ids)) == 72

    def test_assign_cells_partitions_rows(self):
        shape = raw_shape(np.random.default_rng(2).normal(size=(300, 3)))
        cells = assign_cells(shape, LAYOUT)
        assert sorted(r for rows in cells.values() for r in rows) == list(range(300))

    def test_layout_validation(self):
        with pytest.raises(ValueError):
            PartitionLayout(0, 6)
        assert PartitionLayout(12, 6).n_cells == 72


class TestContour:
    def test_max_norm_row(self):
        d = np.array([1.0, 0.2, 0.3])
        d /= np.linalg.norm(d)
        samples = extract_contour(raw_shape([0.1 * d, 0.3 * d, 0.2 * d]), LAYOUT)
        assert list(samples.rows) == [1]

    def test_tie_goes_to_lower_row(self):
        samples = extract_contour(raw_shape([[1.0, 0.1, 0], [1.0, 0.1, 0]]), LAYOUT)
        assert list(samples.rows) == [0]

    def test_sphere_representatives_on_radius(self):
        samples = extract_contour(raw_shape(sphere_points(3000, seed=3, radius=0.02)), LAYOUT)
        np.testing.assert_allclose(np.linalg.norm(samples.points, axis=1), 0.02, atol=1e-9)

    def test_matches_oracle(self):
        shape = to_preshape(asymmetric_shape(4))
        samples = extract_contour(shape, LAYOUT)
        cells = [oracle_cell(p) for p in shape.rows]
        best = oracle_best(cells, np.linalg.norm(shape.rows, axis=1))
        assert samples.as_dict().keys() == best.keys()
        assert all(samples.as_dict()[c][0] == r for c, r in best.items())
        assert list(samples.cells) == sorted(best)

    def test_scale_invariant(self):
        cloud = asymmetric_shape(5, 1000)
        a = extract_contour(to_preshape(cloud), LAYOUT)
        b = extract_contour(to_preshape(PointCloud(cloud.points * 3.7 + 2)), LAYOUT)
        np.testing.assert_array_equal(a.rows, b.rows)


def plane_fit_distance(points, i, nbrs):
    hood = points[nbrs]
    c = hood.mean(axis=0)
    _, _, vt = np.linalg.svd(hood - c)
    return abs((points[i] - c) @ vt[-1])


class TestDpca:
    def test_planar_zero(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(size=(100, 2)), np.zeros(100)])
        assert np.all(d_pca_all(PointCloud(pts), 12) == 0.0)

    def test_coincident_neighbourhood(self):
        pts = np.vstack([np.zeros((13, 3)), [[1.0, 1, 1]]])
        assert d_pca(PointCloud(pts), 0, 12) == 0.0

    def test_pyramid_apex_above_face(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(-1, 1, size=(400, 2))
        height = 3.0 * (1 - np.max(np.abs(base), axis=1))
        pts = np.vstack([np.column_stack([base, height]), [[0.0, 0.0, 3.0]]])
        scores = d_pca_all(PointCloud(pts), 12)
        mid_face = np.argmin(np.linalg.norm(base - [0.5, 0.0], axis=1))
        assert scores[-1] > scores[mid_face]

    def test_matches_plane_fit_oracle(self):
        from pkss_align.geometry import brute_force_knn

        pts = sphere_points(600, seed=4)
        scores = d_pca_all(PointCloud(pts), 12)
        for i in range(0, 600, 37):
            nbrs = brute_force_knn(pts, pts[i], 12, exclude=i)
            assert scores[i] == pytest.approx(plane_fit_distance(pts, i, nbrs), abs=1e-8)

    def test_rigid_invariance(self):
        cloud = asymmetric_shape(6, 800)
        moved = apply_transform(SimilarityTransform(1.0, euler_zyx(0.4, -0.9, 2.2), np.array([3.0, -1, 2])), cloud)
        np.testing.assert_allclose(d_pca_all(moved, 12), d_pca_all(cloud, 12), atol=1e-9)


class TestFeatures:
    def test_planar_cloud_has_no_features(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(size=(200, 2)), np.zeros(200)])
        cloud = PointCloud(pts)
        assert len(extract_features(cloud, to_preshape(cloud), LAYOUT, FeatureConfig())) == 0

    def test_full_fraction_matches_oracle(self):
        cloud = asymmetric_shape(7, 1500)
        shape = to_preshape(cloud)
        scores = d_pca_all(cloud, 12)
        samples = extract_features(cloud, shape, LAYOUT, FeatureConfig(12, 1.0), scores)
        best = oracle_best([oracle_cell(p) for p in shape.rows], scores)
        assert {c: r for c, (r, _) in samples.as_dict().items()} == best

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
    def test_candidate_count(self, seed, fraction):
        scores = np.random.default_rng(seed).permutation(500).astype(float)
        cand = feature_candidates(scores, fraction)
        assert abs(len(cand) - round(fraction * 500)) <= 1
        if 0 < len(cand) < 500:
            assert scores[cand].min() > np.delete(scores, cand).max()

    def test_cube_edges(self):
        rng = np.random.default_rng(8)
        n = 6000
        face = rng.integers(0, 6, n)
        pts = rng.uniform(-1, 1, (n, 3))
        pts[np.arange(n), face // 2] = np.where(face % 2 == 0, 1.0, -1.0)
        cloud = PointCloud(pts)
        samples = extract_features(cloud, to_preshape(cloud), LAYOUT, FeatureConfig())
        spacing = np.sqrt(24.0 / n)
        picked = cloud.points[samples.rows]
        # distance to the nearest edge: second largest gap to a face
        gaps = np.sort(1 - np.abs(picked), axis=1)
        assert np.all(gaps[:, 1] <= 2 * spacing)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FeatureConfig(feature_fraction=0.0)
        with pytest.raises(ValueError):
            FeatureConfig(feature_fraction=1.5)


class TestMatchedPairs:
    def test_identical(self):
        shape = to_preshape(asymmetric_shape(9, 800))
        profile = PartitionProfile(extract_contour(shape, LAYOUT))
        a, b = matched_pairs(profile, profile)
        assert len(a) == len(profile.contour)
        np.testing.assert_array_equal(a, b)

    def test_disjoint(self):
        up = PartitionProfile(extract_contour(raw_shape([[0.1, 0, 1], [0, 0.1, 1], [-0.1, 0, 1]]), LAYOUT))
        down = PartitionProfile(extract_contour(raw_shape([[0.1, 0, -1], [0, 0.1, -1], [-0.1, 0, -1]]), LAYOUT))
        with pytest.raises(InsufficientCorrespondence):
            matched_pairs(up, down)

    def test_one_azimuth_bin_shift(self):
        rows = to_preshape(asymmetric_shape(10, 1500)).rows
        turned = rows @ rot_z(2 * np.pi / 12).T
        a = extract_contour(raw_shape(rows), LAYOUT)
        b = extract_contour(raw_shape(turned), LAYOUT)
        az, el = LAYOUT.split(a.cells)
        shifted = LAYOUT.cell_id((az + 1) % 12, el)
        # away from bin boundaries the rotated representatives land exactly one bin over
        agree = np.mean([c in set(b.cells) for c in shifted])
        assert agree > 0.9
        common = np.intersect1d(shifted, b.cells)
        ia = {int(c): r for c, r in zip(shifted, a.rows)}
        ib = {int(c): r for c, r in zip(b.cells, b.rows)}
        assert np.mean([ia[c] == ib[c] for c in common]) > 0.8

    def test_layout_mismatch(self):
        p = PartitionProfile(CellSamples.empty(), layout=PartitionLayout(12, 6))
        q = PartitionProfile(CellSamples.empty(), layout=PartitionLayout(6, 6))
        with pytest.raises(ValueError):
            matched_pairs(p, q)

    def test_lengths_bounded(self):
        cloud = asymmetric_shape(11, 1000)
        shape = to_preshape(cloud)
        profile = build_profile(cloud, shape)
        a, b = matched_pairs(profile, profile, "features")
        assert len(a) == len(b) <= LAYOUT.n_cells
