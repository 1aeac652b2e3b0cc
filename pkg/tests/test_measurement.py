import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkss_align.geometry import PointCloud, SimilarityTransform, apply_transform, check_rotation, rot_z
from pkss_align.measurement import (
    INVALID,
    DegenerateCorrespondence,
    combined_measure,
    measure_pair,
    solve_local_rotation,
)
from pkss_align.partition import CellSamples, PartitionProfile, build_profile
from pkss_align.preprocess import to_preshape
from pkss_align.synthetic import asymmetric_shape, sphere_points


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def unit_shape(rng, k):
    a = rng.normal(size=(k, 3))
    a -= a.mean(axis=0)
    return a / np.linalg.norm(a)


class TestSolveLocalRotation:
    def test_identity(self):
        a = unit_shape(np.random.default_rng(0), 20)
        rot, trace = solve_local_rotation(a, a)
        np.testing.assert_allclose(rot, np.eye(3), atol=1e-12)
        assert trace == pytest.approx(1.0, abs=1e-12)

    def test_recovers_inverse_rotation(self):
        rng = np.random.default_rng(1)
        a = unit_shape(rng, 30)
        r = random_rotation(rng)
        rot, trace = solve_local_rotation(a, a @ r.T)
        np.testing.assert_allclose(rot, r.T, atol=1e-9)
        assert trace == pytest.approx(1.0, abs=1e-9)

    def test_beats_random_rotations(self):
        rng = np.random.default_rng(2)
        a, b = unit_shape(rng, 50), unit_shape(rng, 50)
        rot, trace = solve_local_rotation(a, b)
        assert trace == pytest.approx(np.sum(a * (b @ rot.T)), abs=1e-12)
        for _ in range(2000):
            q = random_rotation(rng)
            assert trace >= np.sum(a * (b @ q.T)) - 1e-12

    def test_reflection_corrected(self):
        rng = np.random.default_rng(3)
        a = unit_shape(rng, 10)
        rot, trace = solve_local_rotation(a, a * [1, 1, -1])
        check_rotation(rot)
        assert trace < 1.0

    def test_degenerate(self):
        with pytest.raises(DegenerateCorrespondence, match="degenerate correspondence"):
            solve_local_rotation(np.zeros((4, 3)), np.ones((4, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            solve_local_rotation(np.zeros((4, 3)), np.zeros((5, 3)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(3, 40))
    def test_always_proper_rotation(self, seed, k):
        rng = np.random.default_rng(seed)
        rot, trace = solve_local_rotation(unit_shape(rng, k), unit_shape(rng, k))
        check_rotation(rot)
        assert -1.0 - 1e-12 <= trace <= 1.0 + 1e-12


class TestMeasurePair:
    def test_similarity_copy(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(12, 3))
        b = 0.25 * a @ random_rotation(rng).T + rng.normal(size=3)
        res = measure_pair(a, b)
        assert res.measure == pytest.approx(0.0, abs=1e-7)
        assert res.scale == pytest.approx(4.0, rel=1e-7)
        assert res.matched_count == 12
        # rebuild a from b with the reported pieces
        rebuilt = res.centroid_a + res.scale * (b - res.centroid_b) @ res.rotation.T
        np.testing.assert_allclose(rebuilt, a, atol=1e-9)

    def test_continuity(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(20, 3))
        ratios = []
        for eps in (1e-2, 1e-3, 1e-4, 1e-5):
            b = a.copy()
            b[3] += eps * np.array([0.3, -0.5, 0.8])
            ratios.append(measure_pair(a, b).measure / eps)
        assert max(ratios) < 1.0
        assert max(ratios) / min(ratios) < 2.0

    def test_antipodal_in_range(self):
        a = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1.5]])
        res = measure_pair(a, -a)
        assert 0.0 <= res.measure <= np.pi

    def test_too_few_pairs(self):
        res = measure_pair(np.eye(3), np.eye(3))
        assert res is INVALID
        assert res.measure == np.pi
        assert not res.valid

    def test_symmetric(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(15, 3)), rng.normal(size=(15, 3))
        assert measure_pair(a, b).measure == pytest.approx(measure_pair(b, a).measure, abs=1e-7)


def ridged_shell(seed=0):
    """Shell with exact four-fold symmetry about z plus asymmetric axial ridges."""
    rng = np.random.default_rng(seed)
    shell = sphere_points(600, seed=seed + 1)
    shell = np.concatenate([shell @ rot_z(k * np.pi / 2).T for k in range(4)])

    def ridge(n, half, z, angle):
        p = rng.uniform(-1, 1, (n, 3)) * half
        p = np.concatenate([p, p * [-1, -1, 1]])  # keeps the centroid on the axis
        return p @ rot_z(angle).T + [0, 0, z]

    return PointCloud(
        np.concatenate([shell, ridge(300, [0.6, 0.08, 0.02], 0.3, 0.35), ridge(300, [0.5, 0.05, 0.3], -0.3, 1.2)])
    )


def profile_of(cloud):
    shape = to_preshape(cloud)
    return shape, build_profile(cloud, shape)


class TestCombined:
    def test_identical(self):
        shape, profile = profile_of(asymmetric_shape(1, 1500))
        g, align = combined_measure(shape, profile, shape, profile)
        assert g == pytest.approx(0.0, abs=1e-7)
        assert align.valid

    def test_empty_features_fall_back(self):
        rng = np.random.default_rng(7)
        cloud = asymmetric_shape(2, 1500)
        shape, profile = profile_of(cloud)
        moved = apply_transform(SimilarityTransform(1.0, random_rotation(rng)), cloud)
        shape_b, profile_b = profile_of(moved)
        bare = PartitionProfile(profile_b.contour, CellSamples.empty(), profile_b.layout)
        g, align = combined_measure(shape, profile, shape_b, bare)
        assert g == align.measure

    def test_features_break_contour_symmetry(self):
        cloud = ridged_shell()
        shape_a, a = profile_of(cloud)
        shape_b, b = profile_of(apply_transform(SimilarityTransform(1.0, rot_z(np.pi / 2)), cloud))
        g, align = combined_measure(shape_a, a, shape_b, b)
        assert align.measure < 1e-6
        assert g > 0.1

    def test_insufficient_contour(self):
        shape, profile = profile_of(asymmetric_shape(3, 500))
        empty = PartitionProfile(CellSamples.empty(), CellSamples.empty(), profile.layout)
        g, align = combined_measure(shape, profile, shape, empty)
        assert g == np.pi and align is INVALID

    def test_similarity_invariance(self):
        cloud = asymmetric_shape(4, 1500)
        other = apply_transform(SimilarityTransform(1.0, rot_z(0.2)), cloud)
        shape_a, a = profile_of(cloud)
        shape_b, b = profile_of(other)
        base = combined_measure(shape_a, a, shape_b, b)[0]
        shape_c, c = profile_of(PointCloud(other.points * 3.0 + [1.0, -2.0, 0.5]))
        assert combined_measure(shape_a, a, shape_c, c)[0] == pytest.approx(base, abs=1e-7)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 50))
    def test_range_and_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        cloud = asymmetric_shape(seed, 800)
        shape_a, a = profile_of(cloud)
        shape_b, b = profile_of(apply_transform(SimilarityTransform(1.0, random_rotation(rng)), cloud))
        g_ab = combined_measure(shape_a, a, shape_b, b)[0]
        g_ba = combined_measure(shape_b, b, shape_a, a)[0]
        assert 0.0 <= g_ab <= np.pi
        assert g_ab == pytest.approx(g_ba, abs=1e-7)
