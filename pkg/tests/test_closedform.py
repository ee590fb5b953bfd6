import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from equitrack.closedform import (DeadFeaturesError, DegenerateGeometryError, WeightedPointCloud,
                                  centers_of_mass, combine_weights, objective, solve_rigid)
from equitrack.geom3d import RigidTransform, random_rotation, sample_rigid
from equitrack.verify import closedform_handedness, closedform_optimality, random_cloud


def cloud(points, weights=None):
    points = np.asarray(points, float)
    w = np.full(len(points), 1.0 / len(points)) if weights is None else np.asarray(weights, float)
    return WeightedPointCloud(points, w / w.sum())


def test_delta_channel_gives_its_position():
    f = np.zeros((1, 6, 7, 8))
    f[0, 1, 5, 2] = 1.0
    c = centers_of_mass(f)
    np.testing.assert_array_equal(c.points[0], [1, 5, 2])
    assert c.weights[0] == 1.0 and c.mass[0] == 1.0


def test_symmetric_blob_at_grid_center():
    g = np.stack(np.meshgrid(*[np.arange(9.0)] * 3, indexing="ij"))
    blob = np.exp(-((g - 4.0) ** 2).sum(axis=0))
    c = centers_of_mass(blob[None])
    np.testing.assert_allclose(c.points[0], 4.0, atol=1e-12)


def test_mass_weights_and_absolute_value():
    f = np.zeros((3, 4, 4, 4))
    f[0, 0, 0, 0] = 3.0
    f[1, 1, 1, 1] = -1.0          # mass uses |phi|
    c = centers_of_mass(f)
    np.testing.assert_allclose(c.weights, [0.75, 0.25, 0.0])
    np.testing.assert_allclose(c.points[1], 1.0)
    np.testing.assert_allclose(c.points[2], 1.5)      # dead channel parks at the grid centre


def test_origin_offset():
    f = np.zeros((1, 4, 4, 4))
    f[0, 2, 2, 2] = 1.0
    np.testing.assert_allclose(centers_of_mass(f, origin=(-2, -2, -2)).points[0], 0.0)


def test_all_dead_raises():
    with pytest.raises(DeadFeaturesError):
        centers_of_mass(np.full((2, 3, 3, 3), 1e-12))
    with pytest.raises(ValueError):
        centers_of_mass(np.zeros((3, 3, 3)))


def test_combine_weights():
    u = np.full(4, 0.25)
    np.testing.assert_allclose(combine_weights(u, u), u)
    np.testing.assert_allclose(combine_weights([0.5, 0.5, 0], [0.2, 0.4, 0.4]), [1 / 3, 2 / 3, 0])
    with pytest.raises(DegenerateGeometryError):
        combine_weights([1.0, 0.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        combine_weights([1.0], [0.5, 0.5])


def test_cloud_validation(tmp_path):
    with pytest.raises(ValueError):
        WeightedPointCloud(np.zeros((2, 3)), [0.5, 0.6])
    with pytest.raises(ValueError):
        WeightedPointCloud([[np.nan, 0, 0]], [1.0])
    c = WeightedPointCloud(np.arange(9.0).reshape(3, 3) / 7, [0.2, 0.3, 0.5], [1.0, 2.0, 3.0])
    c.to_csv(tmp_path / "c.csv")
    d = WeightedPointCloud.from_csv(tmp_path / "c.csv")
    np.testing.assert_array_equal(d.points, c.points)
    np.testing.assert_array_equal(d.weights, c.weights)
    np.testing.assert_array_equal(d.mass, c.mass)


def test_known_rotation_oracle():
    # unit axes mapped by a 90 deg turn about z, plus a shift of (1, 2, 3)
    f = cloud([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, 0]])
    m = cloud([[1, 3, 3], [0, 2, 3], [1, 2, 4], [1, 2, 3]])
    T = solve_rigid(f, m)
    np.testing.assert_allclose(T.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-14)
    np.testing.assert_allclose(T.t, [1, 2, 3], atol=1e-14)


@given(st.integers(0, 2 ** 32 - 1))
def test_exact_recovery(seed):
    rng = np.random.default_rng(seed)
    pts = random_cloud(rng, 64)
    T = sample_rigid(180, 20, rng, (31.5, 31.5, 31.5))
    w = rng.uniform(0.1, 1, 64)
    est = solve_rigid(cloud(pts, w), cloud(T.apply(pts), w), center=T.center)
    np.testing.assert_allclose(est.R, T.R, atol=1e-10)
    np.testing.assert_allclose(est.t, T.t, atol=1e-9)


@given(st.integers(0, 2 ** 32 - 1))
def test_solver_equivariance(seed):
    """Moving both clouds by rigid maps moves the estimate accordingly."""
    rng = np.random.default_rng(seed)
    pts = random_cloud(rng, 16)
    tgt = pts + rng.normal(0, 0.5, pts.shape)
    A = sample_rigid(180, 5, rng)
    base = solve_rigid(cloud(pts), cloud(tgt))
    moved = solve_rigid(cloud(pts), cloud(A.apply(tgt)))
    np.testing.assert_allclose(moved.R, A.R @ base.R, atol=1e-9)


def test_identical_clouds_identity(rng):
    c = cloud(random_cloud(rng, 10))
    T = solve_rigid(c, c)
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.t, 0.0, atol=1e-12)


def test_degenerate_inputs():
    line = cloud([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    with pytest.raises(DegenerateGeometryError):
        solve_rigid(line, line)
    c = cloud([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    with pytest.raises(DegenerateGeometryError):
        solve_rigid(c, c, weights=[1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        solve_rigid(c, cloud([[0, 0, 0], [1, 0, 0]]))


def test_reflection_is_never_returned(rng):
    pts = random_cloud(rng, 12)
    mirrored = pts * np.array([1.0, 1.0, -1.0])
    R = solve_rigid(cloud(pts), cloud(mirrored)).R
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert closedform_handedness(300, seed=1) == pytest.approx(1.0)


def test_uniform_weights_match_unweighted(rng):
    pts = random_cloud(rng, 20)
    tgt = pts @ random_rotation(rng).T + rng.normal(0, 0.3, pts.shape)
    a = solve_rigid(cloud(pts), cloud(tgt), weights=np.ones(20))
    b = solve_rigid(cloud(pts), cloud(tgt), weights=np.full(20, 0.05))
    np.testing.assert_allclose(a.R, b.R, atol=1e-12)
    np.testing.assert_allclose(a.t, b.t, atol=1e-12)


def test_centroid_translation_flag(rng):
    pts = random_cloud(rng, 10)
    T = RigidTransform.from_euler((20.0, 0.0, 0.0), (1.0, 0.0, 0.0))
    f, m = cloud(pts), cloud(T.apply(pts))
    simple = solve_rigid(f, m, centroid_translation=True)
    np.testing.assert_allclose(simple.offset, m.points.mean(0) - f.points.mean(0), atol=1e-12)
    full = solve_rigid(f, m)
    np.testing.assert_allclose(full.offset, T.offset, atol=1e-10)


def test_pivot_choice_does_not_change_the_map(rng):
    pts = random_cloud(rng, 10)
    T = sample_rigid(90, 5, rng)
    a = solve_rigid(cloud(pts), cloud(T.apply(pts)))
    b = solve_rigid(cloud(pts), cloud(T.apply(pts)), center=(31.5, 31.5, 31.5))
    np.testing.assert_allclose(a.apply(pts), b.apply(pts), atol=1e-10)


def test_optimality_against_perturbations():
    assert closedform_optimality(n_clouds=2, n_perturb=200, seed=3) == 0


def test_objective_zero_at_truth(rng):
    pts = random_cloud(rng, 8)
    T = sample_rigid(180, 10, rng)
    assert objective(T, cloud(pts), cloud(T.apply(pts))) < 1e-20
