import math

import numpy as np
import pytest

from equitrack.corrupt import paper_test_params
from equitrack.experiments import SweepJob, sensitivity_sweep
from equitrack.geom3d import RigidTransform, axis_angle_to_matrix, compose, geodesic_deg, warp
from equitrack.phantom import make_phantom
from equitrack.pipeline import (TrackingReport, evaluate, relative_transform, residual_dice, run_pair,
                                simulate_pair, track)
from equitrack.steerable import ECNN, ECNNConfig


@pytest.fixture(scope="module")
def phantom():
    return make_phantom((32,) * 3, 6, seed=11)


@pytest.fixture(scope="module")
def net():
    return ECNN.create(ECNNConfig.desk(seed=0))


def test_zero_ranges_give_identical_volumes(phantom):
    p = simulate_pair(phantom, 0.0, 0.0, None, seed=0)
    np.testing.assert_array_equal(p.fixed.data, p.moving.data)
    assert p.T_true.is_identity()


def test_true_transform_composition(phantom):
    p = simulate_pair(phantom, 45.0, 6.0, None, seed=1)
    expected = compose(p.T2, p.T1.inverse())
    np.testing.assert_allclose(p.T_true.R, expected.R, atol=1e-12)
    pts = np.random.default_rng(0).normal(size=(4, 3)) * 5 + 15.5
    np.testing.assert_allclose(p.T_true.apply(p.T1.apply(pts)), p.T2.apply(pts), atol=1e-10)


def test_fixed_magnitude(phantom):
    p = simulate_pair(phantom, 30.0, 2.0, None, seed=2, fixed_magnitude=True)
    assert geodesic_deg(np.eye(3), p.T_true.R) == pytest.approx(30.0)
    assert np.linalg.norm(p.T_true.t) == pytest.approx(2.0)
    T = relative_transform(15.0, 3.0, np.random.default_rng(0), (0, 0, 0))
    assert geodesic_deg(np.eye(3), T.R) == pytest.approx(15.0)


def test_corruption_draws_are_independent(phantom):
    p = simulate_pair(phantom, 0.0, 0.0, paper_test_params(), seed=3)
    assert len(p.draws) == 2
    assert not np.array_equal(p.fixed.data, p.moving.data)
    assert p.draws[0].noise_seed != p.draws[1].noise_seed


def test_inputs_are_masked(phantom):
    p = simulate_pair(phantom, 20.0, 2.0, paper_test_params(), seed=4)
    assert not p.fixed.data[~p.fixed_mask].any()
    assert not p.moving.data[~p.moving_mask].any()
    assert p.fixed_mask.sum() > p.dice_mask.sum()


def test_identical_inputs_track_to_identity(phantom, net):
    p = simulate_pair(phantom, 20.0, 3.0, None, seed=5)
    res = track(None, net, p.fixed, p.fixed)
    np.testing.assert_allclose(res.T.R, np.eye(3), atol=1e-6)
    np.testing.assert_allclose(res.T.t, 0.0, atol=1e-6)
    assert len(res.fixed_cloud) == 64 and res.weights.sum() == pytest.approx(1.0)


def test_self_registration_recovers_30_degrees(phantom, net):
    c = phantom.image.center
    R = axis_angle_to_matrix((1.0, 2.0, 0.5), 30.0)
    T = RigidTransform(R, np.zeros(3), c)
    moved = warp(phantom.image, T)
    est = track(None, net, phantom.image, moved).T
    assert geodesic_deg(est.R, R) < 5.0
    assert geodesic_deg(est.R, np.eye(3)) > 25.0


def test_noise_free_pair_tracks_accurately(phantom, net):
    report = run_pair(None, net, simulate_pair(phantom, 45.0, 4.0, None, seed=6))
    row = report.rows[0]
    assert row["rot_err_deg"] < 5.0 and row["trans_err_vox"] < 1.0 and row["dice"] > 0.9
    assert row["seconds"] > 0


def test_tracking_is_deterministic(phantom, net):
    a = run_pair(None, net, simulate_pair(phantom, 30.0, 3.0, paper_test_params(), seed=7))
    b = run_pair(None, net, simulate_pair(phantom, 30.0, 3.0, paper_test_params(), seed=7))
    strip = lambda r: {k: v for k, v in r.rows[0].items() if k != "seconds"}
    assert strip(a) == strip(b)


def test_dice_decreases_with_injected_error(phantom):
    p = simulate_pair(phantom, 20.0, 2.0, None, seed=8)
    scores = []
    for deg in (0.0, 2.0, 5.0, 10.0, 20.0, 40.0):
        E = RigidTransform(axis_angle_to_matrix((0.3, 1.0, 0.2), deg), (deg / 10.0, 0.0, 0.0), p.T_true.center)
        scores.append(residual_dice(p.dice_mask, p.T_true, compose(p.T_true, E)))
    assert scores[0] == 1.0
    assert all(b <= a for a, b in zip(scores, scores[1:]))
    assert scores[-1] < scores[2] < scores[0]


def make_report(values):
    r = TrackingReport()
    T = RigidTransform.identity((1.0, 1.0, 1.0))
    for k, (deg, shift) in enumerate(values):
        E = RigidTransform.from_euler((deg, 0.0, 0.0), (shift, 0.0, 0.0), (1.0, 1.0, 1.0))
        r.add(k, T, E, 1.0, 0.1)
    return r


def test_evaluate_perfect_and_single():
    s = evaluate(make_report([(0.0, 0.0), (0.0, 0.0)]))
    assert s["rot_err_deg"]["mean"] == 0.0 and s["trans_err_vox"]["mean"] == 0.0 and s["dice"]["mean"] == 1.0
    s = evaluate(make_report([(3.0, 1.5)]))
    assert s["rot_err_deg"]["std"] == 0.0 and s["rot_err_deg"]["mean"] == pytest.approx(1.0)
    assert s["trans_err_vox"]["mean"] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        evaluate(TrackingReport())


def test_evaluate_matches_streaming_oracle():
    rng = np.random.default_rng(0)
    values = list(zip(rng.uniform(0, 30, 25), rng.uniform(0, 3, 25)))
    report = make_report(values)
    s = evaluate(report)
    # Welford single pass
    n, mean, m2 = 0, 0.0, 0.0
    for row in report.rows:
        n += 1
        d = row["rot_err_deg"] - mean
        mean += d / n
        m2 += d * (row["rot_err_deg"] - mean)
    assert abs(s["rot_err_deg"]["mean"] - mean) < 1e-12
    assert abs(s["rot_err_deg"]["std"] - math.sqrt(m2 / n)) < 1e-12


def test_report_files(tmp_path):
    r = make_report([(1.0, 0.5), (2.0, 0.0)])
    r.to_json(tmp_path / "r.json")
    back = TrackingReport.from_json(tmp_path / "r.json")
    assert back.rows == r.rows
    r.to_csv(tmp_path / "r.csv", timing=False)
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert "seconds" not in header and header.startswith("pair,rot_err_deg")


def test_empty_sweep_list(net):
    job = SweepJob(dims=32, pairs_per_level=1, rotation=(), arms=("rotation",))
    assert sensitivity_sweep(job, ecnn=net) == {"rotation": []}


def test_sweep_baseline_levels(net):
    job = SweepJob(dims=32, pairs_per_level=1, rotation=(15.0,), translation=(2.0,), arms=("rotation", "translation"))
    out = sensitivity_sweep(job, ecnn=net)
    rot_row = out["rotation"][0][1].rows[0]
    trans_row = out["translation"][0][1].rows[0]
    # both arms start from the same (15 deg, 2 vox, 0, 0) baseline pair
    assert rot_row["T_true"] == trans_row["T_true"]
    T = RigidTransform.from_dict(rot_row["T_true"])
    assert geodesic_deg(np.eye(3), T.R) == pytest.approx(15.0)


def test_denoised_tracking_uses_symmetrized_output(phantom, net):
    from equitrack.denoise import DenoiserConfig, DenoiserNet

    psi = DenoiserNet(DenoiserConfig(levels=1, features=4, seed=0))
    p = simulate_pair(phantom, 20.0, 2.0, paper_test_params(), seed=9)
    a = track(psi, net, p.fixed, p.moving, p.fixed_mask, p.moving_mask)
    b = track(psi, net, p.fixed, p.moving, p.fixed_mask, p.moving_mask, symmetrize=False)
    assert not np.allclose(a.fixed_cloud.points, b.fixed_cloud.points)
