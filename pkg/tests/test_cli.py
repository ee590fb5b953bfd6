import json

import pytest

from equitrack.cli import build_parser, main, resolve_job
from equitrack.experiments import TrackJob, job_from_dict, replay


def test_flags_mirror_config_keys(tmp_path):
    cfg = tmp_path / "job.json"
    cfg.write_text(json.dumps({"n_pairs": 3, "dims": 16, "rot_range": 10.0}))
    args = build_parser().parse_args(["simulate", "--config", str(cfg), "--dims", "24", "--fixed-magnitude", "true"])
    job = resolve_job("simulate", args)
    assert job.n_pairs == 3 and job.dims == 24 and job.rot_range == 10.0 and job.fixed_magnitude is True


def test_nested_and_tuple_flags():
    args = build_parser().parse_args(["track", "--simulate.n-pairs", "2", "--hidden", "4", "2", "1"])
    job = resolve_job("track", args)
    assert isinstance(job, TrackJob)
    assert job.simulate.n_pairs == 2 and job.hidden == (4, 2, 1)


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["track", "--no-such-flag", "1"])


def test_job_from_dict_roundtrip():
    job = job_from_dict("sweep", {"rotation": [15, 90], "dims": 16})
    assert job.rotation == (15, 90) and job.dims == 16


def test_phantom_simulate_track_eval_replay(tmp_path, capsys):
    ph = tmp_path / "ph"
    assert main(["phantom", "--out", str(ph), "--n", "1", "--dims", "16", "--n-blobs", "3"]) == 0
    assert (ph / "phantom_0000_image.vol").exists() and (ph / "manifest.json").exists()

    pairs = tmp_path / "pairs"
    main(["simulate", "--out", str(pairs), "--n-pairs", "1", "--dims", "24", "--rot-range", "20",
          "--trans-range", "2"])
    tr = tmp_path / "track"
    main(["track", "--out", str(tr), "--pairs", str(pairs), "--hidden", "4", "2"])
    manifest = json.loads((tr / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"report.json", "report.csv", "summary.json"}
    assert manifest["volatile"] == ["timings.csv"]
    assert any("pair_0000_fixed.vol" in k for k in manifest["inputs"])
    assert all(replay(tr / "manifest.json", tmp_path / "replayed").values())

    ev = tmp_path / "eval"
    main(["eval", "--out", str(ev), "--report", str(tr / "report.json")])
    summary = json.loads((ev / "summary.json").read_text())
    assert summary["n"] == 1
    capsys.readouterr()
    assert main(["replay", str(ev / "manifest.json"), "--out", str(tmp_path / "ev2")]) == 0
    assert "same  summary.json" in capsys.readouterr().out


def test_verify_command(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path), "--n-rotations", "3"]) == 0
    text = (tmp_path / "verify.csv").read_text()
    assert "FAIL" not in text and "analytic_steerability" in text
