"""Job configs, sweeps and self-describing run manifests.

Every job is a dataclass; ``run_job`` executes it into ``job.out`` and writes
``manifest.json`` listing the config, library versions and the sha256 of each
output.  ``replay`` re-runs a manifest into a scratch directory and compares
hashes.  Wall times live in ``timings.csv`` and are marked volatile.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .corrupt import NoiseParams
from .geom3d import Volume3, load_vol, save_transform, save_vol, load_transform
from .phantom import make_phantom
from .pipeline import Pair, TrackingReport, evaluate, run_pair, simulate_pair
from .steerable import DESK_HIDDEN, ECNN, ECNNConfig

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
TIMINGS = "timings.csv"


def _dims(d) -> tuple[int, int, int]:
    d = [int(d)] * 3 if np.isscalar(d) else [int(v) for v in d]
    if len(d) != 3:
        raise ValueError(f"dims must have 3 entries, got {d}")
    return tuple(d)


@dataclass
class PhantomJob:
    out: str = "phantoms"
    n: int = 10
    dims: int = 64
    n_blobs: int = 6
    seed: int = 1000          # phantom k uses seed + k


@dataclass
class SimulateJob:
    out: str = "pairs"
    n_pairs: int = 10
    dims: int = 64
    n_blobs: int = 6
    phantom_seed: int = 1000
    rot_range: float = 45.0
    trans_range: float = 6.0
    bias: float = 0.0
    gamma: float = 0.0
    noise: float = 0.0
    fixed_magnitude: bool = False
    seed: int = 0             # pair k uses seed + k


@dataclass
class TrainJob:
    out: str = "denoiser"
    n_phantoms: int = 200
    dims: int = 32
    n_blobs: int = 6
    phantom_seed: int = 5000
    n_heldout: int = 8
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 1
    rot_range: float = 180.0
    trans_range: float = 4.0
    levels: int = 2
    features: int = 16
    eval_every: int = 100
    schedule: str = "cosine"
    select_best: bool = True
    seed: int = 0


@dataclass
class FitJob:
    out: str = "ecnn"
    hidden: tuple = DESK_HIDDEN
    ecnn_seed: int = 0
    dims: int = 32
    n_samples: int = 2
    phantom_seed: int = 7000
    rot_range: float = 45.0
    trans_range: float = 6.0
    steps: int = 50
    step_size: float = 0.25
    loss: str = "image"
    seed: int = 0


@dataclass
class TrackJob:
    out: str = "track"
    pairs: str = ""           # directory written by `simulate`; empty = simulate inline
    ecnn: str = ""            # model file; empty = fresh net from hidden/ecnn_seed
    hidden: tuple = DESK_HIDDEN
    ecnn_seed: int = 0
    denoiser: str = ""
    symmetrize: bool = True   # average the denoiser over the 24 grid rotations
    weighted: bool = True
    simulate: SimulateJob = field(default_factory=SimulateJob)


@dataclass
class SweepJob:
    out: str = "sweep"
    dims: int = 64
    n_blobs: int = 6
    pairs_per_level: int = 5
    phantom_seed: int = 3000
    seed: int = 0
    rotation: tuple = (15.0, 30.0, 45.0, 60.0, 75.0, 90.0)
    translation: tuple = (2.0, 4.0, 6.0, 8.0, 10.0)
    bias: tuple = (0.0, 0.1, 0.2, 0.3)
    noise: tuple = (0.0, 0.01, 0.03, 0.05)
    base_rotation: float = 15.0
    base_translation: float = 2.0
    arms: tuple = ("rotation", "translation", "bias", "noise")
    ecnn: str = ""
    hidden: tuple = DESK_HIDDEN
    ecnn_seed: int = 0
    denoiser: str = ""        # used on the bias and noise arms
    symmetrize: bool = True


@dataclass
class EvalJob:
    out: str = "eval"
    report: str = "track/report.json"


@dataclass
class VerifyJob:
    out: str = "verify"
    n_rotations: int = 50
    seed: int = 0


JOBS = {
    "phantom": PhantomJob, "simulate": SimulateJob, "train-denoiser": TrainJob,
    "fit-coeffs": FitJob, "track": TrackJob, "sweep": SweepJob, "eval": EvalJob, "verify": VerifyJob,
}


def job_from_dict(command: str, d: dict):
    cls = JOBS[command]
    kw = dict(d)
    for f in fields(cls):
        if f.name in kw and isinstance(kw[f.name], list):
            kw[f.name] = tuple(kw[f.name])
    if cls is TrackJob and isinstance(kw.get("simulate"), dict):
        kw["simulate"] = job_from_dict("simulate", kw["simulate"])
    return cls(**kw)


# --- helpers -----------------------------------------------------------------

def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    import scipy
    import torch

    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def write_manifest(out: Path, command: str, job, outputs: list[str], volatile: list[str] = (),
                   inputs: list[str] = ()) -> Path:
    manifest = {
        "command": command,
        "config": asdict(job),
        "versions": _versions(),
        "inputs": {str(p): sha256(p) for p in inputs if p and Path(p).is_file()},
        "outputs": {name: sha256(out / name) for name in sorted(outputs)},
        "volatile": sorted(volatile),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=1))
    return path


def _load_ecnn(path: str, hidden, seed: int) -> ECNN:
    return ECNN.load(path) if path else ECNN.create(ECNNConfig(hidden=tuple(hidden), seed=seed))


def _load_denoiser(path: str):
    if not path:
        return None
    from .denoise import DenoiserNet

    return DenoiserNet.load(path)


def _write_timings(out: Path, report: TrackingReport) -> None:
    with open(out / TIMINGS, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pair", "seconds"])
        for r in report.rows:
            w.writerow([r["pair"], f"{r['seconds']:.4f}"])


def noise_params(bias: float, gamma: float, noise: float, exact: bool = False) -> NoiseParams | None:
    if not (bias or gamma or noise):
        return None
    return NoiseParams(bias, gamma, noise, exact=exact)


def simulated_pairs(job: SimulateJob):
    dims = _dims(job.dims)
    params = noise_params(job.bias, job.gamma, job.noise)
    for k in range(job.n_pairs):
        ph = make_phantom(dims, job.n_blobs, seed=job.phantom_seed + k)
        yield k, simulate_pair(ph, job.rot_range, job.trans_range, params, seed=job.seed + k,
                               fixed_magnitude=job.fixed_magnitude)


def load_pairs(directory) -> list[tuple[int, Pair]]:
    d = Path(directory)
    pairs = []
    for meta_path in sorted(d.glob("pair_[0-9][0-9][0-9][0-9].json")):
        meta = json.loads(meta_path.read_text())
        stem = meta_path.stem
        vol = lambda tag: load_vol(d / f"{stem}_{tag}.vol")
        pairs.append((meta["pair"], Pair(
            vol("fixed"), vol("moving"), load_transform(d / f"{stem}_T_true.json"),
            load_transform(d / f"{stem}_T1.json"), load_transform(d / f"{stem}_T2.json"),
            vol("fixed_mask").data > 0.5, vol("moving_mask").data > 0.5, (), meta["seed"],
            vol("dice_mask").data > 0.5)))
    return pairs


# --- jobs ----------------------------------------------------------------------

def run_phantom(job: PhantomJob, out: Path) -> list[str]:
    outputs, meta = [], []
    for k in range(job.n):
        ph = make_phantom(_dims(job.dims), job.n_blobs, seed=job.seed + k)
        for tag, vol in (("image", ph.image), ("mask", ph.mask)):
            name = f"phantom_{k:04d}_{tag}.vol"
            save_vol(out / name, vol)
            outputs.append(name)
        meta.append({"index": k, "seed": ph.seed, "blobs": ph.blobs, "mask_fraction": float(ph.mask.data.mean())})
    (out / "phantoms.json").write_text(json.dumps(meta, indent=1))
    return outputs + ["phantoms.json"]


def run_simulate(job: SimulateJob, out: Path) -> list[str]:
    outputs = []
    for k, pair in simulated_pairs(job):
        stem = f"pair_{k:04d}"
        for tag, arr in (("fixed", pair.fixed.data), ("moving", pair.moving.data),
                         ("fixed_mask", pair.fixed_mask), ("moving_mask", pair.moving_mask),
                         ("dice_mask", pair.dice_mask)):
            save_vol(out / f"{stem}_{tag}.vol", Volume3(np.asarray(arr, dtype=float)))
            outputs.append(f"{stem}_{tag}.vol")
        for tag, T in (("T_true", pair.T_true), ("T1", pair.T1), ("T2", pair.T2)):
            save_transform(out / f"{stem}_{tag}.json", T)
            outputs.append(f"{stem}_{tag}.json")
        meta = {"pair": k, "seed": pair.seed, "draws": [json.loads(d.to_json()) for d in pair.draws]}
        (out / f"{stem}.json").write_text(json.dumps(meta, indent=1))
        outputs.append(f"{stem}.json")
    return outputs


def run_train(job: TrainJob, out: Path) -> list[str]:
    from .corrupt import NoiseParams
    from .denoise import DenoiserConfig, DenoiserNet, TrainConfig, make_training_sample, train_denoiser

    dims = _dims(job.dims)
    params = NoiseParams.training(seed=job.seed)
    corpus = [make_phantom(dims, job.n_blobs, seed=job.phantom_seed + k).image.data for k in range(job.n_phantoms)]
    rng = np.random.default_rng(job.seed + 1)
    held = [make_phantom(dims, job.n_blobs, seed=job.phantom_seed + job.n_phantoms + k).image.data
            for k in range(job.n_heldout)]
    heldout = [make_training_sample(im, params, rng, job.rot_range, job.trans_range) for im in held]
    net = DenoiserNet(DenoiserConfig(levels=job.levels, features=job.features, seed=job.seed))
    cfg = TrainConfig(steps=job.steps, lr=job.lr, batch_size=job.batch_size, rot_range=job.rot_range,
                      trans_range=job.trans_range, eval_every=job.eval_every, schedule=job.schedule,
                      select_best=job.select_best, seed=job.seed)
    net, state = train_denoiser(corpus, params, cfg, net, heldout)
    net.save(out / "denoiser.bin", state)
    state.write_csv(out / "loss.csv")
    with open(out / "heldout.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "mse"])
        for step, mse in state.heldout_history:
            w.writerow([step, repr(mse)])
    return ["denoiser.bin", "loss.csv", "heldout.csv"]


def run_fit(job: FitJob, out: Path) -> list[str]:
    from .denoise import FitConfig, fit_coeffs
    from .geom3d import sample_rigid

    dims = _dims(job.dims)
    net = ECNN.create(ECNNConfig(hidden=tuple(job.hidden), seed=job.ecnn_seed))
    rng = np.random.default_rng(job.seed)
    samples = []
    for k in range(job.n_samples):
        ph = make_phantom(dims, 6, seed=job.phantom_seed + k)
        c = ph.image.center
        samples.append((ph.image.data, sample_rigid(job.rot_range, job.trans_range, rng, c),
                        sample_rigid(job.rot_range, job.trans_range, rng, c)))
    fitted, history = fit_coeffs(net, samples, FitConfig(job.steps, job.step_size, job.loss, job.seed))
    fitted.save(out / "ecnn.bin")
    with open(out / "fit_history.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows([k, repr(v)] for k, v in enumerate(history))
    return ["ecnn.bin", "fit_history.csv"]


def track_pairs(pairs, ecnn: ECNN, denoiser=None, weighted: bool = True, report=None, symmetrize: bool = True,
                **extra) -> TrackingReport:
    report = report if report is not None else TrackingReport()
    for k, pair in pairs:
        run_pair(denoiser, ecnn, pair, k, report, weighted=weighted, symmetrize=symmetrize, **extra)
        log.info("pair %s: rot %.3f deg, trans %.3f vox", k, report.rows[-1]["rot_err_deg"],
                 report.rows[-1]["trans_err_vox"])
    return report


def run_track(job: TrackJob, out: Path) -> list[str]:
    ecnn = _load_ecnn(job.ecnn, job.hidden, job.ecnn_seed)
    pairs = load_pairs(job.pairs) if job.pairs else simulated_pairs(job.simulate)
    report = track_pairs(pairs, ecnn, _load_denoiser(job.denoiser), job.weighted, symmetrize=job.symmetrize)
    report.to_json(out / "report.json", timing=False)
    report.to_csv(out / "report.csv", timing=False)
    _write_timings(out, report)
    (out / "summary.json").write_text(json.dumps(_stable_summary(report), indent=1))
    return ["report.json", "report.csv", "summary.json"]


def _stable_summary(report: TrackingReport) -> dict:
    s = evaluate(report)
    s.pop("seconds", None)
    return s


def sweep_levels(job: SweepJob, arm: str) -> list[float]:
    return [float(v) for v in getattr(job, arm)]


def sensitivity_sweep(job: SweepJob, ecnn: ECNN | None = None, denoiser=None) -> dict[str, list]:
    """Fig-5 protocol: vary one factor at a time from (15 deg, 2 vox, 0, 0).

    Returns ``{arm: [(level, TrackingReport), ...]}``.  Relative motions have
    exactly the stated magnitude; bias and noise sigmas are exact (gamma off).
    """
    ecnn = ecnn or _load_ecnn(job.ecnn, job.hidden, job.ecnn_seed)
    if denoiser is None and job.denoiser:
        denoiser = _load_denoiser(job.denoiser)
    dims = _dims(job.dims)
    phantoms = [make_phantom(dims, job.n_blobs, seed=job.phantom_seed + k) for k in range(job.pairs_per_level)]
    results = {}
    for arm in job.arms:
        results[arm] = []
        for level in sweep_levels(job, arm):
            rot = level if arm == "rotation" else job.base_rotation
            trans = level if arm == "translation" else job.base_translation
            bias = level if arm == "bias" else 0.0
            noise = level if arm == "noise" else 0.0
            params = noise_params(bias, 0.0, noise, exact=True)
            psi = denoiser if arm in ("bias", "noise") else None
            pairs = ((k, simulate_pair(ph, rot, trans, params, seed=job.seed + k, fixed_magnitude=True))
                     for k, ph in enumerate(phantoms))
            results[arm].append((level, track_pairs(pairs, ecnn, psi, symmetrize=job.symmetrize, level=level)))
    return results


def write_sweep_csv(path, levels) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["level", "n", "rot_mean", "rot_std", "trans_mean", "trans_std", "dice_mean", "dice_std"])
        for level, report in levels:
            s = evaluate(report)
            w.writerow([level, s["n"]] + [f"{s[k][m]:.10g}" for k in ("rot_err_deg", "trans_err_vox", "dice")
                                          for m in ("mean", "std")])


def run_sweep(job: SweepJob, out: Path) -> list[str]:
    results = sensitivity_sweep(job)
    outputs = []
    full = TrackingReport()
    timing = TrackingReport()
    for arm, levels in results.items():
        name = f"sweep_{arm}.csv"
        if levels:
            write_sweep_csv(out / name, levels)
        else:
            (out / name).write_text("level,n,rot_mean,rot_std,trans_mean,trans_std,dice_mean,dice_std\n")
        outputs.append(name)
        for _, report in levels:
            for r in report.rows:
                full.rows.append({**r, "arm": arm})
                timing.rows.append({"pair": f"{arm}:{r['level']}:{r['pair']}", "seconds": r["seconds"]})
    full.to_csv(out / "sweep_pairs.csv", timing=False)
    _write_timings(out, timing)
    return outputs + ["sweep_pairs.csv"]


def run_eval(job: EvalJob, out: Path) -> list[str]:
    summary = evaluate(TrackingReport.from_json(job.report))
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return ["summary.json"]


def run_verify(job: VerifyJob, out: Path) -> list[str]:
    from .verify import residual_table

    rows = residual_table(job.n_rotations, job.seed)
    with open(out / "verify.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["suite", "check", "residual", "tolerance", "pass"])
        w.writerows(rows)
    return ["verify.csv"]


RUNNERS = {
    "phantom": run_phantom, "simulate": run_simulate, "train-denoiser": run_train, "fit-coeffs": run_fit,
    "track": run_track, "sweep": run_sweep, "eval": run_eval, "verify": run_verify,
}


def _inputs(job) -> list[str]:
    keys = ("ecnn", "denoiser", "report")
    paths = [getattr(job, k) for k in keys if getattr(job, k, "")]
    if getattr(job, "pairs", ""):
        paths += [str(p) for p in sorted(Path(job.pairs).glob("*"))]
    return paths


def run_job(command: str, job) -> Path:
    out = Path(job.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    outputs = RUNNERS[command](job, out)
    volatile = [TIMINGS] if (out / TIMINGS).exists() else []
    log.info("%s finished in %.1f s", command, time.perf_counter() - t0)
    return write_manifest(out, command, job, outputs, volatile, _inputs(job))


def replay(manifest_path, out=None) -> dict:
    """Re-run a manifest and compare output hashes.  Returns {name: matches}."""
    manifest = json.loads(Path(manifest_path).read_text())
    config = dict(manifest["config"])
    scratch = out or tempfile.mkdtemp(prefix="replay_")
    config["out"] = str(scratch)
    job = job_from_dict(manifest["command"], config)
    new = json.loads(run_job(manifest["command"], job).read_text())
    return {name: new["outputs"].get(name) == h for name, h in manifest["outputs"].items()}
