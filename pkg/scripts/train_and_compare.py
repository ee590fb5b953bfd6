"""Train the desk denoiser, then compare E-CNN alone vs denoiser + E-CNN on corrupted 32^3 pairs."""
import argparse
import logging
from pathlib import Path

from equitrack.experiments import SimulateJob, TrackJob, TrainJob, run_job
from equitrack.pipeline import TrackingReport, evaluate

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--out", default="runs/denoiser_effect")
p.add_argument("--steps", type=int, default=2000)
p.add_argument("--n-pairs", type=int, default=50)
p.add_argument("--phantom-seed", type=int, default=9000)
p.add_argument("--seed", type=int, default=900, help="pair-set seed; 9500/950 and 9700/970 are the other test sets")
p.add_argument("--denoiser", default="", help="reuse an existing denoiser.bin instead of training")
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
out = Path(args.out)

weights = args.denoiser
if not weights:
    run_job("train-denoiser", TrainJob(out=str(out / "denoiser"), steps=args.steps))
    weights = str(out / "denoiser" / "denoiser.bin")

pairs = SimulateJob(n_pairs=args.n_pairs, dims=32, phantom_seed=args.phantom_seed, bias=0.2, gamma=0.2,
                    noise=0.03, seed=args.seed)
for name, psi in (("ecnn_only", ""), ("denoiser_ecnn", weights)):
    run_job("track", TrackJob(out=str(out / name), denoiser=psi, simulate=pairs))
    s = evaluate(TrackingReport.from_json(out / name / "report.json"))
    print(f"{name:14s} rot {s['rot_err_deg']['mean']:.2f} +- {s['rot_err_deg']['std']:.2f} deg  "
          f"trans {s['trans_err_vox']['mean']:.3f} vox  dice {s['dice']['mean']:.4f}")
