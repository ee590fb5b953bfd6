"""One-factor-at-a-time sweep over rotation, translation, bias and noise levels."""
import argparse
import csv
import logging
from pathlib import Path

from equitrack.experiments import SweepJob, run_job

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--out", default="runs/sweep")
p.add_argument("--dims", type=int, default=32)
p.add_argument("--pairs-per-level", type=int, default=10)
p.add_argument("--denoiser", default="", help="denoiser.bin used on the bias and noise arms")
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

# translation levels beyond ~6 vox push a 32^3 head off the grid
translation = (2.0, 4.0, 6.0) if args.dims <= 32 else (2.0, 4.0, 6.0, 8.0, 10.0)
run_job("sweep", SweepJob(out=args.out, dims=args.dims, pairs_per_level=args.pairs_per_level,
                          translation=translation, denoiser=args.denoiser))
for arm in ("rotation", "translation", "bias", "noise"):
    with open(Path(args.out) / f"sweep_{arm}.csv") as f:
        rows = list(csv.DictReader(f))
    print(arm, "  ".join(f"{float(r['level']):g}: {float(r['rot_mean']):.2f} deg" for r in rows))
