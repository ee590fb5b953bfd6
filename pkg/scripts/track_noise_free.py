"""Noise-free tracking on simulated 64^3 phantom pairs with the desk feature network."""
import argparse
import json
import logging

from equitrack.experiments import SimulateJob, TrackJob, run_job

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--out", default="runs/track_noise_free")
p.add_argument("--n-pairs", type=int, default=50)
p.add_argument("--dims", type=int, default=64)
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

job = TrackJob(out=args.out, simulate=SimulateJob(n_pairs=args.n_pairs, dims=args.dims))
manifest = run_job("track", job)
print(manifest)
print(json.dumps(json.loads((manifest.parent / "summary.json").read_text()), indent=1))
