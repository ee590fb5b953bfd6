"""Residual table for the representation, kernel, network and closed-form checks."""
import argparse

import numpy as np

from equitrack.phantom import make_phantom
from equitrack.steerable import ECNN, ECNNConfig
from equitrack.verify import continuous_equivariance, cubic_equivariance, residual_table

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--n-rotations", type=int, default=50)
p.add_argument("--n-transforms", type=int, default=30)
args = p.parse_args()

for suite, check, res, tol, ok in residual_table(args.n_rotations):
    print(f"{suite:24s} {check:30s} {res}  tol {tol}  {ok}")

net = ECNN.create(ECNNConfig.desk())
images = [make_phantom((32,) * 3, 6, seed=200 + k).image.data for k in range(5)]
print(f"network cubic+shift      {cubic_equivariance(net, images[0]):.2e}  tol 1e-05")
cont = continuous_equivariance(net, images, args.n_transforms)
print(f"network continuous       max {max(cont):.4f} mean {np.mean(cont):.4f}  tol 0.05")
