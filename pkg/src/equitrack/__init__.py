"""Rigid tracking of 3D volumes with steerable equivariant features and a closed-form head."""
from .closedform import WeightedPointCloud, centers_of_mass, combine_weights, solve_rigid
from .corrupt import NoiseParams, corrupt
from .geom3d import RigidTransform, Volume3, compose, inverse, warp
from .phantom import Phantom, make_phantom
from .pipeline import TrackingReport, evaluate, simulate_pair, track
from .steerable import ECNN, ECNNConfig

__version__ = "0.1.0"
