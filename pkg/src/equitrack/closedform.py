"""Feature centres of mass and the weighted closed-form rigid solver."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geom3d import RigidTransform, grid_center

EPS_MASS = 1e-8
DEGENERACY_RTOL = 1e-9


class DeadFeaturesError(ValueError):
    """Every feature channel is (numerically) zero."""


class DegenerateGeometryError(ValueError):
    """The weighted point configuration does not determine a rotation."""


@dataclass(frozen=True)
class WeightedPointCloud:
    points: np.ndarray        # (K, 3) voxel coordinates
    weights: np.ndarray       # (K,), sums to 1
    mass: np.ndarray | None = None     # (K,) raw sum of |activation|; defaults to weights

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        m = np.asarray(w if self.mass is None else self.mass, dtype=float).reshape(-1)
        if not (len(p) == len(w) == len(m)):
            raise ValueError("points, weights and mass must have equal length")
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite points")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "mass", m)

    def __len__(self) -> int:
        return len(self.points)

    def with_weights(self, w) -> "WeightedPointCloud":
        return WeightedPointCloud(self.points, w, self.mass)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["k", "x", "y", "z", "weight", "mass"])
            for k, (p, w, m) in enumerate(zip(self.points, self.weights, self.mass)):
                wr.writerow([k, *(repr(float(v)) for v in p), repr(float(w)), repr(float(m))])

    @classmethod
    def from_csv(cls, path) -> "WeightedPointCloud":
        rows = list(csv.DictReader(open(path, newline="")))
        pts = [[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]
        return cls(pts, [float(r["weight"]) for r in rows], [float(r["mass"]) for r in rows])


def centers_of_mass(features: np.ndarray, origin=None) -> WeightedPointCloud:
    """Mass-normalised centroid of |phi_k| per channel, with channel weights.

    ``features`` has shape (K, nx, ny, nz); ``origin`` is the coordinate of
    voxel (0, 0, 0) (for padded feature maps).  Channels whose mass is below
    ``EPS_MASS`` get weight 0 and sit at the grid centre.
    """
    f = np.abs(np.asarray(features, dtype=float))
    if f.ndim != 4:
        raise ValueError("features must have shape (K, nx, ny, nz)")
    dims = f.shape[1:]
    mass = f.reshape(len(f), -1).sum(axis=1)
    alive = mass > EPS_MASS
    if not alive.any():
        raise DeadFeaturesError("all feature channels are below the mass threshold")
    # first moments via marginals: sum_x x * sum_yz |phi|
    moments = np.stack([
        f.sum(axis=(2, 3)) @ np.arange(dims[0]),
        f.sum(axis=(1, 3)) @ np.arange(dims[1]),
        f.sum(axis=(1, 2)) @ np.arange(dims[2]),
    ], axis=1)
    pts = np.tile(grid_center(dims), (len(f), 1))
    pts[alive] = moments[alive] / mass[alive, None]
    if origin is not None:
        pts = pts + np.asarray(origin, dtype=float)
    w = np.where(alive, mass, 0.0)
    return WeightedPointCloud(pts, w / w.sum(), mass)


def combine_weights(wf, wm) -> np.ndarray:
    wf = np.asarray(wf, dtype=float)
    wm = np.asarray(wm, dtype=float)
    if wf.shape != wm.shape:
        raise ValueError("weight vectors differ in length")
    w = wf * wm
    total = w.sum()
    if not total > 0:
        raise DegenerateGeometryError("no channel carries weight in both images")
    return w / total


def solve_rigid(fixed: WeightedPointCloud, moving: WeightedPointCloud, weights=None,
                centroid_translation: bool = False, center=None) -> RigidTransform:
    """Weighted least-squares rigid map taking fixed points onto moving points.

    ``weights`` defaults to the product of the two clouds' weights.  The
    translation is ``x_m - R x_f`` of the weighted centroids; with
    ``centroid_translation=True`` it is the bare centroid difference instead.
    The result pivots about ``center`` (default: origin).
    """
    if len(fixed) != len(moving):
        raise ValueError("clouds differ in size")
    w = combine_weights(fixed.weights, moving.weights) if weights is None else np.asarray(weights, float)
    if np.count_nonzero(w) < 3:
        raise DegenerateGeometryError(f"only {np.count_nonzero(w)} weighted correspondences (need 3)")
    w = w / w.sum()
    xf_bar = w @ fixed.points
    xm_bar = w @ moving.points
    Xf = fixed.points - xf_bar
    Xm = moving.points - xm_bar
    sigma = Xm.T @ (w[:, None] * Xf)
    U, s, Vt = np.linalg.svd(sigma)
    if s[0] == 0 or s[1] < DEGENERACY_RTOL * s[0]:
        rank = int(np.sum(s > DEGENERACY_RTOL * s[0])) if s[0] > 0 else 0
        raise DegenerateGeometryError(f"weighted cross-covariance has rank {rank}; points are collinear or coincident")
    # sigma = U S V^T maps fixed -> moving orientation: R = U D V^T
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = U @ D @ Vt
    offset = xm_bar - xf_bar if centroid_translation else xm_bar - R @ xf_bar
    c = np.zeros(3) if center is None else np.asarray(center, dtype=float)
    return RigidTransform.from_affine(R, offset, c)


def objective(T: RigidTransform, fixed: WeightedPointCloud, moving: WeightedPointCloud, weights=None) -> float:
    w = combine_weights(fixed.weights, moving.weights) if weights is None else np.asarray(weights, float)
    r = moving.points - T.apply(fixed.points)
    return float(np.sum(w * np.sum(r ** 2, axis=1)))
