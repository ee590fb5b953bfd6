"""Pair simulation, end-to-end tracking, metrics and reports."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .closedform import WeightedPointCloud, centers_of_mass, combine_weights, solve_rigid
from .corrupt import NoiseParams, corrupt
from .denoise import DenoiserNet, cubic_average, denoiser_forward
from .geom3d import (RigidTransform, Volume3, axis_angle_to_matrix, compose, dice, inverse,
                     rotation_error_deg, sample_rigid, translation_error_vox, warp, warp_array)
from .phantom import Phantom
from .steerable import ECNN, ecnn_features

MASK_DILATION = 2


@dataclass
class Pair:
    fixed: Volume3
    moving: Volume3
    T_true: RigidTransform
    T1: RigidTransform
    T2: RigidTransform
    fixed_mask: np.ndarray
    moving_mask: np.ndarray
    draws: tuple = ()
    seed: int = 0
    dice_mask: np.ndarray | None = None     # phantom mask in the fixed frame (undilated)


def _tracking_mask(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, iterations=MASK_DILATION)


def relative_transform(rot_deg: float, trans_vox: float, rng: np.random.Generator, center) -> RigidTransform:
    """Rotation of exactly ``rot_deg`` about a random axis, shift of length ``trans_vox``."""
    axis = rng.normal(size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return RigidTransform(axis_angle_to_matrix(axis, rot_deg), trans_vox * direction, center)


def simulate_pair(phantom: Phantom, rot_range: float = 45.0, trans_range: float = 6.0,
                  noise: NoiseParams | None = None, seed: int = 0, fixed_magnitude: bool = False,
                  mask_inputs: bool = True) -> Pair:
    """Augment one anchor twice: fixed = corrupt(T1 o I), moving = corrupt(T2 o I).

    ``T_true = T2 o T1^-1``.  With ``fixed_magnitude`` the relative motion has
    exactly the given angle and shift (random axis/direction) and T1 is drawn
    from the same ranges.  Inputs are masked with the warped, dilated mask.
    """
    rng = np.random.default_rng(seed)
    c = phantom.image.center
    T1 = sample_rigid(rot_range, trans_range, rng, c)
    if fixed_magnitude:
        T2 = compose(relative_transform(rot_range, trans_range, rng, c), T1)
    else:
        T2 = sample_rigid(rot_range, trans_range, rng, c)
    T_true = compose(T2, inverse(T1))
    fixed = np.clip(warp(phantom.image, T1).data, 0.0, 1.0)
    moving = np.clip(warp(phantom.image, T2).data, 0.0, 1.0)
    mask_f = warp_array(phantom.mask.data, T1) > 0.5
    fm = _tracking_mask(mask_f)
    mm = _tracking_mask(warp_array(phantom.mask.data, T2) > 0.5)
    draws = ()
    if noise is not None and (noise.sigma_bias_max or noise.sigma_gamma or noise.sigma_noise_max):
        fv, d1 = corrupt(Volume3(fixed), noise, rng)
        mv, d2 = corrupt(Volume3(moving), noise, rng)
        fixed, moving, draws = fv.data, mv.data, (d1, d2)
    if mask_inputs:
        fixed = fixed * fm
        moving = moving * mm
    return Pair(Volume3(fixed), Volume3(moving), T_true, T1, T2, fm, mm, draws, seed, mask_f)


@dataclass
class TrackResult:
    T: RigidTransform
    fixed_cloud: WeightedPointCloud
    moving_cloud: WeightedPointCloud
    weights: np.ndarray


def track(denoiser: DenoiserNet | None, ecnn: ECNN, fixed, moving, fixed_mask=None, moving_mask=None,
          weighted: bool = True, centroid_translation: bool = False, symmetrize: bool = True) -> TrackResult:
    """Denoise (optional), extract equivariant features, collapse to clouds, solve.

    With ``symmetrize`` the denoiser output is averaged over the cube rotations
    of the grid (see ``cubic_average``).
    """
    f = np.asarray(getattr(fixed, "data", fixed), dtype=float)
    m = np.asarray(getattr(moving, "data", moving), dtype=float)
    if denoiser is not None:
        psi = cubic_average if symmetrize else denoiser_forward
        f = psi(denoiser, f)
        m = psi(denoiser, m)
        if fixed_mask is not None:
            f = f * fixed_mask
        if moving_mask is not None:
            m = m * moving_mask
    cf = centers_of_mass(*ecnn_features(ecnn, f))
    cm = centers_of_mass(*ecnn_features(ecnn, m)) if not np.array_equal(f, m) else cf
    w = combine_weights(cf.weights, cm.weights)
    if not weighted:
        w = (w > 0) / np.count_nonzero(w)
    center = (np.asarray(f.shape, dtype=float) - 1.0) / 2.0
    T = solve_rigid(cf, cm, weights=w, centroid_translation=centroid_translation, center=center)
    return TrackResult(T, cf, cm, w)


# --- reports -----------------------------------------------------------------

@dataclass
class TrackingReport:
    rows: list = field(default_factory=list)

    def add(self, pair_id, T_true: RigidTransform, T_est: RigidTransform, dice_score: float,
            seconds: float, **extra) -> None:
        self.rows.append({
            "pair": pair_id,
            "T_true": T_true.to_dict(),
            "T_est": T_est.to_dict(),
            "rot_err_deg": rotation_error_deg(T_true, T_est),
            "trans_err_vox": translation_error_vox(T_true, T_est),
            "dice": float(dice_score),
            "seconds": float(seconds),
            **extra,
        })

    def __len__(self) -> int:
        return len(self.rows)

    def _rows(self, timing: bool) -> list:
        return [r if timing else {k: v for k, v in r.items() if k != "seconds"} for r in self.rows]

    def to_json(self, path, timing: bool = True) -> None:
        with open(path, "w") as f:
            json.dump({"rows": self._rows(timing)}, f, indent=1)

    @classmethod
    def from_json(cls, path) -> "TrackingReport":
        with open(path) as f:
            return cls(json.load(f)["rows"])

    def to_csv(self, path, timing: bool = True) -> None:
        keys = ["pair", "rot_err_deg", "trans_err_vox", "dice"] + (["seconds"] if timing else [])
        extra = sorted({k for r in self.rows for k in r} - set(keys) - {"T_true", "T_est", "seconds"})
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(keys + extra + ["euler_true", "euler_est"])
            for r in self.rows:
                w.writerow([r[k] for k in keys] + [r.get(k, "") for k in extra]
                           + [" ".join(f"{v:.6f}" for v in r["T_true"]["euler_zyx_deg"]),
                              " ".join(f"{v:.6f}" for v in r["T_est"]["euler_zyx_deg"])])


def residual_dice(mask: np.ndarray, T_true: RigidTransform, T_est: RigidTransform) -> float:
    """Dice between a mask and itself moved by the residual ``T_est^-1 o T_true``."""
    E = compose(inverse(T_est), T_true)
    return dice(mask.astype(float), warp_array(mask.astype(float), E), 0.5)


def run_pair(denoiser, ecnn: ECNN, pair: Pair, pair_id=0, report: TrackingReport | None = None,
             weighted: bool = True, symmetrize: bool = True, **extra) -> TrackingReport:
    report = report if report is not None else TrackingReport()
    t0 = time.perf_counter()
    res = track(denoiser, ecnn, pair.fixed, pair.moving, pair.fixed_mask, pair.moving_mask, weighted=weighted,
                symmetrize=symmetrize)
    seconds = time.perf_counter() - t0
    mask = pair.dice_mask if pair.dice_mask is not None else pair.fixed_mask
    report.add(pair_id, pair.T_true, res.T, residual_dice(mask, pair.T_true, res.T), seconds,
               seed=pair.seed, **extra)
    return report


def evaluate(report: TrackingReport) -> dict:
    """Mean and population std of every metric."""
    if not len(report):
        raise ValueError("empty report")
    out = {"n": len(report)}
    for key in ("rot_err_deg", "trans_err_vox", "dice", "seconds"):
        if any(key not in r for r in report.rows):
            continue
        v = np.array([r[key] for r in report.rows], dtype=float)
        out[key] = {"mean": float(v.mean()), "std": float(v.std())}
    return out
