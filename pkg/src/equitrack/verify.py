"""Invariant suites shared by the `verify` command and the acceptance tests.

Each suite returns plain floats (worst-case residuals) so callers can apply
their own tolerances.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .closedform import WeightedPointCloud, objective, solve_rigid
from .geom3d import (RigidTransform, axis_angle_to_matrix, cubic_rotations, random_rotation,
                     sample_rigid, warp_array)
from .so3rep import L_MAX, block_diag_residual, cg_change_of_basis, real_sh, wigner_d_real
from .steerable import build_basis, receptive_radius, steerability_check

# pairs (l, j) used by any network whose hidden fields stop at order 2
NETWORK_PAIRS = [(l, j) for l in range(3) for j in range(3)]


def _unit(rng, n) -> np.ndarray:
    u = rng.normal(size=(n, 3))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def so3_residuals(n_rotations: int = 100, seed: int = 0, l_max: int = L_MAX) -> dict[str, float]:
    """Worst homomorphism, orthogonality and defining-relation residuals for l <= l_max."""
    rng = np.random.default_rng(seed)
    out = {"homomorphism": 0.0, "orthogonality": 0.0, "defining_relation": 0.0}
    for _ in range(n_rotations):
        R1, R2 = random_rotation(rng), random_rotation(rng)
        u = _unit(rng, 20)
        for l in range(l_max + 1):
            D1, D2 = wigner_d_real(l, R1), wigner_d_real(l, R2)
            out["homomorphism"] = max(out["homomorphism"], np.abs(wigner_d_real(l, R1 @ R2) - D1 @ D2).max())
            out["orthogonality"] = max(out["orthogonality"], np.abs(D1 @ D1.T - np.eye(2 * l + 1)).max())
            lhs = real_sh(l, u @ R1.T)
            rhs = real_sh(l, u) @ D1.T
            out["defining_relation"] = max(out["defining_relation"], np.abs(lhs - rhs).max())
    return {k: float(v) for k, v in out.items()}


def cg_residual(n_rotations: int = 100, seed: int = 0, max_order: int = 2) -> float:
    rng = np.random.default_rng(seed)
    bases = [cg_change_of_basis(l, j) for l in range(max_order + 1) for j in range(max_order + 1)]
    worst = 0.0
    for _ in range(n_rotations):
        R = random_rotation(rng)
        worst = max(worst, max(block_diag_residual(b, R) for b in bases))
    return float(worst)


def steerability_residual(n_rotations: int = 50, n_points: int = 100, seed: int = 0,
                          pairs=NETWORK_PAIRS) -> float:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.5, 2.5, size=(n_points, 3))
    worst = 0.0
    for l, j in pairs:
        basis = build_basis(l, j)
        for _ in range(n_rotations):
            worst = max(worst, steerability_check(basis, random_rotation(rng), x))
    return float(worst)


def rel_mismatch(a: np.ndarray, b: np.ndarray) -> float:
    den = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / den) if den > 0 else float(np.linalg.norm(a))


def _rotate_channels(feats: np.ndarray, T: RigidTransform, interp: str) -> np.ndarray:
    return warp_array(feats, T, interp)


def canvas(net, image: np.ndarray, extra: int = 0) -> np.ndarray:
    """Zero-pad so features (and moved content) never touch the grid border."""
    return np.pad(np.asarray(image, dtype=float), receptive_radius(net) + int(extra))


def cubic_equivariance(net, image: np.ndarray, shift=(1, -2, 3), rotations=None) -> float:
    """Worst relative mismatch over exact grid rotations composed with an integer shift."""
    image = canvas(net, image, np.abs(shift).max())
    center = (np.asarray(image.shape) - 1) / 2.0
    base = net.forward(image)
    worst = 0.0
    for R in (rotations if rotations is not None else cubic_rotations()):
        T = RigidTransform(np.round(R), shift, center)
        moved = warp_array(image, T, "nearest")
        lhs = net.forward(moved)
        rhs = _rotate_channels(base, T, "nearest")
        worst = max(worst, rel_mismatch(lhs, rhs))
    return worst


def continuous_equivariance(net, images, n_transforms: int = 30, seed: int = 0, presmooth: float = 1.0,
                            rot_range: float = 180.0, trans_range: float = 6.0) -> list[float]:
    """Relative mismatch ||Phi(T o I) - T o Phi(I)|| / ||T o Phi(I)|| for random rigid T."""
    rng = np.random.default_rng(seed)
    cache = {}
    out = []
    for k in range(n_transforms):
        i = k % len(images)
        if i not in cache:
            img = images[i]
            if presmooth > 0:
                img = ndimage.gaussian_filter(img, presmooth, mode="constant")
            img = canvas(net, img, np.ceil(trans_range))
            cache[i] = img, net.forward(img)
        img, base = cache[i]
        T = sample_rigid(rot_range, trans_range, rng, (np.asarray(img.shape) - 1) / 2.0)
        lhs = net.forward(warp_array(img, T))
        rhs = warp_array(base, T)
        out.append(rel_mismatch(lhs, rhs))
    return out


def random_cloud(rng, K: int = 64, spread: float = 10.0, planar: float = 1.0) -> np.ndarray:
    pts = rng.normal(size=(K, 3)) * spread
    pts[:, 2] *= planar
    return pts + 32.0


def closedform_recovery(n_trials: int = 1000, seed: int = 0, K: int = 64) -> dict[str, float]:
    """Exact recovery on consistent clouds and weighted/unweighted agreement at uniform weights."""
    rng = np.random.default_rng(seed)
    worst_R = worst_t = worst_w = 0.0
    for _ in range(n_trials):
        pts = random_cloud(rng, K)
        T = sample_rigid(180.0, 20.0, rng, (31.5, 31.5, 31.5))
        w = rng.uniform(0.1, 1.0, K)
        w /= w.sum()
        f = WeightedPointCloud(pts, w)
        m = WeightedPointCloud(T.apply(pts), w)
        est = solve_rigid(f, m, center=T.center)
        worst_R = max(worst_R, np.abs(est.R - T.R).max())
        worst_t = max(worst_t, np.abs(est.t - T.t).max())
        u = np.full(K, 1.0 / K)
        a = solve_rigid(f.with_weights(u), m.with_weights(u), weights=u, center=T.center)
        b = solve_rigid(f.with_weights(u), m.with_weights(u), weights=np.full(K, 7.0), center=T.center)
        worst_w = max(worst_w, np.abs(a.R - b.R).max(), np.abs(a.t - b.t).max())
    return {"rotation": float(worst_R), "translation": float(worst_t), "uniform_weights": float(worst_w)}


def closedform_optimality(n_clouds: int = 5, n_perturb: int = 1000, seed: int = 0, jitter: float = 0.5) -> int:
    """Number of random perturbations of the solution that beat it (should be 0)."""
    rng = np.random.default_rng(seed)
    beaten = 0
    for _ in range(n_clouds):
        pts = random_cloud(rng)
        T = sample_rigid(180.0, 20.0, rng, (31.5, 31.5, 31.5))
        w = rng.uniform(0.1, 1.0, len(pts))
        w /= w.sum()
        f = WeightedPointCloud(pts, w)
        m = WeightedPointCloud(T.apply(pts) + rng.normal(0, jitter, pts.shape), w)
        est = solve_rigid(f, m, center=T.center)
        best = objective(est, f, m)
        for _ in range(n_perturb):
            scale = 10.0 ** rng.uniform(-4, 0)
            axis = rng.normal(size=3)
            dR = axis_angle_to_matrix(axis, scale * 5.0)
            P = RigidTransform(dR @ est.R, est.t + scale * rng.normal(size=3), est.center)
            if objective(P, f, m) < best - 1e-12 * max(best, 1.0):
                beaten += 1
    return beaten


def closedform_handedness(n_trials: int = 100000, seed: int = 0, K: int = 8) -> float:
    """Smallest det(R) over random and near-planar clouds, including reflected targets."""
    rng = np.random.default_rng(seed)
    worst = 1.0
    flips = np.diag([1.0, 1.0, -1.0])
    for k in range(n_trials):
        planar = 1e-3 if k % 2 else 1.0
        pts = random_cloud(rng, K, planar=planar)
        tgt = pts @ random_rotation(rng).T
        if k % 3 == 0:
            tgt = tgt @ flips          # a reflection: the solver must still return a rotation
        tgt = tgt + rng.normal(0, 0.1, tgt.shape)
        w = np.full(K, 1.0 / K)
        try:
            R = solve_rigid(WeightedPointCloud(pts, w), WeightedPointCloud(tgt, w)).R
        except ValueError:
            continue
        worst = min(worst, float(np.linalg.det(R)))
    return worst


def residual_table(n_rotations: int = 50, seed: int = 0) -> list[tuple]:
    """Rows (suite, check, residual, tolerance, pass) for the fast invariant suites."""
    rows = []
    for name, v in so3_residuals(n_rotations, seed).items():
        rows.append(("so3rep", name, v, 1e-9))
    rows.append(("so3rep", "cg_block_diagonal", cg_residual(n_rotations, seed), 1e-10))
    rows.append(("steerable", "analytic_steerability", steerability_residual(n_rotations, 100, seed), 1e-9))
    rec = closedform_recovery(200, seed)
    rows += [("closedform", f"recovery_{k}", v, 1e-8 if k != "uniform_weights" else 1e-10) for k, v in rec.items()]
    rows.append(("closedform", "perturbations_beating_optimum", float(closedform_optimality(2, 200, seed)), 0.0))
    rows.append(("closedform", "min_det", closedform_handedness(2000, seed), None))
    out = []
    for suite, check, v, tol in rows:
        ok = (v >= 1.0 - 1e-9) if tol is None else (v <= tol)
        out.append((suite, check, f"{v:.3e}", "det=+1" if tol is None else f"{tol:.0e}", "ok" if ok else "FAIL"))
    return out
