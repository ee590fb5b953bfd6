"""Procedural phantoms standing in for masked brain volumes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geom3d import Volume3, grid_center, random_rotation

MAX_TRIES = 50
MASK_FRACTION = (0.05, 0.60)


class PhantomRejected(RuntimeError):
    pass


@dataclass(frozen=True)
class Phantom:
    image: Volume3
    mask: Volume3
    seed: int
    blobs: list = field(default_factory=list)    # dicts: center, sigmas, axes, amplitude


def _ellipsoid(dims, center, axes, semi) -> np.ndarray:
    g = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij"), axis=-1)
    local = (g - center) @ axes
    return ((local / semi) ** 2).sum(axis=-1) <= 1.0


def _blob(dims, center, axes, sigmas) -> np.ndarray:
    g = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij"), axis=-1)
    local = (g - center) @ axes
    return np.exp(-0.5 * ((local / sigmas) ** 2).sum(axis=-1))


def is_asymmetric(img: np.ndarray, ncc_max: float = 0.9, gap_min: float = 0.05) -> bool:
    """Cheap screen against near-symmetric phantoms.

    Requires distinct second moments (so the principal frame is well defined)
    and low self-similarity under 180-degree flips about each principal axis.
    """
    w = img / img.sum()
    g = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in img.shape], indexing="ij"), axis=-1)
    c = np.tensordot(w, g, axes=3)
    d = g - c
    cov = np.einsum("xyz,xyzi,xyzj->ij", w, d, d)
    ev, vec = np.linalg.eigh(cov)
    if np.min(np.diff(ev)) < gap_min * ev[-1]:
        return False
    a = img - img.mean()
    for k in range(3):
        R = 2.0 * np.outer(vec[:, k], vec[:, k]) - np.eye(3)     # 180 deg about axis k
        flipped = ndimage.affine_transform(img, R, offset=c - R @ c, order=1, mode="constant")
        b = flipped - flipped.mean()
        ncc = float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))
        if ncc > ncc_max:
            return False
    return True


def make_phantom(dims=(64, 64, 64), n_blobs: int = 6, seed: int = 0, radius_frac: float = 0.26,
                 smooth: float = 1.0) -> Phantom:
    """Sum of anisotropic Gaussian blobs inside a random ellipsoidal mask.

    The mask's semi-axes are ``radius_frac * min(dims)`` scaled by U[0.8, 1.2];
    the image is normalised to [0, 1] and vanishes outside the mask dilated by
    2 voxels.  Rejection-samples until the mask covers 5-60% of the grid and
    :func:`is_asymmetric` accepts.
    """
    if n_blobs < 3:
        raise ValueError("need at least 3 blobs")
    dims = tuple(int(n) for n in dims)
    scale = radius_frac * min(dims)
    rng = np.random.default_rng(seed)
    c0 = grid_center(dims)
    for _ in range(MAX_TRIES):
        axes = random_rotation(rng)
        semi = scale * rng.uniform(0.8, 1.2, size=3)
        mask = _ellipsoid(dims, c0, axes, semi)
        frac = mask.mean()
        if not MASK_FRACTION[0] <= frac <= MASK_FRACTION[1]:
            continue
        img = np.zeros(dims)
        blobs = []
        for _ in range(n_blobs):
            # centre uniformly inside the ellipsoid, pulled in so blobs stay interior
            while True:
                p = rng.uniform(-1, 1, size=3)
                if p @ p <= 1.0:
                    break
            center = c0 + axes @ (0.7 * semi * p)
            b_axes = random_rotation(rng)
            sigmas = scale * rng.uniform(0.12, 0.35, size=3)
            amp = rng.uniform(0.3, 1.0)
            img += amp * _blob(dims, center, b_axes, sigmas)
            blobs.append({"center": center.tolist(), "axes": b_axes.tolist(),
                          "sigmas": sigmas.tolist(), "amplitude": float(amp)})
        soft = ndimage.gaussian_filter(mask.astype(float), smooth) if smooth > 0 else mask.astype(float)
        outer = ndimage.binary_dilation(mask, iterations=2)
        img = img * soft * outer
        if img.max() <= 0:
            continue
        img /= img.max()
        if is_asymmetric(img):
            return Phantom(Volume3(img), Volume3(mask.astype(float)), seed, blobs)
    raise PhantomRejected(f"no asymmetric phantom after {MAX_TRIES} tries (seed {seed})")
