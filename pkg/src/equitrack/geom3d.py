"""Volumes, rigid transforms, resampling and evaluation metrics.

Conventions
-----------
* A :class:`Volume3` stores its voxels as a numpy array indexed ``data[x, y, z]``.
  On disk (VOL1) the same voxels are written x-fastest.
* A :class:`RigidTransform` maps voxel coordinates as ``p -> R (p - c) + c + t``
  where ``c`` is the rotation pivot (``center``).  ``t`` is therefore the
  displacement of the pivot itself.
* Euler angles use the intrinsic ZYX convention: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

ORTHO_TOL = 1e-12


class GimbalLockWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class Volume3:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive numbers, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def center(self) -> np.ndarray:
        return grid_center(self.dims)

    def like(self, data) -> "Volume3":
        return Volume3(data, self.spacing)


def grid_center(dims) -> np.ndarray:
    return (np.asarray(dims, dtype=float) - 1.0) / 2.0


# --- rotations ---------------------------------------------------------------

def rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def euler_zyx_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Intrinsic ZYX Euler angles (degrees) to a rotation matrix."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def matrix_to_euler_zyx(R: np.ndarray) -> tuple[np.ndarray, bool]:
    """Inverse of :func:`euler_zyx_to_matrix`.

    Returns ``(angles_deg, gimbal)`` where ``angles_deg = (yaw, pitch, roll)``
    with pitch in [-90, 90] and ``gimbal`` is True when |pitch| is within 1e-6
    degrees of 90 (yaw and roll are then not separately identifiable).
    """
    R = np.asarray(R, dtype=float)
    sp = float(np.clip(-R[2, 0], -1.0, 1.0))
    pitch = np.degrees(np.arcsin(sp))
    gimbal = abs(abs(pitch) - 90.0) < 1e-6
    if gimbal:
        # roll folded into yaw
        yaw = np.degrees(np.arctan2(-R[0, 1], R[1, 1]))
        roll = 0.0
    else:
        yaw = np.degrees(np.arctan2(R[1, 0], R[0, 0]))
        roll = np.degrees(np.arctan2(R[2, 1], R[2, 2]))
    return np.array([yaw, pitch, roll]), gimbal


def axis_angle_to_matrix(axis, deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0:
        return np.eye(3)
    k = axis / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    a = np.deg2rad(deg)
    return np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalised quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Polar-decomposition projection onto SO(3)."""
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def geodesic_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def cubic_rotations() -> list[np.ndarray]:
    """The 24 proper rotations of the cube (signed permutation matrices, det +1)."""
    import itertools

    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            M = np.zeros((3, 3))
            for i, (p, s) in enumerate(zip(perm, signs)):
                M[i, p] = s
            if np.linalg.det(M) > 0:
                out.append(M)
    return out


# --- rigid transforms --------------------------------------------------------

@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        c = np.array(self.center, dtype=float).reshape(3)
        drift = np.abs(R.T @ R - np.eye(3)).max()
        if drift > ORTHO_TOL:
            if drift > 1e-3:
                raise ValueError(f"R is not orthogonal (max |RtR - I| = {drift:.3g})")
            R = nearest_rotation(R)
        if np.linalg.det(R) < 0:
            raise ValueError("R is a reflection (det < 0)")
        for a in (R, t, c):
            a.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "center", c)

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), center)

    @classmethod
    def from_euler(cls, euler_zyx_deg, t=(0.0, 0.0, 0.0), center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(euler_zyx_to_matrix(*euler_zyx_deg), t, center)

    @classmethod
    def from_affine(cls, R, offset, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Build from ``p -> R p + offset``, re-expressed about ``center``."""
        R = np.asarray(R, dtype=float)
        c = np.asarray(center, dtype=float)
        return cls(R, np.asarray(offset, dtype=float) - c + R @ c, c)

    @property
    def offset(self) -> np.ndarray:
        """Translation of the equivalent map ``p -> R p + offset``."""
        return self.t + self.center - self.R @ self.center

    @property
    def euler_zyx_deg(self) -> np.ndarray:
        return matrix_to_euler_zyx(self.R)[0]

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return (p - self.center) @ self.R.T + self.center + self.t

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -(self.R.T @ self.t), self.center)

    def recentered(self, center) -> "RigidTransform":
        return RigidTransform.from_affine(self.R, self.offset, center)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.R, np.eye(3)) and not np.any(self.t))

    def to_dict(self) -> dict:
        return {
            "R": self.R.ravel().tolist(),
            "t": self.t.tolist(),
            "center": self.center.tolist(),
            "euler_zyx_deg": self.euler_zyx_deg.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.asarray(d["R"], dtype=float).reshape(3, 3), d["t"], d["center"])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a o b``: apply ``b`` first, then ``a``.  The result pivots about ``a.center``."""
    # drift beyond ORTHO_TOL is projected back onto SO(3) by RigidTransform
    return RigidTransform.from_affine(a.R @ b.R, a.R @ b.offset + a.offset, a.center)


def inverse(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def sample_rigid(rot_range_deg: float = 180.0, trans_range_vox: float = 20.0,
                 rng: np.random.Generator | None = None, center=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Euler angles uniform in +-rot_range per axis, translation uniform in +-trans_range per axis."""
    if rot_range_deg < 0 or trans_range_vox < 0:
        raise ValueError("ranges must be non-negative")
    rng = np.random.default_rng() if rng is None else rng
    angles = rng.uniform(-rot_range_deg, rot_range_deg, size=3)
    t = rng.uniform(-trans_range_vox, trans_range_vox, size=3)
    if rot_range_deg == 0 and trans_range_vox == 0:
        return RigidTransform.identity(center)
    return RigidTransform.from_euler(angles, t, center)


# --- resampling --------------------------------------------------------------

def warp(vol: Volume3, T: RigidTransform, interp: str = "trilinear") -> Volume3:
    """Resample so that ``out(p) = vol(T^-1 p)`` on the same grid; outside samples are 0."""
    return vol.like(warp_array(vol.data, T, interp))


def warp_array(arr: np.ndarray, T: RigidTransform, interp: str = "trilinear") -> np.ndarray:
    """Array version of :func:`warp`; leading axes (if any) are treated as channels."""
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    arr = np.asarray(arr)
    if T.is_identity():
        return arr.copy()
    if arr.ndim > 3:
        flat = arr.reshape((-1,) + arr.shape[-3:])
        return np.stack([warp_array(a, T, interp) for a in flat]).reshape(arr.shape)
    order = 1 if interp == "trilinear" else 0
    inv = T.inverse()
    # p_src = Rinv p + off_inv
    return ndimage.affine_transform(arr, inv.R, offset=inv.offset, order=order,
                                    mode="constant", cval=0.0, prefilter=False)


# --- metrics -----------------------------------------------------------------

def _wrap180(a):
    return (np.asarray(a) + 180.0) % 360.0 - 180.0


def rotation_error_deg(T_true: RigidTransform, T_est: RigidTransform) -> float:
    """Mean absolute per-axis difference of intrinsic ZYX Euler angles (degrees).

    Emits :class:`GimbalLockWarning` when either rotation sits at pitch +-90 deg.
    """
    e_true, g1 = matrix_to_euler_zyx(T_true.R)
    e_est, g2 = matrix_to_euler_zyx(T_est.R)
    if g1 or g2:
        warnings.warn("Euler decomposition at gimbal lock; per-axis error is ill-defined",
                      GimbalLockWarning, stacklevel=2)
    return float(np.mean(np.abs(_wrap180(e_true - e_est))))


def translation_error_vox(T_true: RigidTransform, T_est: RigidTransform) -> float:
    """Mean absolute per-axis difference of pivot displacements (voxels).

    Both transforms are expressed about ``T_true.center`` first, so the value is
    the error of where the pivot lands.
    """
    est = T_est.recentered(T_true.center)
    return float(np.mean(np.abs(T_true.t - est.t)))


def dice(mask_a: Volume3 | np.ndarray, mask_b: Volume3 | np.ndarray, threshold: float = 0.5) -> float:
    a = np.asarray(getattr(mask_a, "data", mask_a)) > threshold
    b = np.asarray(getattr(mask_b, "data", mask_b)) > threshold
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


# --- file formats ------------------------------------------------------------

VOL_MAGIC = b"VOL1"


def save_vol(path, vol: Volume3) -> None:
    nx, ny, nz = vol.dims
    with open(path, "wb") as f:
        f.write(VOL_MAGIC)
        f.write(struct.pack("<3I", nx, ny, nz))
        f.write(struct.pack("<3f", *vol.spacing))
        f.write(np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes())


def load_vol(path) -> Volume3:
    raw = Path(path).read_bytes()
    if raw[:4] != VOL_MAGIC:
        raise ValueError(f"{path}: not a VOL1 file")
    nx, ny, nz = struct.unpack("<3I", raw[4:16])
    spacing = struct.unpack("<3f", raw[16:28])
    n = nx * ny * nz
    body = np.frombuffer(raw, dtype="<f4", count=n, offset=28)
    if len(raw) != 28 + 4 * n:
        raise ValueError(f"{path}: expected {n} voxels, file size mismatch")
    data = body.reshape((nx, ny, nz), order="F").astype(np.float64)
    return Volume3(data, spacing)


def save_transform(path, T: RigidTransform) -> None:
    Path(path).write_text(json.dumps(T.to_dict(), indent=2))


def load_transform(path) -> RigidTransform:
    return RigidTransform.from_dict(json.loads(Path(path).read_text()))
