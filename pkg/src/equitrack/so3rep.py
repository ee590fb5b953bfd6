"""Real spherical harmonics and real irreducible representations of SO(3).

Harmonics are orthonormal on the unit sphere (no Condon-Shortley phase) and
ordered ``m = -l, ..., l``.  Positive ``m`` carries ``cos(m phi)``, negative ``m``
carries ``sin(|m| phi)``, so order 1 is ``sqrt(3/4pi) * (y, z, x)``.

Wigner-D matrices are obtained numerically from the defining relation
``Y_l(R u) = D_l(R) Y_l(u)``; the tensor-product change of basis is the stack of
intertwiners ``Q_J`` with ``Q_J (D_j (x) D_l) = D_J Q_J``, found as the null
space of that linear constraint.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial, pi, sqrt

import numpy as np

L_MAX = 4


def real_sh(l: int, u, check_unit: bool = True) -> np.ndarray:
    """Real spherical harmonics of order ``l`` at unit vectors ``u``.

    ``u`` has shape (3,) or (N, 3); the result has shape (2l+1,) or (N, 2l+1).
    """
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    if check_unit and np.any(np.abs(np.linalg.norm(u, axis=1) - 1.0) > 1e-9):
        raise ValueError("real_sh expects unit vectors")
    if l < 0 or l > L_MAX:
        raise ValueError(f"order {l} outside 0..{L_MAX}")
    out = _solid_harmonics(l, u)
    return out[0] if single else out


def _solid_harmonics(l: int, u: np.ndarray) -> np.ndarray:
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    out = np.empty((u.shape[0], 2 * l + 1))
    xy = (x + 1j * y)
    for m in range(l + 1):
        # P_l^m(z) / sin^m(theta) as a polynomial in z
        p_mm = float(np.prod(np.arange(1, 2 * m, 2))) * np.ones_like(z)
        if l == m:
            p = p_mm
        else:
            p_prev, p = p_mm, (2 * m + 1) * z * p_mm
            for k in range(m + 2, l + 1):
                p_prev, p = p, ((2 * k - 1) * z * p - (k + m - 1) * p_prev) / (k - m)
        norm = sqrt((2 * l + 1) / (4 * pi) * factorial(l - m) / factorial(l + m))
        if m == 0:
            out[:, l] = norm * p
        else:
            c = xy ** m
            out[:, l + m] = sqrt(2) * norm * p * c.real
            out[:, l - m] = sqrt(2) * norm * p * c.imag
    return out


@lru_cache(maxsize=None)
def _probe_directions(l: int) -> np.ndarray:
    rng = np.random.default_rng(1234 + l)
    n = 4 * (2 * l + 1)
    for _ in range(20):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        if np.linalg.cond(real_sh(l, v)) < 1e6:
            return v
    raise RuntimeError(f"could not find well-conditioned probe set for l={l}")


def wigner_d_real(l: int, R: np.ndarray) -> np.ndarray:
    """(2l+1)x(2l+1) real matrix with ``real_sh(l, R u) = D @ real_sh(l, u)``."""
    if l == 0:
        return np.ones((1, 1))
    u = _probe_directions(l)
    Y = real_sh(l, u, check_unit=False)
    Yr = real_sh(l, u @ np.asarray(R, dtype=float).T, check_unit=False)
    # Yr = Y D^T  (rows are samples)
    Dt, *_ = np.linalg.lstsq(Y, Yr, rcond=None)
    return Dt.T


def wigner_blocks(orders, R) -> np.ndarray:
    """Block-diagonal direct sum of ``D_l(R)`` for the listed orders."""
    blocks = [wigner_d_real(l, R) for l in orders]
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    i = 0
    for b in blocks:
        k = b.shape[0]
        out[i:i + k, i:i + k] = b
        i += k
    return out


@dataclass(frozen=True)
class IrrepTable:
    """Wigner-D evaluation for orders ``0..l_max``."""
    l_max: int = L_MAX

    def D(self, l: int, R) -> np.ndarray:
        if l > self.l_max:
            raise ValueError(f"order {l} exceeds table limit {self.l_max}")
        return wigner_d_real(l, R)


@dataclass(frozen=True)
class CGBasis:
    """Orthogonal ``Q`` block-diagonalising ``D_j (x) D_l`` into ``D_J``, J ascending.

    Row-major vectorisation is used throughout: for a (2j+1)x(2l+1) matrix ``K``,
    ``vec(D_j K D_l^T) = (D_j (x) D_l) vec(K)``.
    """
    l: int
    j: int
    Q: np.ndarray

    @property
    def orders(self) -> list[int]:
        return list(range(abs(self.j - self.l), self.j + self.l + 1))

    def block(self, J: int) -> np.ndarray:
        """Rows of ``Q`` spanning the order-J block, shape (2J+1, (2j+1)(2l+1))."""
        start = sum(2 * k + 1 for k in self.orders if k < J)
        return self.Q[start:start + 2 * J + 1]


def _fixed_rotations(n: int, seed: int) -> list[np.ndarray]:
    from .geom3d import random_rotation

    rng = np.random.default_rng(seed)
    return [random_rotation(rng) for _ in range(n)]


def intertwiner(J: int, j: int, l: int) -> np.ndarray:
    """``Q_J`` with orthonormal rows solving ``Q_J (D_j (x) D_l)(R) = D_J(R) Q_J``."""
    d = (2 * j + 1) * (2 * l + 1)
    nJ = 2 * J + 1
    rows = []
    for R in _fixed_rotations(4, seed=97 + 13 * J + 5 * j + l):
        M = np.kron(wigner_d_real(j, R), wigner_d_real(l, R))
        DJ = wigner_d_real(J, R)
        # row-major vec(X) for X of shape (nJ, d): vec(X M) = (I (x) M^T) vec X, vec(DJ X) = (DJ (x) I) vec X
        rows.append(np.kron(np.eye(nJ), M.T) - np.kron(DJ, np.eye(d)))
    A = np.vstack(rows)
    _, s, Vt = np.linalg.svd(A)
    if len(s) > 1 and s[-2] < 1e-6:
        raise RuntimeError(f"intertwiner for J={J} in {j}x{l} is not unique")
    X = Vt[-1].reshape(nJ, d)
    X *= sqrt(nJ) / np.linalg.norm(X)
    # deterministic sign: largest-magnitude entry positive
    idx = np.unravel_index(np.argmax(np.abs(X)), X.shape)
    if X[idx] < 0:
        X = -X
    return X


@lru_cache(maxsize=None)
def _cg_cached(l: int, j: int) -> np.ndarray:
    blocks = [intertwiner(J, j, l) for J in range(abs(j - l), j + l + 1)]
    Q = np.vstack(blocks)
    # snap: Schur guarantees orthogonality up to solver noise; polish it away
    U, _, Vt = np.linalg.svd(Q)
    Q = U @ Vt
    Q.setflags(write=False)
    return Q


def cg_change_of_basis(l: int, j: int) -> CGBasis:
    if min(l, j) < 0 or l + j > L_MAX:
        raise ValueError(f"need l, j >= 0 and l + j <= {L_MAX}, got ({l}, {j})")
    return CGBasis(l, j, _cg_cached(l, j))


def block_diag_residual(basis: CGBasis, R) -> float:
    """Max |off-block| and |block - D_J| entry of ``Q (D_j (x) D_l) Q^T``."""
    M = np.kron(wigner_d_real(basis.j, R), wigner_d_real(basis.l, R))
    B = basis.Q @ M @ basis.Q.T
    return float(np.abs(B - wigner_blocks(basis.orders, R)).max())
