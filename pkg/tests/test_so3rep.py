from math import pi, sqrt

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from equitrack.geom3d import random_rotation, rot_z
from equitrack.so3rep import (L_MAX, IrrepTable, block_diag_residual, cg_change_of_basis, real_sh,
                              wigner_blocks, wigner_d_real)

seeds = st.integers(0, 2 ** 32 - 1)


def test_order0_and_order1_closed_forms():
    u = np.array([0.36, 0.48, 0.8])
    assert real_sh(0, u)[0] == pytest.approx(1.0 / (2.0 * sqrt(pi)))
    np.testing.assert_allclose(real_sh(1, u), sqrt(3.0 / (4.0 * pi)) * u[[1, 2, 0]], atol=1e-15)


def test_order2_frozen_values():
    u = np.array([0.36, 0.48, 0.8])
    x, y, z = u
    c = 0.5 * sqrt(15.0 / pi)
    expected = [c * x * y, c * y * z, 0.25 * sqrt(5.0 / pi) * (3 * z * z - 1), c * x * z, 0.5 * c * (x * x - y * y)]
    np.testing.assert_allclose(real_sh(2, u), expected, atol=1e-14)


def test_input_validation():
    with pytest.raises(ValueError):
        real_sh(1, [1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        real_sh(L_MAX + 1, [1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        cg_change_of_basis(3, 2)
    with pytest.raises(ValueError):
        IrrepTable(2).D(3, np.eye(3))


def test_orthonormality_monte_carlo():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(200_000, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    Y = np.hstack([real_sh(l, u) for l in range(L_MAX + 1)])
    G = 4 * pi * Y.T @ Y / len(u)
    # Monte-Carlo error ~ 1/sqrt(N)
    assert np.abs(G - np.eye(len(G))).max() < 1e-2


def test_wigner_d_of_z_rotation_order1():
    # order-1 basis is (y, z, x): a z-rotation mixes components 0 and 2 only
    D = wigner_d_real(1, rot_z(90.0))
    np.testing.assert_allclose(D, [[0, 0, 1], [0, 1, 0], [-1, 0, 0]], atol=1e-12)


@given(seeds)
def test_homomorphism_and_orthogonality(seed):
    rng = np.random.default_rng(seed)
    A, B = random_rotation(rng), random_rotation(rng)
    for l in range(L_MAX + 1):
        DA, DB = wigner_d_real(l, A), wigner_d_real(l, B)
        np.testing.assert_allclose(wigner_d_real(l, A @ B), DA @ DB, atol=1e-10)
        np.testing.assert_allclose(DA @ DA.T, np.eye(2 * l + 1), atol=1e-10)
        np.testing.assert_allclose(wigner_d_real(l, A.T), DA.T, atol=1e-10)


@given(seeds)
def test_defining_relation(seed):
    rng = np.random.default_rng(seed)
    R = random_rotation(rng)
    u = rng.normal(size=(10, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    for l in range(L_MAX + 1):
        np.testing.assert_allclose(real_sh(l, u @ R.T), real_sh(l, u) @ wigner_d_real(l, R).T, atol=1e-10)


def test_identity_rotation():
    for l in range(L_MAX + 1):
        np.testing.assert_allclose(wigner_d_real(l, np.eye(3)), np.eye(2 * l + 1), atol=1e-12)


def test_wigner_blocks_layout():
    R = rot_z(30.0)
    B = wigner_blocks([0, 1, 1], R)
    assert B.shape == (7, 7)
    np.testing.assert_allclose(B[1:4, 1:4], wigner_d_real(1, R))
    np.testing.assert_allclose(B[4:7, 1:4], 0.0)


@pytest.mark.parametrize("l,j", [(l, j) for l in range(3) for j in range(3)] + [(1, 3), (0, 4)])
def test_cg_block_diagonalises(l, j):
    basis = cg_change_of_basis(l, j)
    d = (2 * l + 1) * (2 * j + 1)
    assert basis.Q.shape == (d, d)
    np.testing.assert_allclose(basis.Q @ basis.Q.T, np.eye(d), atol=1e-12)
    assert basis.orders == list(range(abs(l - j), l + j + 1))
    rng = np.random.default_rng(l * 10 + j)
    for _ in range(5):
        assert block_diag_residual(basis, random_rotation(rng)) < 1e-10


def test_cg_is_deterministic():
    a = cg_change_of_basis(1, 2).Q
    b = cg_change_of_basis(1, 2).Q
    assert a is b or np.array_equal(a, b)
    # the order-0 block of 1 x 1 is the normalised identity (trace)
    q0 = cg_change_of_basis(1, 1).block(0)
    np.testing.assert_allclose(np.abs(q0), np.eye(3).reshape(1, -1) / sqrt(3.0), atol=1e-12)
