import itertools

import numpy as np
import pytest

from shapeapp.core import Grid
from shapeapp.diffeo import (
    Deformation,
    compose,
    identity,
    jacobian,
    pull,
    push,
    shoot,
    spatial_gradient,
)
from shapeapp.operators import greens, make_vector_kernel

OMEGA_V = (1e-3, 0.0, 16.0, 1.0, 1.0)


def pull_oracle(image, psi):
    """Per-voxel multilinear interpolation with periodic wrap."""
    C = image.shape[0]
    dims = image.shape[1:]
    out = np.zeros(image.shape)
    for x in itertools.product(*[range(n) for n in dims]):
        p = psi[(slice(None),) + x]
        base = np.floor(p).astype(int)
        t = p - base
        for corner in itertools.product((0, 1), repeat=len(dims)):
            w = np.prod([t[d] if c else 1 - t[d] for d, c in enumerate(corner)])
            src = tuple((base[d] + c) % dims[d] for d, c in enumerate(corner))
            for ch in range(C):
                out[(ch,) + x] += w * image[(ch,) + src]
    return out


def random_psi(rng, dims, scale=3.0):
    return identity(dims) + scale * rng.standard_normal((len(dims),) + tuple(dims))


def smooth_velocity(rng, kernel, rms=1.0):
    v = greens(kernel, rng.standard_normal((kernel.grid.ndim,) + kernel.grid.dims))
    return v * rms / np.sqrt(np.mean(np.sum(v ** 2, axis=0)))


@pytest.mark.parametrize("dims", [(6, 7), (4, 5, 6)])
def test_pull_matches_brute_force(rng, dims):
    image = rng.standard_normal((2,) + dims)
    psi = random_psi(rng, dims)
    np.testing.assert_allclose(pull(image, psi), pull_oracle(image, psi), atol=1e-12)


def test_pull_identity_and_constants(rng):
    dims = (8, 9)
    a = rng.standard_normal((3,) + dims)
    np.testing.assert_array_equal(pull(a, identity(dims)), a)
    np.testing.assert_array_equal(push(a, identity(dims)), a)
    np.testing.assert_allclose(pull(np.full((1,) + dims, 4.5), random_psi(rng, dims)), 4.5, atol=1e-12)


def test_integer_shift_is_circular_shift(rng):
    a = rng.standard_normal((1, 4, 4))
    psi = identity((4, 4))
    psi[0] -= 1.0
    np.testing.assert_array_equal(pull(a, psi), np.roll(a, 1, axis=1))


@pytest.mark.parametrize("dims", [(8, 8), (7, 9), (5, 6, 7), (32, 32, 32)])
def test_push_is_adjoint_of_pull(rng, dims):
    trials = 1 if len(dims) == 3 and dims[0] == 32 else 25
    for _ in range(trials):
        psi = random_psi(rng, dims)
        a = rng.standard_normal((2,) + dims)
        f = rng.standard_normal((2,) + dims)
        lhs = np.vdot(pull(a, psi), f)
        rhs = np.vdot(a, push(f, psi))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_push_equals_dense_transpose(rng):
    dims = (5, 6)
    M = 30
    psi = random_psi(rng, dims)
    Psi = np.stack([pull(e.reshape((1,) + dims), psi).ravel() for e in np.eye(M)], axis=1)
    np.testing.assert_allclose(Psi.sum(axis=1), 1.0, atol=1e-12)
    f = rng.standard_normal(M)
    np.testing.assert_allclose(push(f.reshape((1,) + dims), psi).ravel(), Psi.T @ f, atol=1e-12)
    assert push(np.ones((1,) + dims), psi).sum() == pytest.approx(M)


def test_jacobian_identity_and_translation():
    for psi in (identity((8, 8)), identity((8, 8)) + np.array([1.3, -0.4])[:, None, None]):
        J, det = jacobian(psi)
        np.testing.assert_allclose(J, np.eye(2)[:, :, None, None] * np.ones((8, 8)), atol=1e-14)
        np.testing.assert_allclose(det, 1.0, atol=1e-14)


def test_jacobian_linear_map_interior():
    A = np.diag([1.1, 0.9])
    psi = np.einsum("ij,j...->i...", A, identity((16, 16)))
    _, det = jacobian(psi)
    np.testing.assert_allclose(det[1:-1, 1:-1], 0.99, atol=1e-12)
    _, det3 = jacobian(np.einsum("ij,j...->i...", np.diag([1.1, 0.9, 1.0]), identity((6, 6, 6))))
    np.testing.assert_allclose(det3[1:-1, 1:-1, 1:-1], 0.99, atol=1e-12)


def test_spatial_gradient(rng):
    np.testing.assert_array_equal(spatial_gradient(np.full((1, 8, 8), 3.0)), 0.0)
    x = np.arange(32)
    a = np.sin(2 * np.pi * x / 32)[None, :, None] * np.ones((1, 32, 16))
    g = spatial_gradient(a)
    assert g.shape == (1, 2, 32, 16)
    analytic = (2 * np.pi / 32) * np.cos(2 * np.pi * x / 32)[:, None]
    assert np.abs(g[0, 0] - analytic).max() < 0.05
    np.testing.assert_allclose(g[0, 1], 0.0, atol=1e-15)
    b = rng.standard_normal((2, 8, 8))
    c = rng.standard_normal((2, 8, 8))
    np.testing.assert_allclose(spatial_gradient(2 * b - 3 * c),
                               2 * spatial_gradient(b) - 3 * spatial_gradient(c), atol=1e-12)


def test_compose_with_identity(rng):
    psi = random_psi(rng, (8, 8), 0.5)
    np.testing.assert_allclose(compose(psi, identity((8, 8))), psi, atol=1e-12)
    np.testing.assert_allclose(compose(identity((8, 8)), psi), psi, atol=1e-12)


def test_shoot_zero_is_identity():
    k = make_vector_kernel(Grid((8, 8)), OMEGA_V)
    d = shoot(np.zeros((2, 8, 8)), k, 8)
    np.testing.assert_array_equal(d.psi, identity((8, 8)))
    np.testing.assert_array_equal(Deformation.identity((8, 8)).displacement(), 0.0)


def test_shoot_constant_velocity_translates():
    k = make_vector_kernel(Grid((16, 16)), OMEGA_V)
    c = np.array([0.7, -1.9])[:, None, None]
    d = shoot(c * np.ones((2, 16, 16)), k, 8)
    np.testing.assert_allclose(d.psi, identity((16, 16)) - c, atol=1e-12)


def test_shoot_errors():
    k = make_vector_kernel(Grid((8, 8)), OMEGA_V)
    v = np.zeros((2, 8, 8))
    v[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        shoot(v, k, 8)
    with pytest.raises(ValueError):
        shoot(np.ones((2, 8, 8)), k, 0)


def test_shoot_deterministic_and_diffeomorphic(rng):
    k = make_vector_kernel(Grid((32, 32)), OMEGA_V)
    v = smooth_velocity(rng, k, rms=2.0)
    a, b = shoot(v, k, 8), shoot(v, k, 8)
    np.testing.assert_array_equal(a.psi, b.psi)
    assert a.jac_det.min() > 0


def test_time_reversal(rng):
    k = make_vector_kernel(Grid((32, 32)), OMEGA_V)
    for _ in range(3):
        v = smooth_velocity(rng, k)
        fwd, back = shoot(v, k, 8).psi, shoot(-v, k, 8).psi
        for psi in (compose(fwd, back), compose(back, fwd)):
            err = np.sqrt(np.sum((psi - identity((32, 32))) ** 2, axis=0)).mean()
            assert err < 0.1


def test_euler_convergence_ordering(rng):
    k = make_vector_kernel(Grid((32, 32)), OMEGA_V)
    v = smooth_velocity(rng, k, rms=2.0)
    ends = {T: shoot(v, k, T).psi for T in (4, 8, 16)}
    d48 = np.abs(ends[8] - ends[4]).mean()
    d816 = np.abs(ends[16] - ends[8]).mean()
    assert d816 < d48
