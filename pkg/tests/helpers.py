"""Independent oracles and builders shared by the tests."""

import numpy as np

from shapeapp.core import Grid, HyperParams, ImageDataset


def difference_matrix(dims, axis):
    """Dense periodic forward difference ``a(x + e_axis) - a(x)``."""
    M = int(np.prod(dims))
    idx = np.arange(M).reshape(dims)
    ahead = np.roll(idx, -1, axis=axis)  # ahead[x] is the index of x + e_axis
    D = -np.eye(M)
    D[idx.ravel(), ahead.ravel()] += 1.0
    return D


def dense_scalar(dims, omega):
    M = int(np.prod(dims))
    Ds = [difference_matrix(dims, j) for j in range(len(dims))]
    lap = sum(D.T @ D for D in Ds)
    return omega[0] * np.eye(M) + omega[1] * lap + omega[2] * lap.T @ lap


def dense_vector(dims, omega):
    D = len(dims)
    M = int(np.prod(dims))
    Ds = [difference_matrix(dims, j) for j in range(D)]
    lap = sum(d.T @ d for d in Ds)
    iso = omega[0] * np.eye(M) + omega[1] * lap + omega[2] * lap.T @ lap
    L = np.kron(np.eye(D), iso)

    def select(p, d):
        # maps the stacked field to d applied to component p
        E = np.zeros((M, D * M))
        E[:, p * M:(p + 1) * M] = d
        return E

    for i in range(D):
        for j in range(D):
            R = select(i, Ds[j]) + select(j, Ds[i])
            L += omega[3] / 4.0 * R.T @ R
    div = sum(select(i, Ds[i]) for i in range(D))
    L += omega[4] * div.T @ div
    return L


def smooth_field(rng, shape, passes=2):
    """Random field smoothed by periodic box averaging along the last two axes."""
    x = rng.standard_normal(shape)
    for _ in range(passes):
        for ax in (-1, -2):
            x = (np.roll(x, 1, ax) + x + np.roll(x, -1, ax)) / 3.0
    return x


def random_dataset(rng, n=4, dims=(8, 8), channels=1, kind="continuous"):
    grid = Grid(dims)
    if kind == "continuous":
        values = rng.standard_normal((n, channels) + dims)
    elif kind == "binary":
        values = (rng.random((n, channels) + dims) > 0.5).astype(float)
    else:
        labels = rng.integers(0, channels, size=(n,) + dims)
        values = np.moveaxis(np.eye(channels)[labels], -1, 1)
    return ImageDataset(grid, values, kind)


def small_hyper(**kw):
    base = dict(K_a=2, K_v=2, omega_v=(1e-2, 0.0, 4.0, 0.5, 0.5), omega_a=(0.01, 0.1, 0.0),
                omega_mu=(1e-3, 1e-2, 0.0), em_iters=3, shoot_steps=4)
    base.update(kw)
    return HyperParams(**base)


def fd_gradient(fun, x, eps=1e-5):
    """Central finite-difference gradient of a scalar function."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (fun(x + e) - fun(x - e)) / (2 * eps)
    return g


def rel_err(x, y):
    return float(np.linalg.norm(np.asarray(x) - np.asarray(y)) / np.linalg.norm(y))


def random_model(rng, hyper, dims=(8, 8), channels=1, velocity_scale=0.0):
    """Smooth random parameters; ``velocity_scale=0`` keeps every warp at the identity."""
    from shapeapp.core import empty_model

    m = empty_model(hyper, Grid(dims), channels)
    K = hyper.K
    X = rng.standard_normal((K, K))
    return m.replace(
        mu=smooth_field(rng, (channels,) + dims),
        W_a=0.3 * smooth_field(rng, (hyper.K_a, channels) + dims),
        W_v=velocity_scale * smooth_field(rng, (hyper.K_v, len(dims)) + dims),
        A_hat=X @ X.T / K + np.eye(K),
        sigma2=np.linspace(0.5, 1.0, channels),
    )


def appearance_hyper(K=2, noise="gaussian", **kw):
    """Appearance-only model: warps are always the identity."""
    base = dict(K_a=K, K_v=0, shared_latents=False, omega_a=(0.01, 0.1, 0.0),
                omega_mu=(1e-3, 1e-2, 0.0), noise=noise)
    base.update(kw)
    return HyperParams(**base)
