"""Synthetic datasets and masks for tests and demos."""

from __future__ import annotations

import numpy as np

from shapeapp.core import Grid, ImageDataset


# rows: factors; columns: x shift, y shift, log x-radius, log y-radius, brightness
COUPLED_LOADINGS = np.array([
    [1.0, 0.0, 0.0, 0.0, 1.0],
    [0.0, 1.0, 0.0, 0.0, -1.0],
    [0.0, 0.0, 1.0, 0.0, 0.5],
    [0.5, 0.0, 0.0, 1.0, 0.0],
])


def _blob(coords, centre, radii, amplitude):
    r2 = sum(((c - x) / r) ** 2 for c, x, r in zip(coords, centre, radii))
    return amplitude * np.exp(-0.5 * r2)


def blob_factors(n, n_factors=4, seed=0):
    """Standard-normal latent factors, one row per image."""
    return np.random.default_rng(seed).standard_normal((n, n_factors))


def blob_images(factors, dims=(32, 32), loadings=COUPLED_LOADINGS, shift=3.0, scale=0.15,
                contrast=0.3, noise=0.05, seed=0):
    """Gaussian blobs whose position, radii and brightness follow the factors.

    ``loadings`` maps each factor to (x shift, y shift, log x-radius, log
    y-radius, brightness); the default makes every factor change geometry
    and intensity together.  Extra spatial axes of 3-D grids stay fixed.
    """
    rng = np.random.default_rng(seed)
    factors = np.atleast_2d(np.asarray(factors, dtype=float))
    loadings = np.asarray(loadings, dtype=float)[: factors.shape[1]]
    coords = np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij")
    centre0 = np.array(dims, dtype=float) / 2
    radius0 = min(dims) / 6
    out = np.empty((len(factors), 1) + tuple(dims))
    for i, p in enumerate(factors @ loadings):
        centre = centre0.copy()
        centre[:2] += shift * p[:2]
        radii = np.full(len(dims), radius0)
        radii[:2] *= np.exp(scale * p[2:4])
        img = _blob(coords, centre, radii, 1.0 + contrast * p[4])
        out[i, 0] = img + noise * rng.standard_normal(dims)
    return out


def blob_dataset(n, dims=(32, 32), seed=0, kind="continuous", **kwargs) -> ImageDataset:
    values = blob_images(blob_factors(n, seed=seed), dims=dims, seed=seed + 1, **kwargs)
    if kind == "binary":
        values = (values > 0.5).astype(float)
    elif kind == "categorical":
        fg = values[:, 0] > 0.5
        edge = (values[:, 0] > 0.2) & ~fg
        values = np.stack([~fg & ~edge, edge, fg], axis=1).astype(float)
    elif kind != "continuous":
        raise ValueError(f"unknown dataset kind {kind!r}")
    return ImageDataset(Grid(dims), values, kind)


def rectangle_mask(dims, fraction=0.25, rng=None) -> np.ndarray:
    """Observed-voxel mask with one periodic axis-aligned box hidden.

    The box covers ``fraction`` of the voxels (rounded per axis) and wraps
    around the image edges.
    """
    rng = np.random.default_rng(rng)
    D = len(dims)
    side = fraction ** (1.0 / D)
    mask = np.ones(dims, dtype=bool)
    idx = []
    for n in dims:
        length = max(1, int(round(side * n)))
        start = int(rng.integers(n))
        idx.append((start + np.arange(length)) % n)
    mask[np.ix_(*idx)] = False
    return mask


def mask_dataset(ds: ImageDataset, fraction=0.25, seed=0) -> ImageDataset:
    """Copy of ``ds`` with a random hidden box per image."""
    rng = np.random.default_rng(seed)
    masks = np.stack([rectangle_mask(ds.grid.dims, fraction, rng) for _ in range(ds.n_images)])
    return ImageDataset(ds.grid, ds.values, ds.kind, mask=masks & ds.mask)
