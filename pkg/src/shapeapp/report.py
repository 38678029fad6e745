"""Image grids for visual inspection: binary PGM/PPM plus a PNG twin."""

from __future__ import annotations

from pathlib import Path

import numpy as np

# colours for categorical channels beyond RGB
_PALETTE = np.array([
    [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.9, 0.2, 0.2], [0.2, 0.7, 0.2],
    [0.2, 0.3, 0.9], [0.9, 0.8, 0.1], [0.8, 0.3, 0.8], [0.1, 0.8, 0.8],
])


def write_pnm(path, pixels: np.ndarray) -> None:
    """Binary PGM (2-D uint8) or PPM (``H x W x 3`` uint8)."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError("expected a 2-D grey image or an H x W x 3 colour image")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h = fields[0], int(fields[1]), int(fields[2])
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(data, dtype=np.uint8, count=int(np.prod(shape)), offset=pos).reshape(shape)


def _display_slice(image: np.ndarray) -> np.ndarray:
    """``(C, *dims)`` -> ``(C, H, W)``; 3-D volumes show their middle slice."""
    image = np.asarray(image, dtype=float)
    while image.ndim > 3:
        image = image[..., image.shape[-1] // 2]
    return image


def to_rgb(image: np.ndarray, lo=None, hi=None) -> np.ndarray:
    """Channels-first image -> ``H x W`` grey or ``H x W x 3`` colour in [0, 1]."""
    image = _display_slice(image)
    C = image.shape[0]
    if C == 1:
        img = image[0]
        lo = np.nanmin(img) if lo is None else lo
        hi = np.nanmax(img) if hi is None else hi
        return np.clip((img - lo) / (hi - lo if hi > lo else 1.0), 0.0, 1.0)
    if C == 3:
        return np.clip(np.moveaxis(image, 0, -1), 0.0, 1.0)
    palette = _PALETTE[np.arange(C) % len(_PALETTE)]
    return np.clip(np.einsum("chw,ck->hwk", image, palette), 0.0, 1.0)


def tile(images, rows: int, cols: int, pad: int = 1, lo=None, hi=None) -> np.ndarray:
    """Arrange ``rows * cols`` channels-first images into one display array."""
    images = list(images)
    if len(images) != rows * cols:
        raise ValueError(f"need {rows * cols} images, got {len(images)}")
    if lo is None and images and _display_slice(images[0]).shape[0] == 1:
        lo = min(float(np.nanmin(im)) for im in images)
        hi = max(float(np.nanmax(im)) for im in images)
    panels = [np.nan_to_num(to_rgb(im, lo, hi)) for im in images]
    h, w = panels[0].shape[:2]
    extra = panels[0].shape[2:]
    out = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad) + extra)
    for i, p in enumerate(panels):
        r, c = divmod(i, cols)
        out[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = p
    return out


def save_grid(path, images, rows: int, cols: int, png: bool = True) -> list:
    """Write the grid as PGM/PPM (extension chosen from the channels) and PNG.

    Returns the paths written.
    """
    grid = tile(images, rows, cols)
    path = Path(path)
    pnm = path.with_suffix(".pgm" if grid.ndim == 2 else ".ppm")
    write_pnm(pnm, np.round(grid * 255))
    written = [pnm]
    if png:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        target = path.with_suffix(".png")
        plt.imsave(target, grid, cmap="gray" if grid.ndim == 2 else None, vmin=0.0, vmax=1.0)
        written.append(target)
    return written


def mode_images(model, n_sd: float = 2.0):
    """Reconstructions at ``-n_sd, 0, +n_sd`` standard deviations along each latent.

    Returns a list of ``K * 3`` images, one row per latent.
    """
    from shapeapp.inference import reconstruct

    cov = np.linalg.inv(model.A_hat)
    images = []
    for k in range(model.K):
        sd = np.sqrt(cov[k, k])
        for s in (-n_sd, 0.0, n_sd):
            z = np.zeros(model.K)
            z[k] = s * sd
            images.append(reconstruct(model, z))
    return images
