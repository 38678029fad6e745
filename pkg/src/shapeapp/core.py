"""Domain types shared by every other module.

Images are stored channel-first on a periodic grid: an image is an array of
shape ``(C, *dims)``, a velocity field ``(D, *dims)``.  Datasets keep the raw
32-bit payload (NaN marks a missing voxel) next to a boolean mask, and the mask
is what the numerical code consults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SIGMA2_FLOOR = 1e-6

DATASET_KINDS = ("continuous", "binary", "categorical")
NOISE_KINDS = ("gaussian", "bernoulli", "categorical")
NOISE_FOR_KIND = {"continuous": "gaussian", "binary": "bernoulli", "categorical": "categorical"}


class HyperParamError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"grid must be 2-D or 3-D, got {len(dims)} axes")
        if min(dims) < 4:
            raise ValueError(f"every grid axis needs at least 4 voxels, got {dims}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def voxel_count(self) -> int:
        return math.prod(self.dims)


class ImageDataset:
    """N images with C channels on a common grid.

    ``values`` is the float32 payload of shape ``(N, C, *dims)`` with NaN at
    every missing voxel; ``mask`` has shape ``(N, *dims)`` and is True where a
    voxel is observed in all channels.
    """

    def __init__(self, grid: Grid, values, kind: str = "continuous", mask=None):
        if kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {kind!r}")
        values = np.array(values, dtype=np.float32, copy=True)
        if values.ndim != grid.ndim + 2 or values.shape[2:] != grid.dims:
            raise ValueError(
                f"values of shape {values.shape} do not match grid {grid.dims}"
            )
        observed = ~np.isnan(values).any(axis=1)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != observed.shape:
                raise ValueError("mask shape does not match values")
            observed &= mask
        values[np.broadcast_to(~observed[:, None], values.shape)] = np.nan
        self.grid = grid
        self.kind = kind
        self.values = values
        self.mask = observed
        self._check_kind()
        self.values.setflags(write=False)
        self.mask.setflags(write=False)

    def _check_kind(self):
        obs = np.broadcast_to(self.mask[:, None], self.values.shape)
        if self.kind == "binary":
            v = self.values[obs]
            if v.size and (v.min() < 0 or v.max() > 1):
                raise ValueError("binary datasets need observed values in [0, 1]")
        elif self.kind == "categorical":
            if self.n_channels < 2:
                raise ValueError("categorical datasets need at least two channels")
            v = np.moveaxis(self.values, 1, -1)[self.mask]
            if v.size and (v.min() < 0 or np.abs(v.sum(axis=-1) - 1).max() > 1e-5):
                raise ValueError("categorical channels must be >= 0 and sum to 1")

    @property
    def n_images(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def noise_kind(self) -> str:
        return NOISE_FOR_KIND[self.kind]

    def image(self, n: int) -> np.ndarray:
        return self.values[n].astype(np.float64)

    def subset(self, index) -> "ImageDataset":
        return ImageDataset(self.grid, self.values[index], self.kind)


@dataclass(frozen=True)
class HyperParams:
    """Model hyper-parameters.

    In shared mode one latent vector of length ``K_a == K_v`` drives both
    bases.  In split mode the latent vector is ``[z_appearance; z_shape]`` of
    length ``K_a + K_v``; either count may be zero (appearance-only or
    shape-only models).
    """

    K_a: int = 4
    K_v: int = 4
    shared_latents: bool = True
    omega_v: tuple = (1e-3, 0.0, 16.0, 1.0, 1.0)
    omega_a: tuple = (0.002, 0.2, 0.0)
    omega_mu: tuple = (1e-5, 1e-3, 0.0)
    lambda1: float = 0.95
    lambda2: float = 0.05
    nu0: Optional[float] = None
    Lambda0: Optional[np.ndarray] = field(default=None, compare=False)
    shoot_steps: int = 8
    em_iters: int = 10
    noise: str = "gaussian"

    def __post_init__(self):
        for name in ("omega_v", "omega_a", "omega_mu"):
            object.__setattr__(self, name, tuple(float(w) for w in getattr(self, name)))
        if self.nu0 is None:
            object.__setattr__(self, "nu0", float(self.K))
        if self.Lambda0 is None:
            object.__setattr__(self, "Lambda0", np.eye(self.K) / max(self.nu0, 1e-300))
        else:
            object.__setattr__(self, "Lambda0", np.array(self.Lambda0, dtype=float))

    @property
    def K(self) -> int:
        return self.K_a if self.shared_latents else self.K_a + self.K_v

    @property
    def appearance_index(self) -> np.ndarray:
        return np.arange(self.K_a)

    @property
    def shape_index(self) -> np.ndarray:
        if self.shared_latents:
            return np.arange(self.K_v)
        return np.arange(self.K_a, self.K_a + self.K_v)

    @property
    def blocks(self) -> list:
        """Latent index groups that may be mixed by a reparameterisation."""
        if self.shared_latents:
            return [np.arange(self.K)] if self.K else []
        return [b for b in (self.appearance_index, self.shape_index) if b.size]

    def replace(self, **changes) -> "HyperParams":
        if ("K_a" in changes or "K_v" in changes or "shared_latents" in changes):
            changes.setdefault("nu0", None)
            changes.setdefault("Lambda0", None)
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        return {
            "K_a": self.K_a,
            "K_v": self.K_v,
            "shared_latents": self.shared_latents,
            "omega_v": list(self.omega_v),
            "omega_a": list(self.omega_a),
            "omega_mu": list(self.omega_mu),
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "nu0": self.nu0,
            "Lambda0": np.asarray(self.Lambda0).tolist(),
            "shoot_steps": self.shoot_steps,
            "em_iters": self.em_iters,
            "noise": self.noise,
        }

    @classmethod
    def from_json(cls, d: dict) -> "HyperParams":
        d = dict(d)
        d["Lambda0"] = np.array(d["Lambda0"], dtype=float).reshape(
            (len(d["Lambda0"]),) * 2 if d["Lambda0"] else (0, 0)
        )
        return cls(**d)


def validate_hyper(h: HyperParams) -> None:
    """Raise :class:`HyperParamError` naming the first violated constraint."""
    if h.noise not in NOISE_KINDS:
        raise HyperParamError(f"unknown noise model {h.noise!r}")
    if h.K_a < 0 or h.K_v < 0:
        raise HyperParamError("basis counts must be non-negative")
    if h.shared_latents and h.K_a != h.K_v:
        raise HyperParamError("shared latents need K_a == K_v")
    if h.K < 1:
        raise HyperParamError("at least one latent variable is required")
    if len(h.omega_v) != 5 or len(h.omega_a) != 3 or len(h.omega_mu) != 3:
        raise HyperParamError("omega_v needs 5 values, omega_a and omega_mu need 3")
    if min(h.omega_v + h.omega_a + h.omega_mu) < 0:
        raise HyperParamError("omega values must be non-negative")
    if h.omega_v[0] <= 0:
        raise HyperParamError("omega_v[0] must be > 0: Green's function undefined")
    if h.lambda1 < 0 or h.lambda2 < 0:
        raise HyperParamError("lambda1 and lambda2 must be non-negative")
    if h.lambda1 + h.lambda2 <= 0:
        raise HyperParamError("lambda1 + lambda2 must be > 0")
    if h.nu0 < h.K:
        raise HyperParamError(f"nu0={h.nu0} must be >= K={h.K}")
    L0 = np.asarray(h.Lambda0, dtype=float)
    if L0.shape != (h.K, h.K):
        raise HyperParamError(f"Lambda0 must be {h.K}x{h.K}")
    if not np.allclose(L0, L0.T, rtol=1e-10, atol=0):
        raise HyperParamError("Lambda0 must be symmetric")
    if np.linalg.eigvalsh(L0).min() <= 0:
        raise HyperParamError("Lambda0 must be positive definite")
    if h.shoot_steps < 1:
        raise HyperParamError("shoot_steps must be >= 1")
    if h.em_iters < 0:
        raise HyperParamError("em_iters must be >= 0")


@dataclass(frozen=True)
class ModelState:
    """Learned parameters.

    ``W_a`` has shape ``(K_a, C, *dims)`` and ``W_v`` ``(K_v, D, *dims)``;
    which latent rows drive them is given by ``hyper.appearance_index`` and
    ``hyper.shape_index``.
    """

    mu: np.ndarray
    W_a: np.ndarray
    W_v: np.ndarray
    A_hat: np.ndarray
    sigma2: np.ndarray
    hyper: HyperParams

    @property
    def grid(self) -> Grid:
        return Grid(self.mu.shape[1:])

    @property
    def n_channels(self) -> int:
        return self.mu.shape[0]

    @property
    def K(self) -> int:
        return self.hyper.K

    def replace(self, **changes) -> "ModelState":
        return dataclasses.replace(self, **changes)

    def appearance(self, z) -> np.ndarray:
        """Un-warped appearance image for latent vector ``z``."""
        za = np.asarray(z, dtype=float)[self.hyper.appearance_index]
        return self.mu + np.tensordot(za, self.W_a, axes=1)

    def velocity(self, z) -> np.ndarray:
        zv = np.asarray(z, dtype=float)[self.hyper.shape_index]
        return np.tensordot(zv, self.W_v, axes=1)

    def basis_gram(self, kernel_a, kernel_v) -> np.ndarray:
        """``(W^v)^T L^v W^v + (W^a)^T L^a W^a`` embedded in the K x K latent space."""
        from shapeapp.operators import apply

        C = np.zeros((self.K, self.K))
        for W, kern, idx in (
            (self.W_a, kernel_a, self.hyper.appearance_index),
            (self.W_v, kernel_v, self.hyper.shape_index),
        ):
            if not len(idx):
                continue
            LW = np.stack([apply(kern, w) for w in W])
            G = np.tensordot(W, LW, axes=(tuple(range(1, W.ndim)),) * 2)
            C[np.ix_(idx, idx)] += 0.5 * (G + G.T)
        return C


def empty_model(hyper: HyperParams, grid: Grid, n_channels: int) -> ModelState:
    return ModelState(
        mu=np.zeros((n_channels,) + grid.dims),
        W_a=np.zeros((hyper.K_a, n_channels) + grid.dims),
        W_v=np.zeros((hyper.K_v, grid.ndim) + grid.dims),
        A_hat=np.eye(hyper.K),
        sigma2=np.ones(n_channels),
        hyper=hyper,
    )


@dataclass(frozen=True)
class LatentState:
    Z_hat: np.ndarray
    S: np.ndarray
    C_z: np.ndarray


# -- order-independent summation ---------------------------------------------

_LIMB_BITS = 30
_N_LIMBS = 7
_LOW_EXP = -150
_MAX_ABS = 2.0 ** (_LOW_EXP + _LIMB_BITS * _N_LIMBS)


def _split_limbs(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise FloatingPointError("non-finite value in reduction")
    if x.size and np.abs(x).max() >= _MAX_ABS:
        raise FloatingPointError("value too large for exact reduction")
    rest = np.ldexp(np.abs(x), -_LOW_EXP)
    limbs = np.empty((_N_LIMBS,) + x.shape)
    for k in range(_N_LIMBS - 1, -1, -1):
        scale = 2.0 ** (_LIMB_BITS * k)
        q = np.floor(rest / scale)
        limbs[k] = q
        rest = rest - q * scale
    return limbs * np.sign(x)


class ExactSum:
    """Accumulator whose result does not depend on summation order.

    Each addend is split into 30-bit integer limbs on a fixed binary grid
    (resolution 2**-150); the limb sums are exact in float64 for fewer than
    2**23 addends, so any grouping or ordering of the same addends gives a
    bitwise-identical :meth:`value`.
    """

    def __init__(self, shape=(), limbs=None):
        if limbs is not None:
            self.limbs = np.array(limbs, dtype=np.float64)
        else:
            self.limbs = np.zeros((_N_LIMBS,) + tuple(shape))

    @property
    def shape(self):
        return self.limbs.shape[1:]

    def add(self, x) -> "ExactSum":
        self.limbs += _split_limbs(x)
        return self

    def merge(self, other: "ExactSum") -> "ExactSum":
        self.limbs += other.limbs
        return self

    def value(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for k in range(_N_LIMBS):
            out = out + np.ldexp(self.limbs[k], _LOW_EXP + _LIMB_BITS * k)
        return out


def exact_sum(arrays: Sequence[np.ndarray], shape=None) -> ExactSum:
    acc = None
    for a in arrays:
        if acc is None:
            acc = ExactSum(np.shape(a))
        acc.add(a)
    if acc is None:
        acc = ExactSum(shape or ())
    return acc


# -- latent initialisation ----------------------------------------------------

def raw_latent(seed: int, key: int, K: int) -> np.ndarray:
    """Random draw for the image identified by ``key``."""
    return np.random.default_rng([int(seed), int(key)]).standard_normal(K)


def image_key(values) -> int:
    """64-bit content hash of one image's float32 payload.

    Seeding latents by content rather than position makes training
    independent of image order and of how images are sharded.
    """
    data = np.ascontiguousarray(values, dtype="<f4").tobytes()
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def whitening(gram: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of a positive-definite Gram matrix."""
    d, V = np.linalg.eigh(0.5 * (gram + gram.T))
    if d.min() <= 1e-12 * max(d.max(), 1e-300):
        raise np.linalg.LinAlgError("latent Gram matrix is rank deficient")
    return (V / np.sqrt(d)) @ V.T


def init_latents(N: int, K: int, rng_seed: int) -> LatentState:
    """Random latents with orthonormal rows (``Z Z^T = I``)."""
    if N < 1 or K < 1:
        raise ValueError("need N >= 1 and K >= 1")
    if K > N:
        raise ValueError(f"cannot orthonormalise K={K} rows of length N={N}")
    Z = np.stack([raw_latent(rng_seed, n, K) for n in range(N)], axis=1)
    gram = exact_sum(np.outer(z, z) for z in Z.T).value()
    Z = whitening(gram) @ Z
    return LatentState(Z_hat=Z, S=np.zeros((K, K)), C_z=np.eye(K))


VARIANTS = ("shared", "split", "shape", "appearance")


def variant_hyper(base: HyperParams, variant: str, K: int) -> HyperParams:
    """Hyper-parameters for a model family with ``K`` latent variables.

    ``shared``: K latents drive K appearance and K shape columns; ``split``:
    ceil(K/2) appearance and floor(K/2) shape latents; ``shape`` and
    ``appearance``: a single basis of K columns.
    """
    if variant == "shared":
        counts = dict(K_a=K, K_v=K, shared_latents=True)
    elif variant == "split":
        counts = dict(K_a=(K + 1) // 2, K_v=K // 2, shared_latents=False)
    elif variant == "shape":
        counts = dict(K_a=0, K_v=K, shared_latents=False)
    elif variant == "appearance":
        counts = dict(K_a=K, K_v=0, shared_latents=False)
    else:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    nu0 = base.nu0 if base.nu0 >= K else float(K)
    return base.replace(**counts, nu0=nu0, Lambda0=None)
