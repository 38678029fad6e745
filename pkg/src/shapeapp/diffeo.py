"""Diffeomorphisms from geodesic shooting, and the resampling primitives.

A deformation ``psi`` is stored as absolute sampling coordinates of shape
``(D, *dims)`` in voxel units; it is never wrapped, so ``psi - id`` is a
periodic displacement field.  Warping an image means sampling it at ``psi``
with multilinear interpolation and periodic wrap.
"""

from __future__ import annotations

import functools

import numpy as np

from shapeapp.operators import OperatorKernel, apply, greens


@functools.lru_cache(maxsize=16)
def _identity(dims):
    ident = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij"))
    ident.setflags(write=False)
    return ident


def identity(dims) -> np.ndarray:
    return _identity(tuple(int(n) for n in dims)).copy()


class Sampler:
    """Multilinear periodic interpolation at fixed sampling points.

    Represents the sparse matrix ``Psi`` (pull) and its transpose (push).
    """

    def __init__(self, psi: np.ndarray):
        psi = np.asarray(psi, dtype=float)
        D = psi.shape[0]
        dims = psi.shape[1:]
        if len(dims) != D:
            raise ValueError("psi must have shape (D, *dims)")
        if not (np.abs(psi) < 2.0 ** 52).all():
            raise FloatingPointError("sampling coordinates are not finite or out of range")
        self.dims = dims
        self.M = int(np.prod(dims))
        flat_psi = psi.reshape(D, self.M)
        base = np.floor(flat_psi)
        self.frac = flat_psi - base
        base = base.astype(np.int64)
        size = np.array(dims, dtype=np.int64)[:, None]
        strides = np.cumprod((1,) + dims[::-1])[:-1][::-1]
        lo = np.mod(base, size) * strides[:, None]
        hi = np.mod(base + 1, size) * strides[:, None]
        # corner c uses hi along axis d when bit (D-1-d) of c is set, the
        # order pull's nested lerp expects; the last axis is added first
        index = np.zeros((1, self.M), dtype=np.int64)
        weight = np.ones((1, self.M))
        for d in reversed(range(D)):
            t = self.frac[d]
            index = np.concatenate([index + lo[d], index + hi[d]])
            weight = np.concatenate([weight * (1.0 - t), weight * t])
        self.index = index
        self.weight = weight

    def pull(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=float)
        lead = image.shape[: image.ndim - len(self.dims)]
        flat = image.reshape((-1, self.M))
        vals = flat[:, self.index]  # (P, 2**D, M)
        D = len(self.dims)
        for d in range(D):
            vals = vals.reshape(vals.shape[0], 2, -1, self.M)
            t = self.frac[d]
            vals = vals[:, 0] + t * (vals[:, 1] - vals[:, 0])
        return vals.reshape(lead + self.dims)

    def push(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=float)
        lead = image.shape[: image.ndim - len(self.dims)]
        flat = image.reshape((-1, self.M))
        idx = self.index.ravel()
        out = np.empty_like(flat)
        for p in range(flat.shape[0]):
            out[p] = np.bincount(idx, weights=(self.weight * flat[p]).ravel(), minlength=self.M)
        return out.reshape(lead + self.dims)


class Deformation:
    """Sampling map ``psi`` with lazily computed sampler and Jacobian."""

    def __init__(self, psi: np.ndarray):
        self.psi = np.asarray(psi, dtype=float)
        self._sampler = None
        self._jac = None

    @classmethod
    def identity(cls, dims) -> "Deformation":
        return cls(identity(dims))

    @property
    def dims(self):
        return self.psi.shape[1:]

    @property
    def sampler(self) -> Sampler:
        if self._sampler is None:
            self._sampler = Sampler(self.psi)
        return self._sampler

    @property
    def jac(self):
        if self._jac is None:
            self._jac = jacobian(self.psi)
        return self._jac[0]

    @property
    def jac_det(self):
        if self._jac is None:
            self._jac = jacobian(self.psi)
        return self._jac[1]

    def displacement(self) -> np.ndarray:
        return self.psi - identity(self.dims)


def pull(image, psi) -> np.ndarray:
    """Warp ``image`` (``(C, *dims)``) by sampling it at ``psi``."""
    return Sampler(psi).pull(image)


def push(image, psi) -> np.ndarray:
    """Adjoint of :func:`pull`: scatter ``image`` back through ``psi``."""
    return Sampler(psi).push(image)


def _central(field, axis):
    return 0.5 * (np.roll(field, -1, axis=axis) - np.roll(field, 1, axis=axis))


def spatial_gradient(image) -> np.ndarray:
    """Central-difference gradient with periodic wrap: ``(C, *dims) -> (C, D, *dims)``."""
    image = np.asarray(image, dtype=float)
    D = image.ndim - 1
    return np.stack([_central(image, axis=1 + d) for d in range(D)], axis=1)


def _det(J):
    D = J.shape[0]
    if D == 2:
        return J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    return (
        J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
        - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
        + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
    )


def jacobian(psi):
    """Jacobian field ``J[j, i] = d psi_j / d x_i`` and its determinants.

    Central differences of the periodic displacement ``psi - id``, plus the
    identity.
    """
    psi = np.asarray(psi, dtype=float)
    D = psi.shape[0]
    disp = psi - identity(psi.shape[1:])
    J = np.empty((D, D) + psi.shape[1:])
    for i in range(D):
        J[:, i] = _central(disp, axis=1 + i)
        J[i, i] += 1.0
    return J, _det(J)


def compose(outer, inner) -> np.ndarray:
    """``outer(inner(x))`` for absolute sampling maps."""
    inner = np.asarray(inner, dtype=float)
    disp = np.asarray(outer, dtype=float) - identity(inner.shape[1:])
    return inner + Sampler(inner).pull(disp)


def shoot(v0, kernel_v: OperatorKernel, T_steps: int = 8) -> Deformation:
    """Geodesic shooting by Euler integration.

    ``u0 = L v0``; then ``T_steps`` times: transport the momentum,
    ``u = |D psi| (D psi)^T u0(psi)``, recover the velocity ``v = L^{-1} u``
    and update ``psi <- psi(id - v / T)``.
    """
    v0 = np.asarray(v0, dtype=float)
    if not np.isfinite(v0).all():
        raise ValueError("initial velocity contains NaN or inf")
    # a finite but huge v0 can still overflow; that raises FloatingPointError
    if T_steps < 1:
        raise ValueError("T_steps must be >= 1")
    dims = v0.shape[1:]
    ident = identity(dims)
    if not v0.any():
        return Deformation(ident)
    u0 = apply(kernel_v, v0)
    psi = ident
    for _ in range(T_steps):
        J, det = jacobian(psi)
        u0_psi = Sampler(psi).pull(u0)
        u = det * np.einsum("ji...,j...->i...", J, u0_psi)
        v = greens(kernel_v, u)
        psi = compose(psi, ident - v / T_steps)
        if not np.isfinite(psi).all():
            raise FloatingPointError("geodesic shooting diverged")
    return Deformation(psi)
