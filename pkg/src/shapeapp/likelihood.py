"""Noise models: energies, pushed-back gradients and majorising Hessians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from shapeapp.core import NOISE_KINDS, SIGMA2_FLOOR
from shapeapp.diffeo import Deformation, Sampler

_LN2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class LikelihoodDerivs:
    """Energy and derivatives w.r.t. the un-warped appearance image.

    ``g`` has shape ``(C, *dims)``; ``H`` holds a ``C x C`` block per voxel,
    shape ``(C, C, *dims)``.
    """

    J: float
    g: np.ndarray
    H: np.ndarray


def _sampler(psi) -> Sampler:
    if isinstance(psi, Sampler):
        return psi
    if isinstance(psi, Deformation):
        return psi.sampler
    return Sampler(psi)


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(a, dtype=float)))


def softmax(a, axis=0):
    a = np.asarray(a, dtype=float)
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class NoiseModel:
    kind: str
    sigma2: np.ndarray = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise model {self.kind!r}")
        if self.kind == "gaussian":
            s2 = np.atleast_1d(np.asarray(self.sigma2 if self.sigma2 is not None else 1.0, dtype=float))
            if (s2 < SIGMA2_FLOOR).any():
                raise ValueError("sigma2 below floor")
            object.__setattr__(self, "sigma2", s2)

    @classmethod
    def for_model(cls, model) -> "NoiseModel":
        return cls(model.hyper.noise, model.sigma2 if model.hyper.noise == "gaussian" else None)

    def _s2(self, ndim):
        return self.sigma2.reshape((-1,) + (1,) * ndim)

    def squash(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if self.kind == "gaussian":
            return a
        if self.kind == "bernoulli":
            return sigmoid(a)
        return softmax(a, axis=0)

    def energy(self, f, a_warped, mask) -> float:
        """Negative log-likelihood summed over observed voxels."""
        a = np.asarray(a_warped, dtype=float)
        if np.isnan(a).any():
            raise ValueError("NaN in warped appearance")
        f = np.asarray(f, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        ndim = mask.ndim
        if self.kind == "categorical" and a.shape[0] < 2:
            raise ValueError("categorical model needs at least two channels")
        if self.kind == "gaussian":
            s2 = self._s2(ndim)
            r = np.where(mask, f - a, 0.0)
            per_channel = 0.5 * (_LN2PI + np.log(self.sigma2)) * mask.sum()
            return float(per_channel.sum() + (r * r / (2 * s2)).sum())
        fm = np.where(mask, f, 0.0)
        if self.kind == "bernoulli":
            # -(f a + ln s(-a)) = softplus(a) - f a
            e = np.logaddexp(0.0, a) - fm * a
            return float(np.where(mask, e, 0.0).sum())
        amax = a.max(axis=0)
        lse = amax + np.log(np.exp(a - amax).sum(axis=0))
        e = lse - (fm * a).sum(axis=0)
        return float(np.where(mask, e, 0.0).sum())

    def residual_and_weights(self, f, a_warped, mask):
        """Warped-space gradient and Hessian weights, zeroed where unobserved."""
        f = np.asarray(f, dtype=float)
        a = np.asarray(a_warped, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        C = a.shape[0]
        W = np.zeros((C, C) + a.shape[1:])
        if self.kind == "gaussian":
            s2 = self._s2(mask.ndim)
            r = np.where(mask, (a - f) / s2, 0.0)
            for c in range(C):
                W[c, c] = np.where(mask, 1.0 / self.sigma2[c], 0.0)
            return r, W
        s = self.squash(a)
        r = np.where(mask, s - f, 0.0)
        if self.kind == "bernoulli":
            for c in range(C):
                W[c, c] = np.where(mask, s[c] * (1.0 - s[c]), 0.0)
            return r, W
        for j in range(C):
            for k in range(C):
                W[j, k] = np.where(mask, s[j] * ((j == k) - s[k]), 0.0)
        return r, W

    def derivatives(self, f, a, psi, mask) -> LikelihoodDerivs:
        """Energy, gradient and diagonal-majoriser Hessian w.r.t. ``a``.

        ``psi`` may be a :class:`Deformation`, a :class:`Sampler` or raw
        sampling coordinates.
        """
        sampler = _sampler(psi)
        a_warped = sampler.pull(a)
        J = self.energy(f, a_warped, mask)
        r, W = self.residual_and_weights(f, a_warped, mask)
        return LikelihoodDerivs(J, sampler.push(r), sampler.push(W))


def energy(model: NoiseModel, f, a_warped, mask) -> float:
    return model.energy(f, a_warped, mask)


def derivatives(model: NoiseModel, f, a, psi, mask) -> LikelihoodDerivs:
    return model.derivatives(f, a, psi, mask)


def squash(model: NoiseModel, a) -> np.ndarray:
    return model.squash(a)


def update_sigma2(values, reconstructions, masks) -> np.ndarray:
    """Per-channel maximum-likelihood variance over observed voxels, floored."""
    sse, count = sigma2_stats(values, reconstructions, masks)
    return sigma2_from_stats(sse, count)


def sigma2_stats(values, reconstructions, masks):
    sse = 0.0
    count = 0
    for f, a, m in zip(values, reconstructions, masks):
        f = np.asarray(f, dtype=float)
        r = np.where(m, f - np.asarray(a, dtype=float), 0.0)
        sse = sse + (r * r).reshape(r.shape[0], -1).sum(axis=1)
        count += int(np.count_nonzero(m))
    return np.asarray(sse, dtype=float), count


def sigma2_from_stats(sse, count) -> np.ndarray:
    if count == 0:
        raise ValueError("no observed voxels to estimate sigma2 from")
    return np.maximum(np.asarray(sse, dtype=float) / count, SIGMA2_FLOOR)
