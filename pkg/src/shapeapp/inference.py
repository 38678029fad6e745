"""Using a trained model: latent fitting, Laplace evidence, classification,
sampling, reconstruction and imputation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from shapeapp.core import HyperParams, ImageDataset, ModelState, variant_hyper
from shapeapp.likelihood import NoiseModel
from shapeapp.synthetic import mask_dataset
from shapeapp.trainer import (
    MAX_HALVINGS,
    deform,
    image_energy,
    latent_precision,
    latent_step,
    latent_system,
    operators_for,
    train,
)


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class Posterior:
    """Laplace approximation of one image's latent posterior.

    ``hessian`` is ``H + P`` at the mode and ``neg_log_joint`` is
    ``J(f, z_hat) + z_hat^T P z_hat / 2``.
    """

    z_hat: np.ndarray
    hessian: np.ndarray
    neg_log_joint: float
    precision: np.ndarray
    iterations: int = 0


def _prepare(model: ModelState, image, mask):
    image = np.asarray(image, dtype=float)
    dims = model.grid.dims
    if image.shape != (model.n_channels,) + dims:
        raise ValueError(f"image shape {image.shape} does not match model {(model.n_channels,) + dims}")
    observed = ~np.isnan(image).any(axis=0)
    if mask is not None:
        observed &= np.asarray(mask, dtype=bool)
    return image, observed


def fit(model: ModelState, image, mask=None, max_iters: int = 50, tol: float = 1e-6) -> Posterior:
    """Mode of ``p(f, z)`` by Gauss-Newton from ``z = 0``.

    Stops when the step norm drops below ``tol`` or a step cannot be
    accepted after the maximum number of halvings.
    """
    image, mask = _prepare(model, image, mask)
    ops = operators_for(model.hyper, model.grid)
    noise = NoiseModel.for_model(model)
    P = latent_precision(model, ops)
    z = np.zeros(model.K)
    it = 0
    for it in range(1, max_iters + 1):
        z_new, _, J, halvings = latent_step(model, ops, noise, image, mask, z, P)
        if not np.isfinite(J):
            raise FitError("latent fit diverged")
        moved = np.linalg.norm(z_new - z)
        z = z_new
        if halvings > MAX_HALVINGS or moved < tol:
            break
    J, _, H = latent_system(model, ops, noise, image, mask, z)
    return Posterior(z, H + P, J + 0.5 * z @ P @ z, P, it)


def log_evidence(post: Posterior) -> float:
    """Laplace estimate of ``ln p(f)``.

    ``-J - z^T P z / 2 + ln|P| / 2 - ln|H + P| / 2``: the prior's
    normaliser ``(2 pi)^{-K/2}`` cancels the Gaussian integral's
    ``(2 pi)^{K/2}``.
    """
    K = np.size(post.z_hat)
    if K == 0:
        return -float(post.neg_log_joint)
    sign_h, logdet_h = np.linalg.slogdet(post.hessian)
    sign_p, logdet_p = np.linalg.slogdet(post.precision)
    if sign_h <= 0 or np.linalg.eigvalsh(post.hessian).min() <= 0:
        raise np.linalg.LinAlgError("Hessian is not positive definite")
    if sign_p <= 0:
        raise np.linalg.LinAlgError("prior precision is not positive definite")
    return float(-post.neg_log_joint + 0.5 * logdet_p - 0.5 * logdet_h)


def softmax_evidence(log_evidences, priors=None) -> np.ndarray:
    """Posterior model probabilities from log evidences and prior weights."""
    le = np.asarray(log_evidences, dtype=float)
    if priors is None:
        priors = np.full(le.shape[-1], 1.0 / le.shape[-1])
    priors = np.asarray(priors, dtype=float)
    if abs(priors.sum() - 1) > 1e-9 or (priors < 0).any():
        raise ValueError("priors must be non-negative and sum to 1")
    with np.errstate(divide="ignore"):
        s = le + np.log(priors)
    return np.exp(s - logsumexp(s, axis=-1, keepdims=True))


def classify(image, models, priors=None, mask=None) -> np.ndarray:
    """``P(model_k | f)`` for each model, by Laplace evidence."""
    if not models:
        raise ValueError("no models given")
    ref = models[0]
    for m in models[1:]:
        if m.grid.dims != ref.grid.dims or m.n_channels != ref.n_channels:
            raise ValueError("models do not share a grid and channel count")
        if m.hyper.noise != ref.hyper.noise:
            raise ValueError("models do not share a noise model")
    return softmax_evidence([log_evidence(fit(m, image, mask)) for m in models], priors)


def reconstruct(model: ModelState, z) -> np.ndarray:
    """``squash(pull(mu + W^a z, shoot(W^v z)))``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.K,):
        raise ValueError(f"z must have length {model.K}")
    ops = operators_for(model.hyper, model.grid)
    warped = deform(model, ops, z).sampler.pull(model.appearance(z))
    return NoiseModel.for_model(model).squash(warped)


def sample_latents(model: ModelState, rng_seed, n=None) -> np.ndarray:
    """Draws from ``N(0, A_hat^{-1})``; shape ``(K,)`` or ``(n, K)``."""
    rng = np.random.default_rng(rng_seed)
    L = np.linalg.cholesky(model.A_hat)
    eps = rng.standard_normal(model.K if n is None else (n, model.K))
    # A = L L^T  =>  z = L^{-T} eps has covariance A^{-1}
    return np.linalg.solve(L.T, eps.T).T


def sample(model: ModelState, rng_seed) -> np.ndarray:
    return reconstruct(model, sample_latents(model, rng_seed))


def impute(model: ModelState, image, mask=None) -> np.ndarray:
    """Fill unobserved voxels with the reconstruction from a fit to the rest."""
    image = np.asarray(image, dtype=float)
    _, observed = _prepare(model, image, mask)
    post = fit(model, image, observed)
    recon = reconstruct(model, post.z_hat)
    return np.where(observed, image, recon)


def heldout_loglik(model: ModelState, image, train_mask, eval_mask) -> float:
    """Log-likelihood of ``eval_mask`` voxels after fitting to ``train_mask`` voxels."""
    eval_mask = np.asarray(eval_mask, dtype=bool)
    train_mask = np.asarray(train_mask, dtype=bool)
    if not eval_mask.any():
        raise ValueError("evaluation mask is empty")
    if (eval_mask & train_mask).any():
        raise ValueError("training and evaluation masks overlap")
    image = np.asarray(image, dtype=float)
    return _heldout_energy(model, image, eval_mask, fit(model, image, train_mask).z_hat)


def _heldout_energy(model, image, eval_mask, z):
    ops = operators_for(model.hyper, model.grid)
    noise = NoiseModel.for_model(model)
    return -image_energy(model, ops, noise, image, eval_mask & ~np.isnan(image).any(axis=0), z)


@dataclass(frozen=True)
class CrossValResult:
    variant: str
    heldout_loglik: float
    mse: float
    meanfill_mse: float
    model: ModelState = None


def cross_validate(dataset: ImageDataset, variants, base: HyperParams, K: int, fraction=0.25,
                   seed=0, threads=1):
    """Hide a random box in every image, train each variant, score the boxes.

    Returns one :class:`CrossValResult` per variant with the summed held-out
    log-likelihood and the mean squared error of imputed voxels (against the
    observed-mean fill as a baseline).
    """
    masked = mask_dataset(dataset, fraction, seed=seed)
    hidden = dataset.mask & ~masked.mask
    if not hidden.any():
        raise ValueError("masking hid no observed voxels")
    train_values = masked.values.astype(float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fill = np.nanmean(train_values, axis=0)
    fill = np.where(np.isnan(fill), np.nanmean(train_values), fill)
    err_fill = sum(((fill - dataset.image(n))[:, hidden[n]] ** 2).sum() for n in range(dataset.n_images))
    count = hidden.sum() * dataset.n_channels
    results = []
    for variant in variants:
        hyper = variant_hyper(base, variant, K)
        model, _, _ = train(masked, hyper, seed=seed, threads=threads)
        ll = 0.0
        err = 0.0
        for n in range(dataset.n_images):
            f = dataset.image(n)
            if not hidden[n].any():
                continue
            # one fit serves both the held-out score and the imputation
            z = fit(model, masked.image(n), masked.mask[n]).z_hat
            ll += _heldout_energy(model, f, hidden[n], z)
            err += ((reconstruct(model, z) - f)[:, hidden[n]] ** 2).sum()
        results.append(CrossValResult(variant, ll, err / count, err_fill / count, model))
    return results
