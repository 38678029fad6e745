"""EM-like fitting of the shape and appearance model.

The sweep per iteration is: mean -> (sigma2) -> shape basis -> appearance
basis -> latents -> orthogonalisation -> latent precision.  Everything that
touches individual images goes through a data backend (:class:`LocalData`
here, a set of remote workers in :mod:`shapeapp.distrib`) that returns only
sums over images; those sums are :class:`~shapeapp.core.ExactSum` objects, so
the trained model does not depend on image order, thread count or how the
images are sharded.
"""

from __future__ import annotations

import functools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from shapeapp.core import (
    ExactSum,
    HyperParams,
    ImageDataset,
    LatentState,
    ModelState,
    empty_model,
    exact_sum,
    image_key,
    raw_latent,
    validate_hyper,
    whitening,
)
from shapeapp.diffeo import Deformation, shoot, spatial_gradient
from shapeapp.likelihood import NoiseModel, sigma2_from_stats
from shapeapp.operators import (
    OperatorKernel,
    apply,
    make_scalar_kernel,
    make_vector_kernel,
    quadratic,
    solve_regularised,
)

log = logging.getLogger(__name__)

MAX_HALVINGS = 6
DZ_FLOOR = 1e-12


# -- operators ----------------------------------------------------------------

@dataclass(frozen=True)
class Operators:
    mu: OperatorKernel
    a: OperatorKernel
    v: OperatorKernel


@functools.lru_cache(maxsize=32)
def _operators(dims, omega_mu, omega_a, omega_v):
    from shapeapp.core import Grid

    grid = Grid(dims)
    return Operators(
        make_scalar_kernel(grid, omega_mu),
        make_scalar_kernel(grid, omega_a),
        make_vector_kernel(grid, omega_v),
    )


def operators_for(hyper: HyperParams, grid) -> Operators:
    return _operators(tuple(grid.dims), hyper.omega_mu, hyper.omega_a, hyper.omega_v)


def latent_precision(model: ModelState, ops: Operators = None) -> np.ndarray:
    """Effective prior precision of the latents, ``lambda1 A + lambda2 C``."""
    ops = ops if ops is not None else operators_for(model.hyper, model.grid)
    h = model.hyper
    return h.lambda1 * model.A_hat + h.lambda2 * model.basis_gram(ops.a, ops.v)


# -- per-image computations ---------------------------------------------------

def deform(model: ModelState, ops: Operators, z) -> Deformation:
    return shoot(model.velocity(z), ops.v, model.hyper.shoot_steps)


def image_energy(model, ops, noise, f, mask, z, defo=None) -> float:
    defo = defo if defo is not None else deform(model, ops, z)
    return noise.energy(f, defo.sampler.pull(model.appearance(z)), mask)


def latent_jacobian(model: ModelState, a: np.ndarray) -> np.ndarray:
    """Template-space change of the model per unit change of each latent.

    Column k is ``W^a_k`` (appearance rows) plus ``-grad(a) . W^v_k`` (shape
    rows); the minus sign comes from warping by ``id - v``.
    """
    h = model.hyper
    B = np.zeros((h.K,) + a.shape)
    for j, k in enumerate(h.appearance_index):
        B[k] += model.W_a[j]
    if h.K_v:
        grad = spatial_gradient(a)
        for j, k in enumerate(h.shape_index):
            B[k] -= np.einsum("cd...,d...->c...", grad, model.W_v[j])
    return B


def shape_image_derivs(a, g, H):
    """Chain the appearance derivatives through ``-grad(a)`` to velocity space."""
    grad = spatial_gradient(a)
    gv = -np.einsum("cd...,c...->d...", grad, g)
    Hv = np.einsum("cd...,ce...,ef...->df...", grad, H, grad)
    return gv, Hv


def latent_system(model, ops, noise, f, mask, z, defo=None):
    """Energy, gradient and Gauss-Newton Hessian of one image w.r.t. its latents."""
    z = np.asarray(z, dtype=float)
    defo = defo if defo is not None else deform(model, ops, z)
    a = model.appearance(z)
    d = noise.derivatives(f, a, defo, mask)
    C = a.shape[0]
    Bf = latent_jacobian(model, a).reshape(z.size, C, -1)
    g = np.einsum("kcx,cx->k", Bf, d.g.reshape(C, -1))
    H = np.einsum("kcx,cdx,ldx->kl", Bf, d.H.reshape(C, C, -1), Bf)
    return d.J, g, 0.5 * (H + H.T)


def latent_step(model, ops, noise, f, mask, z, P, defo=None):
    """One Gauss-Newton update of one image's latents, with backtracking.

    Returns ``(z_new, (H + P)^{-1}, J(z_new), halvings)``; the inverse is
    taken at the incoming ``z``.
    """
    z = np.asarray(z, dtype=float)
    J, g, H = latent_system(model, ops, noise, f, mask, z, defo)
    HP = H + P
    try:
        cho = np.linalg.cholesky(HP)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("latent Hessian + precision is singular") from None
    inv = np.linalg.inv(HP)
    inv = 0.5 * (inv + inv.T)
    step = np.linalg.solve(cho.T, np.linalg.solve(cho, g + P @ z))
    obj0 = J + 0.5 * z @ P @ z
    alpha = 1.0
    for halving in range(MAX_HALVINGS + 1):
        zc = z - alpha * step
        try:
            Jc = image_energy(model, ops, noise, f, mask, zc)
        except FloatingPointError:
            Jc = np.inf
        if Jc + 0.5 * zc @ P @ zc <= obj0:
            return zc, inv, Jc, halving
        alpha *= 0.5
    return z, inv, J, MAX_HALVINGS + 1


# -- data backends ------------------------------------------------------------

class LocalData:
    """Images and their latents held in this process."""

    def __init__(self, dataset: ImageDataset, threads: int = 1):
        self.dataset = dataset
        self.threads = max(1, int(threads))
        self.Z = None
        self._cache_key = None
        self._cache = None

    @property
    def n_images(self) -> int:
        return self.dataset.n_images

    def _map(self, fn, items):
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))

    def _data(self, n):
        return self.dataset.image(n), self.dataset.mask[n]

    def deformations(self, model: ModelState, ops: Operators):
        key = (model.W_v, self.Z)
        if self._cache_key is not None and self._cache_key[0] is key[0] and self._cache_key[1] is key[1]:
            return self._cache
        defs = self._map(lambda n: deform(model, ops, self.Z[:, n]), range(self.n_images))
        self._cache_key, self._cache = key, defs
        return defs

    # latents

    def init_latents(self, seed: int, K: int) -> ExactSum:
        self.Z = np.stack(
            [raw_latent(seed, image_key(self.dataset.values[n]), K) for n in range(self.n_images)], axis=1
        ) if self.n_images else np.zeros((K, 0))
        return self.gram()

    def gram(self) -> ExactSum:
        return exact_sum((np.outer(z, z) for z in self.Z.T), shape=(self.Z.shape[0],) * 2)

    def transform(self, T) -> None:
        self.Z = np.asarray(T) @ self.Z

    # aggregates

    def observed_sums(self):
        C = self.dataset.n_channels
        dims = self.dataset.grid.dims
        total, count = ExactSum((C,) + dims), ExactSum(dims)
        for n in range(self.n_images):
            f, m = self._data(n)
            total.add(np.where(m, f, 0.0))
            count.add(m.astype(float))
        return total, count

    def energy(self, model, ops) -> ExactSum:
        noise = NoiseModel.for_model(model)
        defs = self.deformations(model, ops)

        def one(n):
            f, m = self._data(n)
            return image_energy(model, ops, noise, f, m, self.Z[:, n], defs[n])

        return exact_sum(self._map(one, range(self.n_images)))

    def sigma2_stats(self, model, ops):
        defs = self.deformations(model, ops)
        C = model.n_channels

        def one(n):
            f, m = self._data(n)
            a = defs[n].sampler.pull(model.appearance(self.Z[:, n]))
            r = np.where(m, f - a, 0.0)
            return (r * r).reshape(C, -1).sum(axis=1), float(np.count_nonzero(m))

        parts = self._map(one, range(self.n_images))
        return exact_sum((p[0] for p in parts), shape=(C,)), exact_sum((p[1] for p in parts))

    def _derivs(self, model, ops, n, defs):
        f, m = self._data(n)
        z = self.Z[:, n]
        a = model.appearance(z)
        return z, a, NoiseModel.for_model(model).derivatives(f, a, defs[n], m)

    def mean_derivatives(self, model, ops):
        defs = self.deformations(model, ops)
        parts = self._map(lambda n: self._derivs(model, ops, n, defs)[2], range(self.n_images))
        C = model.n_channels
        dims = model.grid.dims
        return (exact_sum((p.g for p in parts), shape=(C,) + dims),
                exact_sum((p.H for p in parts), shape=(C, C) + dims))

    def appearance_derivatives(self, model, ops):
        defs = self.deformations(model, ops)
        idx = model.hyper.appearance_index
        C = model.n_channels
        dims = model.grid.dims
        G, H = ExactSum((len(idx), C) + dims), ExactSum((len(idx), C, C) + dims)
        for n in range(self.n_images):
            z, _, d = self._derivs(model, ops, n, defs)
            zk = z[idx]
            G.add(zk.reshape((-1,) + (1,) * d.g.ndim) * d.g)
            H.add((zk ** 2).reshape((-1,) + (1,) * d.H.ndim) * d.H)
        return G, H

    def shape_derivatives(self, model, ops):
        defs = self.deformations(model, ops)
        idx = model.hyper.shape_index
        D = model.grid.ndim
        dims = model.grid.dims

        def one(n):
            z, a, d = self._derivs(model, ops, n, defs)
            gv, Hv = shape_image_derivs(a, d.g, d.H)
            zk = z[idx]
            return (zk.reshape((-1,) + (1,) * gv.ndim) * gv,
                    (zk ** 2).reshape((-1,) + (1,) * Hv.ndim) * Hv)

        parts = self._map(one, range(self.n_images))
        return (exact_sum((p[0] for p in parts), shape=(len(idx), D) + dims),
                exact_sum((p[1] for p in parts), shape=(len(idx), D, D) + dims))

    def update_latents(self, model, ops, P):
        """Gauss-Newton step on every image's latents; returns aggregates only."""
        noise = NoiseModel.for_model(model)
        defs = self.deformations(model, ops)

        def one(n):
            f, m = self._data(n)
            return latent_step(model, ops, noise, f, m, self.Z[:, n], P, defs[n])

        parts = self._map(one, range(self.n_images))
        K = model.K
        self.Z = np.stack([p[0] for p in parts], axis=1) if parts else np.zeros((K, 0))
        S = exact_sum((p[1] for p in parts), shape=(K, K))
        J = exact_sum((p[2] for p in parts))
        halvings = exact_sum((float(p[3]) for p in parts))
        return S, self.gram(), J, halvings


# -- model-level updates ------------------------------------------------------

def objective_terms(model: ModelState, ops: Operators, C_z, sum_J, N) -> dict:
    """Negated joint log-probability, split into named terms."""
    h = model.hyper
    K = h.K
    C = model.basis_gram(ops.a, ops.v)
    A = model.A_hat
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0:
        raise np.linalg.LinAlgError("A_hat is not positive definite")
    Lambda0_inv = np.linalg.inv(h.Lambda0)
    return {
        "likelihood": float(sum_J),
        "mean_prior": 0.5 * quadratic(ops.mu, model.mu),
        "basis_prior": 0.5 * h.lambda1 * N * float(np.trace(C)),
        "latent_prior": -0.5 * h.lambda1 * (
            (N + h.nu0 - K - 1) * logdet - float(np.sum((C_z + Lambda0_inv) * A))
        ),
        "smoothness": 0.5 * h.lambda2 * float(np.sum(C_z * C)),
    }


def objective(dataset: ImageDataset, model: ModelState, latents: LatentState) -> float:
    """Negated joint log-probability (up to an additive constant)."""
    return sum(objective_decomposed(dataset, model, latents).values())


def objective_decomposed(dataset, model, latents) -> dict:
    ops = operators_for(model.hyper, model.grid)
    noise = NoiseModel.for_model(model)
    Z = latents.Z_hat
    J = exact_sum(
        image_energy(model, ops, noise, dataset.image(n), dataset.mask[n], Z[:, n])
        for n in range(dataset.n_images)
    ).value()
    C_z = exact_sum(np.outer(z, z) for z in Z.T).value()
    return objective_terms(model, ops, C_z, J, dataset.n_images)


def mean_derivatives(dataset, model, latents):
    data = LocalData(dataset)
    data.Z = latents.Z_hat
    g, H = data.mean_derivatives(model, operators_for(model.hyper, model.grid))
    return g.value(), H.value()


def appearance_derivatives(dataset, model, latents):
    data = LocalData(dataset)
    data.Z = latents.Z_hat
    G, H = data.appearance_derivatives(model, operators_for(model.hyper, model.grid))
    return G.value(), H.value()


def shape_derivatives(dataset, model, latents):
    data = LocalData(dataset)
    data.Z = latents.Z_hat
    G, H = data.shape_derivatives(model, operators_for(model.hyper, model.grid))
    return G.value(), H.value()


def mean_step(model, ops, g, H):
    rhs = g + apply(ops.mu, model.mu)
    return solve_regularised(H, ops.mu, 1.0, rhs)


def basis_steps(W, G, H, C_z, kernel, idx, lambda1, lambda2, N):
    """Per-column Gauss-Newton directions with regulariser weight ``lambda1 N + lambda2 c_kk``."""
    steps = np.zeros_like(W)
    for j, k in enumerate(idx):
        wt = lambda1 * N + lambda2 * C_z[k, k]
        rhs = G[j] + wt * apply(kernel, W[j])
        if not rhs.any():
            continue
        steps[j] = solve_regularised(H[j], kernel, wt, rhs)
    return steps


def update_A(C_z, S, nu0, Lambda0, N) -> np.ndarray:
    """Expected latent precision under the Wishart posterior."""
    M = np.asarray(C_z) + np.asarray(S) + np.linalg.inv(Lambda0)
    M = 0.5 * (M + M.T)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("C_z + S + Lambda0^-1 is not positive definite") from None
    A = np.linalg.solve(M, (N + nu0) * np.eye(M.shape[0]))
    return 0.5 * (A + A.T)


def _initial_transform(C, C_z):
    Dz, Vz = np.linalg.eigh(0.5 * (C_z + C_z.T))
    Dz = np.maximum(Dz, DZ_FLOOR * max(Dz.max(), 1e-300))
    Dw, Vw = np.linalg.eigh(0.5 * (C + C.T))
    Dw = np.maximum(Dw, 0.0)
    X = (np.sqrt(Dw)[:, None] * (Vw.T @ Vz)) * np.sqrt(Dz)[None, :]
    _, D, Vt = np.linalg.svd(X)
    if D.max() <= 0:
        D = np.ones_like(D)
    D = np.maximum(D, DZ_FLOOR * D.max())
    return (D[:, None] * Vt) @ (Vz / np.sqrt(Dz)).T


def orthogonalise(C, C_z, S, N, nu0, Lambda0, blocks=None, tol=1e-8, max_iter=100, basis_weight=None):
    """Transform ``T`` making ``T C_z T^T`` and ``T^-T C T^-1`` diagonal.

    The rotation comes from eigendecompositions of both matrices and an SVD;
    the row scales ``Q = diag(exp(q))`` are then refined by Gauss-Newton
    with the latent precision re-estimated at each pass.  ``blocks`` lists
    latent groups that may be mixed (split latents are orthogonalised within
    their own group only).
    """
    C = np.asarray(C, dtype=float)
    C_z = np.asarray(C_z, dtype=float)
    S = np.asarray(S, dtype=float)
    K = C.shape[0]
    if blocks is None:
        blocks = [np.arange(K)]
    T0 = np.zeros((K, K))
    for b in blocks:
        T0[np.ix_(b, b)] = _initial_transform(C[np.ix_(b, b)], C_z[np.ix_(b, b)])
    T0inv = _block_inverse(T0, blocks)
    Bz = T0 @ C_z @ T0.T
    cw = np.diag(T0inv.T @ C @ T0inv).copy()
    if basis_weight is not None:
        cw = cw * basis_weight
    active = cw > 1e-12 * max(cw.max(), 1e-300)
    q = np.zeros(K)
    for _ in range(max_iter):
        e = np.exp(q)
        QT = e[:, None] * T0
        A = update_A(QT @ C_z @ QT.T, QT @ S @ QT.T, nu0, Lambda0, N)
        R = 2.0 * A * Bz.T
        Re = R @ e
        g = e * Re - 2.0 * np.exp(-2 * q) * cw
        H = (e[:, None] * R * e[None, :]) + np.diag(e * Re + 4.0 * np.exp(-2 * q) * cw)
        dq = np.zeros(K)
        if active.any():
            ia = np.ix_(active, active)
            dq[active] = np.linalg.solve(H[ia], g[active])
        q = q - dq
        if np.abs(dq).max() < tol:
            break
    return np.exp(q)[:, None] * T0


def _block_inverse(T, blocks):
    Tinv = np.zeros_like(T)
    for b in blocks:
        Tinv[np.ix_(b, b)] = np.linalg.inv(T[np.ix_(b, b)])
    return Tinv


def transform_model(model: ModelState, T) -> ModelState:
    """``W <- W T^-1`` for both bases (latents transform as ``Z <- T Z``)."""
    h = model.hyper
    Tinv = _block_inverse(np.asarray(T, dtype=float), h.blocks)
    out = {}
    for name, idx in (("W_a", h.appearance_index), ("W_v", h.shape_index)):
        W = getattr(model, name)
        if not len(idx):
            out[name] = W
            continue
        sub = Tinv[np.ix_(idx, idx)]
        out[name] = np.tensordot(sub.T, W, axes=1)
    return model.replace(**out)


def apply_transform(model: ModelState, latents: LatentState, T):
    T = np.asarray(T, dtype=float)
    if abs(np.linalg.det(T)) == 0 or not np.isfinite(np.linalg.cond(T)) or np.linalg.cond(T) > 1e15:
        raise np.linalg.LinAlgError("transform is singular")
    return transform_model(model, T), LatentState(
        Z_hat=T @ latents.Z_hat,
        S=T @ latents.S @ T.T,
        C_z=T @ latents.C_z @ T.T,
    )


def offdiag_ratio(M) -> float:
    """Frobenius mass off the diagonal relative to the diagonal."""
    M = np.asarray(M)
    d = np.diag(M)
    off = M - np.diag(d)
    return float(np.linalg.norm(off) / max(np.linalg.norm(d), 1e-300))


# -- training loop ------------------------------------------------------------

@dataclass
class TrainReport:
    objective: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    sigma2: list = field(default_factory=list)
    halvings: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    orthogonality: list = field(default_factory=list)
    transform_likelihood_change: list = field(default_factory=list)
    initial_objective: float = None

    def jsonl(self) -> str:
        lines = []
        for i, obj in enumerate(self.objective):
            lines.append(json.dumps({
                "iter": i + 1,
                "objective": obj,
                "terms": self.terms[i],
                "sigma2": list(self.sigma2[i]),
                "halvings": self.halvings[i],
            }, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def _init_mean(noise_kind, total, count):
    mean = total / np.maximum(count, 1.0)
    fallback = total.sum(axis=tuple(range(1, total.ndim))) / max(count.sum(), 1.0)
    mean = np.where(count > 0, mean, fallback.reshape((-1,) + (1,) * count.ndim))
    if noise_kind == "gaussian":
        return mean
    if noise_kind == "bernoulli":
        p = np.clip(mean, 0.01, 0.99)
        return np.log(p) - np.log1p(-p)
    p = np.clip(mean, 1e-3, None)
    logp = np.log(p / p.sum(axis=0, keepdims=True))
    return logp - logp.mean(axis=0, keepdims=True)


class Trainer:
    """Runs the fitting sweep against any data backend."""

    def __init__(self, data, hyper: HyperParams, grid, n_channels, N, seed=0):
        validate_hyper(hyper)
        self.data = data
        self.hyper = hyper
        self.grid = grid
        self.N = N
        self.seed = seed
        self.ops = operators_for(hyper, grid)
        self.model = empty_model(hyper, grid, n_channels)
        self.C_z = None
        self.S = np.zeros((hyper.K, hyper.K))
        self.sum_J = None
        self.report = TrainReport()

    # helpers

    def _objective(self, model=None, sum_J=None, C_z=None):
        model = model if model is not None else self.model
        sum_J = self.sum_J if sum_J is None else sum_J
        C_z = self.C_z if C_z is None else C_z
        return sum(objective_terms(model, self.ops, C_z, sum_J, self.N).values())

    def _energy(self, model):
        return float(self.data.energy(model, self.ops).value())

    def _record(self, phase, value):
        self.report.steps.append((phase, value))

    def _line_search(self, phase, make_candidate):
        """Halve a step until the joint objective does not increase."""
        current = self._objective()
        alpha = 1.0
        for halving in range(MAX_HALVINGS + 1):
            cand = make_candidate(alpha)
            try:
                J = self._energy(cand)
            except FloatingPointError:
                # the step is large enough to break the warp; shrink it
                log.debug("%s step %g diverged", phase, alpha)
                alpha *= 0.5
                continue
            value = self._objective(cand, J)
            if value <= current:
                self.model, self.sum_J = cand, J
                self._record(phase, value)
                return halving
            alpha *= 0.5
        self._record(phase, current)
        return MAX_HALVINGS + 1

    # phases

    def initialise(self):
        h = self.hyper
        total, count = self.data.observed_sums()
        mu = _init_mean(h.noise, total.value(), count.value())
        self.model = self.model.replace(mu=mu)
        if self.N < h.K:
            raise ValueError(f"cannot orthonormalise K={h.K} latents over N={self.N} images")
        gram = self.data.init_latents(self.seed, h.K).value()
        self.data.transform(whitening(gram))
        self.C_z = self.data.gram().value()
        self.model = self.model.replace(A_hat=update_A(self.C_z, self.S, h.nu0, h.Lambda0, self.N))
        if h.noise == "gaussian":
            self.refresh_sigma2()
        self.sum_J = self._energy(self.model)
        self.report.initial_objective = self._objective()
        self._record("init", self.report.initial_objective)

    def refresh_sigma2(self):
        sse, count = self.data.sigma2_stats(self.model, self.ops)
        self.model = self.model.replace(sigma2=sigma2_from_stats(sse.value(), count.value()))

    def update_mean(self):
        g, H = self.data.mean_derivatives(self.model, self.ops)
        step = mean_step(self.model, self.ops, g.value(), H.value())
        mu = self.model.mu
        return self._line_search("mean", lambda t: self.model.replace(mu=mu - t * step))

    def update_shape(self):
        h = self.hyper
        if not h.K_v:
            return 0
        G, H = self.data.shape_derivatives(self.model, self.ops)
        W = self.model.W_v
        step = basis_steps(W, G.value(), H.value(), self.C_z, self.ops.v, h.shape_index,
                           h.lambda1, h.lambda2, self.N)
        return self._line_search("shape", lambda t: self.model.replace(W_v=W - t * step))

    def update_appearance(self):
        h = self.hyper
        if not h.K_a:
            return 0
        G, H = self.data.appearance_derivatives(self.model, self.ops)
        W = self.model.W_a
        step = basis_steps(W, G.value(), H.value(), self.C_z, self.ops.a, h.appearance_index,
                           h.lambda1, h.lambda2, self.N)
        return self._line_search("appearance", lambda t: self.model.replace(W_a=W - t * step))

    def update_latents(self):
        P = latent_precision(self.model, self.ops)
        S, C_z, J, halvings = self.data.update_latents(self.model, self.ops, P)
        self.S, self.C_z, self.sum_J = S.value(), C_z.value(), float(J.value())
        self._record("latents", self._objective())
        return int(halvings.value())

    def reparameterise(self):
        h = self.hyper
        C = self.model.basis_gram(self.ops.a, self.ops.v)
        T = orthogonalise(C, self.C_z, self.S, self.N, h.nu0, h.Lambda0, h.blocks,
                          basis_weight=self.N)
        before = self.sum_J
        self.model = transform_model(self.model, T)
        self.data.transform(T)
        self.C_z = T @ self.C_z @ T.T
        self.S = T @ self.S @ T.T
        self.sum_J = self._energy(self.model)
        C_new = self.model.basis_gram(self.ops.a, self.ops.v)
        self.report.orthogonality.append((offdiag_ratio(self.C_z), offdiag_ratio(C_new)))
        self.report.transform_likelihood_change.append(abs(self.sum_J - before))
        self._record("transform", self._objective())
        self.model = self.model.replace(A_hat=update_A(self.C_z, self.S, h.nu0, h.Lambda0, self.N))
        self._record("precision", self._objective())

    def iterate(self):
        halvings = {"mean": self.update_mean()}
        if self.hyper.noise == "gaussian":
            self.refresh_sigma2()
            self.sum_J = self._energy(self.model)
            self._record("sigma2", self._objective())
        halvings["shape"] = self.update_shape()
        halvings["appearance"] = self.update_appearance()
        halvings["latents"] = self.update_latents()
        self.reparameterise()
        terms = objective_terms(self.model, self.ops, self.C_z, self.sum_J, self.N)
        self.report.objective.append(sum(terms.values()))
        self.report.terms.append(terms)
        self.report.sigma2.append(self.model.sigma2.tolist())
        self.report.halvings.append(halvings)
        log.info("iter %d objective %.6f", len(self.report.objective), self.report.objective[-1])

    def run(self, iters=None):
        self.initialise()
        for _ in range(self.hyper.em_iters if iters is None else iters):
            self.iterate()
        return self.model, self.report


def train(dataset: ImageDataset, hyper: HyperParams, seed: int = 0, threads: int = 1):
    """Fit a model; returns ``(ModelState, LatentState, TrainReport)``."""
    if hyper.noise != dataset.noise_kind:
        raise ValueError(f"noise model {hyper.noise!r} does not suit {dataset.kind!r} data")
    data = LocalData(dataset, threads=threads)
    trainer = Trainer(data, hyper, dataset.grid, dataset.n_channels, dataset.n_images, seed)
    model, report = trainer.run()
    latents = LatentState(Z_hat=data.Z, S=trainer.S, C_z=trainer.C_z)
    return model, latents, report
