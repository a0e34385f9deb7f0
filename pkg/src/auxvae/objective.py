"""Loss mathematics: ELBO with a factor-conditioned Gaussian prior,
closed-form diagonal KL, polynomial-correlation dependency penalties, the
full auxiliary-guided objective, and the plain beta-weighted baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import genmodel
from .genmodel import ArchitectureDescriptor, PosteriorParams, partition
from .nn import ParamStore
from .tensor import (Tensor, absolute, add, as_tensor, clamp, concat, divide,
                     exp, log, matmul, mean, multiply, power, slice_axis,
                     sqrt, square, subtract, tensor_sum, transpose)

PRIOR_VAR_FLOOR = 1e-12
CORR_EPS = 1e-8
BCE_EPS = 1e-7


@dataclass
class PriorSpec:
    """Diagonal Gaussian prior: per-sample means, shared per-axis variances.

    The first d axes are pinned to the auxiliary values with variance
    1/n_train; the remaining axes are standard normal.
    """
    mu0: np.ndarray      # B x d_z
    var0: np.ndarray     # d_z
    n_train: int
    d: int
    d_z: int


def make_prior(u: np.ndarray, n_train: int, d_z: int) -> PriorSpec:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError(f"make_prior: u must be 2-D, got shape {u.shape}")
    d = u.shape[1]
    if d > d_z:
        raise ValueError(f"make_prior: d={d} exceeds d_z={d_z}")
    if n_train < 1:
        raise ValueError(f"make_prior: n_train must be >= 1, got {n_train}")
    if d and (u.min() < -1e-9 or u.max() > 1 + 1e-9):
        raise ValueError("make_prior: auxiliary values must lie in [0, 1]")
    mu0 = np.zeros((u.shape[0], d_z))
    mu0[:, :d] = u
    var0 = np.ones(d_z)
    var0[:d] = max(1.0 / n_train, PRIOR_VAR_FLOOR)
    return PriorSpec(mu0, var0, n_train, d, d_z)


def kl_diag_gaussians(mu_q: Tensor, logvar_q: Tensor, prior: PriorSpec) -> Tensor:
    """KL(q || p) for diagonal Gaussians, closed form, mean over the batch."""
    mu_q, logvar_q = as_tensor(mu_q), as_tensor(logvar_q)
    if not (np.all(np.isfinite(mu_q.data)) and np.all(np.isfinite(logvar_q.data))):
        raise FloatingPointError("kl_diag_gaussians: non-finite posterior parameters")
    if mu_q.shape != (prior.mu0.shape[0], prior.d_z):
        raise ValueError(f"kl_diag_gaussians: posterior shape {mu_q.shape} does "
                         f"not match prior ({prior.mu0.shape[0]}, {prior.d_z})")
    dtype = mu_q.data.dtype
    var0 = prior.var0.astype(dtype)
    log_var0 = np.log(prior.var0).astype(dtype)
    inv_var0 = (1.0 / prior.var0).astype(dtype)
    mu0 = prior.mu0.astype(dtype)

    diff2 = square(subtract(mu_q, Tensor(mu0)))
    per_axis = add(
        add(multiply(diff2, Tensor(inv_var0)),
            multiply(exp(logvar_q), Tensor(inv_var0))),
        subtract(Tensor(np.broadcast_to(log_var0, mu_q.shape).copy()), logvar_q))
    per_sample = subtract(tensor_sum(per_axis, axis=1), float(prior.d_z))
    return multiply(mean(per_sample), 0.5)


def sample_conditional_prior(prior: PriorSpec, count: int, seed: int) -> np.ndarray:
    """Draw z ~ N(mu0, diag(var0)); rows of mu0 broadcast if single."""
    if count < 1:
        raise ValueError("sample_conditional_prior: count must be >= 1")
    mu0 = prior.mu0
    if mu0.shape[0] == 1:
        mu0 = np.broadcast_to(mu0, (count, prior.d_z))
    elif mu0.shape[0] != count:
        raise ValueError(f"sample_conditional_prior: count={count} does not "
                         f"match prior batch {mu0.shape[0]}")
    rng = np.random.default_rng(seed)
    std = np.sqrt(np.maximum(prior.var0, PRIOR_VAR_FLOOR))
    return mu0 + rng.standard_normal((count, prior.d_z)) * std


def batch_corr(v, w, eps: float = CORR_EPS) -> Tensor:
    """Sample Pearson correlation matrix between the columns of v and w.

    Uses 1/B moments with eps added under each standard-deviation square
    root, which keeps every entry in [-1, 1] and the whole map differentiable
    even for collapsed (zero-variance) columns.
    """
    v, w = as_tensor(v), as_tensor(w)
    if v.ndim != 2 or w.ndim != 2 or v.shape[0] != w.shape[0]:
        raise ValueError(f"batch_corr: need matching 2-D batches, got "
                         f"{v.shape} and {w.shape}")
    b = v.shape[0]
    if b < 2:
        raise ValueError("batch_corr: batch size must be >= 2")
    vc = subtract(v, mean(v, axis=0))
    wc = subtract(w, mean(w, axis=0))
    cov = multiply(matmul(transpose(vc), wc), 1.0 / b)
    sv = sqrt(add(mean(square(vc), axis=0), eps))
    sw = sqrt(add(mean(square(wc), axis=0), eps))
    return transpose(divide(transpose(divide(cov, sw)), sv))


def _degree_pairs(k_max: int, pairs: Optional[Sequence[tuple]]) -> list[tuple]:
    if pairs is not None:
        pairs = [tuple(p) for p in pairs]
        if not pairs or any(k < 1 or kp < 1 for k, kp in pairs):
            raise ValueError("degree pairs must be >= (1, 1)")
        return pairs
    if k_max < 1:
        raise ValueError(f"polynomial degree K must be >= 1, got {k_max}")
    return [(k, kp) for k in range(1, k_max + 1) for kp in range(1, k_max + 1)]


def _pow_cols(x: Tensor, k: int) -> Tensor:
    return x if k == 1 else power(x, float(k))


class CorrEma:
    """Running correlation estimates blended into the per-batch values.

    blend(key, corr) returns momentum * running + (1 - momentum) * corr,
    where the running value is held constant for differentiation, then
    updates the running estimate with the blended value.
    """

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.values: dict[str, np.ndarray] = {}

    def blend(self, key: str, corr: Tensor) -> Tensor:
        prev = self.values.get(key)
        if prev is None:
            blended = corr
        else:
            blended = add(multiply(corr, 1.0 - self.momentum),
                          Tensor(self.momentum * prev))
        self.values[key] = np.array(blended.data, dtype=np.float64, copy=True)
        return blended


def r0(v, w, k_max: int, pairs: Optional[Sequence[tuple]] = None,
       eps: float = CORR_EPS, ema: Optional[CorrEma] = None,
       ema_key: str = "r0") -> Tensor:
    """Mean absolute polynomial cross-correlation; 0 means independence."""
    v, w = as_tensor(v), as_tensor(w)
    deg = _degree_pairs(k_max, pairs)
    m_v, m_w = v.shape[1], w.shape[1]
    total = None
    for k, kp in deg:
        corr = batch_corr(_pow_cols(v, k), _pow_cols(w, kp), eps=eps)
        if ema is not None:
            corr = ema.blend(f"{ema_key}:{k},{kp}", corr)
        term = tensor_sum(absolute(corr))
        total = term if total is None else add(total, term)
    return multiply(total, 1.0 / (len(deg) * m_v * m_w))


def r1(v, w, k_max: int, pairs: Optional[Sequence[tuple]] = None,
       eps: float = CORR_EPS, ema: Optional[CorrEma] = None,
       ema_key: str = "r1") -> Tensor:
    """Mean (1 - |corr|) between two single columns; 0 means alignment."""
    v, w = as_tensor(v), as_tensor(w)
    if v.shape[1] != 1 or w.shape[1] != 1:
        raise ValueError(f"r1: expects single-column arguments, got "
                         f"{v.shape} and {w.shape}")
    deg = _degree_pairs(k_max, pairs)
    total = None
    for k, kp in deg:
        corr = batch_corr(_pow_cols(v, k), _pow_cols(w, kp), eps=eps)
        if ema is not None:
            corr = ema.blend(f"{ema_key}:{k},{kp}", corr)
        term = 1.0 - tensor_sum(absolute(corr))
        total = term if total is None else add(total, term)
    return multiply(total, 1.0 / len(deg))


def binary_cross_entropy(x_hat: Tensor, x: Tensor) -> Tensor:
    """Pixel-summed, batch-averaged Bernoulli negative log-likelihood."""
    x_hat = clamp(x_hat, BCE_EPS, 1.0 - BCE_EPS)
    b = x.shape[0]
    flat_hat = x_hat if x_hat.ndim == 2 else _flatten(x_hat)
    flat_x = x if x.ndim == 2 else _flatten(x)
    ll = add(multiply(flat_x, log(flat_hat)),
             multiply(1.0 - flat_x, log(1.0 - flat_hat)))
    return multiply(tensor_sum(ll), -1.0 / b)


def _flatten(t: Tensor) -> Tensor:
    from .tensor import reshape
    return reshape(t, (t.shape[0], -1))


@dataclass
class LossConfig:
    beta: float = 1.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    k_degree: int = 3
    j_samples: int = 1


@dataclass
class LossBreakdown:
    """Total plus unweighted components.

    total = recon + beta * kl + lambda1 * intra_explicit + lambda2 * inter.
    """
    total: Tensor
    recon: float
    kl: float
    intra_explicit: float
    inter: float
    beta: float
    lambda1: float
    lambda2: float

    def component_sum(self) -> float:
        return (self.recon + self.beta * self.kl
                + self.lambda1 * self.intra_explicit + self.lambda2 * self.inter)


def _norm_noise(noise, j: int, shape) -> np.ndarray:
    noise = np.asarray(noise if not isinstance(noise, Tensor) else noise.data)
    if noise.ndim == 2:
        noise = noise[None]
    if noise.shape != (j,) + tuple(shape):
        raise ValueError(f"noise shape {noise.shape} != {(j,) + tuple(shape)}")
    return noise


def aux_vae_loss(x, u, arch: ArchitectureDescriptor, store: ParamStore,
                 cfg: LossConfig, n_train: int, noise,
                 ema: Optional[CorrEma] = None) -> LossBreakdown:
    """Full objective: reconstruction + beta-weighted KL against the
    factor-conditioned prior + dependency regularizers on the posterior
    means (the total-variance identity makes the means sufficient)."""
    x = as_tensor(x)
    d, d_z = arch.d_aux, arch.d_z
    if d:
        if u is None:
            raise ValueError("aux_vae_loss: auxiliary values required when d > 0")
        u = np.asarray(u, dtype=np.float64).reshape(x.shape[0], -1)
    else:
        u = np.zeros((x.shape[0], 0))
    if u.shape[1] != d:
        raise ValueError(f"aux_vae_loss: u has {u.shape[1]} columns, "
                         f"architecture expects d={d}")
    if d == 0 and cfg.lambda1 > 0:
        raise ValueError("aux_vae_loss: lambda1 > 0 with no auxiliary latents")
    if x.shape[0] < 2:
        raise ValueError("aux_vae_loss: batch size must be >= 2")

    post = genmodel.encode(arch, store, x)
    prior = make_prior(u, n_train, d_z)
    kl = kl_diag_gaussians(post.mu, post.logvar, prior)

    noise = _norm_noise(noise, cfg.j_samples, post.mu.shape)
    recon = None
    for j in range(cfg.j_samples):
        z = genmodel.reparameterize(post, Tensor(noise[j].astype(x.data.dtype)))
        term = binary_cross_entropy(genmodel.decode(arch, store, z), x)
        recon = term if recon is None else add(recon, term)
    recon = multiply(recon, 1.0 / cfg.j_samples)

    zero = Tensor(np.zeros((), dtype=x.data.dtype))
    intra = zero
    inter = zero
    if d > 0 and cfg.lambda1 != 0.0:
        mu_aux, _ = partition(post.mu, d)
        ut = Tensor(u.astype(x.data.dtype))
        terms = None
        for j in range(d):
            u_j = slice_axis(ut, 1, j, j + 1)
            mu_j = slice_axis(mu_aux, 1, j, j + 1)
            t = r1(u_j, mu_j, cfg.k_degree, ema=ema, ema_key=f"r1:{j}")
            if d > 1:
                rest = concat([slice_axis(mu_aux, 1, 0, j),
                               slice_axis(mu_aux, 1, j + 1, d)], axis=1)
                t = add(t, r0(u_j, rest, cfg.k_degree, ema=ema, ema_key=f"r0a:{j}"))
            terms = t if terms is None else add(terms, t)
        intra = terms
    if d > 0 and d < d_z and cfg.lambda2 != 0.0:
        _, mu_recon = partition(post.mu, d)
        inter = r0(Tensor(u.astype(x.data.dtype)), mu_recon, cfg.k_degree,
                   ema=ema, ema_key="r0x")

    total = add(add(recon, multiply(kl, cfg.beta)),
                add(multiply(intra, cfg.lambda1), multiply(inter, cfg.lambda2)))
    return LossBreakdown(total=total, recon=recon.item(), kl=kl.item(),
                         intra_explicit=intra.item(), inter=inter.item(),
                         beta=cfg.beta, lambda1=cfg.lambda1, lambda2=cfg.lambda2)


def beta_vae_loss(x, arch: ArchitectureDescriptor, store: ParamStore,
                  beta: float, noise, j_samples: int = 1) -> LossBreakdown:
    """Baseline objective: reconstruction + beta * KL(q || N(0, I))."""
    x = as_tensor(x)
    post = genmodel.encode(arch, store, x)
    prior = make_prior(np.zeros((x.shape[0], 0)), 1, arch.d_z)
    kl = kl_diag_gaussians(post.mu, post.logvar, prior)
    noise = _norm_noise(noise, j_samples, post.mu.shape)
    recon = None
    for j in range(j_samples):
        z = genmodel.reparameterize(post, Tensor(noise[j].astype(x.data.dtype)))
        term = binary_cross_entropy(genmodel.decode(arch, store, z), x)
        recon = term if recon is None else add(recon, term)
    recon = multiply(recon, 1.0 / j_samples)
    total = add(recon, multiply(kl, beta))
    return LossBreakdown(total=total, recon=recon.item(), kl=kl.item(),
                         intra_explicit=0.0, inter=0.0,
                         beta=beta, lambda1=0.0, lambda2=0.0)
