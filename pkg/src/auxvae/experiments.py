"""Evaluation procedures on trained models: latent traversal strips, the
aux/recon block perturbation study, and gradient-sign adversarial attacks
with their reconstruction-quality curve."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import datagen, genmodel, metrics, objective, trainer
from .tensor import Tensor, backward, no_grad
from .trainer import ModelCheckpoint


@dataclass
class TraversalSpec:
    latent_index: int
    steps: int = 8
    base_index: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("traversal needs at least 1 step")


@dataclass
class TraversalResult:
    images: np.ndarray        # steps x C x H x W
    values: np.ndarray        # swept coordinate values, increasing
    latents: np.ndarray       # steps x d_z latent inputs fed to the decoder


@dataclass
class PerturbationSpec:
    target: str = "aux"       # none | aux | recon
    noise_scale: float = 1.0  # multiplier on the per-dimension latent std
    count: int = 1000

    def __post_init__(self):
        if self.target not in ("none", "aux", "recon"):
            raise ValueError(f"unknown perturbation target {self.target!r}")


def traverse(ckpt: ModelCheckpoint, ds: datagen.Dataset, spec: TraversalSpec,
             values: Optional[Sequence[float]] = None) -> TraversalResult:
    """Decode the base image's posterior mean while sweeping one coordinate.

    The default sweep covers mean +/- 3 std of that coordinate's posterior
    means over the split; explicit values override the range rule.
    """
    d_z = ckpt.arch.d_z
    if not 0 <= spec.latent_index < d_z:
        raise ValueError(f"latent index {spec.latent_index} outside [0, {d_z})")
    if not 0 <= spec.base_index < ds.n:
        raise ValueError(f"base image index {spec.base_index} outside dataset")
    # encode the base image on its own so a zero-width sweep reproduces the
    # plain reconstruction bitwise (batched GEMMs may round differently)
    base = trainer.encode_means(
        ckpt, ds.images[spec.base_index:spec.base_index + 1])[0].copy()
    if values is None:
        if spec.steps < 2:
            raise ValueError("range-rule traversal needs steps >= 2")
        mu_all = trainer.encode_means(ckpt, ds.images)
        center = mu_all[:, spec.latent_index].mean()
        sigma = mu_all[:, spec.latent_index].std()
        values = np.linspace(center - 3 * sigma, center + 3 * sigma, spec.steps)
    values = np.asarray(values, dtype=np.float64)

    latents = np.tile(base, (values.size, 1))
    latents[:, spec.latent_index] = values
    with no_grad():
        images = genmodel.decode(ckpt.arch, ckpt.store,
                                 latents.astype(np.float32)).data
    return TraversalResult(images=images, values=values, latents=latents)


def strip_sensitivity(result: TraversalResult) -> float:
    """Mean L2 pixel change between consecutive strip frames."""
    diffs = np.diff(result.images, axis=0)
    return float(np.sqrt((diffs ** 2).sum(axis=(1, 2, 3))).mean())


def write_pgm_strip(images: np.ndarray, path, separator: int = 2) -> None:
    """Binary PGM (P5): frames concatenated left to right with black gaps."""
    frames = [np.clip(img[0] if img.ndim == 3 else img, 0.0, 1.0)
              for img in images]
    h = frames[0].shape[0]
    gap = np.zeros((h, separator))
    panels = []
    for i, f in enumerate(frames):
        if i:
            panels.append(gap)
        panels.append(f)
    strip = (np.concatenate(panels, axis=1) * 255).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{strip.shape[1]} {strip.shape[0]}\n255\n".encode())
        fh.write(strip.tobytes())


def write_traversal_csv(result: TraversalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "value"] +
                        [f"z{l}" for l in range(result.latents.shape[1])])
        for i, (v, z) in enumerate(zip(result.values, result.latents)):
            writer.writerow([i, repr(float(v))] + [repr(float(c)) for c in z])


def perturb_study(ckpt: ModelCheckpoint, ds: datagen.Dataset,
                  spec: PerturbationSpec, seed: int = 0) -> np.ndarray:
    """SSIM between originals and reconstructions decoded from latents whose
    targeted block got additive Gaussian noise (scaled by the empirical
    per-dimension std of the posterior means)."""
    if spec.count > ds.n:
        raise ValueError(f"sample count {spec.count} exceeds split size {ds.n}")
    d = ckpt.arch.d_aux
    if spec.target == "aux" and d == 0:
        raise ValueError("cannot perturb the aux block of a model with d=0")
    if spec.target == "recon" and d == ckpt.arch.d_z:
        raise ValueError("cannot perturb the recon block when d equals d_z")
    images = ds.images[:spec.count]
    mu = trainer.encode_means(ckpt, images)
    z = mu.copy()
    if spec.target != "none":
        rng = np.random.default_rng(seed)
        std = mu.std(axis=0)
        block = slice(0, d) if spec.target == "aux" else slice(d, ckpt.arch.d_z)
        noise = rng.standard_normal((images.shape[0], ckpt.arch.d_z))
        z[:, block] += spec.noise_scale * noise[:, block] * std[block]
    with no_grad():
        recon = genmodel.decode(ckpt.arch, ckpt.store,
                                z.astype(np.float32)).data
    return np.array([metrics.ssim(images[i, 0], recon[i, 0])
                     for i in range(images.shape[0])])


def fgsm_attack(ckpt: ModelCheckpoint, x: np.ndarray, u: Optional[np.ndarray],
                epsilon: float) -> np.ndarray:
    """One-step sign-gradient attack on the model's own training loss.

    x' = clip(x + eps * sign(grad_x loss), 0, 1). The loss is evaluated with
    zero reparameterization noise so the attack is deterministic; auxiliary
    values come from the dataset record of the attacked batch.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float32)
    if epsilon == 0.0:
        return x.copy()
    cfg = ckpt.config
    loss_cfg = objective.LossConfig(beta=cfg.beta, lambda1=cfg.lambda1,
                                    lambda2=cfg.lambda2, k_degree=cfg.k_degree,
                                    j_samples=1)
    xt = Tensor(x.copy(), requires_grad=True)
    noise = np.zeros((1, x.shape[0], ckpt.arch.d_z), dtype=np.float32)
    bd = objective.aux_vae_loss(xt, u, ckpt.arch, ckpt.store, loss_cfg,
                                n_train=ckpt.n_train, noise=noise)
    grad = backward(bd.total, wrt=[xt])[xt].data
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("fgsm_attack: non-finite input gradient")
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0).astype(np.float32)


def robustness_curve(ckpt: ModelCheckpoint, ds: datagen.Dataset,
                     epsilons: Sequence[float] = (0.0, 0.01, 0.05, 0.1),
                     batch: int = 64) -> dict:
    """Reconstruction SSIM (against the clean originals) per attack strength."""
    names = ckpt.config.aux_factor_names()
    u_all = np.column_stack([ds.factor_column(f) for f in names]) if names else None
    out = {}
    for eps in epsilons:
        ssims = []
        for ofs in range(0, ds.n, batch):
            x = ds.images[ofs:ofs + batch]
            if x.shape[0] < 2:
                continue
            u = u_all[ofs:ofs + batch] if u_all is not None else None
            adv = fgsm_attack(ckpt, x, u, eps)
            recon = trainer.reconstruct_images(ckpt, adv)
            ssims.extend(metrics.ssim(x[i, 0], recon[i, 0])
                         for i in range(x.shape[0]))
        out[float(eps)] = np.array(ssims)
    return out


def write_distribution_csv(groups: dict, path, key_label: str = "epsilon") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([key_label, "image", "ssim"])
        for key, values in groups.items():
            for i, v in enumerate(values):
                writer.writerow([key, i, repr(float(v))])
