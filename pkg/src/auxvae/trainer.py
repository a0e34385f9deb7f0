"""Deterministic training loop, checkpoint serialization, evaluation, and
the hyperparameter grid search with a min-max standardized product rule."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import datagen, genmodel, metrics, nn, objective
from .genmodel import ArchitectureDescriptor
from .nn import ParamStore
from .tensor import Tensor, backward, no_grad

CASES = {
    "case1": ["flux", "radius", "g1", "g2", "psf"],
    "case2": ["radius", "g1", "g2"],
    "case3": ["flux", "psf"],
    "none": [],
}

LOG_HEADER = ("epoch", "step", "total", "recon", "kl", "intra_explicit", "inter")


class TrainAbortError(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good step."""

    def __init__(self, message: str, last_finite_step: int, component: str):
        super().__init__(message)
        self.last_finite_step = last_finite_step
        self.component = component


@dataclass
class TrainConfig:
    dataset: str = ""
    case: str = "case1"
    factors: Optional[list[str]] = None   # explicit list for case="custom"
    arch_variant: str = "mlp"
    d_z: int = 10
    hidden: tuple = (512, 256)
    beta: float = 5.0
    lambda1: float = 1.0
    lambda2: float = 0.1
    k_degree: int = 3
    j_samples: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 30
    seed: int = 0
    corr_mode: str = "batch"               # batch | ema
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.case not in CASES and self.case != "custom":
            raise ValueError(f"unknown case {self.case!r}")
        if self.case == "custom" and self.factors is None:
            raise ValueError("case='custom' requires an explicit factor list")
        if self.corr_mode not in ("batch", "ema"):
            raise ValueError(f"unknown corr_mode {self.corr_mode!r}")
        self.hidden = tuple(self.hidden)

    def aux_factor_names(self) -> list[str]:
        return list(self.factors) if self.case == "custom" else list(CASES[self.case])

    def to_json(self) -> str:
        raw = dataclasses.asdict(self)
        raw["hidden"] = list(self.hidden)
        return json.dumps(raw)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        raw = json.loads(text)
        raw["hidden"] = tuple(raw["hidden"])
        return TrainConfig(**raw)


@dataclass
class ModelCheckpoint:
    arch: ArchitectureDescriptor
    store: ParamStore
    config: TrainConfig
    final_epoch: int
    seed: int
    n_train: int
    log_digest: str = ""


def _log_digest(rows) -> str:
    text = "\n".join(",".join(repr(v) for v in row) for row in rows)
    return hashlib.sha256(text.encode()).hexdigest()


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        writer.writerows(rows)


def build_architecture(cfg: TrainConfig, image_shape, d: int) -> ArchitectureDescriptor:
    if cfg.arch_variant == "mlp":
        return genmodel.mlp_architecture(image_shape, cfg.d_z, d, hidden=cfg.hidden)
    if cfg.arch_variant == "conv":
        return genmodel.conv_architecture(cfg.d_z, d, image_shape)
    raise ValueError(f"unknown architecture variant {cfg.arch_variant!r}")


def train(cfg: TrainConfig, dataset: Optional[datagen.Dataset] = None,
          log_path=None):
    """Run the configured training and return (checkpoint, log rows).

    Deterministic in cfg.seed: the split, initialization, shuffling, and
    reparameterization noise all derive from it.
    """
    ds = dataset if dataset is not None else datagen.load_dataset(cfg.dataset)
    train_ds, _, _ = datagen.split(ds, (7, 2, 1), seed=cfg.seed)
    names = cfg.aux_factor_names()
    missing = [f for f in names if f not in ds.factor_names]
    if missing:
        raise ValueError(f"dataset lacks auxiliary factors {missing}")
    d = len(names)
    if d > cfg.d_z:
        raise ValueError(f"{d} auxiliary factors exceed d_z={cfg.d_z}")

    arch = build_architecture(cfg, ds.image_shape, d)
    seed_init, seed_shuffle, seed_noise = [
        int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(3)]
    store = genmodel.init_model_params(arch, seed_init)
    rng_shuffle = np.random.default_rng(seed_shuffle)
    rng_noise = np.random.default_rng(seed_noise)

    u_all = np.column_stack([train_ds.factor_column(f) for f in names]) if d else None
    x_all = train_ds.images
    n_train = train_ds.n
    loss_cfg = objective.LossConfig(beta=cfg.beta, lambda1=cfg.lambda1,
                                    lambda2=cfg.lambda2, k_degree=cfg.k_degree,
                                    j_samples=cfg.j_samples)
    ema = objective.CorrEma() if cfg.corr_mode == "ema" else None
    param_names = store.names()
    param_tensors = [store[nme] for nme in param_names]

    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng_shuffle.permutation(n_train)
        for ofs in range(0, n_train, cfg.batch_size):
            idx = perm[ofs:ofs + cfg.batch_size]
            if idx.size < 2:
                continue
            x = x_all[idx]
            u = u_all[idx] if d else None
            noise = rng_noise.standard_normal(
                (cfg.j_samples, idx.size, cfg.d_z)).astype(np.float32)
            bd = objective.aux_vae_loss(x, u, arch, store, loss_cfg,
                                        n_train=n_train, noise=noise, ema=ema)
            total = bd.total.item()
            if not np.isfinite(total):
                component = max(
                    (("recon", bd.recon), ("kl", bd.kl),
                     ("intra_explicit", bd.intra_explicit), ("inter", bd.inter)),
                    key=lambda kv: 0 if np.isfinite(kv[1]) else 1)[0]
                raise TrainAbortError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(component {component}); last finite step {step - 1}",
                    last_finite_step=step - 1, component=component)
            gmap = backward(bd.total, wrt=param_tensors)
            grads = {nme: gmap[t].data for nme, t in zip(param_names, param_tensors)}
            if cfg.grad_clip is not None:
                grads = nn.clip_global_norm(grads, cfg.grad_clip)
            nn.adam_step(store, grads, cfg.lr)
            rows.append((epoch, step, total, bd.recon, bd.kl,
                         bd.intra_explicit, bd.inter))
            step += 1

    if log_path is not None:
        write_training_log(rows, log_path)
    ckpt = ModelCheckpoint(arch=arch, store=store, config=cfg,
                           final_epoch=cfg.epochs, seed=cfg.seed,
                           n_train=n_train, log_digest=_log_digest(rows))
    return ckpt, rows


def encode_posterior(ckpt: ModelCheckpoint, images: np.ndarray,
                     batch: int = 512):
    """Posterior means and log-variances over a split, without recording."""
    mus, logvars = [], []
    with no_grad():
        for ofs in range(0, images.shape[0], batch):
            post = genmodel.encode(ckpt.arch, ckpt.store, images[ofs:ofs + batch])
            mus.append(post.mu.data)
            logvars.append(post.logvar.data)
    return np.concatenate(mus, axis=0), np.concatenate(logvars, axis=0)


def encode_means(ckpt: ModelCheckpoint, images: np.ndarray,
                 batch: int = 512) -> np.ndarray:
    return encode_posterior(ckpt, images, batch)[0]


def reconstruct_images(ckpt: ModelCheckpoint, images: np.ndarray,
                       batch: int = 512) -> np.ndarray:
    out = []
    with no_grad():
        for ofs in range(0, images.shape[0], batch):
            chunk = images[ofs:ofs + batch]
            post = genmodel.encode(ckpt.arch, ckpt.store, chunk)
            out.append(genmodel.decode(ckpt.arch, ckpt.store, post.mu).data)
    return np.concatenate(out, axis=0)


def evaluate(ckpt: ModelCheckpoint, ds: datagen.Dataset,
             factor_names: Optional[Sequence[str]] = None) -> metrics.MetricsReport:
    """Metrics over a split: correlation report, LDS, SAP, per-image SSIM
    of the noise-free reconstruction, and MSE.

    Factors default to every ground-truth factor in the dataset so scores
    stay comparable across training cases. Correlations are taken at the
    posterior-sample level (variance-corrected means), so collapsed latents
    do not contribute scale-free ghost correlations.
    """
    missing = [f for f in ckpt.config.aux_factor_names()
               if f not in ds.factor_names]
    if missing:
        raise ValueError(f"dataset lacks checkpoint factors {missing}")
    names = list(factor_names) if factor_names is not None else list(ds.factor_names)
    u = np.column_stack([ds.factor_column(f) for f in names])

    mu, logvar = encode_posterior(ckpt, ds.images)
    report = metrics.posterior_corr_report(u, mu, logvar, names)
    recon = reconstruct_images(ckpt, ds.images)
    ssim_vals = np.array([metrics.ssim(ds.images[i, 0], recon[i, 0])
                          for i in range(ds.n)])
    return metrics.MetricsReport(
        lds=metrics.lds(report),
        sap=metrics.sap_from_r2(report.matrix ** 2),
        mse=metrics.mse(ds.images, recon),
        ssim_summary=metrics.FiveNumberSummary.of(ssim_vals),
        corr=report,
        ssim_values=ssim_vals,
    )


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

@dataclass
class GridCell:
    beta: float
    lambda1: float
    lambda2: float
    seed: int
    mse: float = np.nan
    lds: float = np.nan
    std_mse: float = np.nan
    std_one_minus_lds: float = np.nan
    product: float = np.nan


@dataclass
class GridSearchResult:
    cells: list[GridCell]
    best: GridCell
    best_config: TrainConfig


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def rank_cells(cells: "list[GridCell]") -> "GridCell":
    """Fill the standardized scores in place and return the winning cell:
    lowest product of min-max standardized MSE and standardized (1 - LDS)."""
    std_mse = _minmax(np.array([c.mse for c in cells]))
    std_inv = _minmax(np.array([1.0 - c.lds for c in cells]))
    for cell, sm, si in zip(cells, std_mse, std_inv):
        cell.std_mse = float(sm)
        cell.std_one_minus_lds = float(si)
        cell.product = float(sm * si)
    return min(cells, key=lambda c: c.product)


def _run_cell(payload):
    cfg_json, dataset_path = payload
    cfg = TrainConfig.from_json(cfg_json)
    ds = datagen.load_dataset(dataset_path)
    return _cell_scores(cfg, ds)


def _cell_scores(cfg: TrainConfig, ds: datagen.Dataset):
    ckpt, _ = train(cfg, dataset=ds)
    _, val_ds, _ = datagen.split(ds, (7, 2, 1), seed=cfg.seed)
    report = evaluate(ckpt, val_ds)
    return report.mse, report.lds


def grid_search(base_cfg: TrainConfig, grid: Sequence[tuple],
                dataset: Optional[datagen.Dataset] = None,
                workers: int = 1, csv_path=None) -> GridSearchResult:
    """Train one model per (beta, lambda1, lambda2) cell, score each on the
    validation split, min-max standardize MSE and (1 - LDS) over the grid,
    and rank by their product (lower is better)."""
    grid = [tuple(cell) for cell in grid]
    if not grid:
        raise ValueError("grid_search: empty grid")
    cells = []
    for i, (beta, lam1, lam2) in enumerate(grid):
        seed = int(np.random.SeedSequence([base_cfg.seed, i]).generate_state(1)[0])
        cells.append(GridCell(beta=beta, lambda1=lam1, lambda2=lam2, seed=seed))

    def cell_cfg(cell: GridCell) -> TrainConfig:
        return dataclasses.replace(base_cfg, beta=cell.beta, lambda1=cell.lambda1,
                                   lambda2=cell.lambda2, seed=cell.seed)

    if workers > 1:
        if not base_cfg.dataset:
            raise ValueError("parallel grid search needs a dataset path in the config")
        payloads = [(cell_cfg(c).to_json(), base_cfg.dataset) for c in cells]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(_run_cell, payloads))
    else:
        ds = dataset if dataset is not None else datagen.load_dataset(base_cfg.dataset)
        scores = [_cell_scores(cell_cfg(c), ds) for c in cells]

    for cell, (cell_mse, cell_lds) in zip(cells, scores):
        cell.mse, cell.lds = cell_mse, cell_lds
    best = rank_cells(cells)

    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["beta", "lambda1", "lambda2", "seed", "mse", "lds",
                             "std_mse", "std_one_minus_lds", "product"])
            for c in cells:
                writer.writerow([c.beta, c.lambda1, c.lambda2, c.seed,
                                 repr(c.mse), repr(c.lds), repr(c.std_mse),
                                 repr(c.std_one_minus_lds), repr(c.product)])
    return GridSearchResult(cells=cells, best=best, best_config=cell_cfg(best))


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = b"AXVC"
_VERSION = 1


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    arch_text = ckpt.arch.to_text().encode("utf-8")
    snapshot = json.dumps({
        "config": json.loads(ckpt.config.to_json()),
        "final_epoch": ckpt.final_epoch,
        "n_train": ckpt.n_train,
        "log_digest": ckpt.log_digest,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(arch_text)))
        fh.write(arch_text)
        fh.write(struct.pack("<I", len(ckpt.store.params)))
        for name, tensor in ckpt.store.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.data.astype("<f4").tobytes())
        fh.write(struct.pack("<I", len(snapshot)))
        fh.write(snapshot)
        fh.write(struct.pack("<Q", ckpt.seed))


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (alen,) = struct.unpack("<I", fh.read(4))
        arch = ArchitectureDescriptor.from_text(fh.read(alen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        store = ParamStore()
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            data = np.frombuffer(fh.read(4 * int(np.prod(shape))), dtype="<f4")
            store.add(name, data.reshape(shape).copy())
        (slen,) = struct.unpack("<I", fh.read(4))
        snapshot = json.loads(fh.read(slen).decode("utf-8"))
        (seed,) = struct.unpack("<Q", fh.read(8))
    cfg_raw = snapshot["config"]
    cfg_raw["hidden"] = tuple(cfg_raw["hidden"])
    cfg = TrainConfig(**cfg_raw)
    return ModelCheckpoint(arch=arch, store=store, config=cfg,
                           final_epoch=snapshot["final_epoch"], seed=seed,
                           n_train=snapshot["n_train"],
                           log_digest=snapshot["log_digest"])
