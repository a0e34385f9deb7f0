"""Evaluation-only measures: linear disentanglement score, separated
attribute predictability, windowed structural similarity, and mean squared
error, plus the factor-latent correlation report behind the scatter
diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad
from . import objective


@dataclass
class CorrMatrixReport:
    matrix: np.ndarray            # d x d_z, entries in [-1, 1]
    factor_names: list[str]
    n_samples: int

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("correlation matrix must be 2-D")
        if self.n_samples < 2:
            raise ValueError("correlation report needs at least 2 samples")


def corr_report(u: np.ndarray, z: np.ndarray,
                factor_names: Optional[Sequence[str]] = None) -> CorrMatrixReport:
    """Correlation of each factor against each latent over an evaluation set."""
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    with no_grad():
        corr = objective.batch_corr(Tensor(u), Tensor(z)).data
    corr = np.clip(corr, -1.0, 1.0)
    names = list(factor_names) if factor_names is not None else \
        [f"factor{j}" for j in range(u.shape[1])]
    return CorrMatrixReport(corr, names, u.shape[0])


def posterior_corr_report(u: np.ndarray, mu: np.ndarray, logvar: np.ndarray,
                          factor_names: Optional[Sequence[str]] = None,
                          eps: float = 1e-8) -> CorrMatrixReport:
    """Factor-latent correlations at the level of posterior samples, in
    closed form from the encoder outputs.

    By total covariance, Cov(u_j, z_l) equals Cov(u_j, mu_l); by total
    variance, Var(z_l) equals Var(mu_l) + E[sigma_l^2]. Computing the
    correlation this way scores what a posterior draw actually carries:
    a collapsed latent whose mean still jitters with a factor correlates
    near zero instead of inheriting the mean's scale-free correlation.
    """
    u = np.asarray(u, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    uc = u - u.mean(axis=0)
    mc = mu - mu.mean(axis=0)
    cov = uc.T @ mc / u.shape[0]
    su = np.sqrt((uc ** 2).mean(axis=0) + eps)
    sz = np.sqrt((mc ** 2).mean(axis=0) + np.exp(logvar).mean(axis=0) + eps)
    corr = np.clip(cov / np.outer(su, sz), -1.0, 1.0)
    names = list(factor_names) if factor_names is not None else \
        [f"factor{j}" for j in range(u.shape[1])]
    return CorrMatrixReport(corr, names, u.shape[0])


def lds(corr) -> float:
    """Mean over factors of max|corr| / sum|corr| across latents.

    Bounded in [1/d_z, 1]; an all-zero row contributes the uniform-ignorance
    value 1/d_z.
    """
    matrix = corr.matrix if isinstance(corr, CorrMatrixReport) else np.asarray(corr)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ValueError("lds: need a non-empty 2-D correlation matrix")
    d_z = matrix.shape[1]
    absm = np.abs(matrix)
    sums = absm.sum(axis=1)
    ratios = np.full(matrix.shape[0], 1.0 / d_z)
    nz = sums > 0
    ratios[nz] = absm[nz].max(axis=1) / sums[nz]
    return float(ratios.mean())


def sap(u: np.ndarray, z: np.ndarray) -> float:
    """Mean gap between the best and second-best univariate R^2 per factor.

    For a univariate least-squares fit, R^2 equals the squared Pearson
    correlation, so no regression needs to be solved.
    """
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = u.shape[0]
    if n < 10:
        raise ValueError("sap: need at least 10 samples")
    if z.shape[1] < 2:
        raise ValueError("sap: need at least 2 latent dimensions")
    uc = u - u.mean(axis=0)
    zc = z - z.mean(axis=0)
    cov = uc.T @ zc / n
    su = np.sqrt((uc ** 2).mean(axis=0))
    sz = np.sqrt((zc ** 2).mean(axis=0))
    denom = np.outer(su, sz)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(denom > 0, (cov / np.where(denom > 0, denom, 1.0)) ** 2, 0.0)
    return sap_from_r2(r2)


def sap_from_r2(r2: np.ndarray) -> float:
    """Mean top-1 minus top-2 gap over the rows of a predictivity matrix."""
    r2 = np.asarray(r2, dtype=np.float64)
    if r2.shape[1] < 2:
        raise ValueError("sap: need at least 2 latent dimensions")
    top2 = np.sort(r2, axis=1)[:, -2:]
    return float(np.mean(top2[:, 1] - top2[:, 0]))


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0,
         k1: float = 0.01, k2: float = 0.03, win: int = 7) -> float:
    """Mean structural similarity over all fully interior win x win windows.

    Uniform (unweighted) windows, unbiased sample variances/covariance,
    C1 = (k1 L)^2 and C2 = (k2 L)^2 with L the dynamic range.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2:
        x = x.reshape(x.shape[-2], x.shape[-1])
        y = y.reshape(y.shape[-2], y.shape[-1])
    h, w = x.shape
    if h < win or w < win:
        raise ValueError(f"ssim: image {x.shape} smaller than window {win}")

    xw = np.lib.stride_tricks.sliding_window_view(x, (win, win))
    yw = np.lib.stride_tricks.sliding_window_view(y, (win, win))
    n = win * win
    mx = xw.mean(axis=(2, 3))
    my = yw.mean(axis=(2, 3))
    # unbiased second moments around the window means
    vx = ((xw - mx[..., None, None]) ** 2).sum(axis=(2, 3)) / (n - 1)
    vy = ((yw - my[..., None, None]) ** 2).sum(axis=(2, 3)) / (n - 1)
    cxy = ((xw - mx[..., None, None]) * (yw - my[..., None, None])).sum(axis=(2, 3)) / (n - 1)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx ** 2 + my ** 2 + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def mse(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"mse: shape mismatch {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


@dataclass
class FiveNumberSummary:
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float

    @staticmethod
    def of(values) -> "FiveNumberSummary":
        v = np.asarray(values, dtype=np.float64)
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        return FiveNumberSummary(float(v.min()), float(q1), float(med),
                                 float(q3), float(v.max()))


@dataclass
class MetricsReport:
    lds: float
    sap: float
    mse: float
    ssim_summary: FiveNumberSummary
    corr: CorrMatrixReport
    ssim_values: np.ndarray = field(default=None, repr=False)


def write_metrics_csv(report: MetricsReport, path) -> None:
    """One (metric, value) row per scalar, then the correlation block."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["lds", repr(report.lds)])
        writer.writerow(["sap", repr(report.sap)])
        writer.writerow(["mse", repr(report.mse)])
        s = report.ssim_summary
        for label, val in (("ssim_min", s.minimum), ("ssim_q1", s.q1),
                           ("ssim_median", s.median), ("ssim_q3", s.q3),
                           ("ssim_max", s.maximum)):
            writer.writerow([label, repr(val)])
        writer.writerow([])
        writer.writerow(["factor"] + [f"z{l}" for l in range(report.corr.matrix.shape[1])])
        for name, row in zip(report.corr.factor_names, report.corr.matrix):
            writer.writerow([name] + [repr(float(v)) for v in row])
