"""Agreement metrics between encoder posteriors, the exact grid reference,
and ground truth: fitting error, CI overlap, two-directional Mahalanobis
distances, and the contrast-to-total-uncertainty ratio."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import gridref
from .gridref import GridPosterior
from .posterior import (GaussianPosterior, PosteriorMap, assemble_covariance,
                        confidence_intervals, mahalanobis_batch, sample_batch)

M_THRESHOLD = 4.0


def nrmse_fit(s_m: np.ndarray, s_model: np.ndarray) -> float:
    """||model - measured|| / ||measured||, in percent."""
    s_m = np.asarray(s_m, dtype=float)
    return float(100.0 * np.linalg.norm(s_model - s_m) / np.linalg.norm(s_m))


def nrmse_fit_batch(s_m: np.ndarray, s_model: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(s_model - s_m, axis=1)
    return 100.0 * r / np.linalg.norm(s_m, axis=1)


def ci_intersection(post_a, post_b) -> tuple:
    """Per-parameter closed-interval overlap of the +-2 sigma CIs."""
    ci_a = _cis(post_a)
    ci_b = _cis(post_b)
    return tuple(a[0] <= b[1] and b[0] <= a[1] for a, b in zip(ci_a, ci_b))


def _cis(post):
    if isinstance(post, GridPosterior):
        post = gridref.gaussian_fit(post)
    return confidence_intervals(post)


def _as_gaussian(post) -> GaussianPosterior:
    if isinstance(post, GridPosterior):
        return gridref.gaussian_fit(post)
    return post


def _draw(post, n_samples: int, rng) -> np.ndarray:
    if isinstance(post, GridPosterior):
        return gridref.sample_grid(post, n_samples, rng)
    cov = assemble_covariance(post)
    if np.linalg.det(cov) <= 0:
        raise ValueError("degenerate posterior cannot be sampled")
    eps = rng.standard_normal((n_samples, 2))
    return sample_batch(post.mu, cov[None], eps)


def two_directional_mahalanobis(p1, p2, n_samples: int = 1000,
                                seed: int = 0):
    """Cross-distances (M1, M2) between two posteriors.

    M1 holds Mahalanobis distances of draws from p2 measured under p1, and
    vice versa.  Grid posteriors are sampled cell-by-mass with uniform
    within-cell jitter; as a distance target they are replaced by their
    Gaussian moment fit.
    """
    rng = np.random.default_rng(np.random.Philox(seed))
    g1, g2 = _as_gaussian(p1), _as_gaussian(p2)
    cov1, cov2 = assemble_covariance(g1), assemble_covariance(g2)
    for c in (cov1, cov2):
        if np.linalg.det(c) <= 0:
            raise ValueError("degenerate posterior in Mahalanobis comparison")
    s2 = _draw(p2, n_samples, rng)
    s1 = _draw(p1, n_samples, rng)
    m1 = mahalanobis_batch(s2, g1.mu[None], cov1[None])
    m2 = mahalanobis_batch(s1, g2.mu[None], cov2[None])
    return m1, m2


def mahalanobis_map_summary(mu_a, cov_a, mu_b, cov_b,
                            n_samples: int = 1000, seed: int = 0,
                            chunk: int = 200) -> dict:
    """Vectorized two-directional distances for posterior-map stacks.

    Direction 1 samples from B and measures under A; direction 2 the
    reverse.  Returns per-voxel medians and threshold-exceedance
    fractions.
    """
    rng = np.random.default_rng(np.random.Philox(seed))
    v = mu_a.shape[0]
    out = {k: np.empty(v) for k in
           ("m1_median", "m2_median", "m1_frac_gt", "m2_frac_gt")}
    for lo in range(0, v, chunk):
        sl = slice(lo, min(lo + chunk, v))
        b = mu_a[sl].shape[0]
        eps = rng.standard_normal((2, b, n_samples, 2))
        draws_b = sample_batch(mu_b[sl][:, None], cov_b[sl][:, None], eps[0])
        draws_a = sample_batch(mu_a[sl][:, None], cov_a[sl][:, None], eps[1])
        m1 = mahalanobis_batch(draws_b, mu_a[sl][:, None], cov_a[sl][:, None])
        m2 = mahalanobis_batch(draws_a, mu_b[sl][:, None], cov_b[sl][:, None])
        out["m1_median"][sl] = np.median(m1, axis=1)
        out["m2_median"][sl] = np.median(m2, axis=1)
        out["m1_frac_gt"][sl] = np.mean(m1 > M_THRESHOLD, axis=1)
        out["m2_frac_gt"][sl] = np.mean(m2 > M_THRESHOLD, axis=1)
    return out


def posterior_sample_map(pmap: PosteriorMap, seed: int = 0) -> np.ndarray:
    """One independent posterior draw per voxel, clamped to the bounds."""
    rng = np.random.default_rng(np.random.Philox(seed))
    ok = pmap.in_mask
    out = np.full_like(pmap.mu, np.nan)
    eps = rng.standard_normal((int(ok.sum()), 2))
    draws = sample_batch(pmap.mu[ok], pmap.covariances()[ok], eps)
    out[ok] = np.clip(draws, pmap.bounds.lows, pmap.bounds.highs)
    return out


def cur(theta_index: int, idx1: np.ndarray, idx2: np.ndarray,
        pmap: PosteriorMap, n_draws: int = 100, seed: int = 0) -> float:
    """Contrast-to-total-uncertainty ratio between two ROIs.

    The denominator pools, per ROI, the spread of posterior draws about the
    ROI's mean point estimate (capturing both spatial heterogeneity and
    posterior width), averaged over draws.
    """
    idx1 = np.asarray(idx1)
    idx2 = np.asarray(idx2)
    if idx1.size == 0 or idx2.size == 0:
        raise ValueError("CUR requires nonempty ROIs")
    j = theta_index
    mean1 = pmap.mu[idx1, j].mean()
    mean2 = pmap.mu[idx2, j].mean()
    rng = np.random.default_rng(np.random.Philox(seed))
    cov = pmap.covariances()
    var = []
    for idx, mean in ((idx1, mean1), (idx2, mean2)):
        eps = rng.standard_normal((n_draws, idx.size, 2))
        draws = sample_batch(pmap.mu[idx][None], cov[idx][None], eps)[..., j]
        var.append(float(np.mean((draws - mean) ** 2)))
    return float((mean1 - mean2) / np.sqrt(0.5 * (var[0] + var[1])))


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class AgreementReport:
    """Per-voxel agreement table plus aggregate summary."""
    voxel_index: np.ndarray     # raster indices of compared voxels
    nrmse_nn: np.ndarray        # percent
    nrmse_ref: np.ndarray
    ci_intersect: np.ndarray    # (V, 2) booleans, per parameter
    m1_median: np.ndarray
    m2_median: np.ndarray
    m1_frac_gt: np.ndarray
    m2_frac_gt: np.ndarray
    extra_summary: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "nrmse_nn_mean_pct": float(np.mean(self.nrmse_nn)),
            "nrmse_ref_mean_pct": float(np.mean(self.nrmse_ref)),
            "nrmse_correlation_r": float(np.corrcoef(
                self.nrmse_nn, self.nrmse_ref)[0, 1]),
            "ci_intersect_pct": [float(100.0 * np.mean(self.ci_intersect[:, j]))
                                 for j in range(2)],
            "m1_median": float(np.median(self.m1_median)),
            "m2_median": float(np.median(self.m2_median)),
            "m1_gt4_pct": float(100.0 * np.mean(self.m1_frac_gt)),
            "m2_gt4_pct": float(100.0 * np.mean(self.m2_frac_gt)),
            **self.extra_summary,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["voxel", "nrmse_nn_pct", "nrmse_ref_pct",
                        "ci_intersect_f", "ci_intersect_k",
                        "m1_median", "m2_median",
                        "m1_frac_gt4", "m2_frac_gt4"])
            for i in range(self.voxel_index.size):
                w.writerow([int(self.voxel_index[i]),
                            f"{self.nrmse_nn[i]:.6g}",
                            f"{self.nrmse_ref[i]:.6g}",
                            int(self.ci_intersect[i, 0]),
                            int(self.ci_intersect[i, 1]),
                            f"{self.m1_median[i]:.6g}",
                            f"{self.m2_median[i]:.6g}",
                            f"{self.m1_frac_gt[i]:.6g}",
                            f"{self.m2_frac_gt[i]:.6g}"])

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=1, sort_keys=True)


def compare_maps(pmap: PosteriorMap, ref: gridref.ReferenceResult,
                 nrmse_nn: np.ndarray, voxel_index: np.ndarray,
                 n_samples: int = 1000, seed: int = 0) -> AgreementReport:
    """Full agreement report between an encoder map and the grid reference.

    `pmap` rows, `ref` rows, and `nrmse_nn` must already be aligned with
    `voxel_index` (in-mask voxels only).
    """
    mu_a = pmap.mu[voxel_index]
    cov_a = pmap.covariances()[voxel_index]
    mu_b = ref.mu
    cov_b = ref.cov
    ci_a = np.stack([mu_a - 2.0 * np.sqrt(cov_a[:, [0, 1], [0, 1]]),
                     mu_a + 2.0 * np.sqrt(cov_a[:, [0, 1], [0, 1]])])
    ci_b = np.stack([mu_b - 2.0 * np.sqrt(cov_b[:, [0, 1], [0, 1]]),
                     mu_b + 2.0 * np.sqrt(cov_b[:, [0, 1], [0, 1]])])
    intersect = (ci_a[0] <= ci_b[1]) & (ci_b[0] <= ci_a[1])
    m = mahalanobis_map_summary(mu_a, cov_a, mu_b, cov_b,
                                n_samples=n_samples, seed=seed)
    return AgreementReport(voxel_index=np.asarray(voxel_index),
                           nrmse_nn=np.asarray(nrmse_nn),
                           nrmse_ref=ref.nrmse,
                           ci_intersect=intersect,
                           m1_median=m["m1_median"],
                           m2_median=m["m2_median"],
                           m1_frac_gt=m["m1_frac_gt"],
                           m2_frac_gt=m["m2_frac_gt"])
