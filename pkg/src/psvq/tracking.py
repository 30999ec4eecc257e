"""Posterior dynamics under progressive acquisition.

For each prefix length n the exact grid posterior is recomputed from the
first n samples of the trajectory (dictionary truncated to the prefix,
both sides re-normalized over the prefix, noise scale re-estimated), and
confidence geometry plus retrospective early-stopping error are tracked
against the full-protocol estimate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats as _stats

from . import gridref
from .engine import AuxArrays
from .physics import PoolConfig, ProtocolSchedule


@dataclass
class TrackingSeries:
    """Per-(voxel, prefix) posterior summaries; arrays are (V, P)."""
    prefixes: np.ndarray     # strictly increasing, last entry = N
    voxel_index: np.ndarray  # (V,) raster indices
    map_f: np.ndarray
    map_k: np.ndarray
    mu: np.ndarray           # (V, P, 2) moment means
    cov: np.ndarray          # (V, P, 2, 2)
    cr_area: np.ndarray      # (V, P) 95% ellipse area from the moment fit
    ci_width: np.ndarray     # (V, P, 2) full +-2 sigma interval widths
    delta: np.ndarray        # (V, P, 2) |theta_hat[n] - theta_hat[N]|

    @property
    def n_full(self) -> int:
        return int(self.prefixes[-1])

    def mape(self) -> np.ndarray:
        """(P, 2) mean absolute percentage error vs the full-data estimate."""
        ref = np.stack([self.map_f[:, -1], self.map_k[:, -1]], axis=1)
        return 100.0 * np.mean(self.delta / np.abs(ref)[:, None, :], axis=0)

    def convergence_index(self, tol: float = 0.10) -> int:
        """Smallest prefix whose mean CR area is within `tol` of the final."""
        area = self.cr_area.mean(axis=0)
        ok = np.abs(area - area[-1]) <= tol * area[-1]
        return int(self.prefixes[np.argmax(ok)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["voxel", "n", "map_f", "map_k", "cr_area",
                        "ci_width_f", "ci_width_k", "delta_f", "delta_k"])
            for vi in range(self.voxel_index.size):
                for pi, n in enumerate(self.prefixes):
                    w.writerow([int(self.voxel_index[vi]), int(n),
                                f"{self.map_f[vi, pi]:.6g}",
                                f"{self.map_k[vi, pi]:.6g}",
                                f"{self.cr_area[vi, pi]:.6g}",
                                f"{self.ci_width[vi, pi, 0]:.6g}",
                                f"{self.ci_width[vi, pi, 1]:.6g}",
                                f"{self.delta[vi, pi, 0]:.6g}",
                                f"{self.delta[vi, pi, 1]:.6g}"])


def track(signals: np.ndarray, aux: AuxArrays, schedule: ProtocolSchedule,
          pools: Sequence[PoolConfig], spec: gridref.GridSpec,
          prefixes: Sequence[int],
          voxel_index: Optional[np.ndarray] = None,
          cache_dir: Optional[str] = None,
          level: float = 0.95) -> TrackingSeries:
    """Grid posteriors over trajectory prefixes for a set of voxels.

    Prefix trajectories (measured and dictionary) are re-normalized to
    unit norm over the prefix, and the noise scale is re-estimated per
    prefix with the standard best-fit estimator.  The full length N is
    appended to `prefixes` when absent so the early-stopping baseline is
    always available.
    """
    signals = np.atleast_2d(np.asarray(signals, dtype=float))
    v, n_full = signals.shape
    prefixes = sorted(set(int(n) for n in prefixes) | {n_full})
    if prefixes[0] < 1 or prefixes[-1] > n_full:
        raise ValueError("prefix lengths must lie in [1, N]")
    if not np.all(np.diff(prefixes) > 0):
        raise ValueError("prefix lengths must be strictly increasing")
    prefixes = np.asarray(prefixes)
    p = prefixes.size
    if voxel_index is None:
        voxel_index = np.arange(v)

    mu = np.empty((v, p, 2))
    cov = np.empty((v, p, 2, 2))
    mapt = np.empty((v, p, 2))
    nodes = spec.nodes()
    cell_cov = np.diag(spec.cell_sizes() ** 2) / 12.0

    for aux_p, idx in gridref.group_voxels(aux, pools):
        full = gridref.build_dictionary(spec, aux_p, schedule, pools,
                                        cache_dir=cache_dir)
        for pi, n in enumerate(prefixes):
            d_raw = full.raw[:, :n]
            d = d_raw / np.linalg.norm(d_raw, axis=1, keepdims=True)
            s = signals[idx][:, :n]
            s = s / np.linalg.norm(s, axis=1, keepdims=True)
            r2 = gridref.squared_residuals(s, d)
            best = np.argmin(r2, axis=1)
            min_r2 = r2[np.arange(idx.size), best]
            sig = np.maximum(np.sqrt(min_r2 / n), gridref.SIGMA_FLOOR)
            logl = -r2 / (2.0 * sig[:, None] ** 2)
            mass = np.exp(logl - logl.max(axis=1, keepdims=True))
            mass /= mass.sum(axis=1, keepdims=True)
            m = mass @ nodes
            dmu = nodes[None] - m[:, None]
            c = np.einsum("vn,vni,vnj->vij", mass, dmu, dmu) + cell_cov
            mu[idx, pi] = m
            cov[idx, pi] = c
            mapt[idx, pi] = nodes[best]

    q = _stats.chi2.ppf(level, df=2)
    cr_area = np.pi * q * np.sqrt(np.linalg.det(cov))
    ci_width = 4.0 * np.sqrt(cov[..., [0, 1], [0, 1]])
    delta = np.abs(mapt - mapt[:, -1:, :])
    return TrackingSeries(prefixes=prefixes,
                          voxel_index=np.asarray(voxel_index),
                          map_f=mapt[..., 0], map_k=mapt[..., 1],
                          mu=mu, cov=cov, cr_area=cr_area,
                          ci_width=ci_width, delta=delta)


def ci_bound_check(series: TrackingSeries):
    """How often the CI half-width bounds the early-stopping error.

    Pairs with n = N are excluded (their error is zero by construction).
    Returns per-parameter coverage fractions and the scatter pairs
    (CI/2, |delta|) with shape (2, V*(P-1), 2).
    """
    half = series.ci_width[:, :-1, :] / 2.0
    err = series.delta[:, :-1, :]
    coverage = np.mean(half >= err, axis=(0, 1))
    scatter = np.stack([np.stack([half[..., j].ravel(), err[..., j].ravel()],
                                 axis=1) for j in range(2)])
    return coverage, scatter


def ci_error_correlation(series: TrackingSeries) -> np.ndarray:
    """Pearson r between mean CI width and MAPE across prefix lengths."""
    if series.prefixes.size < 3:
        raise ValueError("correlation needs at least 3 prefix lengths")
    width = series.ci_width.mean(axis=0)   # (P, 2)
    mape = series.mape()                   # (P, 2)
    out = np.empty(2)
    for j in range(2):
        if np.std(width[:, j]) == 0 or np.std(mape[:, j]) == 0:
            raise ValueError("constant series: correlation undefined")
        out[j] = np.corrcoef(width[:, j], mape[:, j])[0, 1]
    return out
