"""Full-covariance bivariate Gaussian posteriors and confidence geometry.

The covariance is parameterized in normalized parameter units (the unit box
over the bounds Theta) through its eigen-factorization Sigma = U S^2 U^T,
with U a rotation by `angle` and log S the `eig_logsig` vector.  Physical
units are recovered at the boundary by the diagonal bounds-width scaling D:
Sigma_phys = D U S^2 U^T D.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class ParameterBounds:
    """Per-parameter (low, high) box for (f, k)."""
    f: tuple
    k: tuple

    def __post_init__(self):
        for lo, hi in (self.f, self.k):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError("bounds must be finite with low < high")

    @property
    def lows(self) -> np.ndarray:
        return np.array([self.f[0], self.k[0]])

    @property
    def highs(self) -> np.ndarray:
        return np.array([self.f[1], self.k[1]])

    @property
    def widths(self) -> np.ndarray:
        return self.highs - self.lows

    def normalize(self, theta):
        return (np.asarray(theta) - self.lows) / self.widths

    def denormalize(self, u):
        return self.lows + np.asarray(u) * self.widths

    def clamp(self, theta):
        return np.clip(np.asarray(theta), self.lows, self.highs)

    def to_json(self):
        return {"f": list(self.f), "k": list(self.k)}

    @classmethod
    def from_json(cls, d):
        return cls(f=tuple(d["f"]), k=tuple(d["k"]))


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass
class GaussianPosterior:
    mu: np.ndarray          # (2,), physical units (f, k)
    eig_logsig: np.ndarray  # (2,), log sigma-eigenvalues, normalized units
    angle: float            # radians, in (-pi/2, pi/2]
    bounds: ParameterBounds

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.eig_logsig = np.asarray(self.eig_logsig, dtype=float)


@dataclass(frozen=True)
class ConfidenceRegion:
    center: np.ndarray
    semi_axes: tuple   # (a, b), a >= b, physical units
    orientation: float  # radians
    level: float = 0.95

    @property
    def area(self) -> float:
        return float(np.pi * self.semi_axes[0] * self.semi_axes[1])


def assemble_covariance(post: GaussianPosterior) -> np.ndarray:
    """Physical-unit SPD covariance Sigma = D U S^2 U^T D."""
    u = rotation(post.angle)
    s2 = np.exp(2.0 * post.eig_logsig)
    sig_norm = (u * s2) @ u.T
    d = post.bounds.widths
    sig = d[:, None] * sig_norm * d[None, :]
    return 0.5 * (sig + sig.T)


def sample(post: GaussianPosterior, eps) -> tuple[np.ndarray, bool]:
    """Reparameterized draw theta' = mu + D U S eps, clamped to bounds.

    Returns the draw and a flag recording whether clamping occurred.
    """
    eps = np.asarray(eps, dtype=float)
    if not np.all(np.isfinite(eps)):
        raise ValueError("eps must be finite")
    u = rotation(post.angle)
    s = np.exp(post.eig_logsig)
    raw = post.mu + post.bounds.widths * (u @ (s * eps))
    clamped = post.bounds.clamp(raw)
    return clamped, bool(np.any(clamped != raw))


def _sorted_eig(sigma: np.ndarray):
    lam, vec = np.linalg.eigh(sigma)
    order = np.argsort(lam)[::-1]
    return lam[order], vec[:, order]


def _wrap_angle(phi: float) -> float:
    """Map an axis orientation into (-pi/2, pi/2]."""
    phi = (phi + np.pi / 2.0) % np.pi - np.pi / 2.0
    if phi == -np.pi / 2.0:
        phi = np.pi / 2.0
    return float(phi)


def confidence_region(post: GaussianPosterior,
                      level: float = 0.95) -> ConfidenceRegion:
    """Iso-posterior ellipse enclosing `level` probability mass."""
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie in (0, 1)")
    sigma = assemble_covariance(post)
    lam, vec = _sorted_eig(sigma)
    q = stats.chi2.ppf(level, df=2)
    a, b = np.sqrt(q * lam)
    phi = _wrap_angle(np.arctan2(vec[1, 0], vec[0, 0]))
    return ConfidenceRegion(center=post.mu.copy(), semi_axes=(float(a), float(b)),
                            orientation=phi, level=level)


def confidence_intervals(post: GaussianPosterior) -> list[tuple[float, float]]:
    """Univariate +-2 sigma intervals from the covariance diagonal."""
    sigma = assemble_covariance(post)
    sd = np.sqrt(np.diag(sigma))
    return [(float(m - 2 * s), float(m + 2 * s)) for m, s in zip(post.mu, sd)]


def mahalanobis(x, post: GaussianPosterior) -> float:
    """sqrt((x - mu)^T Sigma^-1 (x - mu)) in physical units."""
    sigma = assemble_covariance(post)
    d = np.asarray(x, dtype=float) - post.mu
    try:
        y = np.linalg.solve(sigma, d)
    except np.linalg.LinAlgError as exc:  # cannot occur for valid posteriors
        raise ValueError("singular covariance") from exc
    return float(np.sqrt(max(d @ y, 0.0)))


def from_covariance(mu, sigma_phys: np.ndarray,
                    bounds: ParameterBounds) -> GaussianPosterior:
    """Build the eigen-parameterized posterior from a physical covariance."""
    d = bounds.widths
    sig_norm = sigma_phys / d[:, None] / d[None, :]
    lam, vec = _sorted_eig(sig_norm)
    if lam[-1] <= 0:
        raise ValueError("covariance must be positive definite")
    phi = _wrap_angle(np.arctan2(vec[1, 0], vec[0, 0]))
    # re-evaluate the leading axis after wrapping so U = rotation(phi)
    u = rotation(phi)
    s2 = np.array([u[:, 0] @ sig_norm @ u[:, 0], u[:, 1] @ sig_norm @ u[:, 1]])
    return GaussianPosterior(mu=np.asarray(mu, dtype=float),
                             eig_logsig=0.5 * np.log(s2), angle=phi,
                             bounds=bounds)


# ---------------------------------------------------------------------------
# vectorized posterior maps


@dataclass
class PosteriorMap:
    """Per-voxel Gaussian posteriors over an image raster.

    Arrays are full-raster (H*W, ...) in raster order; background voxels
    carry NaNs.  sigma is the per-parameter standard deviation and rho the
    correlation, both in physical units.
    """
    mu: np.ndarray       # (N, 2)
    sigma: np.ndarray    # (N, 2)
    rho: np.ndarray      # (N,)
    clamp: np.ndarray    # (N,) clamp-rate statistic recorded at inference
    bounds: ParameterBounds
    grid_shape: tuple    # (H, W)
    units: tuple = ("fraction", "s^-1")

    @property
    def n_voxels(self) -> int:
        return self.mu.shape[0]

    @property
    def in_mask(self) -> np.ndarray:
        return np.isfinite(self.mu[:, 0])

    def covariances(self) -> np.ndarray:
        """(N, 2, 2) covariance stack."""
        c = np.empty((self.n_voxels, 2, 2))
        c[:, 0, 0] = self.sigma[:, 0] ** 2
        c[:, 1, 1] = self.sigma[:, 1] ** 2
        c[:, 0, 1] = c[:, 1, 0] = self.rho * self.sigma[:, 0] * self.sigma[:, 1]
        return c

    def voxel(self, i: int) -> GaussianPosterior:
        return from_covariance(self.mu[i], self.covariances()[i], self.bounds)

    def ci_halfwidths(self) -> np.ndarray:
        """(N, 2) univariate +-2 sigma half-widths."""
        return 2.0 * self.sigma


def mahalanobis_batch(x: np.ndarray, mu: np.ndarray,
                      cov: np.ndarray) -> np.ndarray:
    """Mahalanobis distances of points x (..., 2) under (mu, cov) stacks."""
    d = x - mu
    inv = np.linalg.inv(cov)
    return np.sqrt(np.maximum(np.einsum("...i,...ij,...j->...", d, inv, d), 0.0))


def sample_batch(mu: np.ndarray, cov: np.ndarray,
                 eps: np.ndarray) -> np.ndarray:
    """Draws mu + L eps with L the Cholesky factor of each covariance."""
    chol = np.linalg.cholesky(cov)
    return mu + np.einsum("...ij,...j->...i", chol, eps)


def save_posterior_map(path, pmap: PosteriorMap) -> None:
    """Raster of float32 records (mu_f, mu_k, sigma_f, sigma_k, rho, clamp)
    plus a JSON sidecar with bounds, units, and grid shape."""
    rec = np.column_stack([pmap.mu, pmap.sigma, pmap.rho, pmap.clamp])
    rec.astype("<f4").tofile(path)
    sidecar = {"bounds": pmap.bounds.to_json(),
               "units": list(pmap.units),
               "grid_shape": list(pmap.grid_shape),
               "record_fields": ["mu_f", "mu_k", "sigma_f", "sigma_k",
                                 "rho", "clamp_flag"]}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def load_posterior_map(path) -> PosteriorMap:
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    rec = np.fromfile(path, dtype="<f4").astype(float).reshape(-1, 6)
    shape = tuple(sidecar["grid_shape"])
    if rec.shape[0] != shape[0] * shape[1]:
        raise ValueError("posterior map raster does not match grid shape")
    return PosteriorMap(mu=rec[:, 0:2], sigma=rec[:, 2:4], rho=rec[:, 4],
                        clamp=rec[:, 5],
                        bounds=ParameterBounds.from_json(sidecar["bounds"]),
                        grid_shape=shape, units=tuple(sidecar["units"]))
