"""Exact grid-based Bayesian posterior: the brute-force reference method.

For a voxel signal S_m, a dictionary of simulated trajectories is built on a
dense 2-D (f, k) grid; the AWGN likelihood is evaluated on every node and
normalized into a proper probability mass.  A Gaussian fit through the grid
moments makes the reference comparable with the encoder posteriors.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import dataio
from .engine import AuxArrays, batch_trajectories
from .physics import AuxParams, PoolConfig, ProtocolSchedule, pools_to_json
from .posterior import GaussianPosterior, ParameterBounds, from_covariance

SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class GridSpec:
    bounds: ParameterBounds
    counts: tuple = (100, 100)     # (N_f, N_k), nodes include the bounds corners
    spacing: str = "linear"        # "linear" | "log_k"

    def __post_init__(self):
        if min(self.counts) < 2:
            raise ValueError("grid counts must be >= 2")
        if self.spacing not in ("linear", "log_k"):
            raise ValueError(f"unknown spacing {self.spacing!r}")

    def axes(self):
        nf, nk = self.counts
        f_axis = np.linspace(*self.bounds.f, nf)
        if self.spacing == "log_k":
            k_axis = np.geomspace(*self.bounds.k, nk)
        else:
            k_axis = np.linspace(*self.bounds.k, nk)
        return f_axis, k_axis

    def nodes(self) -> np.ndarray:
        """(N_f * N_k, 2) node coordinates, raster order, f-major."""
        f_axis, k_axis = self.axes()
        ff, kk = np.meshgrid(f_axis, k_axis, indexing="ij")
        return np.column_stack([ff.ravel(), kk.ravel()])

    def cell_sizes(self) -> np.ndarray:
        f_axis, k_axis = self.axes()
        return np.array([f_axis[1] - f_axis[0], k_axis[1] - k_axis[0]])

    def to_json(self):
        return {"bounds": self.bounds.to_json(), "counts": list(self.counts),
                "spacing": self.spacing}

    @classmethod
    def from_json(cls, d):
        return cls(bounds=ParameterBounds.from_json(d["bounds"]),
                   counts=tuple(d["counts"]), spacing=d["spacing"])


@dataclass
class Dictionary:
    spec: GridSpec
    trajectories: np.ndarray   # (N, n) unit-norm rows
    raw: np.ndarray            # (N, n) un-normalized Z-values
    key: str                   # content hash

    @property
    def n_entries(self) -> int:
        return self.trajectories.shape[0]


@dataclass
class GridPosterior:
    spec: GridSpec
    mass: np.ndarray           # (N_f, N_k), sums to 1
    map_index: tuple           # argmax cell (i_f, i_k)
    sigma_m: float

    @property
    def map_theta(self) -> np.ndarray:
        f_axis, k_axis = self.spec.axes()
        return np.array([f_axis[self.map_index[0]], k_axis[self.map_index[1]]])


def _quantize(x: float, q: float = 1e-6) -> float:
    return round(float(x) / q) * q


def dictionary_key(spec: GridSpec, aux: AuxParams,
                   schedule: ProtocolSchedule,
                   pools: Sequence[PoolConfig]) -> str:
    """Content hash over (spec, aux quantized to 1e-6, schedule, pools)."""
    from .physics import schedule_to_json
    fixed = [[pools_to_json([pc])[0],
              {"f": _quantize(tp.f), "k": _quantize(tp.k)}]
             for pc, tp in aux.fixed_pools]
    doc = {"spec": spec.to_json(),
           "aux": {"t1": _quantize(aux.t1_water), "t2": _quantize(aux.t2_water),
                   "b0": _quantize(aux.b0_shift), "b1": _quantize(aux.b1_scale),
                   "fixed": fixed},
           "schedule": schedule_to_json(schedule, pools)}
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def cache_dir_default() -> Optional[str]:
    return os.environ.get("PSVQ_CACHE")


def build_dictionary(spec: GridSpec, aux: AuxParams,
                     schedule: ProtocolSchedule,
                     pools: Sequence[PoolConfig],
                     cache_dir: Optional[str] = None) -> Dictionary:
    """Simulate (or load from cache) one trajectory per grid node."""
    key = dictionary_key(spec, aux, schedule, pools)
    if cache_dir is None:
        cache_dir = cache_dir_default()
    if cache_dir:
        path = os.path.join(cache_dir, key + ".psvq")
        if os.path.exists(path):
            _, arrays = dataio.read_container(path, expect_kind="dictionary")
            return Dictionary(spec=spec, trajectories=arrays["trajectories"],
                              raw=arrays["raw"], key=key)
    nodes = spec.nodes()
    aux_b = AuxArrays.from_aux(aux, nodes.shape[0])
    raw = batch_trajectories(pools, nodes, aux_b, schedule, raw=True)
    nrm = np.linalg.norm(raw, axis=1, keepdims=True)
    traj = raw / nrm
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        dataio.write_container(path, "dictionary", {"key": key},
                               {"trajectories": traj, "raw": raw})
    return Dictionary(spec=spec, trajectories=traj, raw=raw, key=key)


def squared_residuals(signals: np.ndarray,
                      trajectories: np.ndarray) -> np.ndarray:
    """||S_m - F(theta)||^2 for each (voxel, node) pair, (V, N)."""
    signals = np.atleast_2d(signals)
    s2 = np.sum(signals ** 2, axis=1)[:, None]
    d2 = np.sum(trajectories ** 2, axis=1)[None, :]
    return np.maximum(s2 + d2 - 2.0 * signals @ trajectories.T, 0.0)


def likelihood_map(s_m: np.ndarray, dictionary: Dictionary,
                   sigma_m: float) -> np.ndarray:
    """Unnormalized log-likelihood over the grid, (N_f, N_k)."""
    s_m = np.asarray(s_m, dtype=float)
    if not np.all(np.isfinite(s_m)):
        raise ValueError("non-finite signal")
    if sigma_m <= 0:
        raise ValueError("sigma_m must be positive")
    r2 = squared_residuals(s_m[None, :], dictionary.trajectories)[0]
    return (-r2 / (2.0 * sigma_m ** 2)).reshape(dictionary.spec.counts)


def posterior_from_likelihood(logl: np.ndarray,
                              prior: Optional[np.ndarray] = None
                              ) -> np.ndarray:
    """Stable normalization of a log surface into a probability mass."""
    logl = np.asarray(logl, dtype=float)
    finite = np.isfinite(logl)
    if not finite.any():
        raise ValueError("log-likelihood surface has no finite node")
    shifted = logl - logl[finite].max()
    mass = np.where(finite, np.exp(np.where(finite, shifted, -np.inf)), 0.0)
    if prior is not None:
        mass = mass * prior
    total = mass.sum()
    if total <= 0:
        raise ValueError("posterior mass vanished")
    return mass / total


def estimate_sigma(s_m: np.ndarray, dictionary: Dictionary) -> float:
    """Noise scale: RMS residual at the best-fit entry, floored at 1e-4."""
    r2 = squared_residuals(np.atleast_2d(s_m), dictionary.trajectories)[0]
    n = dictionary.trajectories.shape[1]
    return max(float(np.sqrt(r2.min() / n)), SIGMA_FLOOR)


def grid_posterior(s_m: np.ndarray, dictionary: Dictionary,
                   sigma_m: Optional[float] = None) -> GridPosterior:
    if sigma_m is None:
        sigma_m = estimate_sigma(s_m, dictionary)
    logl = likelihood_map(s_m, dictionary, sigma_m)
    mass = posterior_from_likelihood(logl)
    idx = np.unravel_index(np.argmax(mass), mass.shape)
    return GridPosterior(spec=dictionary.spec, mass=mass,
                         map_index=(int(idx[0]), int(idx[1])),
                         sigma_m=float(sigma_m))


def grid_moments(post: GridPosterior):
    """Discrete mean and covariance over cell centers.

    The covariance carries the uniform-within-cell correction cell^2/12, so
    a point mass in one cell reports the cell's own spread.
    """
    nodes = post.spec.nodes()
    w = post.mass.ravel()
    mean = w @ nodes
    d = nodes - mean
    cov = (d * w[:, None]).T @ d
    cov += np.diag(post.spec.cell_sizes() ** 2) / 12.0
    if np.linalg.det(cov) <= 0:
        raise ValueError(f"singular grid moment covariance: {cov}")
    return mean, cov


def gaussian_fit(post: GridPosterior) -> GaussianPosterior:
    mean, cov = grid_moments(post)
    return from_covariance(mean, cov, post.spec.bounds)


def freeform_region(post: GridPosterior, level: float = 0.95) -> np.ndarray:
    """Iso-posterior region: densest cells accumulated to `level` mass.

    Ties are broken by raster order (stable argsort).  Returns a boolean
    mask over the grid.
    """
    flat = post.mass.ravel()
    order = np.argsort(-flat, kind="stable")
    csum = np.cumsum(flat[order])
    take = int(np.searchsorted(csum, level) + 1)
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:take]] = True
    return mask.reshape(post.mass.shape)


def sample_grid(post: GridPosterior, n_samples: int,
                rng: np.random.Generator) -> np.ndarray:
    """Draw cells by mass, then uniform jitter within each cell."""
    flat = post.mass.ravel()
    idx = rng.choice(flat.size, size=n_samples, p=flat / flat.sum())
    nodes = post.spec.nodes()[idx]
    jitter = rng.uniform(-0.5, 0.5, size=(n_samples, 2))
    return nodes + jitter * post.spec.cell_sizes()


def group_voxels(aux: AuxArrays, pools: Sequence[PoolConfig],
                 quantum: float = 1e-6):
    """Group voxel indices by identical (quantized) auxiliary parameters.

    Voxels in one group share a dictionary.  Returns a list of
    (AuxParams, index array) pairs.
    """
    cols = [aux.t1_water, aux.t2_water, aux.b0_shift, aux.b1_scale]
    if aux.fixed_f is not None:
        cols += [aux.fixed_f, aux.fixed_k]
    keys = np.round(np.column_stack(cols) / quantum).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True,
                                  return_inverse=True)
    groups = []
    for g, i0 in enumerate(first):
        idx = np.flatnonzero(inverse == g)
        fixed = ()
        if aux.fixed_f is not None:
            from .physics import TissueParams
            fixed = ((pools[1], TissueParams(f=float(aux.fixed_f[i0]),
                                             k=float(aux.fixed_k[i0]))),)
        groups.append((AuxParams(t1_water=float(aux.t1_water[i0]),
                                 t2_water=float(aux.t2_water[i0]),
                                 b0_shift=float(aux.b0_shift[i0]),
                                 b1_scale=float(aux.b1_scale[i0]),
                                 fixed_pools=fixed), idx))
    return groups


# ---------------------------------------------------------------------------
# slice-level reference inference


@dataclass
class ReferenceResult:
    """Vectorized grid-reference output for a set of voxels."""
    mu: np.ndarray          # (V, 2) moment means
    cov: np.ndarray         # (V, 2, 2) moment covariances
    map_theta: np.ndarray   # (V, 2) best-fit node
    sigma_m: np.ndarray     # (V,)
    nrmse: np.ndarray       # (V,) percent, at the MAP node
    spec: GridSpec = field(default=None)


def reference_for_group(signals: np.ndarray, dictionary: Dictionary,
                        chunk: int = 256) -> ReferenceResult:
    """Grid posteriors (moments only) for voxels sharing one dictionary."""
    signals = np.atleast_2d(signals)
    v = signals.shape[0]
    n = signals.shape[1]
    nodes = dictionary.spec.nodes()
    cell_cov = np.diag(dictionary.spec.cell_sizes() ** 2) / 12.0
    mu = np.empty((v, 2))
    cov = np.empty((v, 2, 2))
    mapt = np.empty((v, 2))
    sig = np.empty(v)
    nrmse = np.empty(v)
    for lo in range(0, v, chunk):
        sl = slice(lo, min(lo + chunk, v))
        r2 = squared_residuals(signals[sl], dictionary.trajectories)
        best = np.argmin(r2, axis=1)
        min_r2 = r2[np.arange(r2.shape[0]), best]
        s = np.maximum(np.sqrt(min_r2 / n), SIGMA_FLOOR)
        logl = -r2 / (2.0 * s[:, None] ** 2)
        mass = np.exp(logl - logl.max(axis=1, keepdims=True))
        mass /= mass.sum(axis=1, keepdims=True)
        m = mass @ nodes
        d = nodes[None, :, :] - m[:, None, :]
        c = np.einsum("vn,vni,vnj->vij", mass, d, d) + cell_cov
        mu[sl] = m
        cov[sl] = c
        mapt[sl] = nodes[best]
        sig[sl] = s
        norms = np.linalg.norm(signals[sl], axis=1)
        nrmse[sl] = 100.0 * np.sqrt(min_r2) / norms
    return ReferenceResult(mu=mu, cov=cov, map_theta=mapt, sigma_m=sig,
                           nrmse=nrmse, spec=dictionary.spec)


def save_grid_posterior(path, post: GridPosterior) -> None:
    meta = {"spec": post.spec.to_json(), "sigma_m": post.sigma_m,
            "map_index": list(post.map_index)}
    dataio.write_container(path, "grid_posterior", meta,
                           {"mass": post.mass.astype(np.float32)})


def load_grid_posterior(path) -> GridPosterior:
    meta, arrays = dataio.read_container(path, expect_kind="grid_posterior")
    mass = arrays["mass"].astype(float)
    mass = mass / mass.sum()
    idx = tuple(meta["map_index"])
    return GridPosterior(spec=GridSpec.from_json(meta["spec"]), mass=mass,
                         map_index=idx, sigma_m=meta["sigma_m"])
