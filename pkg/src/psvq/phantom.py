"""Synthetic ground-truth phantoms: vial arrays and brain-like subjects."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataio import DatasetArchive
from .engine import AuxArrays, batch_trajectories
from .physics import PoolConfig, ProtocolSchedule, schedule_to_json
from .posterior import ParameterBounds


@dataclass
class DigitalPhantom:
    """Per-voxel ground truth on an image raster."""
    shape: tuple              # (H, W)
    truth_f: np.ndarray       # (H, W); NaN in background
    truth_k: np.ndarray
    t1_water: np.ndarray
    t2_water: np.ndarray
    b0_shift: np.ndarray
    b1_scale: np.ndarray
    mask: np.ndarray          # bool (H, W)
    labels: np.ndarray        # int (H, W); 0 = background
    roi_names: list
    stage: str = "ssMT"
    fixed_f: Optional[np.ndarray] = None  # frozen middle-pool maps (3-pool)
    fixed_k: Optional[np.ndarray] = None

    def check_bounds(self, bounds: ParameterBounds) -> None:
        m = self.mask
        f, k = self.truth_f[m], self.truth_k[m]
        if (f.min() < bounds.f[0] or f.max() > bounds.f[1]
                or k.min() < bounds.k[0] or k.max() > bounds.k[1]):
            raise ValueError("phantom ground truth exceeds the parameter bounds")

    def aux_arrays(self) -> AuxArrays:
        flat = lambda a: None if a is None else a.ravel().astype(float)
        return AuxArrays(flat(self.t1_water), flat(self.t2_water),
                         flat(self.b0_shift), flat(self.b1_scale),
                         fixed_f=flat(self.fixed_f), fixed_k=flat(self.fixed_k))


# ---------------------------------------------------------------------------
# vial phantom


@dataclass(frozen=True)
class VialSpec:
    center: tuple     # (row, col) in pixels
    radius: float     # pixels
    f: float
    k: float


# analogue of base-catalyzed amine exchange: one rate per titrated pH
PH_TO_K = {5.0: 100.0, 5.5: 250.0, 6.0: 600.0}


def default_vials(shape=(64, 64), f: float = 0.005,
                  ph_to_k: Optional[dict] = None) -> list:
    """Three equal-concentration vials differing only in exchange rate."""
    if ph_to_k is None:
        ph_to_k = PH_TO_K
    h, w = shape
    r = min(h, w) * 0.17
    centers = [(h * 0.30, w * 0.30), (h * 0.30, w * 0.70), (h * 0.72, w * 0.50)]
    return [VialSpec(center=c, radius=r, f=f, k=k)
            for c, k in zip(centers, sorted(ph_to_k.values()))]


def make_vial_phantom(shape=(64, 64), vials: Optional[Sequence[VialSpec]] = None,
                      t1_water: float = 3.0, t2_water: float = 1.2,
                      stage: str = "APT",
                      fixed_semisolid: tuple = (0.02, 30.0)) -> DigitalPhantom:
    """Disk ROIs on a uniform liquid background (solution phantom).

    The default three vials model equal solute concentration with
    pH-graded exchange rates.  Vials must not overlap.
    """
    if vials is None:
        vials = default_vials(shape)
    if len(vials) < 1:
        raise ValueError("at least one vial is required")
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    labels = np.zeros(shape, dtype=int)
    truth_f = np.full(shape, np.nan)
    truth_k = np.full(shape, np.nan)
    for i, vial in enumerate(vials, start=1):
        disk = ((rr - vial.center[0]) ** 2 + (cc - vial.center[1]) ** 2
                <= vial.radius ** 2)
        if np.any(labels[disk] != 0):
            raise ValueError(f"vial {i} overlaps another vial")
        labels[disk] = i
        truth_f[disk] = vial.f
        truth_k[disk] = vial.k
    mask = labels > 0
    const = lambda val: np.full(shape, float(val))
    fixed_f = fixed_k = None
    if stage == "APT":
        fixed_f = const(fixed_semisolid[0])
        fixed_k = const(fixed_semisolid[1])
    return DigitalPhantom(shape=shape, truth_f=truth_f, truth_k=truth_k,
                          t1_water=const(t1_water), t2_water=const(t2_water),
                          b0_shift=const(0.0), b1_scale=const(1.0),
                          mask=mask, labels=labels,
                          roi_names=[f"vial{i}" for i in
                                     range(1, len(vials) + 1)],
                          stage=stage, fixed_f=fixed_f, fixed_k=fixed_k)


# ---------------------------------------------------------------------------
# brain-like phantom


@dataclass(frozen=True)
class TissueClass:
    name: str
    f: float
    k: float
    t1: float
    t2: float


DEFAULT_BRAIN_CLASSES = (
    TissueClass("WM", f=0.140, k=40.0, t1=1.1, t2=0.060),
    TissueClass("GM", f=0.080, k=55.0, t1=1.6, t2=0.085),
    TissueClass("tumor", f=0.045, k=65.0, t1=1.9, t2=0.110),
    TissueClass("edema", f=0.060, k=30.0, t1=1.8, t2=0.120),
)


def _ellipse(rr, cc, center, axes, angle=0.0):
    dr, dc = rr - center[0], cc - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dr + s * dc
    v = -s * dr + c * dc
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def make_brain_phantom(shape=(64, 64),
                       classes: Sequence[TissueClass] = DEFAULT_BRAIN_CLASSES,
                       jitter: float = 0.0,
                       aux_variation: float = 0.0,
                       seed: int = 0,
                       with_lesion: bool = True) -> DigitalPhantom:
    """Ellipse-composed WM/GM slice with optional tumor + edema inserts.

    `jitter` adds within-class fractional spatial variation to the truth
    maps; `aux_variation` does the same for the water T1/T2 and B1 maps
    (0 keeps them class-constant, which lets the exact reference share
    dictionaries between voxels).  The tumor's volume fraction is set
    below the white-matter value, mirroring the expected lesion contrast.
    """
    by_name = {c.name: c for c in classes}
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w].astype(float)
    center = (h / 2.0, w / 2.0)
    head = _ellipse(rr, cc, center, (h * 0.38, w * 0.34))
    wm = _ellipse(rr, cc, center, (h * 0.26, w * 0.22), angle=0.2)
    labels = np.zeros(shape, dtype=int)
    names = [c.name for c in classes]
    labels[head] = names.index("GM") + 1
    labels[wm] = names.index("WM") + 1
    if with_lesion:
        tumor_c = (h * 0.42, w * 0.60)
        edema = _ellipse(rr, cc, tumor_c, (h * 0.13, w * 0.11), angle=-0.3)
        tumor = _ellipse(rr, cc, tumor_c, (h * 0.07, w * 0.06), angle=-0.3)
        labels[edema & head] = names.index("edema") + 1
        labels[tumor & head] = names.index("tumor") + 1
    mask = labels > 0

    rng = np.random.default_rng(np.random.Philox(seed))
    truth_f = np.full(shape, np.nan)
    truth_k = np.full(shape, np.nan)
    t1m = np.full(shape, 1.0)
    t2m = np.full(shape, 0.07)
    for i, name in enumerate(names, start=1):
        cls = by_name[name]
        sel = labels == i
        n = int(sel.sum())
        jit = lambda base, rel: base * (1.0 + rel * rng.uniform(-1, 1, n))
        truth_f[sel] = jit(cls.f, jitter)
        truth_k[sel] = jit(cls.k, jitter)
        t1m[sel] = jit(cls.t1, aux_variation)
        t2m[sel] = jit(cls.t2, aux_variation)
    b1 = np.ones(shape)
    b0 = np.zeros(shape)
    if aux_variation > 0:
        # smooth bowl-shaped transmit-field variation across the slice
        r2 = ((rr - center[0]) / h) ** 2 + ((cc - center[1]) / w) ** 2
        b1 = 1.0 - aux_variation * r2 * 2.0
    return DigitalPhantom(shape=shape, truth_f=truth_f, truth_k=truth_k,
                          t1_water=t1m, t2_water=t2m, b0_shift=b0,
                          b1_scale=b1, mask=mask, labels=labels,
                          roi_names=list(names), stage="ssMT")


# ---------------------------------------------------------------------------
# phantom serialization


def write_phantom(path, ph: DigitalPhantom) -> None:
    from . import dataio
    meta = {"shape": list(ph.shape), "roi_names": ph.roi_names,
            "stage": ph.stage}
    arrays = {"truth_f": np.nan_to_num(ph.truth_f).astype(np.float64),
              "truth_k": np.nan_to_num(ph.truth_k, nan=1.0).astype(np.float64),
              "t1_water": ph.t1_water.astype(np.float64),
              "t2_water": ph.t2_water.astype(np.float64),
              "b0_shift": ph.b0_shift.astype(np.float64),
              "b1_scale": ph.b1_scale.astype(np.float64),
              "mask": ph.mask.astype(np.int32),
              "labels": ph.labels.astype(np.int32)}
    if ph.fixed_f is not None:
        arrays["fixed_f"] = ph.fixed_f.astype(np.float64)
        arrays["fixed_k"] = ph.fixed_k.astype(np.float64)
    dataio.write_container(path, "phantom", meta, arrays)


def read_phantom(path) -> DigitalPhantom:
    from . import dataio
    meta, arrays = dataio.read_container(path, expect_kind="phantom")
    mask = arrays["mask"].astype(bool)
    truth_f = arrays["truth_f"].astype(float)
    truth_k = arrays["truth_k"].astype(float)
    truth_f[~mask] = np.nan
    truth_k[~mask] = np.nan
    return DigitalPhantom(
        shape=tuple(meta["shape"]), truth_f=truth_f, truth_k=truth_k,
        t1_water=arrays["t1_water"].astype(float),
        t2_water=arrays["t2_water"].astype(float),
        b0_shift=arrays["b0_shift"].astype(float),
        b1_scale=arrays["b1_scale"].astype(float),
        mask=mask, labels=arrays["labels"],
        roi_names=list(meta["roi_names"]), stage=meta["stage"],
        fixed_f=(arrays["fixed_f"].astype(float)
                 if "fixed_f" in arrays else None),
        fixed_k=(arrays["fixed_k"].astype(float)
                 if "fixed_k" in arrays else None))


# ---------------------------------------------------------------------------
# forward simulation with noise


def default_noise_sigma(raw: np.ndarray, fraction: float = 0.01) -> float:
    """Noise scale as a fraction of the mean un-normalized Z-value."""
    return float(fraction * np.mean(raw))


def corrupt(phantom: DigitalPhantom, schedule: ProtocolSchedule,
            pools: Sequence[PoolConfig], sigma: Optional[float] = None,
            seed: int = 0, noise_fraction: float = 0.01) -> DatasetArchive:
    """Simulate the phantom and add white Gaussian noise.

    Noise is added to the un-normalized Z-value trajectories (the physical
    measurement), after which each voxel trajectory is normalized to unit
    norm.  `sigma=None` uses `noise_fraction` of the mean raw signal;
    `sigma=0` returns noiseless data.
    """
    if sigma is not None and sigma < 0:
        raise ValueError("sigma must be nonnegative")
    mvec = phantom.mask.ravel()
    idx = np.flatnonzero(mvec)
    theta = np.column_stack([phantom.truth_f.ravel()[idx],
                             phantom.truth_k.ravel()[idx]])
    aux = phantom.aux_arrays().take(idx)
    raw = batch_trajectories(pools, theta, aux, schedule, raw=True)
    if sigma is None:
        sigma = default_noise_sigma(raw, noise_fraction)
    rng = np.random.default_rng(np.random.Philox(seed))
    noisy = raw + sigma * rng.standard_normal(raw.shape)
    traj = noisy / np.linalg.norm(noisy, axis=1, keepdims=True)

    n = len(schedule)
    h, w = phantom.shape
    signals = np.zeros((n, h * w))
    signals[:, idx] = traj.T
    extra = {}
    if phantom.fixed_f is not None:
        extra["stage1_frozen"] = {"f": phantom.fixed_f.ravel(),
                                  "k": phantom.fixed_k.ravel()}
    return DatasetArchive(
        schedule_doc=schedule_to_json(schedule, pools),
        stage=phantom.stage, shape=phantom.shape,
        signals=signals.reshape(n, h, w),
        t1_water=phantom.t1_water, t2_water=phantom.t2_water,
        b0_shift=phantom.b0_shift, b1_scale=phantom.b1_scale,
        mask=phantom.mask.astype(np.int32), labels=phantom.labels,
        roi_names=list(phantom.roi_names),
        truth_f=np.nan_to_num(phantom.truth_f),
        truth_k=np.nan_to_num(phantom.truth_k),
        noise_sigma=float(sigma), seed=seed, extra_meta=extra)
