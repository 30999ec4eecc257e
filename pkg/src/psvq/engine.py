"""Vectorized trajectory simulation over many voxels / grid nodes.

The per-segment propagators exp(A t) are evaluated through a batched
eigendecomposition of the (augmented, homogeneous) Bloch-McConnell
generators: P(t) y = V diag(exp(lambda t)) V^-1 y.  Directional derivatives
with respect to (f, k) use the eigenbasis Frechet formula

    dP(t) = V (F(t) o (V^-1 E V)) V^-1,
    F_ij(t) = (exp(t l_i) - exp(t l_j)) / (l_i - l_j),

with the near-degenerate entries switched to the stable midpoint form
t exp(t (l_i+l_j)/2) sinhc(t (l_i-l_j)/2).

This path is validated in the test suite against the scalar Pade
scaling-and-squaring reference in `psvq.physics` (propagate_block /
trajectory_jacobian); both compute the same mathematical objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .physics import (AuxParams, PoolConfig, ProtocolSchedule, TissueParams,
                      b1_to_rad, ppm_to_rad)


@dataclass
class AuxArrays:
    """Per-voxel auxiliary parameter arrays (flat, length V)."""
    t1_water: np.ndarray
    t2_water: np.ndarray
    b0_shift: np.ndarray
    b1_scale: np.ndarray
    fixed_f: Optional[np.ndarray] = None  # frozen middle-pool params (APT stage)
    fixed_k: Optional[np.ndarray] = None

    def __post_init__(self):
        self.t1_water = np.atleast_1d(np.asarray(self.t1_water, dtype=float))
        v = self.t1_water.shape[0]
        for name in ("t2_water", "b0_shift", "b1_scale", "fixed_f", "fixed_k"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.broadcast_to(np.asarray(arr, dtype=float), (v,)).copy()
            setattr(self, name, arr)

    @property
    def n_voxels(self) -> int:
        return self.t1_water.shape[0]

    @classmethod
    def from_aux(cls, aux: AuxParams, n: int = 1) -> "AuxArrays":
        ff = fk = None
        if aux.fixed_pools:
            (_, tp), = aux.fixed_pools
            ff = np.full(n, tp.f)
            fk = np.full(n, tp.k)
        return cls(t1_water=np.full(n, aux.t1_water),
                   t2_water=np.full(n, aux.t2_water),
                   b0_shift=np.full(n, aux.b0_shift),
                   b1_scale=np.full(n, aux.b1_scale),
                   fixed_f=ff, fixed_k=fk)

    def take(self, idx) -> "AuxArrays":
        pick = lambda a: None if a is None else a[idx]
        return AuxArrays(self.t1_water[idx], self.t2_water[idx],
                         self.b0_shift[idx], self.b1_scale[idx],
                         pick(self.fixed_f), pick(self.fixed_k))


def _pool_params(pools: Sequence[PoolConfig], theta: np.ndarray,
                 aux: AuxArrays):
    """Per-pool (r1, r2, f, k) arrays, water first, free pool last."""
    v = aux.n_voxels
    p = len(pools)
    if p not in (2, 3):
        raise ValueError(f"pool count must be 2 or 3, got {p}")
    if pools[0].role != "water":
        raise ValueError("first pool must have role 'water'")
    r1 = np.empty((p, v))
    r2 = np.empty((p, v))
    f = np.empty((p, v))
    k = np.empty((p, v))
    r1[0] = 1.0 / aux.t1_water
    r2[0] = 1.0 / aux.t2_water
    f[0] = 1.0
    k[0] = 0.0
    if p == 3:
        if aux.fixed_f is None or aux.fixed_k is None:
            raise ValueError("3-pool simulation requires fixed middle-pool params")
        r1[1] = 1.0 / pools[1].t1
        r2[1] = 1.0 / pools[1].t2
        f[1] = aux.fixed_f
        k[1] = aux.fixed_k
    r1[-1] = 1.0 / pools[-1].t1
    r2[-1] = 1.0 / pools[-1].t2
    f[-1] = theta[:, 0]
    k[-1] = theta[:, 1]
    return r1, r2, f, k


def _sat_generators(pools, theta, aux, schedule, b1_list, offset_list):
    """Augmented generators (G, V, m, m) for saturation segments.

    b1_list / offset_list give one (nominal B1, offset) pair per generator.
    """
    v = aux.n_voxels
    p = len(pools)
    m = 3 * p + 1
    g = len(b1_list)
    r1, r2, f, k = _pool_params(pools, theta, aux)
    A = np.zeros((g, v, m, m))
    w1 = b1_to_rad(np.asarray(b1_list)[:, None] * aux.b1_scale[None, :])  # (g, v)
    for i, pc in enumerate(pools):
        x, y, z = 3 * i, 3 * i + 1, 3 * i + 2
        dw = ppm_to_rad(1.0, schedule.field_strength) * (
            np.asarray(offset_list)[:, None] - pc.chemical_shift
            - aux.b0_shift[None, :])  # (g, v)
        A[:, :, x, x] = -r2[i]
        A[:, :, x, y] = dw
        A[:, :, y, x] = -dw
        A[:, :, y, y] = -r2[i]
        A[:, :, y, z] = w1
        A[:, :, z, y] = -w1
        A[:, :, z, z] = -r1[i]
        A[:, :, z, m - 1] = r1[i] * f[i]
    for i in range(1, p):
        fk = f[i] * k[i]
        for q in range(3):
            wq, pq = q, 3 * i + q
            A[:, :, wq, wq] -= fk
            A[:, :, wq, pq] += k[i]
            A[:, :, pq, wq] += fk
            A[:, :, pq, pq] -= k[i]
    return A


def _rec_generator(pools, theta, aux):
    """Recovery-segment generator restricted to the longitudinal subspace.

    With ideal spoiling the transverse components entering a recovery delay
    are zero and stay zero (no RF), so recovery reduces to the z-components
    plus the constant: state (Mz_1..Mz_p, 1), size p+1.
    """
    v = aux.n_voxels
    p = len(pools)
    mz = p + 1
    r1, r2, f, k = _pool_params(pools, theta, aux)
    A = np.zeros((v, mz, mz))
    for i in range(p):
        A[:, i, i] = -r1[i]
        A[:, i, mz - 1] = r1[i] * f[i]
    for i in range(1, p):
        fk = f[i] * k[i]
        A[:, 0, 0] -= fk
        A[:, 0, i] += k[i]
        A[:, i, 0] += fk
        A[:, i, i] -= k[i]
    return A


def _theta_dirs_sat(pools, theta, aux):
    """Augmented direction matrices dA/df, dA/dk (V, m, m) for the free pool."""
    v = aux.n_voxels
    p = len(pools)
    m = 3 * p + 1
    i = p - 1
    f = theta[:, 0]
    k = theta[:, 1]
    Ef = np.zeros((v, m, m))
    Ek = np.zeros((v, m, m))
    for q in range(3):
        wq, pq = q, 3 * i + q
        Ef[:, wq, wq] -= k
        Ef[:, pq, wq] += k
        Ek[:, wq, wq] -= f
        Ek[:, wq, pq] += 1.0
        Ek[:, pq, wq] += f
        Ek[:, pq, pq] -= 1.0
    Ef[:, 3 * i + 2, m - 1] = 1.0 / pools[-1].t1
    return Ef, Ek


def _theta_dirs_rec(pools, theta, aux):
    """Direction matrices for the longitudinal recovery subsystem."""
    v = aux.n_voxels
    p = len(pools)
    mz = p + 1
    i = p - 1
    f = theta[:, 0]
    k = theta[:, 1]
    Ef = np.zeros((v, mz, mz))
    Ek = np.zeros((v, mz, mz))
    Ef[:, 0, 0] -= k
    Ef[:, i, 0] += k
    Ef[:, i, mz - 1] = 1.0 / pools[-1].t1
    Ek[:, 0, 0] -= f
    Ek[:, 0, i] += 1.0
    Ek[:, i, 0] += f
    Ek[:, i, i] -= 1.0
    return Ef, Ek


class _EigProp:
    """Eigendecomposition of a batch of generators with Frechet helpers.

    When the generator array is stacked (G, V, m, m), pass `sel` to pick one
    stacked generator; the propagation itself always runs on (V, m) states.
    """

    def __init__(self, A: np.ndarray):
        lam, vec = np.linalg.eig(A)
        self.lam = lam
        self.vec = vec
        self.inv = np.linalg.inv(vec)

    def _pick(self, sel):
        if sel is None:
            return self.lam, self.vec, self.inv
        return self.lam[sel], self.vec[sel], self.inv[sel]

    def apply(self, t, y, sel=None):
        """P(t) y for batched state y (..., m)."""
        lam, vec, inv = self._pick(sel)
        wy = np.einsum("...ij,...j->...i", inv, y)
        e = np.exp(t * lam)
        return np.einsum("...ij,...j->...i", vec, e * wy)

    def phi(self, t, sel=None):
        """Divided-difference matrix F(t) of exp at the eigenvalues."""
        lam = self.lam if sel is None else self.lam[sel]
        el = np.exp(t * lam)
        eh = np.exp(t * lam / 2.0)
        li = lam[..., :, None]
        lj = lam[..., None, :]
        delta = li - lj
        small = np.abs(delta) * t < 0.1
        direct = (el[..., :, None] - el[..., None, :]) / np.where(small, 1.0, delta)
        x = np.where(small, delta * (t / 2.0), 0.0)
        x2 = x * x
        sinhc = 1.0 + x2 / 6.0 + x2 * x2 / 120.0
        mid = t * (eh[..., :, None] * eh[..., None, :]) * sinhc
        return np.where(small, mid, direct)

    def project_dir(self, E: np.ndarray) -> np.ndarray:
        """G = V^-1 E V for a real direction matrix batch."""
        return self.inv @ (E @ self.vec)

    def apply_with_dirs(self, t, y, sens_list, G_list, sel=None):
        """Propagate state and sensitivities through one segment.

        y_new = P y;  s_new = P s + dP y, with dP y evaluated in the
        eigenbasis without forming dP.
        """
        lam, vec, inv = self._pick(sel)
        wy = np.einsum("...ij,...j->...i", inv, y)
        e = np.exp(t * lam)
        y_new = np.einsum("...ij,...j->...i", vec, e * wy)
        F = self.phi(t, sel)
        out = []
        for s, G in zip(sens_list, G_list):
            g = G if sel is None else G[sel]
            ws = np.einsum("...ij,...j->...i", inv, s)
            ps = np.einsum("...ij,...j->...i", vec, e * ws)
            fg = np.einsum("...ij,...ij,...j->...i", F, g, wy)
            dpy = np.einsum("...ij,...j->...i", vec, fg)
            out.append(ps + dpy)
        return y_new, out


def batch_trajectories(pools: Sequence[PoolConfig], theta: np.ndarray,
                       aux: AuxArrays, schedule: ProtocolSchedule,
                       jacobian: bool = False, raw: bool = False):
    """Simulate normalized trajectories for a batch of voxels.

    Parameters
    ----------
    theta : (V, 2) array of (f, k) for the free pool.
    aux : per-voxel auxiliary arrays (length V).
    jacobian : also return dS/d(f, k), shape (V, n, 2).
    raw : return un-normalized Z-values instead of unit-norm trajectories
        (mutually exclusive with `jacobian`).

    Returns
    -------
    (V, n) signal array, optionally with the (V, n, 2) Jacobian.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    v = theta.shape[0]
    if aux.n_voxels != v:
        raise ValueError("theta / aux voxel count mismatch")
    if raw and jacobian:
        raise ValueError("raw output does not carry a Jacobian")
    p = len(pools)
    m = 3 * p + 1
    nblk = len(schedule)

    # one saturation generator per distinct (block, segment B1) pair
    gen_b1, gen_off = [], []
    seg_plan = []  # per block: list of (generator index, duration)
    for block in schedule.blocks:
        plan = []
        for b1, dur in block.segments():
            key = None
            for gi in range(len(gen_b1)):
                if gen_b1[gi] == b1 and gen_off[gi] == block.freq_offset:
                    key = gi
                    break
            if key is None:
                gen_b1.append(b1)
                gen_off.append(block.freq_offset)
                key = len(gen_b1) - 1
            plan.append((key, dur))
        seg_plan.append(plan)

    sat_A = _sat_generators(pools, theta, aux, schedule, gen_b1, gen_off)
    sat = _EigProp(sat_A) if len(gen_b1) else None
    rec = _EigProp(_rec_generator(pools, theta, aux))

    if jacobian:
        Ef, Ek = _theta_dirs_sat(pools, theta, aux)
        G_sat = [sat.project_dir(Ef), sat.project_dir(Ek)] if sat else None
        Efz, Ekz = _theta_dirs_rec(pools, theta, aux)
        G_rec = [rec.project_dir(Efz), rec.project_dir(Ekz)]

    zi = [3 * i + 2 for i in range(p)]  # longitudinal indices in the full state
    y = np.zeros((v, m), dtype=complex)
    y[:, zi[0]] = 1.0
    for i in range(1, p - 1):
        y[:, zi[i]] = aux.fixed_f
    y[:, zi[-1]] = theta[:, 0]
    y[:, m - 1] = 1.0
    if jacobian:
        sens = [np.zeros((v, m), dtype=complex) for _ in range(2)]
        sens[0][:, zi[-1]] = 1.0  # d(equilibrium free-pool Mz)/df

    z = np.empty((v, nblk))
    dz = np.empty((v, nblk, 2)) if jacobian else None

    for j, block in enumerate(schedule.blocks):
        if block.recovery_duration > 0:
            yz = y[:, zi + [m - 1]]
            if jacobian:
                sz = [s[:, zi + [m - 1]] for s in sens]
                yz, sz = rec.apply_with_dirs(block.recovery_duration, yz,
                                             sz, G_rec)
                for s, szn in zip(sens, sz):
                    s[:, zi] = szn[:, :p]
            else:
                yz = rec.apply(block.recovery_duration, yz)
            y[:, zi] = yz[:, :p]
        for gi, dur in seg_plan[j]:
            if jacobian:
                y, sens = sat.apply_with_dirs(dur, y, sens, G_sat, sel=gi)
            else:
                y = sat.apply(dur, y, sel=gi)
        z[:, j] = y[:, zi[0]].real
        if jacobian:
            for d in range(2):
                dz[:, j, d] = sens[d][:, zi[0]].real
        # ideal spoiling: zero every transverse component
        for i in range(p):
            y[:, 3 * i] = 0.0
            y[:, 3 * i + 1] = 0.0
            if jacobian:
                for s in sens:
                    s[:, 3 * i] = 0.0
                    s[:, 3 * i + 1] = 0.0

    if raw:
        return z
    nrm = np.linalg.norm(z, axis=1, keepdims=True)
    s_out = z / nrm
    if not jacobian:
        return s_out
    proj = dz - s_out[:, :, None] * np.einsum("vn,vnd->vd", s_out, dz)[:, None, :]
    return s_out, proj / nrm[:, :, None]
