"""Multi-pool Bloch-McConnell forward model.

The saturation-transfer signal of a voxel is modeled as a system of coupled
Bloch equations, one (Mx, My, Mz) triplet per proton pool, with two-way
chemical exchange between water and each solute/semisolid pool.  Each
acquisition block consists of a recovery delay followed by a saturation
segment; the water Mz (Z-value) is sampled at the end of every block and the
transverse components are spoiled.  The recorded trajectory is L2-normalized.

Exchange rates obey detailed balance: the rate pool->water is k, the rate
water->pool is f*k, where f is the pool proton volume fraction relative to
water (M0_water = 1, M0_pool = f).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

# proton gyromagnetic ratio, Hz per microtesla (gamma/2pi)
GAMMA_HZ_PER_UT = 42.577478518


def ppm_to_rad(ppm: float, field_strength_t: float) -> float:
    """Angular frequency (rad/s) of a chemical-shift offset at a given B0."""
    return 2.0 * math.pi * GAMMA_HZ_PER_UT * field_strength_t * ppm


def b1_to_rad(b1_ut: float) -> float:
    """Nutation angular frequency (rad/s) of a B1 amplitude in microtesla."""
    return 2.0 * math.pi * GAMMA_HZ_PER_UT * b1_ut


@dataclass(frozen=True)
class PoolConfig:
    name: str
    chemical_shift: float  # ppm
    t1: float              # s
    t2: float              # s
    role: str              # "water" | "semisolid" | "solute"

    def __post_init__(self):
        if self.t1 <= 0 or self.t2 <= 0:
            raise ValueError(f"pool {self.name!r}: relaxation times must be positive")
        if self.t2 > self.t1:
            raise ValueError(f"pool {self.name!r}: t2 must not exceed t1")
        if self.role not in ("water", "semisolid", "solute"):
            raise ValueError(f"pool {self.name!r}: unknown role {self.role!r}")


@dataclass(frozen=True)
class TissueParams:
    """Per-stage latent parameters: volume fraction and exchange rate (s^-1)."""
    f: float
    k: float

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("exchange rate k must be positive")
        if self.f < 0:
            raise ValueError("volume fraction f must be nonnegative")


@dataclass(frozen=True)
class AuxParams:
    """Auxiliary per-voxel parameters held fixed during estimation."""
    t1_water: float
    t2_water: float
    b0_shift: float = 0.0   # ppm
    b1_scale: float = 1.0   # relative B1 factor
    fixed_pools: tuple = ()  # ((PoolConfig, TissueParams), ...) frozen stage-1 pools

    def __post_init__(self):
        if self.t1_water <= 0 or self.t2_water <= 0:
            raise ValueError("water relaxation times must be positive")
        if self.b1_scale <= 0:
            raise ValueError("b1_scale must be positive")


@dataclass(frozen=True)
class PulseShape:
    kind: str = "continuous"      # "continuous" | "pulsed"
    pulse_ms: float = 0.0
    duty: float = 1.0

    def __post_init__(self):
        if self.kind not in ("continuous", "pulsed"):
            raise ValueError(f"unknown pulse shape {self.kind!r}")
        if self.kind == "pulsed":
            if self.pulse_ms <= 0:
                raise ValueError("pulsed shape requires pulse_ms > 0")
            if not (0.0 < self.duty <= 1.0):
                raise ValueError("duty cycle must lie in (0, 1]")


@dataclass(frozen=True)
class SaturationBlock:
    b1_nominal: float        # uT
    freq_offset: float       # ppm
    sat_duration: float      # s
    recovery_duration: float  # s
    pulse_shape: PulseShape = field(default_factory=PulseShape)

    def __post_init__(self):
        if self.sat_duration < 0 or self.recovery_duration < 0:
            raise ValueError("durations must be nonnegative")
        if self.b1_nominal < 0:
            raise ValueError("b1_nominal must be nonnegative")

    def segments(self) -> list[tuple[float, float]]:
        """Saturation segment list [(b1_uT, duration_s), ...].

        Pulsed shapes expand into alternating on/off constant segments at the
        configured duty cycle; continuous shapes are a single segment.
        """
        if self.sat_duration == 0.0:
            return []
        if self.pulse_shape.kind == "continuous":
            return [(self.b1_nominal, self.sat_duration)]
        period = self.pulse_shape.pulse_ms * 1e-3
        on = period * self.pulse_shape.duty
        off = period - on
        segs: list[tuple[float, float]] = []
        remaining = self.sat_duration
        while remaining > 1e-12:
            t_on = min(on, remaining)
            segs.append((self.b1_nominal, t_on))
            remaining -= t_on
            if off > 0 and remaining > 1e-12:
                t_off = min(off, remaining)
                segs.append((0.0, t_off))
                remaining -= t_off
        return segs


@dataclass(frozen=True)
class ProtocolSchedule:
    blocks: tuple                # ordered SaturationBlock sequence
    field_strength: float        # Tesla

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ValueError("schedule must contain at least one block")
        if self.field_strength <= 0:
            raise ValueError("field strength must be positive")

    def __len__(self):
        return len(self.blocks)


@dataclass
class SignalTrajectory:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.normalized:
            nrm = float(np.linalg.norm(self.values))
            if abs(nrm - 1.0) > 1e-9:
                raise ValueError(f"trajectory flagged normalized but |S| = {nrm}")


def _resolve_pools(pools: Sequence[PoolConfig], theta: TissueParams,
                   aux: AuxParams) -> list[tuple[PoolConfig, float, float]]:
    """Bind tissue parameters to pools.

    Water comes first; pools between water and the last entry take their
    (f, k) from aux.fixed_pools in order; the last pool is the free pool
    bound to `theta`.  Returns [(pool, f, k), ...] with water as (pool, 1, 0).
    """
    p = len(pools)
    if p not in (2, 3):
        raise ValueError(f"pool count must be 2 or 3, got {p}")
    if pools[0].role != "water":
        raise ValueError("first pool must have role 'water'")
    if sum(1 for pc in pools if pc.role == "water") != 1:
        raise ValueError("exactly one pool may have role 'water'")
    fixed = list(aux.fixed_pools)
    middle = pools[1:-1]
    if len(middle) != len(fixed):
        raise ValueError(
            f"{len(middle)} fixed pool(s) in the schedule but "
            f"{len(fixed)} fixed_pools entries in aux")
    out: list[tuple[PoolConfig, float, float]] = [(pools[0], 1.0, 0.0)]
    for pc, (fixed_pc, tp) in zip(middle, fixed):
        out.append((pc, tp.f, tp.k))
    out.append((pools[-1], theta.f, theta.k))
    return out


def build_generator(pools: Sequence[PoolConfig], theta: TissueParams,
                    aux: AuxParams, block: SaturationBlock,
                    field_strength: float, b1_ut: Optional[float] = None):
    """Assemble the Bloch-McConnell generator dM/dt = A M + c for one segment.

    State ordering is (Mx, My, Mz) per pool, water first.  `b1_ut` overrides
    the block's nominal B1 (used for the off-segments of pulsed saturation);
    the per-voxel b1_scale from aux multiplies it either way.
    """
    bound = _resolve_pools(pools, theta, aux)
    p = len(bound)
    n = 3 * p
    A = np.zeros((n, n))
    c = np.zeros(n)
    b1 = block.b1_nominal if b1_ut is None else b1_ut
    w1 = b1_to_rad(b1 * aux.b1_scale)
    for i, (pc, f_i, k_i) in enumerate(bound):
        if i == 0:
            r1, r2, m0 = 1.0 / aux.t1_water, 1.0 / aux.t2_water, 1.0
        else:
            r1, r2, m0 = 1.0 / pc.t1, 1.0 / pc.t2, f_i
        dw = ppm_to_rad(block.freq_offset - pc.chemical_shift - aux.b0_shift,
                        field_strength)
        x, y, z = 3 * i, 3 * i + 1, 3 * i + 2
        A[x, x] = -r2
        A[x, y] = dw
        A[y, x] = -dw
        A[y, y] = -r2
        A[y, z] = w1
        A[z, y] = -w1
        A[z, z] = -r1
        c[z] = r1 * m0
    # two-way exchange with water, componentwise, detailed balance
    for i, (pc, f_i, k_i) in enumerate(bound[1:], start=1):
        for q in range(3):
            wq = q
            pq = 3 * i + q
            A[wq, wq] -= f_i * k_i
            A[wq, pq] += k_i
            A[pq, wq] += f_i * k_i
            A[pq, pq] -= k_i
    return A, c


def equilibrium_state(pools: Sequence[PoolConfig], theta: TissueParams,
                      aux: AuxParams) -> np.ndarray:
    bound = _resolve_pools(pools, theta, aux)
    state = np.zeros(3 * len(bound))
    state[2] = 1.0
    for i, (pc, f_i, k_i) in enumerate(bound[1:], start=1):
        state[3 * i + 2] = f_i
    return state


def propagate_block(A: np.ndarray, c: np.ndarray, duration: float,
                    state: np.ndarray) -> np.ndarray:
    """Exact constant-coefficient propagation over one segment.

    Computes exp(A t) state + A^-1 (exp(A t) - I) c through the augmented
    homogeneous system [[A, c], [0, 0]], avoiding an explicit inverse.
    """
    if duration < 0:
        raise ValueError("duration must be nonnegative")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(c))):
        raise ValueError("non-finite generator entries")
    if duration == 0.0:
        return np.array(state, dtype=float, copy=True)
    n = A.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = A
    aug[:n, n] = c
    P = expm(aug * duration)
    y = np.concatenate([np.asarray(state, dtype=float), [1.0]])
    return (P @ y)[:n]


def _spoil(state: np.ndarray) -> None:
    """Zero all transverse components in place (ideal spoiling at readout)."""
    p = state.shape[-1] // 3
    for i in range(p):
        state[..., 3 * i] = 0.0
        state[..., 3 * i + 1] = 0.0


def simulate_raw(pools: Sequence[PoolConfig], theta: TissueParams,
                 aux: AuxParams, schedule: ProtocolSchedule) -> np.ndarray:
    """Un-normalized Z-value trajectory (water Mz sampled per block)."""
    state = equilibrium_state(pools, theta, aux)
    z = np.empty(len(schedule))
    for j, block in enumerate(schedule.blocks):
        if block.recovery_duration > 0:
            A, c = build_generator(pools, theta, aux, block,
                                   schedule.field_strength, b1_ut=0.0)
            state = propagate_block(A, c, block.recovery_duration, state)
        for b1, dur in block.segments():
            A, c = build_generator(pools, theta, aux, block,
                                   schedule.field_strength, b1_ut=b1)
            state = propagate_block(A, c, dur, state)
        z[j] = state[2]
        _spoil(state)
    return z


def simulate_trajectory(pools: Sequence[PoolConfig], theta: TissueParams,
                        aux: AuxParams,
                        schedule: ProtocolSchedule) -> SignalTrajectory:
    """Normalized signal trajectory for one voxel."""
    z = simulate_raw(pools, theta, aux, schedule)
    nrm = np.linalg.norm(z)
    if nrm == 0.0:
        raise ValueError("all-zero trajectory cannot be normalized")
    return SignalTrajectory(z / nrm, normalized=True)


def _theta_directions(pools: Sequence[PoolConfig], theta: TissueParams,
                      aux: AuxParams, block: SaturationBlock,
                      field_strength: float, b1_ut: Optional[float] = None):
    """(dA/df, dc/df), (dA/dk, dc/dk) for the free (last) pool."""
    bound = _resolve_pools(pools, theta, aux)
    p = len(bound)
    n = 3 * p
    i = p - 1
    pc, f_i, k_i = bound[i]
    Ef = np.zeros((n, n))
    Ek = np.zeros((n, n))
    for q in range(3):
        wq, pq = q, 3 * i + q
        Ef[wq, wq] -= k_i
        Ef[pq, wq] += k_i
        Ek[wq, wq] -= f_i
        Ek[wq, pq] += 1.0
        Ek[pq, wq] += f_i
        Ek[pq, pq] -= 1.0
    cf = np.zeros(n)
    cf[3 * i + 2] = 1.0 / pc.t1
    ck = np.zeros(n)
    return (Ef, cf), (Ek, ck)


def _vanloan_step(A, c, E, ec, duration, state, sens):
    """One Van Loan block-augmented step: propagate state and d(state)/dtheta."""
    n = A.shape[0]
    m = n + 1
    aug = np.zeros((m, m))
    aug[:n, :n] = A
    aug[:n, n] = c
    big = np.zeros((2 * m, 2 * m))
    big[:m, :m] = aug
    big[m:, m:] = aug
    big[:n, m:m + n] = E
    big[:n, m + n] = ec
    P = expm(big * duration)
    y = np.concatenate([state, [1.0]])
    new_state = (P[:m, :m] @ y)[:n]
    dP = P[:m, m:]
    new_sens = (dP @ y)[:n] + (P[:m, :m] @ np.concatenate([sens, [0.0]]))[:n]
    return new_state, new_sens


def trajectory_jacobian(pools: Sequence[PoolConfig], theta: TissueParams,
                        aux: AuxParams,
                        schedule: ProtocolSchedule) -> np.ndarray:
    """Exact n x 2 Jacobian dS/d(f, k) of the normalized trajectory.

    Directional derivatives are propagated with the Van Loan 2x2
    block-augmented matrix exponential through every segment, then pushed
    through the final L2 normalization.
    """
    nblk = len(schedule)
    z = np.empty(nblk)
    dz = np.zeros((nblk, 2))
    for d, which in enumerate(("f", "k")):
        state = equilibrium_state(pools, theta, aux)
        sens = np.zeros_like(state)
        if which == "f":
            # equilibrium of the free pool depends on f
            sens[-1] = 1.0
        for j, block in enumerate(schedule.blocks):
            segs = []
            if block.recovery_duration > 0:
                segs.append((0.0, block.recovery_duration))
            segs.extend(block.segments())
            for b1, dur in segs:
                A, c = build_generator(pools, theta, aux, block,
                                       schedule.field_strength, b1_ut=b1)
                dirs = _theta_directions(pools, theta, aux, block,
                                         schedule.field_strength, b1_ut=b1)
                E, ec = dirs[d]
                state, sens = _vanloan_step(A, c, E, ec, dur, state, sens)
            z[j] = state[2]
            dz[j, d] = sens[2]
            _spoil(state)
            _spoil(sens)
    nrm = np.linalg.norm(z)
    s = z / nrm
    # d(z/|z|) = (I - s s^T) dz / |z|
    return (dz - np.outer(s, s @ dz)) / nrm


# ---------------------------------------------------------------------------
# schedule / pool serialization

def pools_to_json(pools: Sequence[PoolConfig]) -> list[dict]:
    return [{"name": p.name, "chemical_shift_ppm": p.chemical_shift,
             "t1_s": p.t1, "t2_s": p.t2, "role": p.role} for p in pools]


def pools_from_json(items: Sequence[dict]) -> tuple[PoolConfig, ...]:
    return tuple(PoolConfig(name=d["name"], chemical_shift=d["chemical_shift_ppm"],
                            t1=d["t1_s"], t2=d["t2_s"], role=d["role"])
                 for d in items)


def schedule_to_json(schedule: ProtocolSchedule,
                     pools: Sequence[PoolConfig]) -> dict:
    blocks = []
    for b in schedule.blocks:
        shape: dict = {"type": b.pulse_shape.kind}
        if b.pulse_shape.kind == "pulsed":
            shape["pulse_ms"] = b.pulse_shape.pulse_ms
            shape["duty"] = b.pulse_shape.duty
        blocks.append({"b1_uT": b.b1_nominal, "offset_ppm": b.freq_offset,
                       "sat_s": b.sat_duration, "rec_s": b.recovery_duration,
                       "shape": shape})
    return {"field_strength_T": schedule.field_strength,
            "pools": pools_to_json(pools), "blocks": blocks}


def schedule_from_json(doc: dict) -> tuple[ProtocolSchedule, tuple[PoolConfig, ...]]:
    pools = pools_from_json(doc["pools"])
    blocks = []
    for b in doc["blocks"]:
        shape = b.get("shape", {"type": "continuous"})
        ps = PulseShape(kind=shape["type"],
                        pulse_ms=shape.get("pulse_ms", 0.0),
                        duty=shape.get("duty", 1.0))
        blocks.append(SaturationBlock(b1_nominal=b["b1_uT"],
                                      freq_offset=b["offset_ppm"],
                                      sat_duration=b["sat_s"],
                                      recovery_duration=b["rec_s"],
                                      pulse_shape=ps))
    return (ProtocolSchedule(blocks=tuple(blocks),
                             field_strength=doc["field_strength_T"]), pools)


def save_schedule(path, schedule: ProtocolSchedule,
                  pools: Sequence[PoolConfig]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schedule_to_json(schedule, pools), fh, indent=1, sort_keys=True)


def load_schedule(path):
    with open(path, "r", encoding="utf-8") as fh:
        return schedule_from_json(json.load(fh))
