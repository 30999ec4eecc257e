"""Self-supervised encoder training with an exact physics decoder.

Each step draws a reparameterized sample theta' from the encoder posterior,
pushes it through the trajectory simulator, and minimizes

    L = ||S_m - F(theta')||^2  -  alpha * log det Sigma

with analytic gradients through the simulator Jacobian, the sampling path,
and the MLP.  Optimization is plain Adam on the flat weight vector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import encoder, gridref
from .engine import AuxArrays, batch_trajectories
from .physics import PoolConfig, ProtocolSchedule
from .posterior import ParameterBounds, PosteriorMap


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 0.001
    alpha: object = "auto"    # float, or "auto" for noise-matched calibration
    batches: int = 1          # minibatches per epoch
    seed: int = 0
    include_aux_inputs: bool = True
    estimator: str = "laplace"   # or "sample": plain pathwise gradient
    cov_warmup: int = 50      # epochs with frozen covariance heads
    lr_anneal: bool = True    # cosine-decay the rate from lr to 0
    log_every: int = 0        # 0 = silent


@dataclass
class TrainReport:
    """Per-epoch training statistics."""
    epoch: list = field(default_factory=list)
    l_c: list = field(default_factory=list)
    l_reg: list = field(default_factory=list)
    logdet: list = field(default_factory=list)
    clamp_rate: list = field(default_factory=list)
    alpha: float = 0.0

    def append(self, epoch, l_c, l_reg, logdet, clamp_rate):
        self.epoch.append(int(epoch))
        self.l_c.append(float(l_c))
        self.l_reg.append(float(l_reg))
        self.logdet.append(float(logdet))
        self.clamp_rate.append(float(clamp_rate))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "L_c", "L_reg", "logdet", "clamp_rate"])
            for row in zip(self.epoch, self.l_c, self.l_reg,
                           self.logdet, self.clamp_rate):
                w.writerow([row[0]] + [f"{v:.8g}" for v in row[1:]])

    @classmethod
    def from_csv(cls, path) -> "TrainReport":
        rep = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rep.append(row["epoch"], row["L_c"], row["L_reg"],
                           row["logdet"], row["clamp_rate"])
        return rep


def estimate_alpha(signals: np.ndarray, aux: AuxArrays,
                   schedule: ProtocolSchedule, pools: Sequence[PoolConfig],
                   bounds: ParameterBounds, max_voxels: int = 64,
                   coarse: int = 12, seed: int = 0) -> float:
    """Noise-matched regularization weight.

    At the stationary point of the loss the posterior eigen-variances settle
    at alpha / (J^T J), while the true AWGN posterior width is sigma^2 /
    (J^T J); matching the two requires alpha ~= sigma^2.  The noise scale is
    estimated from best-fit residuals against a coarse dictionary.
    """
    rng = np.random.default_rng(np.random.Philox(seed))
    v = signals.shape[0]
    pick = rng.permutation(v)[:max_voxels]
    n = signals.shape[1]
    spec = gridref.GridSpec(bounds=bounds, counts=(coarse, coarse))
    r2_best = []
    for aux_p, idx in gridref.group_voxels(aux.take(pick), pools):
        d = gridref.build_dictionary(spec, aux_p, schedule, pools)
        r2 = gridref.squared_residuals(signals[pick][idx], d.trajectories)
        r2_best.extend(r2.min(axis=1).tolist())
    sigma = max(float(np.sqrt(np.median(r2_best) / n)), gridref.SIGMA_FLOOR)
    return sigma ** 2


def sample_posterior_batch(mu, logsig, angle, eps, bounds):
    """Vectorized reparameterized draws with hard clamping.

    Returns (theta', per-component clamp mask); shapes (B, 2) each.
    """
    s = np.exp(logsig)
    u = s * eps
    c, sn = np.cos(angle), np.sin(angle)
    rot = np.stack([c * u[:, 0] - sn * u[:, 1],
                    sn * u[:, 0] + c * u[:, 1]], axis=1)
    raw = mu + bounds.widths * rot
    theta = np.clip(raw, bounds.lows, bounds.highs)
    return theta, theta != raw


def _loss_and_head_grads(heads, signals, aux, pools, schedule, alpha, eps,
                         bounds, estimator: str = "laplace"):
    """One minibatch: loss statistics and gradients w.r.t. the raw heads.

    estimator="sample" is the plain pathwise gradient of the single-draw
    loss (exact; finite-difference checkable).  The default "laplace" is
    deterministic: the residual and mean gradient are evaluated at the
    mean itself, and the covariance heads are driven toward the
    closed-form stationary point of the expected loss,

        Sigma*_norm = alpha * (D J^T J D)^-1,

    with everything taken at the current mean (D = diag of bounds
    widths).  Taking the expectation of the data term over eps gives
    E[L_c] = ||r||^2 + sum_i s_i^2 ||J D u_i||^2, whose unique minimizer
    in (s, U) together with the log-det term is exactly Sigma*;
    regressing the width and orientation heads onto that target
    preserves the stationary point while removing both the single-sample
    noise and the stiff coupling that otherwise make those heads
    converge far too slowly.
    """
    b = heads.shape[0]
    mu, logsig, angle = encoder.heads_to_params(heads, bounds)
    if estimator == "laplace":
        # deterministic: residual, mean gradient, and curvature target are
        # all evaluated at the mean itself (no reparameterized draw)
        theta = mu
        clamped = np.zeros_like(mu, dtype=bool)
    else:
        theta, clamped = sample_posterior_batch(mu, logsig, angle, eps, bounds)
    s_model, jac = batch_trajectories(pools, theta, aux, schedule,
                                      jacobian=True)
    r = s_model - signals
    l_c = np.sum(r ** 2, axis=1)
    logdet = 2.0 * logsig.sum(axis=1)
    l_reg = -alpha * logdet

    # dL_c/dtheta', zeroed where the draw hit the bounds (hard clamp)
    g_theta = 2.0 * np.einsum("vn,vnd->vd", r, jac)
    g_theta = np.where(clamped, 0.0, g_theta)

    g_mu = g_theta / b
    s = np.exp(logsig)
    c, sn = np.cos(angle), np.sin(angle)
    if estimator == "sample":
        gt = g_theta * bounds.widths
        u0, u1 = s[:, 0] * eps[:, 0], s[:, 1] * eps[:, 1]
        g_logsig = np.stack([(gt[:, 0] * c + gt[:, 1] * sn) * u0,
                             (-gt[:, 0] * sn + gt[:, 1] * c) * u1], axis=1)
        g_logsig = (g_logsig - 2.0 * alpha) / b
        g_angle = (gt[:, 0] * (-sn * u0 - c * u1)
                   + gt[:, 1] * (c * u0 - sn * u1)) / b
    elif estimator == "laplace":
        jd = jac * bounds.widths[None, None, :]      # J D, (B, n, 2)
        m11 = np.sum(jd[..., 0] ** 2, axis=1)
        m22 = np.sum(jd[..., 1] ** 2, axis=1)
        m12 = np.sum(jd[..., 0] * jd[..., 1], axis=1)
        det = np.maximum(m11 * m22 - m12 ** 2, 1e-300)
        # mean heads regress onto a damped Gauss-Newton refinement of the
        # current mean (normalized coordinates, step-limited, clipped to
        # the box).  The strong f-k correlation makes the data term a
        # stiff valley; plain gradient descent leaves a bias along the
        # ridge that the posterior width cannot cover, while a bounded
        # position target keeps the update well-scaled for the optimizer.
        # Fixed point: zero step, i.e. J^T r = 0 exactly.
        jtr = np.einsum("vn,vnd->vd", r, jd)       # (J D)^T r
        damp = 0.01 * 0.5 * (m11 + m22)
        a11, a22 = m11 + damp, m22 + damp
        det_a = a11 * a22 - m12 ** 2
        du = -np.stack([(a22 * jtr[:, 0] - m12 * jtr[:, 1]) / det_a,
                        (a11 * jtr[:, 1] - m12 * jtr[:, 0]) / det_a], axis=1)
        du = np.clip(du, -0.1, 0.1)
        u = bounds.normalize(mu)
        u_t = np.clip(u + du, 0.0, 1.0)
        g_mu = (u - u_t) / bounds.widths / b
        # Sigma*_norm = alpha * M^-1 and its eigen-factorization
        c11 = alpha * m22 / det
        c22 = alpha * m11 / det
        c12 = -alpha * m12 / det
        rad = np.sqrt((c11 - c22) ** 2 + 4.0 * c12 ** 2)
        lam = np.stack([0.5 * (c11 + c22 + rad),
                        0.5 * (c11 + c22 - rad)], axis=1)
        lam = np.clip(lam, 1e-12, 1e6)
        ls_t = 0.5 * np.log(lam)
        phi0 = 0.5 * np.arctan2(2.0 * c12, c11 - c22)  # in (-pi/2, pi/2]
        # the same ellipse is reached at phi0 + m pi/2 with the axes swapped
        # for odd m; exactly two representatives fall inside the (-pi/2,
        # pi/2] range of the angle parameterization.  Target the one with
        # a non-positive angle: the choice is then a function of the target
        # covariance alone, so voxels with near-identical covariances get
        # the same representative (a state-dependent choice lets a shared
        # readout average two swapped targets into a collapsed ellipse),
        # and it stays in range of the tanh squashing.  For an
        # anti-correlated covariance this is the major axis, which varies
        # smoothly with the Jacobian.
        odd = phi0 > 0
        phi_t = np.where(odd, phi0 - np.pi / 2.0, phi0)
        t1 = np.clip(np.where(odd, ls_t[:, 1], ls_t[:, 0]),
                     encoder.LOGSIG_MIN, encoder.LOGSIG_MAX)
        t2 = np.clip(np.where(odd, ls_t[:, 0], ls_t[:, 1]),
                     encoder.LOGSIG_MIN, encoder.LOGSIG_MAX)
        g_logsig = np.stack([logsig[:, 0] - t1, logsig[:, 1] - t2],
                            axis=1) / b
        g_angle = (angle - phi_t) / b
    else:
        raise ValueError(f"unknown gradient estimator {estimator!r}")

    clip_mode = "exact" if estimator == "sample" else "restoring"
    grad_heads = encoder.head_grads_from_params(heads, g_mu, g_logsig,
                                                g_angle, bounds,
                                                clip_mode=clip_mode)
    stats = (l_c.mean(), l_reg.mean(), logdet.mean(),
             float(np.mean(np.any(clamped, axis=1))))
    return stats, grad_heads


class _Adam:
    def __init__(self, n_params: int, lr: float,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad ** 2
        mhat = self.m / (1.0 - self.b1 ** self.t)
        vhat = self.v / (1.0 - self.b2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _flat_grads(grads) -> np.ndarray:
    return np.concatenate([a.ravel() for wb in grads for a in wb])


def train(weights: encoder.EncoderWeights, signals: np.ndarray,
          aux: AuxArrays, schedule: ProtocolSchedule,
          pools: Sequence[PoolConfig], config: TrainConfig,
          stage1_norm: Optional[np.ndarray] = None) -> TrainReport:
    """Optimize the encoder in place on a set of voxel trajectories.

    signals : (V, n) unit-norm trajectories (already masked).
    stage1_norm : optional (V, 2) normalized frozen upstream estimates,
        appended to the encoder input.
    """
    signals = np.asarray(signals, dtype=float)
    v = signals.shape[0]
    if v == 0:
        raise TrainingError("no voxels to train on")
    bounds = weights.bounds
    alpha = config.alpha
    if alpha == "auto":
        alpha = estimate_alpha(signals, aux, schedule, pools, bounds,
                               seed=config.seed)
    alpha = float(alpha)

    aux_scaled = None
    if config.include_aux_inputs:
        aux_scaled = encoder.AuxRanges().scale(aux.t1_water, aux.t2_water,
                                               aux.b0_shift, aux.b1_scale)
    x = encoder.build_input(signals, aux_scaled, stage1_norm)
    if x.shape[1] != weights.input_dim:
        raise TrainingError(
            f"encoder expects input dim {weights.input_dim}, got {x.shape[1]}")

    rng = np.random.default_rng(np.random.Philox(config.seed))
    adam = _Adam(weights.flat().size, config.lr)
    report = TrainReport(alpha=alpha)

    denom = max(config.epochs - 1, 1)
    for epoch in range(config.epochs):
        if config.lr_anneal:
            # lr is the peak of a cosine-annealed schedule: a constant rate
            # keeps the voxel-wise regression bouncing with an amplitude
            # larger than the posterior widths, and small tissue classes
            # never settle onto their refinement targets
            adam.lr = config.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / denom))
        order = rng.permutation(v)
        eps_all = rng.standard_normal((v, 2))
        ep_stats = np.zeros(4)
        nb = 0
        for chunk in np.array_split(order, config.batches):
            if chunk.size == 0:
                continue
            heads, cache = encoder.forward(weights, x[chunk])
            stats, g_heads = _loss_and_head_grads(
                heads, signals[chunk], aux.take(chunk), pools, schedule,
                alpha, eps_all[chunk], bounds, estimator=config.estimator)
            if not all(np.isfinite(s) for s in stats):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}: "
                    f"L_c={stats[0]}, L_reg={stats[1]}, logdet={stats[2]}")
            cov_on = epoch >= config.cov_warmup
            g_cov = g_heads[:, 2:5].copy()
            if not cov_on or config.estimator == "laplace":
                # warmup lets the mean settle first; with the regression
                # estimator the covariance-head gradients additionally stay
                # out of the shared hidden layers for good -- the heads act
                # as a linear readout of the mean-driven features, so their
                # (initially large) regression errors cannot destabilize
                # the mean fit
                g_heads[:, 2:5] = 0.0
            grads = encoder.backward(weights, cache, g_heads)
            last = len(weights.layers) - 1
            if (cov_on and config.estimator == "laplace"
                    and last not in weights.frozen):
                gw, gb = grads[last]
                gw = gw.copy()
                gw[:, 2:5] += cache[last].T @ g_cov
                gb = gb.copy()
                gb[2:5] += g_cov.sum(axis=0)
                grads[last] = (gw, gb)
            gflat = _flat_grads(grads)
            if not np.all(np.isfinite(gflat)):
                raise TrainingError(f"non-finite gradient at epoch {epoch}")
            weights.set_flat(adam.step(weights.flat(), gflat))
            ep_stats += np.asarray(stats)
            nb += 1
        ep_stats /= nb
        report.append(epoch, *ep_stats)
        if config.log_every and epoch % config.log_every == 0:
            print(f"epoch {epoch:5d}  L_c {ep_stats[0]:.3e}  "
                  f"L_reg {ep_stats[1]:.3e}  clamp {ep_stats[3]:.3f}")
    return report


# ---------------------------------------------------------------------------
# inference


def infer_map(weights: encoder.EncoderWeights, signals: np.ndarray,
              aux: AuxArrays, mask: np.ndarray, grid_shape,
              include_aux_inputs: bool = True,
              stage1_norm: Optional[np.ndarray] = None) -> PosteriorMap:
    """Posterior maps for a full raster; background voxels become NaN.

    signals / aux / stage1_norm are full-raster (H*W ordered); `mask`
    selects the voxels actually pushed through the encoder.
    """
    mask = np.asarray(mask).astype(bool).ravel()
    n_vox = mask.size
    bounds = weights.bounds
    aux_scaled = None
    if include_aux_inputs:
        aux_scaled = encoder.AuxRanges().scale(aux.t1_water, aux.t2_water,
                                               aux.b0_shift, aux.b1_scale)
        aux_scaled = aux_scaled[mask]
    s1 = None if stage1_norm is None else np.atleast_2d(stage1_norm)[mask]
    x = encoder.build_input(np.asarray(signals, dtype=float)[mask],
                            aux_scaled, s1)
    mu, logsig, angle = encoder.encode_map(weights, x)

    s2 = np.exp(2.0 * logsig)
    c, sn = np.cos(angle), np.sin(angle)
    v00 = c ** 2 * s2[:, 0] + sn ** 2 * s2[:, 1]
    v11 = sn ** 2 * s2[:, 0] + c ** 2 * s2[:, 1]
    v01 = c * sn * (s2[:, 0] - s2[:, 1])
    sigma = np.sqrt(np.stack([v00, v11], axis=1)) * bounds.widths
    rho = v01 / np.sqrt(v00 * v11)
    # flag encoder saturation: mean pinned to the edge of the bounds box
    edge = 1e-6 * bounds.widths
    sat = np.any((mu - bounds.lows < edge) | (bounds.highs - mu < edge),
                 axis=1).astype(float)

    full = lambda ncol: np.full((n_vox, ncol) if ncol > 1 else n_vox, np.nan)
    out = PosteriorMap(mu=full(2), sigma=full(2), rho=full(1), clamp=full(1),
                       bounds=bounds, grid_shape=tuple(grid_shape))
    out.mu[mask] = mu
    out.sigma[mask] = sigma
    out.rho[mask] = rho
    out.clamp[mask] = sat
    return out


# ---------------------------------------------------------------------------
# two-stage cascade


@dataclass
class CascadeResult:
    weights1: encoder.EncoderWeights
    report1: TrainReport
    pmap1: PosteriorMap
    weights2: encoder.EncoderWeights
    report2: TrainReport
    pmap2: PosteriorMap


def cascade(signals1, schedule1, pools1, bounds1,
            signals2, schedule2, pools2, bounds2,
            aux: AuxArrays, mask: np.ndarray, grid_shape,
            config1: TrainConfig, config2: TrainConfig) -> CascadeResult:
    """Sequential two-stage estimation.

    Stage 1 fits the semisolid pool on its own schedule (2-pool model).
    Its posterior means are then frozen: they enter the stage-2 physics as
    fixed middle-pool parameters and the stage-2 encoder input as an extra
    normalized pair, and the second free pool is estimated on the second
    schedule.
    """
    mask = np.asarray(mask).astype(bool).ravel()
    aux_m = aux.take(np.flatnonzero(mask))

    w1 = encoder.init_weights(signals1.shape[1] + 4, bounds1,
                              seed=config1.seed)
    rep1 = train(w1, np.asarray(signals1, dtype=float)[mask], aux_m,
                 schedule1, pools1, config1)
    pmap1 = infer_map(w1, signals1, aux, mask, grid_shape)

    aux2 = AuxArrays(aux.t1_water, aux.t2_water, aux.b0_shift, aux.b1_scale,
                     fixed_f=np.where(mask, np.nan_to_num(pmap1.mu[:, 0]), 0.0),
                     fixed_k=np.where(mask, np.nan_to_num(pmap1.mu[:, 1], nan=1.0),
                                      1.0))
    s1_norm = np.zeros((mask.size, 2))
    s1_norm[mask] = bounds1.normalize(pmap1.mu[mask])

    w2 = encoder.init_weights(signals2.shape[1] + 4 + 2, bounds2,
                              seed=config2.seed)
    rep2 = train(w2, np.asarray(signals2, dtype=float)[mask],
                 aux2.take(np.flatnonzero(mask)), schedule2, pools2, config2,
                 stage1_norm=s1_norm[mask])
    pmap2 = infer_map(w2, signals2, aux2, mask, grid_shape,
                      stage1_norm=s1_norm)
    return CascadeResult(weights1=w1, report1=rep1, pmap1=pmap1,
                         weights2=w2, report2=rep2, pmap2=pmap2)
