"""Voxelwise MLP encoder mapping a signal trajectory to a Gaussian posterior.

Architecture: input -> 256 -> 256 -> 5 with tanh hidden activations.  The
five head outputs parameterize the posterior:

  heads 0..1  -> mu, squashed onto the open bounds box by a logistic
  heads 2..3  -> log sigma-eigenvalues, hard-clamped to [-7, 2]
  head  4     -> ellipse angle, (pi/2) * tanh

The input vector is the normalized trajectory optionally concatenated with
the scaled auxiliary parameters (and the frozen stage-1 estimates in the
APT stage).  Backpropagation is analytic and validated against finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .posterior import GaussianPosterior, ParameterBounds

LOGSIG_MIN, LOGSIG_MAX = -7.0, 2.0
N_HEADS = 5


@dataclass(frozen=True)
class AuxRanges:
    """Scaling ranges used to map auxiliary inputs onto roughly unit scale."""
    t1: tuple = (0.2, 5.0)
    t2: tuple = (0.005, 0.3)
    b0: tuple = (-1.0, 1.0)
    b1: tuple = (0.5, 1.5)

    def scale(self, t1w, t2w, b0, b1) -> np.ndarray:
        cols = []
        for val, (lo, hi) in zip((t1w, t2w, b0, b1),
                                 (self.t1, self.t2, self.b0, self.b1)):
            cols.append((np.asarray(val, dtype=float) - lo) / (hi - lo))
        return np.stack(cols, axis=-1)

    def to_json(self):
        return {"t1": list(self.t1), "t2": list(self.t2),
                "b0": list(self.b0), "b1": list(self.b1)}

    @classmethod
    def from_json(cls, d):
        return cls(t1=tuple(d["t1"]), t2=tuple(d["t2"]),
                   b0=tuple(d["b0"]), b1=tuple(d["b1"]))


@dataclass
class EncoderWeights:
    layers: list                 # [(W, b), ...] in forward order
    bounds: ParameterBounds
    seed: int
    activation: str = "tanh"
    frozen: frozenset = field(default_factory=frozenset)  # layer indices

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for wb in self.layers for a in wb])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for li, (w, b) in enumerate(self.layers):
            for arr in (w, b):
                n = arr.size
                arr[...] = vec[i:i + n].reshape(arr.shape)
                i += n
        if i != vec.size:
            raise ValueError("flat vector size mismatch")


def init_weights(input_dim: int, bounds: ParameterBounds, seed: int = 0,
                 hidden: Sequence[int] = (256, 256)) -> EncoderWeights:
    """Symmetric uniform initialization scaled by fan-in, fixed seed."""
    rng = np.random.default_rng(np.random.Philox(seed))
    dims = [input_dim, *hidden, N_HEADS]
    layers = []
    for din, dout in zip(dims[:-1], dims[1:]):
        lim = 1.0 / np.sqrt(din)
        w = rng.uniform(-lim, lim, size=(din, dout))
        b = np.zeros(dout)
        layers.append((w, b))
    # start the width heads at a moderate log sigma instead of ~1 so the
    # first optimization steps do not slam them into the clip floor
    layers[-1][1][2:4] = -4.0
    return EncoderWeights(layers=layers, bounds=bounds, seed=seed)


def forward(w: EncoderWeights, x: np.ndarray):
    """Head outputs (B, 5) plus the activation cache for backprop."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != w.input_dim:
        raise ValueError(
            f"input dim {x.shape[1]} does not match encoder ({w.input_dim})")
    cache = [x]
    h = x
    last = len(w.layers) - 1
    for li, (wm, b) in enumerate(w.layers):
        z = h @ wm + b
        h = z if li == last else np.tanh(z)
        cache.append(h)
    return h, cache


def backward(w: EncoderWeights, cache, grad_heads: np.ndarray):
    """Reverse-mode gradients of sum(grad_heads * heads) over the weights."""
    grads = []
    g = np.atleast_2d(grad_heads)
    last = len(w.layers) - 1
    for li in range(last, -1, -1):
        wm, b = w.layers[li]
        h_in = cache[li]
        gw = h_in.T @ g
        gb = g.sum(axis=0)
        if li in w.frozen:
            gw = np.zeros_like(gw)
            gb = np.zeros_like(gb)
        grads.append((gw, gb))
        if li > 0:
            g = g @ wm.T
            g = g * (1.0 - cache[li] ** 2)  # through tanh
    grads.reverse()
    return grads


def encode_backward(w: EncoderWeights, x: np.ndarray,
                    grad_wrt_outputs: np.ndarray):
    """Gradient over weights of the head outputs contracted with a 5-vector."""
    _, cache = forward(w, x)
    return backward(w, cache, grad_wrt_outputs)


# ---------------------------------------------------------------------------
# head squashing


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def heads_to_params(heads: np.ndarray, bounds: ParameterBounds):
    """Posterior parameter arrays (mu, logsig, angle) from raw head outputs."""
    heads = np.atleast_2d(heads)
    mu_norm = _sigmoid(heads[:, 0:2])
    mu = bounds.lows + mu_norm * bounds.widths
    logsig = np.clip(heads[:, 2:4], LOGSIG_MIN, LOGSIG_MAX)
    angle = (np.pi / 2.0) * np.tanh(heads[:, 4])
    return mu, logsig, angle


def head_grads_from_params(heads: np.ndarray, g_mu: np.ndarray,
                           g_logsig: np.ndarray, g_angle: np.ndarray,
                           bounds: ParameterBounds,
                           clip_mode: str = "exact") -> np.ndarray:
    """Chain the parameter gradients back through the head squashing.

    clip_mode governs the saturating nonlinearities: "exact" is the true
    (sub)gradient, used by the finite-difference checks.  "restoring"
    additionally lets log-sigma gradients that point back into the clip
    range pass, and floors the tanh derivative of the angle head, so
    saturated covariance heads cannot get permanently stuck during
    training (stationary points are unchanged).
    """
    heads = np.atleast_2d(heads)
    g = np.zeros_like(heads)
    sig = _sigmoid(heads[:, 0:2])
    g[:, 0:2] = g_mu * bounds.widths * sig * (1.0 - sig)
    h_ls = heads[:, 2:4]
    passthrough = (h_ls > LOGSIG_MIN) & (h_ls < LOGSIG_MAX)
    if clip_mode == "restoring":
        passthrough |= (h_ls <= LOGSIG_MIN) & (g_logsig < 0)
        passthrough |= (h_ls >= LOGSIG_MAX) & (g_logsig > 0)
    elif clip_mode != "exact":
        raise ValueError(f"unknown clip_mode {clip_mode!r}")
    g[:, 2:4] = g_logsig * passthrough
    der = 1.0 - np.tanh(heads[:, 4]) ** 2
    if clip_mode == "restoring":
        der = np.maximum(der, 0.05)
    g[:, 4] = g_angle * (np.pi / 2.0) * der
    return g


def build_input(trajectory: np.ndarray, aux_scaled: Optional[np.ndarray],
                stage1_norm: Optional[np.ndarray] = None) -> np.ndarray:
    """Concatenate trajectory, scaled aux, and normalized stage-1 estimates."""
    parts = [np.atleast_2d(trajectory)]
    if aux_scaled is not None:
        parts.append(np.atleast_2d(aux_scaled))
    if stage1_norm is not None:
        parts.append(np.atleast_2d(stage1_norm))
    return np.concatenate(parts, axis=1)


def encode(w: EncoderWeights, x: np.ndarray) -> GaussianPosterior:
    """Single-voxel posterior for an assembled input vector."""
    heads, _ = forward(w, x)
    mu, logsig, angle = heads_to_params(heads, w.bounds)
    return GaussianPosterior(mu=mu[0], eig_logsig=logsig[0],
                             angle=float(angle[0]), bounds=w.bounds)


def encode_map(w: EncoderWeights, x: np.ndarray):
    """Vectorized posterior parameters (mu, logsig, angle) for (B, d) inputs."""
    heads, _ = forward(w, x)
    return heads_to_params(heads, w.bounds)


# ---------------------------------------------------------------------------
# weights serialization


def save_weights(path, w: EncoderWeights) -> None:
    from . import dataio
    meta = {"dims": [w.input_dim] + [b.shape[0] for _, b in w.layers],
            "activation": w.activation, "seed": w.seed,
            "bounds": w.bounds.to_json(),
            "frozen": sorted(w.frozen)}
    arrays = {}
    for li, (wm, b) in enumerate(w.layers):
        arrays[f"W{li}"] = wm.astype(np.float64)
        arrays[f"b{li}"] = b.astype(np.float64)
    dataio.write_container(path, "encoder_weights", meta, arrays)


def load_weights(path) -> EncoderWeights:
    from . import dataio
    meta, arrays = dataio.read_container(path, expect_kind="encoder_weights")
    dims = meta["dims"]
    layers = []
    for li in range(len(dims) - 1):
        layers.append((arrays[f"W{li}"].astype(float),
                       arrays[f"b{li}"].astype(float)))
    return EncoderWeights(layers=layers,
                          bounds=ParameterBounds.from_json(meta["bounds"]),
                          seed=meta["seed"], activation=meta["activation"],
                          frozen=frozenset(meta.get("frozen", ())))
