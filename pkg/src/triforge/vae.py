"""Tri-plane VAE: rollout, convolutional encode/decode, loss, latent stats.

The three planes are rolled into one 2D feature map so an image-style
encoder can process them; the latent keeps the three-plane layout along its
last axis. Latents are channel-normalized with dataset statistics before
any diffusion training (the KL weight is far too small to whiten them).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, Tape, Adam, ops
from .autodiff.io import save_bundle, load_bundle
from .triplane import TriPlane, tv_loss

KL_WEIGHT = 1e-5
TV_WEIGHT = 2e-3
LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
LOGVAR_INIT = -6.0
SIGMA_FLOOR = 1e-6


class VaeError(RuntimeError):
    pass


# -------------------------------------------------------------------- rollout


def rollout(tp: TriPlane) -> Tensor:
    """Concatenate the three planes along the last spatial axis:
    (C, W, H) x3 -> (C, W, 3H). Lossless."""
    return ops.concat(list(tp.planes), axis=2)


def unroll(rp, split) -> TriPlane:
    """Exact inverse of rollout."""
    rp = rp if isinstance(rp, Tensor) else Tensor(rp)
    c, w, h3 = rp.shape
    if h3 % 3:
        raise VaeError(f"rolled plane height {h3} not divisible by 3")
    h = h3 // 3
    planes = [ops.slice_axis(rp, 2, i * h, (i + 1) * h) for i in range(3)]
    return TriPlane(*planes, split=split)


def compression_factor(plane_resolution, plane_channels, latent_resolution,
                       latent_channels):
    """Elementwise compression rate of the tri-plane -> latent mapping."""
    full = plane_resolution * plane_resolution * plane_channels * 3
    lat = latent_resolution * latent_resolution * latent_channels * 3
    return full / lat


# ----------------------------------------------------------------- VAE layers


class Conv:
    def __init__(self, cin, cout, rng, k=3, stride=1):
        scale = math.sqrt(2.0 / (cin * k * k))
        self.w = Tensor(
            rng.standard_normal((cout, cin, k, k)).astype(np.float32) * scale,
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x):
        return ops.conv2d(x, self.w, self.b, stride=self.stride, padding=self.pad)

    def params(self):
        return [self.w, self.b]


@dataclass
class VaeConfig:
    plane_channels: int = 16
    plane_resolution: int = 64
    split: int = 8
    latent_channels: int = 8
    base_channels: int = 32
    downsamples: int = 2  # paper-scale uses 3
    seed: int = 0

    @property
    def latent_resolution(self):
        return self.plane_resolution // (2 ** self.downsamples)


class TriplaneVae:
    """Convolutional encoder/decoder over rolled tri-planes.

    Encoder: stride-2 stages down to the latent grid, a 1x1-ish head emits
    (mu, logvar). Decoder mirrors with nearest-neighbor upsampling.

    Activations are leaky: plane features are sparse (mostly zero away from
    the surface), so early training drives every pre-activation negative and
    plain ReLU stages die, leaving a constant mean-valued reconstruction.
    """

    def __init__(self, cfg: VaeConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.base_channels
        self.enc = [Conv(cfg.plane_channels, c, rng)]
        ch = c
        for _ in range(cfg.downsamples):
            self.enc.append(Conv(ch, ch * 2, rng, stride=2))
            ch *= 2
        self.enc_head = Conv(ch, 2 * cfg.latent_channels, rng)
        # start the posterior nearly deterministic: with logvar ~ 0 the unit
        # reparameterization noise drowns the latent signal and training
        # stalls for thousands of steps
        self.enc_head.b.data[cfg.latent_channels:] = LOGVAR_INIT

        self.dec = [Conv(cfg.latent_channels, ch, rng)]
        for _ in range(cfg.downsamples):
            self.dec.append(Conv(ch, ch // 2, rng))
            ch //= 2
        self.dec_head = Conv(ch, cfg.plane_channels, rng)

    def params(self):
        out = []
        for layer in self.enc + [self.enc_head] + self.dec + [self.dec_head]:
            out.extend(layer.params())
        return out

    def encode(self, rp):
        """Rolled plane(s) -> (mu, logvar) latent maps."""
        h = rp if isinstance(rp, Tensor) else Tensor(rp)
        for layer in self.enc:
            h = ops.leaky_relu(layer(h))
        head = self.enc_head(h)
        lc = self.cfg.latent_channels
        axis = 0 if head.ndim == 3 else 1
        mu = ops.slice_axis(head, axis, 0, lc)
        logvar = ops.clip(ops.slice_axis(head, axis, lc, 2 * lc),
                          LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def reparameterize(self, mu, logvar, rng):
        eps = rng.standard_normal(mu.shape).astype(np.float32)
        std = ops.exp(ops.mul(logvar, 0.5))
        return ops.add(mu, ops.mul(std, Tensor(eps)))

    def decode(self, z):
        h = z if isinstance(z, Tensor) else Tensor(z)
        h = ops.leaky_relu(self.dec[0](h))
        for layer in self.dec[1:]:
            h = ops.upsample_nearest2x(h)
            h = ops.leaky_relu(layer(h))
        return self.dec_head(h)

    def reconstruct(self, rp, rng=None):
        """encode -> (sample | mu) -> decode. Deterministic when rng is None."""
        mu, logvar = self.encode(rp)
        z = self.reparameterize(mu, logvar, rng) if rng is not None else mu
        return self.decode(z), mu, logvar

    # ------------------------------------------------------------ persistence

    def state_arrays(self):
        out = {}
        layers = self.enc + [self.enc_head] + self.dec + [self.dec_head]
        for i, layer in enumerate(layers):
            out[f"layer{i}_w"] = layer.w.data
            out[f"layer{i}_b"] = layer.b.data
        return out

    def load_state(self, arrays):
        layers = self.enc + [self.enc_head] + self.dec + [self.dec_head]
        for i, layer in enumerate(layers):
            layer.w.data = arrays[f"layer{i}_w"].astype(np.float32)
            layer.b.data = arrays[f"layer{i}_b"].astype(np.float32)

    def save(self, directory):
        meta = {
            "kind": "triplane_vae",
            "config": self.cfg.__dict__,
        }
        return save_bundle(directory, self.state_arrays(), meta)

    @classmethod
    def load(cls, directory):
        arrays, meta = load_bundle(directory)
        vae = cls(VaeConfig(**meta["config"]))
        vae.load_state(arrays)
        return vae


# --------------------------------------------------------------------- losses


def kl_divergence(mu, logvar):
    """KL(N(mu, sigma^2) || N(0, 1)), summed over the latent map, mean over
    any batch axis."""
    var = ops.exp(logvar)
    term = ops.sub(ops.add(ops.mul(mu, mu), var), ops.add(logvar, 1.0))
    total = ops.mul(ops.sum_all(term), 0.5)
    if mu.ndim == 4:
        total = ops.div(total, float(mu.shape[0]))
    return total


def vae_loss(x, x_hat, mu, logvar, decoded_tp: TriPlane,
             kl_weight=KL_WEIGHT, tv_weight=TV_WEIGHT):
    """L2 reconstruction + 1e-5 KL + 2e-3 TV on the reconstructed planes."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    err = ops.sub(x_hat, x)
    loss = ops.mean_all(ops.mul(err, err))
    loss = ops.add(loss, ops.mul(kl_divergence(mu, logvar), float(kl_weight)))
    loss = ops.add(loss, ops.mul(tv_loss(decoded_tp), float(tv_weight)))
    return loss


# --------------------------------------------------------------- latent stats


@dataclass
class LatentStats:
    mu: np.ndarray  # (C,)
    sigma: np.ndarray  # (C,)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, np.float32)
        self.sigma = np.asarray(self.sigma, np.float32)
        if np.any(self.sigma <= SIGMA_FLOOR):
            raise VaeError("degenerate latent std below floor")

    def to_dict(self):
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mu"]), np.asarray(d["sigma"]))


def compute_latent_stats(latents) -> LatentStats:
    """Per-channel mean/std over a set of (C, W, H) latent arrays."""
    if len(latents) < 2:
        raise VaeError("need >= 2 latents for stats")
    stack = np.stack([np.asarray(l, np.float32) for l in latents])  # (N,C,W,H)
    mu = stack.mean(axis=(0, 2, 3))
    sigma = stack.std(axis=(0, 2, 3))
    sigma = np.maximum(sigma, SIGMA_FLOOR * 1.001)
    return LatentStats(mu, sigma)


def normalize_latent(latent, stats: LatentStats):
    latent = np.asarray(latent, np.float32)
    return (latent - stats.mu[:, None, None]) / stats.sigma[:, None, None]


def denormalize_latent(latent, stats: LatentStats):
    latent = np.asarray(latent, np.float32)
    return latent * stats.sigma[:, None, None] + stats.mu[:, None, None]


# ------------------------------------------------------------------- training


def train_vae(triplanes, cfg: VaeConfig, steps=800, lr=2e-3, batch=4,
              seed=0, log_every=0):
    """Train on a list of TriPlane (or rolled arrays). Returns
    (vae, loss_history)."""
    vae = TriplaneVae(cfg)
    rolled = []
    for tp in triplanes:
        if isinstance(tp, TriPlane):
            rolled.append(rollout(tp).data)
        else:
            rolled.append(np.asarray(tp, np.float32))
    data = np.stack(rolled)  # (N, C, W, 3H)
    rng = np.random.default_rng(seed)
    opt = Adam(vae.params(), lr=lr)
    history = []
    for step in range(steps):
        idx = rng.choice(len(data), size=min(batch, len(data)), replace=False)
        x = data[idx]
        with Tape() as tape:
            x_hat, mu, logvar = vae.reconstruct(Tensor(x), rng=rng)
            # TV regularizer applies to the reconstructed planes; evaluate it
            # on the batch-mean reconstruction unrolled back to plane layout
            tp_batch = unroll(ops.mul(ops.sum_axis(x_hat, axis=0),
                                      1.0 / len(idx)), cfg.split)
            loss = vae_loss(x, x_hat, mu, logvar, tp_batch)
        value = loss.item()
        if not np.isfinite(value):
            raise VaeError(f"VAE training diverged at step {step}")
        history.append(value)
        tape.backward(loss)
        opt.step()
        if log_every and step % log_every == 0:
            print(f"[vae] step {step} loss {value:.5f}")
    return vae, history


def encode_triplane(vae: TriplaneVae, tp: TriPlane):
    """Deterministic (mu) latent for a tri-plane. Returns (C, W, 3H/ratio)."""
    mu, _ = vae.encode(rollout(tp))
    return mu.data


def decode_latent(vae: TriplaneVae, latent, split=None):
    """Latent array -> TriPlane."""
    split = split if split is not None else vae.cfg.split
    rp = vae.decode(Tensor(np.asarray(latent, np.float32)))
    return unroll(rp, split)
