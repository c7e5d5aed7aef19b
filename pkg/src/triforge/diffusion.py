"""Conditional latent diffusion over normalized rolled tri-plane latents.

Linear beta schedule with an SNR shift knob, DDPM/DDIM reverse sampling,
classifier-free guidance, and a small convolutional denoiser trained with
epsilon-prediction. Latents are expected to be channel-normalized already.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, Tape, Adam, ops
from .autodiff.io import save_bundle, load_bundle

EMBED_WIDTH = 256
DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2
DEFAULT_GUIDANCE = 7.5
DEFAULT_DDIM_STEPS = 200
COND_DROPOUT = 0.10


class DiffusionError(RuntimeError):
    pass


# ------------------------------------------------------------------- schedule


@dataclass
class NoiseSchedule:
    """Discrete-time schedule, arrays indexed by t-1 for t in 1..T.

    Built from a linear beta ramp whose signal-to-noise ratio is divided by
    shift**2 at every step; betas are recomputed from the shifted alpha-bar
    so the product identities hold exactly.
    """

    T: int
    betas: np.ndarray
    shift: float = 1.0
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    posterior_var: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, np.float64)
        if self.betas.shape != (self.T,):
            raise DiffusionError("schedule: betas must have length T")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        self.posterior_var = (1.0 - prev) / (1.0 - self.alpha_bars) * self.betas
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise DiffusionError("schedule: alpha_bar must strictly decrease")

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t) - 1]

    def snr(self, t):
        ab = self.alpha_bar(t)
        return ab / (1.0 - ab)


def build_schedule(T=DEFAULT_T, beta_start=DEFAULT_BETA_START,
                   beta_end=DEFAULT_BETA_END, shift=1.0) -> NoiseSchedule:
    """Linear betas, then remap alpha_bar so SNR(t) = SNR_linear(t)/shift^2."""
    if not (0.0 < beta_start < beta_end < 1.0):
        raise DiffusionError(f"invalid beta range [{beta_start}, {beta_end}]")
    if shift <= 0:
        raise DiffusionError("shift must be > 0")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    if shift != 1.0:
        ab = np.cumprod(1.0 - betas)
        snr = ab / (1.0 - ab) / (shift * shift)
        ab_shifted = snr / (1.0 + snr)
        prev = np.concatenate([[1.0], ab_shifted[:-1]])
        betas = 1.0 - ab_shifted / prev
    return NoiseSchedule(T=T, betas=betas, shift=float(shift))


def q_sample(f0, t, eps, schedule: NoiseSchedule):
    """Forward corruption: sqrt(ab_t) f0 + sqrt(1-ab_t) eps.

    t may be a scalar or a per-sample array matched to a leading batch axis.
    """
    f0 = np.asarray(f0, np.float32)
    eps = np.asarray(eps, np.float32)
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise DiffusionError(f"t out of range 1..{schedule.T}")
    ab = schedule.alpha_bar(t)
    if t.ndim:  # per-sample: broadcast over trailing dims
        ab = ab.reshape((-1,) + (1,) * (f0.ndim - 1))
    return (np.sqrt(ab) * f0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def ddpm_step(f_t, t, eps_hat, schedule: NoiseSchedule, noise=None):
    """One ancestral reverse step; the noise term is forced to 0 at t=1."""
    f_t = np.asarray(f_t, np.float64)
    eps_hat = np.asarray(eps_hat, np.float64)
    if eps_hat.shape != f_t.shape:
        raise DiffusionError("ddpm_step: eps_hat shape mismatch")
    i = int(t) - 1
    beta = schedule.betas[i]
    alpha = schedule.alphas[i]
    ab = schedule.alpha_bars[i]
    mu = (f_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
    if int(t) == 1 or noise is None:
        return mu.astype(np.float32)
    sigma = math.sqrt(schedule.posterior_var[i])
    return (mu + sigma * np.asarray(noise, np.float64)).astype(np.float32)


def cfg_epsilon(eps_cond, eps_uncond, guidance):
    """eps_uncond + g * (eps_cond - eps_uncond)."""
    eps_cond = np.asarray(eps_cond, np.float32)
    eps_uncond = np.asarray(eps_uncond, np.float32)
    if eps_cond.shape != eps_uncond.shape:
        raise DiffusionError("cfg_epsilon: shape mismatch")
    return eps_uncond + np.float32(guidance) * (eps_cond - eps_uncond)


# --------------------------------------------------------------- conditioning


@dataclass
class ConditioningEmbedding:
    vector: np.ndarray  # (EMBED_WIDTH,)
    is_null: bool = False

    def __post_init__(self):
        self.vector = np.asarray(self.vector, np.float32)
        if self.vector.shape != (EMBED_WIDTH,):
            raise DiffusionError(f"embedding must be ({EMBED_WIDTH},)")


def null_embedding() -> ConditioningEmbedding:
    return ConditioningEmbedding(np.zeros(EMBED_WIDTH, np.float32), is_null=True)


def _token_hash(token):
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def embed_caption(text) -> ConditioningEmbedding:
    """Deterministic bag-of-hashed-tokens embedding, L2-normalized.

    Each token lights one of EMBED_WIDTH slots with a hash-derived sign.
    The empty caption maps to the null (zero) embedding.
    """
    tokens = re.findall(r"[a-z0-9]+", text.lower())
    if not tokens:
        return null_embedding()
    vec = np.zeros(EMBED_WIDTH, np.float64)
    for tok in tokens:
        h = _token_hash(tok)
        sign = 1.0 if (h >> 60) & 1 else -1.0
        vec[h % EMBED_WIDTH] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:  # all-cancelled bag; keep it conditional but tiny
        vec[_token_hash(tokens[0]) % EMBED_WIDTH] = 1.0
        norm = 1.0
    return ConditioningEmbedding((vec / norm).astype(np.float32))


# ------------------------------------------------------------------- denoiser


def timestep_table(T, dim):
    """Sinusoidal embedding table, rows are t = 1..T (index t-1)."""
    t = np.arange(1, T + 1, dtype=np.float64)[:, None]
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)],
                          axis=1).astype(np.float32)


@dataclass
class DenoiserConfig:
    channels: int = 8  # latent channels
    height: int = 16
    width: int = 48
    base: int = 32
    emb_dim: int = 64
    T: int = DEFAULT_T
    seed: int = 0


class _CondConv:
    """conv3x3 -> add projected embedding per channel -> relu."""

    def __init__(self, cin, cout, emb_dim, rng, stride=1, zero_init=False):
        scale = 0.0 if zero_init else math.sqrt(2.0 / (cin * 9))
        self.w = Tensor(
            rng.standard_normal((cout, cin, 3, 3)).astype(np.float32) * scale,
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        self.ew = Tensor(
            rng.standard_normal((emb_dim, cout)).astype(np.float32)
            * (0.0 if zero_init else 1.0 / math.sqrt(emb_dim)),
            requires_grad=True,
        )
        self.stride = stride

    def __call__(self, x, emb, activate=True):
        h = ops.conv2d(x, self.w, self.b, stride=self.stride, padding=1)
        h = ops.channel_bias(h, ops.matmul(emb, self.ew))
        return ops.relu(h) if activate else h

    def params(self):
        return [self.w, self.b, self.ew]


class Denoiser:
    """Small conditional conv net predicting epsilon at the latent shape.

    One stride-2 stage with a skip connection back up; conditioning enters
    as a per-channel bias derived from (timestep embedding + projected
    caption embedding). The output head is zero-initialized so the
    untrained net predicts exactly zero.
    """

    def __init__(self, cfg: DenoiserConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c, e = cfg.base, cfg.emb_dim
        self.t_table = timestep_table(cfg.T, e)
        # bias-free projection keeps the null (zero) embedding truly inert
        self.cond_w = Tensor(
            rng.standard_normal((EMBED_WIDTH, e)).astype(np.float32)
            / math.sqrt(EMBED_WIDTH),
            requires_grad=True,
        )
        self.conv_in = _CondConv(cfg.channels, c, e, rng)
        self.block1 = _CondConv(c, c, e, rng)
        self.down = _CondConv(c, 2 * c, e, rng, stride=2)
        self.block2 = _CondConv(2 * c, 2 * c, e, rng)
        self.up = _CondConv(2 * c, c, e, rng)
        self.block3 = _CondConv(2 * c, c, e, rng)  # after skip concat
        self.head = _CondConv(c, cfg.channels, e, rng, zero_init=True)

    def _layers(self):
        return [self.conv_in, self.block1, self.down, self.block2,
                self.up, self.block3, self.head]

    def params(self):
        out = [self.cond_w]
        for layer in self._layers():
            out.extend(layer.params())
        return out

    def forward(self, x: Tensor, t, cond: Tensor) -> Tensor:
        """x: (N,C,H,W) tensor; t: (N,) ints; cond: (N, EMBED_WIDTH)."""
        t_emb = Tensor(self.t_table[np.asarray(t) - 1])
        emb = ops.add(t_emb, ops.matmul(cond, self.cond_w))
        h = self.conv_in(x, emb)
        skip = self.block1(h, emb)
        h = self.down(skip, emb)
        h = self.block2(h, emb)
        h = ops.upsample_nearest2x(h)
        h = self.up(h, emb)
        h = self.block3(ops.concat([h, skip], axis=1), emb)
        return self.head(h, emb, activate=False)

    def epsilon(self, x_t, t, e: ConditioningEmbedding | None = None):
        """Inference-path prediction for one latent (C,H,W)."""
        e = e or null_embedding()
        x = Tensor(np.asarray(x_t, np.float32)[None])
        cond = Tensor(e.vector[None])
        out = self.forward(x, np.asarray([int(t)]), cond)
        return out.data[0]

    # ------------------------------------------------------------ persistence

    def state_arrays(self):
        out = {"cond_w": self.cond_w.data}
        for i, layer in enumerate(self._layers()):
            out[f"layer{i}_w"] = layer.w.data
            out[f"layer{i}_b"] = layer.b.data
            out[f"layer{i}_ew"] = layer.ew.data
        return out

    def load_state(self, arrays):
        self.cond_w.data = arrays["cond_w"].astype(np.float32)
        for i, layer in enumerate(self._layers()):
            layer.w.data = arrays[f"layer{i}_w"].astype(np.float32)
            layer.b.data = arrays[f"layer{i}_b"].astype(np.float32)
            layer.ew.data = arrays[f"layer{i}_ew"].astype(np.float32)

    def save(self, directory, schedule: NoiseSchedule | None = None):
        meta = {"kind": "denoiser", "config": self.cfg.__dict__}
        if schedule is not None:
            meta["schedule"] = {
                "T": schedule.T,
                "shift": schedule.shift,
                "beta_start": float(schedule.betas[0]),
                "beta_end": float(schedule.betas[-1]),
            }
        return save_bundle(directory, self.state_arrays(), meta)

    @classmethod
    def load(cls, directory):
        arrays, meta = load_bundle(directory)
        model = cls(DenoiserConfig(**meta["config"]))
        model.load_state(arrays)
        sched = None
        if "schedule" in meta:
            s = meta["schedule"]
            sched = build_schedule(s["T"], s["beta_start"], s["beta_end"],
                                   s["shift"])
        return model, sched


# ------------------------------------------------------------------- sampling


def ddim_timesteps(T, n_steps):
    """Uniform subsequence of 1..T, ascending, endpoints included."""
    if not (1 <= n_steps <= T):
        raise DiffusionError(f"n_steps must be in 1..{T}")
    return np.unique(np.linspace(1, T, n_steps).round().astype(int))


def ddim_sample(denoiser, e: ConditioningEmbedding | None,
                schedule: NoiseSchedule, shape=None,
                n_steps=DEFAULT_DDIM_STEPS, guidance=DEFAULT_GUIDANCE,
                seed=0):
    """Deterministic (eta=0) DDIM trajectory with classifier-free guidance.

    `denoiser` is anything with .epsilon(x_t, t, e); returns a normalized
    latent (the caller denormalizes with dataset latent statistics).
    """
    if shape is None:
        cfg = denoiser.cfg
        shape = (cfg.channels, cfg.height, cfg.width)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    taus = ddim_timesteps(schedule.T, n_steps)[::-1]
    e = e or null_embedding()
    use_cfg = guidance != 1.0 and not e.is_null
    for k, t in enumerate(taus):
        eps_c = denoiser.epsilon(x, int(t), e)
        if use_cfg:
            eps_u = denoiser.epsilon(x, int(t), null_embedding())
            eps = cfg_epsilon(eps_c, eps_u, guidance)
        else:
            eps = eps_c
        ab = schedule.alpha_bar(int(t))
        x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        t_prev = int(taus[k + 1]) if k + 1 < len(taus) else 0
        ab_prev = schedule.alpha_bar(t_prev) if t_prev >= 1 else 1.0
        x = (math.sqrt(ab_prev) * x0
             + math.sqrt(1.0 - ab_prev) * eps).astype(np.float32)
    return x


def ddpm_sample(denoiser, e, schedule: NoiseSchedule, shape=None, seed=0,
                guidance=1.0):
    """Full ancestral reverse chain from pure noise."""
    if shape is None:
        cfg = denoiser.cfg
        shape = (cfg.channels, cfg.height, cfg.width)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    e = e or null_embedding()
    use_cfg = guidance != 1.0 and not e.is_null
    for t in range(schedule.T, 0, -1):
        eps = denoiser.epsilon(x, t, e)
        if use_cfg:
            eps = cfg_epsilon(eps, denoiser.epsilon(x, t, null_embedding()),
                              guidance)
        noise = rng.standard_normal(shape) if t > 1 else None
        x = ddpm_step(x, t, eps, schedule, noise)
    return x


# ------------------------------------------------------------------- training


def train_ldm(latents, captions, schedule: NoiseSchedule,
              cfg_dropout=COND_DROPOUT, steps=2000, lr=2e-3, batch=8,
              seed=0, model_cfg: DenoiserConfig | None = None,
              log_every=0):
    """Epsilon-prediction training over normalized latents.

    The caption embedding is replaced by the null embedding with probability
    `cfg_dropout` per sample. Returns (denoiser, loss_history).
    """
    data = np.stack([np.asarray(l, np.float32) for l in latents])
    if len(captions) != len(data):
        raise DiffusionError("latents and captions must align")
    embs = np.stack([embed_caption(c).vector for c in captions])
    if model_cfg is None:
        model_cfg = DenoiserConfig(channels=data.shape[1],
                                   height=data.shape[2],
                                   width=data.shape[3], T=schedule.T,
                                   seed=seed)
    model = Denoiser(model_cfg)
    opt = Adam(model.params(), lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    n = len(data)
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch, n))
        f0 = data[idx]
        cond = embs[idx].copy()
        drop = rng.random(len(idx)) < cfg_dropout
        cond[drop] = 0.0
        t = rng.integers(1, schedule.T + 1, size=len(idx))
        eps = rng.standard_normal(f0.shape).astype(np.float32)
        f_t = q_sample(f0, t, eps, schedule)
        with Tape() as tape:
            pred = model.forward(Tensor(f_t), t, Tensor(cond))
            err = ops.sub(pred, Tensor(eps))
            loss = ops.mean_all(ops.mul(err, err))
        value = loss.item()
        if not np.isfinite(value):
            raise DiffusionError(f"LDM training diverged at step {step}")
        history.append(value)
        tape.backward(loss)
        opt.step()
        if log_every and step % log_every == 0:
            print(f"[ldm] step {step} loss {value:.5f}")
    return model, history
