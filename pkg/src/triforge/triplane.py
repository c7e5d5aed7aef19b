"""Tri-plane fields: representation, disentangled decoding, volume rendering.

A tri-plane holds three axis-aligned feature planes. A point (x, y, z) in the
unit cube samples F_xy at (x, y), F_yz at (y, z) and F_xz at (x, z); the three
bilinear lookups are channel-concatenated and decoded by two separate MLPs,
one for color and one for density.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.io import save_tensor, load_tensor

VALUE_BOUND = 5.0  # fitted plane values are kept in [-5, 5]

PLANE_NAMES = ("f_xy", "f_yz", "f_xz")


class RenderError(ValueError):
    pass


@dataclass
class TriPlane:
    """Three feature planes of shape (C, W, H) with a color/density
    channel split: channels [:split] feed the color MLP, [split:] the
    density MLP."""

    f_xy: Tensor
    f_yz: Tensor
    f_xz: Tensor
    split: int

    def __post_init__(self):
        shapes = {tuple(p.shape) for p in self.planes}
        if len(shapes) != 1:
            raise ValueError(f"planes must share one shape, got {shapes}")
        c = self.channels
        if not 0 < self.split < c:
            raise ValueError(f"split {self.split} out of range for {c} channels")

    @property
    def planes(self):
        return (self.f_xy, self.f_yz, self.f_xz)

    @property
    def channels(self):
        return self.f_xy.shape[0]

    @property
    def resolution(self):
        return self.f_xy.shape[1]

    @property
    def density_channels(self):
        return self.channels - self.split

    def params(self):
        return list(self.planes)

    @classmethod
    def zeros(cls, channels=16, resolution=64, split=8, requires_grad=False):
        mk = lambda: Tensor(
            np.zeros((channels, resolution, resolution), np.float32),
            requires_grad=requires_grad,
        )
        return cls(mk(), mk(), mk(), split)

    def copy(self, requires_grad=False):
        return TriPlane(
            *(p.copy(requires_grad=requires_grad) for p in self.planes),
            split=self.split,
        )


def clamp_triplane(tp: TriPlane) -> TriPlane:
    """Clamp plane values into [-5, 5] in place (post-optimizer-step use).

    Idempotent; operates on raw data so parameter tensor identity is kept.
    """
    for p in tp.planes:
        np.clip(p.data, -VALUE_BOUND, VALUE_BOUND, out=p.data)
    return tp


class Mlp:
    """Small fully connected net: ``depth`` hidden relu layers of ``hidden``
    units plus a linear head."""

    def __init__(self, in_dim, out_dim, hidden=64, depth=3, rng=None,
                 out_bias_init=0.0):
        rng = rng or np.random.default_rng(0)
        dims = [in_dim] + [hidden] * depth + [out_dim]
        self.weights = []
        self.biases = []
        last = len(dims) - 2
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.standard_normal((a, b)).astype(np.float32) * math.sqrt(2.0 / a)
            self.weights.append(Tensor(w, requires_grad=True))
            # small random hidden biases keep relus alive for all-zero
            # plane features (the standard tri-plane initialization)
            bias = np.zeros(b, np.float32) if i == last else (
                rng.standard_normal(b).astype(np.float32) * 0.05
            )
            self.biases.append(Tensor(bias, requires_grad=True))
        self.biases[-1].data += np.float32(out_bias_init)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ops.linear(h, w, b)
            if i != last:
                h = ops.relu(h)
        return h

    def params(self):
        return self.weights + self.biases

    def state_arrays(self, prefix):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}_w{i}"] = w.data
            out[f"{prefix}_b{i}"] = b.data
        return out

    def load_state(self, arrays, prefix):
        for i in range(len(self.weights)):
            self.weights[i].data = arrays[f"{prefix}_w{i}"].astype(np.float32)
            self.biases[i].data = arrays[f"{prefix}_b{i}"].astype(np.float32)


class SharedDecoder:
    """Disentangled decoder: one MLP for color (sigmoid to [0,1]^3), one for
    density (softplus, >= 0). The density head bias starts negative so an
    all-zero tri-plane renders near-empty."""

    def __init__(self, color_in, density_in, hidden=64, depth=3, rng=None,
                 density_bias=-3.0):
        rng = rng or np.random.default_rng(0)
        self.color_mlp = Mlp(color_in, 3, hidden, depth, rng)
        self.density_mlp = Mlp(density_in, 1, hidden, depth, rng,
                               out_bias_init=density_bias)

    @classmethod
    def for_triplane(cls, tp: TriPlane, hidden=64, depth=3, rng=None,
                     density_bias=-3.0):
        return cls(3 * tp.split, 3 * tp.density_channels, hidden, depth, rng,
                   density_bias)

    def decode(self, color_feat: Tensor, density_feat: Tensor):
        rgb = ops.sigmoid(self.color_mlp(color_feat))
        sigma = ops.softplus(self.density_mlp(density_feat))
        return rgb, sigma

    def params(self):
        return self.color_mlp.params() + self.density_mlp.params()

    def state_arrays(self):
        out = self.color_mlp.state_arrays("color")
        out.update(self.density_mlp.state_arrays("density"))
        return out

    def load_state(self, arrays):
        self.color_mlp.load_state(arrays, "color")
        self.density_mlp.load_state(arrays, "density")


class UnifiedDecoder:
    """Ablation decoder: a single MLP maps all concatenated features to
    (rgb, sigma) jointly."""

    def __init__(self, in_dim, hidden=64, depth=3, rng=None, density_bias=-3.0):
        self.mlp = Mlp(in_dim, 4, hidden, depth, rng)
        self.mlp.biases[-1].data[3] += np.float32(density_bias)

    @classmethod
    def for_triplane(cls, tp: TriPlane, hidden=64, depth=3, rng=None,
                     density_bias=-3.0):
        return cls(3 * tp.channels, hidden, depth, rng, density_bias)

    def decode(self, color_feat: Tensor, density_feat: Tensor):
        feat = ops.concat([color_feat, density_feat], axis=1)
        raw = self.mlp(feat)
        rgb = ops.sigmoid(ops.slice_axis(raw, 1, 0, 3))
        sigma = ops.softplus(ops.slice_axis(raw, 1, 3, 4))
        return rgb, sigma

    def params(self):
        return self.mlp.params()

    def state_arrays(self):
        return self.mlp.state_arrays("unified")

    def load_state(self, arrays):
        self.mlp.load_state(arrays, "unified")


def sample_features(tp: TriPlane, xyz: np.ndarray):
    """Bilinear plane lookups for points in [-1, 1]^3.

    Returns (color_feat, density_feat) tensors of shape (N, 3*split) and
    (N, 3*(C-split)).
    """
    xyz = np.asarray(xyz, dtype=np.float32)
    uvs = (xyz[:, (0, 1)], xyz[:, (1, 2)], xyz[:, (0, 2)])
    color_parts, density_parts = [], []
    for plane, uv in zip(tp.planes, uvs):
        feat = ops.grid_sample_2d(plane, Tensor(uv))
        color_parts.append(ops.slice_axis(feat, 1, 0, tp.split))
        density_parts.append(ops.slice_axis(feat, 1, tp.split, tp.channels))
    return ops.concat(color_parts, axis=1), ops.concat(density_parts, axis=1)


def decode_point(tp: TriPlane, dec, xyz):
    """Decode points in the unit cube to (rgb in [0,1]^3, sigma >= 0)."""
    color_feat, density_feat = sample_features(tp, xyz)
    return dec.decode(color_feat, density_feat)


# ------------------------------------------------------------------- camera


@dataclass
class Camera:
    """Object-centric orbit camera looking at the origin (z-up)."""

    radius: float = 2.5
    azimuth_deg: float = 0.0
    elevation_deg: float = 0.0
    fov_deg: float = 49.1
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("camera radius must be > 0")
        if not 0.0 < self.fov_deg < 120.0:
            raise ValueError("fov must be in (0, 120) degrees")

    @property
    def position(self):
        az = math.radians(self.azimuth_deg)
        el = math.radians(self.elevation_deg)
        return np.array(
            [
                self.radius * math.cos(el) * math.cos(az),
                self.radius * math.cos(el) * math.sin(az),
                self.radius * math.sin(el),
            ],
            dtype=np.float64,
        )

    def rays(self):
        """Pinhole rays through pixel centers. Returns (origins, dirs) of
        shape (H*W, 3) in row-major pixel order."""
        pos = self.position
        fwd = -pos / np.linalg.norm(pos)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
        if nr < 1e-8:  # looking straight up/down
            right = np.array([1.0, 0.0, 0.0])
        else:
            right = right / nr
        cam_up = np.cross(right, fwd)

        h, w = self.height, self.width
        tan_half = math.tan(math.radians(self.fov_deg) / 2.0)
        aspect = w / h
        jj, ii = np.meshgrid(np.arange(w), np.arange(h))
        ndc_x = (2.0 * (jj + 0.5) / w - 1.0) * tan_half * aspect
        ndc_y = (1.0 - 2.0 * (ii + 0.5) / h) * tan_half
        dirs = (
            fwd[None, :]
            + ndc_x.reshape(-1)[:, None] * right[None, :]
            + ndc_y.reshape(-1)[:, None] * cam_up[None, :]
        )
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(pos, dirs.shape)
        return origins.astype(np.float32), dirs.astype(np.float32)

    def to_dict(self):
        return {
            "radius": self.radius,
            "azimuth_deg": self.azimuth_deg,
            "elevation_deg": self.elevation_deg,
            "fov_deg": self.fov_deg,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def ray_box_intersect(origins, dirs, lo=-1.0, hi=1.0):
    """Slab test against the axis-aligned cube [lo, hi]^3.

    Returns (tnear, tfar, hit_mask); rays that miss get tnear >= tfar.
    """
    inv = 1.0 / np.where(np.abs(dirs) < 1e-9, 1e-9 * np.sign(dirs) + 1e-12, dirs)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=1)
    tmax = np.maximum(t0, t1).min(axis=1)
    tmin = np.maximum(tmin, 0.0)
    hit = tmax > tmin
    return tmin.astype(np.float32), tmax.astype(np.float32), hit


WHITE = (1.0, 1.0, 1.0)


def render_rays(tp, dec, origins, dirs, n_samples, rng=None, bg=WHITE):
    """Emission-absorption rendering of a ray batch. Returns an (N, 3)
    tensor of composited colors (background where rays miss the cube)."""
    if n_samples < 2:
        raise RenderError("n_samples_per_ray must be >= 2")
    n = origins.shape[0]
    tnear, tfar, hit = ray_box_intersect(origins, dirs)
    hit_idx = np.nonzero(hit)[0]
    if hit_idx.size == 0:
        return Tensor(np.tile(np.asarray(bg, np.float32), (n, 1)))

    o = origins[hit_idx]
    d = dirs[hit_idx]
    t0 = tnear[hit_idx][:, None]
    t1 = tfar[hit_idx][:, None]
    m = hit_idx.size

    if rng is None:
        offs = np.full((m, n_samples), 0.5, np.float32)
    else:
        offs = rng.random((m, n_samples), dtype=np.float32)
    steps = (np.arange(n_samples, dtype=np.float32)[None, :] + offs) / n_samples
    tvals = t0 + steps * (t1 - t0)  # (M, S)
    pts = o[:, None, :] + tvals[:, :, None] * d[:, None, :]
    pts = np.clip(pts, -1.0, 1.0).reshape(m * n_samples, 3)

    rgb, sigma = decode_point(tp, dec, pts)
    rgb = ops.reshape(rgb, (m, n_samples, 3))
    sigma = ops.reshape(sigma, (m, n_samples))

    delta = np.broadcast_to((t1 - t0) / n_samples, (m, n_samples)).astype(np.float32)
    tau = ops.mul(sigma, Tensor(delta))
    tau_csum = ops.cumsum(tau, axis=1)
    trans = ops.exp(ops.neg(ops.sub(tau_csum, tau)))  # exclusive cumsum
    alpha = ops.sub(Tensor(np.ones((m, n_samples), np.float32)),
                    ops.exp(ops.neg(tau)))
    weights = ops.mul(trans, alpha)  # (M, S)

    w3 = ops.reshape(weights, (m, n_samples, 1))
    w3 = ops.concat([w3, w3, w3], axis=2)
    fg = ops.sum_axis(ops.mul(w3, rgb), axis=1)  # (M, 3)

    t_end = ops.exp(ops.neg(ops.sum_axis(tau, axis=1)))  # (M,)
    t3 = ops.reshape(t_end, (m, 1))
    t3 = ops.concat([t3, t3, t3], axis=1)
    bg_arr = np.tile(np.asarray(bg, np.float32), (m, 1))
    color = ops.add(fg, ops.mul(t3, Tensor(bg_arr)))
    if hit_idx.size == n:
        return color
    # rays that miss composite straight to background
    return ops.scatter_image(color, hit_idx, n, 1, bg).reshape(n, 3)


def render_image(tp, dec, cam: Camera, n_samples_per_ray=32, rng=None,
                 bg=WHITE, chunk=8192):
    """Render a full image; differentiable w.r.t. planes and decoder."""
    pos = cam.position
    if np.max(np.abs(pos)) <= 1.0:
        raise RenderError("camera is inside the unit cube")
    origins, dirs = cam.rays()
    n = origins.shape[0]
    pieces = []
    for start in range(0, n, chunk):
        pieces.append(
            render_rays(
                tp, dec, origins[start : start + chunk],
                dirs[start : start + chunk], n_samples_per_ray, rng=rng, bg=bg,
            )
        )
    colors = ops.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
    return colors.reshape(cam.height, cam.width, 3)


# --------------------------------------------------------------- regularizers


def tv_loss(tp: TriPlane) -> Tensor:
    """Anisotropic squared total variation, summed over the three planes:
    mean of squared horizontal plus vertical finite differences."""
    total = None
    for p in tp.planes:
        _, w, h = p.shape
        dh = ops.sub(ops.slice_axis(p, 1, 1, w), ops.slice_axis(p, 1, 0, w - 1))
        dv = ops.sub(ops.slice_axis(p, 2, 1, h), ops.slice_axis(p, 2, 0, h - 1))
        term = ops.add(ops.mean_all(ops.mul(dh, dh)), ops.mean_all(ops.mul(dv, dv)))
        total = term if total is None else ops.add(total, term)
    return total


def l1_loss(tp: TriPlane) -> Tensor:
    """Mean absolute value over all plane entries."""
    total = None
    count = 0
    for p in tp.planes:
        s = ops.sum_all(ops.absolute(p))
        count += p.size
        total = s if total is None else ops.add(total, s)
    return ops.div(total, float(count))


# ---------------------------------------------------------------- persistence


def save_triplane(directory, tp: TriPlane):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, plane in zip(PLANE_NAMES, tp.planes):
        save_tensor(directory / f"{name}.ttns", plane.data)
    sidecar = {
        "channels": int(tp.channels),
        "split": int(tp.split),
        "resolution": int(tp.resolution),
    }
    with open(directory / "triplane.json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return directory


def load_triplane(directory, requires_grad=False) -> TriPlane:
    directory = Path(directory)
    with open(directory / "triplane.json") as f:
        sidecar = json.load(f)
    planes = [
        Tensor(load_tensor(directory / f"{name}.ttns"), requires_grad=requires_grad)
        for name in PLANE_NAMES
    ]
    return TriPlane(*planes, split=sidecar["split"])
