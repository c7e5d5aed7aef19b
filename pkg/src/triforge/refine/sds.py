"""Score-distillation refinement over an SDF grid + hash-texture state.

Two phases: latent-space distillation through an image->latent codec, then
pixel-space distillation conditioned on renders from the frozen coarse
texture. Score models are opaque: they receive numpy arrays and never
accumulate gradients.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, Tape, Adam, ops
from ..diffusion import NoiseSchedule, embed_caption
from ..triplane import Camera
from .mesh import Mesh, compact, decimate, mesh_to_sdf, remove_floaters
from .mcubes import marching_cubes
from .raster import render_refined
from .texture import HashGridTexture

# standard prompt decoration, overridable at the CLI
POSITIVE_SUFFIX = ("best quality, extremely detailed, masterpiece, "
                   "high resolution, high quality")
NEGATIVE_PROMPT = ("blur, lowres, cropped, low quality, worst quality, "
                   "ugly, dark, shadow, oversaturated")

T_MIN_FRAC = 0.02
T_MAX_FRAC = 0.98
LR_TEXTURE = 0.01
LR_MLP = 0.001
LR_GEOMETRY = 1e-4
OFFSET_BOUND = 0.5  # half a cell
OFFSET_WEIGHT = 1e-2
EDGE_SMOOTH_WEIGHT = 1e-3
DEFAULT_FACE_BUDGET = 5_000
PAPER_FACE_BUDGET = 50_000


class RefineError(RuntimeError):
    pass


def directional_prompt(prompt, azimuth_deg):
    """Append a view direction by azimuth thirds."""
    az = azimuth_deg % 360.0
    if az < 120.0:
        view = "front view"
    elif az < 240.0:
        view = "side view"
    else:
        view = "back view"
    return f"{prompt}, {view}"


def decorate_prompt(prompt, azimuth_deg=None, positive=POSITIVE_SUFFIX):
    base = directional_prompt(prompt, azimuth_deg) \
        if azimuth_deg is not None else prompt
    return f"{base}, {positive}" if positive else base


# --------------------------------------------------------------------- codecs


class IdentityCodec:
    """Latent == image; useful for oracles and tests."""

    def encode(self, image: Tensor) -> Tensor:
        return image

    def decode(self, latent):
        return np.asarray(latent, np.float32)


class AvgPoolCodec:
    """Parameter-free 4x average-pool encoder / nearest-upsample decoder."""

    def __init__(self, factor=4):
        self.factor = factor

    def encode(self, image: Tensor) -> Tensor:
        chw = ops.transpose(image, (2, 0, 1))
        return ops.avg_pool2d(chw, self.factor)

    def decode(self, latent):
        arr = np.asarray(latent, np.float32)
        up = np.repeat(np.repeat(arr, self.factor, axis=-2),
                       self.factor, axis=-1)
        return np.transpose(up, (1, 2, 0))


# --------------------------------------------------------------- score models


class AnalyticGaussianScore:
    """Exact MMSE noise predictor for data ~ N(m, sigma_d^2 I).

    eps_hat = sqrt(1-ab) * (x_t - sqrt(ab) m) / (ab sigma_d^2 + 1 - ab).
    When no fixed target mean is set, the coarse conditioning image is used
    as the target (super-resolution-style prior).
    """

    mode = "analytic"

    def __init__(self, schedule: NoiseSchedule, m=None, sigma_d=0.0,
                 codec=None):
        self.schedule = schedule
        self.m = None if m is None else np.asarray(m, np.float32)
        self.sigma_d = float(sigma_d)
        self.codec = codec if codec is not None else IdentityCodec()

    def epsilon(self, x_t, t, e=None, x_coarse=None):
        target = self.m if self.m is not None else x_coarse
        if target is None:
            raise RefineError("analytic score needs a target or x_coarse")
        target = np.asarray(target, np.float32).reshape(np.shape(x_t))
        ab = float(self.schedule.alpha_bar(int(t)))
        num = np.asarray(x_t, np.float32) - math.sqrt(ab) * target
        den = ab * self.sigma_d**2 + 1.0 - ab
        return (math.sqrt(1.0 - ab) * num / den).astype(np.float32)


class EchoNoiseScore:
    """Returns exactly the injected noise: the SDS fixed point."""

    mode = "echo"

    def __init__(self, schedule: NoiseSchedule, codec=None):
        self.schedule = schedule
        self.codec = codec if codec is not None else IdentityCodec()
        self._last_noise = None

    def epsilon(self, x_t, t, e=None, x_coarse=None):
        if self._last_noise is None:
            raise RefineError("echo score saw no injected noise")
        return self._last_noise


# ---------------------------------------------------------------- state


@dataclass
class RefineConfig:
    sdf_resolution: int = 32
    latent_iters: int = 800
    pixel_iters: int = 400
    distill_iters: int = 512
    render_size: int = 128
    face_budget: int = DEFAULT_FACE_BUDGET
    n_cameras: int = 8
    camera_radius: float = 2.5
    camera_fov: float = 49.1
    seed: int = 0
    skip_latent: bool = False


class RefineState:
    """Optimizable Theta: SDF values, lattice offsets, hash texture."""

    def __init__(self, sdf, origin, spacing, texture: HashGridTexture,
                 fixed_mesh: Mesh | None = None):
        sdf = np.asarray(sdf, np.float32)
        self.resolution = sdf.shape[0]
        self.sdf = Tensor(sdf.copy(), requires_grad=True)
        self.offsets = Tensor(
            np.zeros((sdf.size, 3), np.float32), requires_grad=True
        )
        self.origin = np.asarray(origin, np.float32)
        self.spacing = float(spacing)
        self.texture = texture
        self.fixed_mesh = fixed_mesh
        self.iteration = 0
        self.opt_tables = Adam(texture.tables, lr=LR_TEXTURE)
        self.opt_head = Adam([texture.w1, texture.b1, texture.w2, texture.b2],
                             lr=LR_MLP)
        self.opt_geom = Adam([self.sdf, self.offsets], lr=LR_GEOMETRY)

    @classmethod
    def from_mesh(cls, mesh: Mesh, resolution=32, texture=None, seed=0):
        sdf, _, (lo, hi) = mesh_to_sdf(mesh, resolution=resolution)
        spacing = float((hi - lo).max()) / (resolution - 1)
        if texture is None:
            texture = HashGridTexture(bounds=(lo, hi), seed=seed)
        return cls(sdf, lo, spacing, texture)

    def get_mesh(self):
        """(verts Tensor in world coords, faces). Differentiable unless a
        fixed mesh was supplied."""
        if self.fixed_mesh is not None:
            return Tensor(self.fixed_mesh.vertices), self.fixed_mesh.faces
        return marching_cubes(self.sdf, offsets=self.offsets,
                              origin=self.origin, spacing=self.spacing)

    def clamp_offsets(self):
        np.clip(self.offsets.data, -OFFSET_BOUND, OFFSET_BOUND,
                out=self.offsets.data)

    def texture_params(self):
        return self.texture.params()

    def geometry_params(self):
        return [self.sdf, self.offsets]

    def all_params(self):
        return self.texture_params() + self.geometry_params()

    def param_snapshot(self):
        return [p.data.copy() for p in self.all_params()]

    def extract_mesh(self) -> Mesh:
        verts, faces = self.get_mesh()
        if len(faces) == 0:
            return Mesh(np.zeros((0, 3), np.float32),
                        np.zeros((0, 3), np.int64))
        colors = self.texture.lookup(verts.data).data
        return compact(Mesh(verts.data, faces, np.clip(colors, 0.0, 1.0)))


def orbit_cameras_for_refine(cfg: RefineConfig):
    cams = []
    for k in range(cfg.n_cameras):
        cams.append(
            Camera(radius=cfg.camera_radius,
                   azimuth_deg=360.0 * k / cfg.n_cameras,
                   elevation_deg=15.0, fov_deg=cfg.camera_fov,
                   width=cfg.render_size, height=cfg.render_size)
        )
    return cams


# ----------------------------------------------------------------- distill


def texture_distill_init(state: RefineState, stage1_renders, iters=512,
                         seed=0, log_every=0):
    """Fit the texture to stage-1 renders with plain MSE; texture only."""
    if len(stage1_renders) < 4:
        raise RefineError("texture distillation needs >= 4 stage-1 views")
    rng = np.random.default_rng(seed)
    history = []
    for it in range(iters):
        cam, target = stage1_renders[int(rng.integers(len(stage1_renders)))]
        with Tape() as tape:
            verts, faces = state.get_mesh()
            img = render_refined(Tensor(verts.data), faces, state.texture, cam)
            err = ops.sub(img, Tensor(np.asarray(target, np.float32)))
            loss = ops.mean_all(ops.mul(err, err))
        value = loss.item()
        if not np.isfinite(value):
            raise RefineError(f"texture distillation diverged at iter {it}")
        history.append(value)
        tape.backward(loss)
        state.opt_tables.step()
        state.opt_head.step()
        if log_every and it % log_every == 0:
            print(f"[distill] iter {it} loss {value:.5f}")
    return history


# -------------------------------------------------------------------- SDS


def _draw_timestep(rng, schedule: NoiseSchedule):
    frac = rng.uniform(T_MIN_FRAC, T_MAX_FRAC)
    return min(max(int(round(frac * schedule.T)), 1), schedule.T)


def _edge_smooth_loss(verts: Tensor, faces):
    e = np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]
    )
    va = ops.gather_rows(verts, e[:, 0])
    vb = ops.gather_rows(verts, e[:, 1])
    d = ops.sub(va, vb)
    return ops.mean_all(ops.mul(d, d))


def _resolve_embedding(e, cam):
    if callable(e):
        e = e(cam)
    if isinstance(e, str):
        e = embed_caption(e)
    return e


def _sds_step(state: RefineState, score, e, schedule: NoiseSchedule, rng,
              cameras, pixel_mode, coarse_texture=None,
              geometry=True):
    """One SDS update. Returns a status string for diagnostics."""
    cam = cameras[int(rng.integers(len(cameras)))]
    e = _resolve_embedding(e, cam)
    t = _draw_timestep(rng, schedule)
    eps_holder = {}
    with Tape() as tape:
        verts, faces = state.get_mesh()
        if len(faces) == 0:
            raise RefineError("mesh vanished during refinement")
        img = render_refined(verts, faces, state.texture, cam)
        z = img if pixel_mode else score.codec.encode(img)
        eps = rng.standard_normal(z.shape).astype(np.float32)
        eps_holder["eps"] = eps
        ab = float(schedule.alpha_bar(t))
        z_t = ops.add(ops.mul(z, math.sqrt(ab)),
                      Tensor(math.sqrt(1.0 - ab) * eps))
        reg = None
        if geometry and state.fixed_mesh is None:
            off2 = ops.mean_all(ops.mul(state.offsets, state.offsets))
            smooth = _edge_smooth_loss(verts, faces)
            reg = ops.add(ops.mul(off2, OFFSET_WEIGHT),
                          ops.mul(smooth, EDGE_SMOOTH_WEIGHT))

    if isinstance(score, EchoNoiseScore):
        score._last_noise = eps
    x_coarse = None
    if pixel_mode and coarse_texture is not None:
        live = state.texture.state_arrays()
        saved = {k: v.copy() for k, v in live.items()}
        state.texture.load_state(coarse_texture)
        x_coarse = render_refined(Tensor(verts.data), faces, state.texture,
                                  cam).data
        state.texture.load_state(saved)
    eps_hat = score.epsilon(z_t.data, t, e, x_coarse=x_coarse)
    weight = float(schedule.posterior_var[t - 1])  # w(t) = sigma_t^2
    seed_grad = (weight * (np.asarray(eps_hat, np.float32) - eps)).astype(
        np.float32
    )
    if not np.all(np.isfinite(seed_grad)):
        warnings.warn("non-finite SDS gradient; step skipped")
        return "skipped"
    if not seed_grad.any():
        # exact fixed point: leave parameters bit-identical (regularizers
        # only engage when a distillation gradient exists)
        state.iteration += 1
        return "fixed_point"
    extra = [(reg, None)] if reg is not None else None
    tape.backward(z_t, seed=seed_grad, extra_roots=extra)
    for p in state.all_params():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            warnings.warn("non-finite parameter gradient; step skipped")
            return "skipped"
    state.opt_tables.step()
    state.opt_head.step()
    if geometry and state.fixed_mesh is None:
        state.opt_geom.step()
        state.clamp_offsets()
    state.iteration += 1
    return "stepped"


def sds_latent_step(state, score, e, schedule, rng, cameras, geometry=True):
    """Latent-space SDS: render -> codec encode -> corrupt -> score."""
    return _sds_step(state, score, e, schedule, rng, cameras,
                     pixel_mode=False, geometry=geometry)


def sds_pixel_step(state, score, e, schedule, rng, cameras,
                   coarse_texture=None, geometry=True):
    """Pixel-space SDS conditioned on the frozen coarse-texture render."""
    return _sds_step(state, score, e, schedule, rng, cameras,
                     pixel_mode=True, coarse_texture=coarse_texture,
                     geometry=geometry)


# ----------------------------------------------------------------- pipeline


def refine_pipeline(mesh: Mesh, stage1_renders, prompt, latent_score,
                    pixel_score, schedule: NoiseSchedule,
                    cfg: RefineConfig | None = None, cameras=None,
                    log_every=0):
    """Full stage-2 refinement. Returns (final Mesh with vertex colors,
    RefineState)."""
    cfg = cfg or RefineConfig()
    rng = np.random.default_rng(cfg.seed)
    stage = "floaters"
    try:
        mesh = remove_floaters(mesh)
        if mesh.is_empty():
            raise RefineError("input mesh is empty")
        stage = "sdf"
        state = RefineState.from_mesh(mesh, resolution=cfg.sdf_resolution,
                                      seed=cfg.seed)
        if cameras is None:
            cameras = orbit_cameras_for_refine(cfg)
        stage = "distill"
        texture_distill_init(state, stage1_renders, iters=cfg.distill_iters,
                             seed=cfg.seed, log_every=log_every)

        def embed_for(cam):
            return embed_caption(decorate_prompt(prompt, cam.azimuth_deg))

        if not cfg.skip_latent:
            stage = "latent_sds"
            for _ in range(cfg.latent_iters):
                sds_latent_step(state, latent_score, embed_for, schedule,
                                rng, cameras)
        stage = "pixel_sds"
        coarse = state.texture.snapshot()
        for _ in range(cfg.pixel_iters):
            sds_pixel_step(state, pixel_score, embed_for, schedule, rng,
                           cameras, coarse_texture=coarse)
        stage = "export"
        final = state.extract_mesh()
        final = decimate(final, cfg.face_budget)
        return final, state
    except RefineError:
        raise
    except Exception as exc:  # tag the failing stage
        raise RefineError(f"refinement failed at stage '{stage}': {exc}") \
            from exc
