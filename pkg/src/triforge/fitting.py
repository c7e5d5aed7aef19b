"""Stage-A data preparation: train a shared decoder across objects, then fit
per-object tri-planes with the decoder frozen."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, Tape, Adam, ops
from .triplane import (
    Camera,
    SharedDecoder,
    TriPlane,
    clamp_triplane,
    l1_loss,
    render_image,
    render_rays,
    tv_loss,
)
from . import synthdata


class FitDivergence(RuntimeError):
    pass


@dataclass
class FitConfig:
    tv_weight: float = 2e-3  # lambda_1
    l1_weight: float = 1e-4  # lambda_2
    decoder_lr: float = 2e-3
    plane_lr: float = 3e-2
    steps: int = 3000  # shared-decoder joint training steps
    fit_steps: int = 600  # frozen-decoder per-object steps
    rays_per_batch: int = 1024
    n_samples: int = 32
    eval_samples: int = 64
    channels: int = 16
    resolution: int = 64
    split: int = 8
    hidden: int = 64
    depth: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.tv_weight < 0 or self.l1_weight < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.steps <= 0:
            raise ValueError("steps must be > 0")


@dataclass
class MultiViewSample:
    object_id: str
    views: list  # of (Camera, np.ndarray HxWx3 in [0,1])
    caption: str = ""

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError("need at least 2 views")
        shapes = {v[1].shape for v in self.views}
        if len(shapes) != 1:
            raise ValueError("all views must share a resolution")


def samples_from_manifest(manifest, root=None):
    root = Path(root) if root else Path(manifest.path).parent
    out = []
    for rec in manifest.records:
        views = [
            (Camera.from_dict(v["camera"]), synthdata.load_image(root / v["image"]))
            for v in rec["views"]
        ]
        out.append(MultiViewSample(rec["id"], views, rec.get("caption", "")))
    return out


def psnr(img_a, img_b) -> float:
    """10*log10(1/MSE) with an MSE floor of 1e-10."""
    a = np.asarray(img_a, np.float64)
    b = np.asarray(img_b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = max(float(np.mean((a - b) ** 2)), 1e-10)
    return 10.0 * np.log10(1.0 / mse)


def fit_loss(pred_rgb: Tensor, gt_rgb, tp: TriPlane, tv_weight, l1_weight):
    """Mean squared color error plus weighted TV and L1 plane regularizers."""
    gt = Tensor(np.asarray(gt_rgb, np.float32).reshape(pred_rgb.shape))
    err = ops.sub(pred_rgb, gt)
    loss = ops.mean_all(ops.mul(err, err))
    if tv_weight:
        loss = ops.add(loss, ops.mul(tv_loss(tp), float(tv_weight)))
    if l1_weight:
        loss = ops.add(loss, ops.mul(l1_loss(tp), float(l1_weight)))
    return loss


def _ray_batch(sample: MultiViewSample, rays_per_batch, rng):
    view_idx = int(rng.integers(0, len(sample.views)))
    cam, img = sample.views[view_idx]
    h, w = img.shape[:2]
    origins, dirs = cam.rays()
    pix = rng.integers(0, h * w, rays_per_batch)
    gt = img.reshape(h * w, 3)[pix]
    return origins[pix], dirs[pix], gt


def _train_step(tp, dec, sample, cfg, rng, opt_dec, opt_planes):
    origins, dirs, gt = _ray_batch(sample, cfg.rays_per_batch, rng)
    with Tape() as tape:
        pred = render_rays(tp, dec, origins, dirs, cfg.n_samples, rng=rng)
        loss = fit_loss(pred, gt, tp, cfg.tv_weight, cfg.l1_weight)
    value = loss.item()
    if not np.isfinite(value):
        raise FitDivergence(f"loss became non-finite ({value}) while fitting")
    tape.backward(loss)
    if opt_dec is not None:
        opt_dec.step()
    opt_planes.step()
    clamp_triplane(tp)
    return value


def train_shared_decoder(dataset, cfg: FitConfig, decoder_cls=SharedDecoder):
    """Jointly optimize one decoder and one tri-plane per object.

    Returns (decoder, {object_id: TriPlane}, loss_history).
    """
    if len(dataset) < 2:
        raise ValueError("shared-decoder training needs >= 2 objects")
    rng = np.random.default_rng(cfg.seed)
    proto = TriPlane.zeros(cfg.channels, cfg.resolution, cfg.split)
    dec = decoder_cls.for_triplane(proto, hidden=cfg.hidden, depth=cfg.depth,
                                   rng=rng)
    planes = {
        s.object_id: TriPlane.zeros(cfg.channels, cfg.resolution, cfg.split,
                                    requires_grad=True)
        for s in dataset
    }
    opt_dec = Adam(dec.params(), lr=cfg.decoder_lr)
    opt_planes = {
        oid: Adam(tp.params(), lr=cfg.plane_lr) for oid, tp in planes.items()
    }
    history = []
    for _step in range(cfg.steps):
        sample = dataset[int(rng.integers(0, len(dataset)))]
        tp = planes[sample.object_id]
        value = _train_step(tp, dec, sample, cfg, rng, opt_dec,
                            opt_planes[sample.object_id])
        history.append(value)
    return dec, planes, history


def fit_object(sample: MultiViewSample, dec, cfg: FitConfig, init=None,
               steps=None) -> TriPlane:
    """Fit a tri-plane for one object with the decoder frozen."""
    rng = np.random.default_rng(cfg.seed ^ hash(sample.object_id) & 0x7FFFFFFF)
    if init is not None:
        tp = init.copy(requires_grad=True)
    else:
        tp = TriPlane.zeros(cfg.channels, cfg.resolution, cfg.split,
                            requires_grad=True)
    steps = cfg.fit_steps if steps is None else steps
    opt_planes = Adam(tp.params(), lr=cfg.plane_lr)
    for _ in range(steps):
        _train_step(tp, dec, sample, cfg, rng, None, opt_planes)
    clamp_triplane(tp)
    return tp


def eval_psnr(tp: TriPlane, dec, sample: MultiViewSample, cfg: FitConfig,
              max_views=4) -> float:
    """Mean PSNR of deterministic full renders against ground truth."""
    vals = []
    for cam, gt in sample.views[:max_views]:
        img = render_image(tp, dec, cam, cfg.eval_samples, rng=None)
        vals.append(psnr(img.data, gt))
    return float(np.mean(vals))
