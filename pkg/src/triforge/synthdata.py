"""Procedural desk-scale dataset: analytic objects, ground-truth renders,
template captions, and a JSONL manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .triplane import Camera, ray_box_intersect

PALETTE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.10, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.75),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.10, 0.80, 0.80),
}

KINDS = ("sphere", "box", "torus", "union-of-2")

ORBIT_RADIUS = 2.5
ORBIT_FOV = 49.1


@dataclass
class ProceduralObject:
    """Analytic SDF object inside the unit cube with flat albedo parts."""

    kind: str
    params: dict
    seed: int
    caption: str

    def sdf(self, pts):
        return _sdf(self.kind, self.params, np.asarray(pts, np.float64))

    def albedo(self, pts):
        pts = np.asarray(pts, np.float64)
        if self.kind != "union-of-2":
            return np.tile(self.params["color"], (pts.shape[0], 1))
        a = _sdf(self.params["a"]["kind"], self.params["a"], pts)
        b = _sdf(self.params["b"]["kind"], self.params["b"], pts)
        out = np.where(
            (a <= b)[:, None],
            np.asarray(self.params["a"]["color"]),
            np.asarray(self.params["b"]["color"]),
        )
        return out

    def is_empty(self):
        return self.kind == "empty"


def _sdf(kind, params, p):
    if kind == "empty":
        return np.full(p.shape[0], 1e3)
    if kind == "sphere":
        c = np.asarray(params.get("center", (0, 0, 0)))
        return np.linalg.norm(p - c, axis=1) - params["radius"]
    if kind == "box":
        c = np.asarray(params.get("center", (0, 0, 0)))
        q = np.abs(p - c) - np.asarray(params["half"])
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside
    if kind == "torus":
        c = np.asarray(params.get("center", (0, 0, 0)))
        q = p - c
        ring = np.sqrt(q[:, 0] ** 2 + q[:, 1] ** 2) - params["major"]
        return np.sqrt(ring**2 + q[:, 2] ** 2) - params["minor"]
    if kind == "union-of-2":
        a = _sdf(params["a"]["kind"], params["a"], p)
        b = _sdf(params["b"]["kind"], params["b"], p)
        return np.minimum(a, b)
    raise ValueError(f"unknown primitive kind {kind!r}")


def _sample_part(rng, color_name):
    kind = rng.choice(["sphere", "box", "torus"])
    color = PALETTE[color_name]
    if kind == "sphere":
        return {"kind": "sphere", "radius": float(rng.uniform(0.25, 0.45)),
                "color": color}
    if kind == "box":
        half = rng.uniform(0.18, 0.38, 3)
        return {"kind": "box", "half": [float(v) for v in half], "color": color}
    major = float(rng.uniform(0.3, 0.45))
    minor = float(rng.uniform(0.1, 0.18))
    return {"kind": "torus", "major": major, "minor": minor, "color": color}


def _shrink(part, factor):
    """Scale a part's size parameters in place (to fit unions in the cube)."""
    if part["kind"] == "sphere":
        part["radius"] *= factor
    elif part["kind"] == "box":
        part["half"] = [h * factor for h in part["half"]]
    else:
        part["major"] *= factor
        part["minor"] *= factor


_KIND_NOUN = {"sphere": "sphere", "box": "box", "torus": "torus"}


def sample_object(seed) -> ProceduralObject:
    """Deterministic procedural object from a seed."""
    rng = np.random.default_rng(seed)
    kind = KINDS[int(rng.integers(0, len(KINDS)))]
    color_names = list(PALETTE)
    cname = color_names[int(rng.integers(0, len(color_names)))]
    if kind == "union-of-2":
        cname2 = color_names[int(rng.integers(0, len(color_names)))]
        a = _sample_part(rng, cname)
        b = _sample_part(rng, cname2)
        # keep both parts inside the unit cube
        offset = rng.uniform(0.2, 0.4)
        a["center"] = [-float(offset), 0.0, 0.0]
        b["center"] = [float(offset), 0.0, 0.0]
        _shrink(a, 0.55)
        _shrink(b, 0.55)
        caption = (
            f"a {cname} {_KIND_NOUN[a['kind']]} joined with "
            f"a {cname2} {_KIND_NOUN[b['kind']]}"
        )
        params = {"a": a, "b": b}
    else:
        params = _sample_part(rng, cname)
        while params["kind"] != kind:
            params = _sample_part(rng, cname)
        caption = f"a {cname} {_KIND_NOUN[kind]}"
    return ProceduralObject(kind=kind, params=params, seed=int(seed),
                            caption=caption)


def make_object(kind, color_name, seed=0, **params) -> ProceduralObject:
    """Explicit constructor used by tests (e.g. a fixed-radius sphere)."""
    params = dict(params)
    params["color"] = PALETTE[color_name]
    caption = f"a {color_name} {_KIND_NOUN.get(kind, kind)}"
    return ProceduralObject(kind=kind, params=params, seed=seed, caption=caption)


# ------------------------------------------------------------------ rendering

_HEADLIGHT_AMBIENT = 0.35
_HEADLIGHT_DIFFUSE = 0.65


def render_gt(obj: ProceduralObject, cam: Camera, max_steps=96, eps=1e-3):
    """Sphere-traced analytic render: flat albedo with a fixed headlight,
    white background. Returns (H, W, 3) float32 in [0, 1]."""
    if np.max(np.abs(cam.position)) <= 1.0:
        raise ValueError("camera must be outside the unit cube")
    origins, dirs = cam.rays()
    o = origins.astype(np.float64)
    d = dirs.astype(np.float64)
    n = o.shape[0]
    img = np.ones((n, 3), np.float64)
    if obj.is_empty():
        return img.reshape(cam.height, cam.width, 3).astype(np.float32)

    tnear, tfar, hit = ray_box_intersect(o, d, lo=-1.1, hi=1.1)
    t = tnear.astype(np.float64)
    active = hit.copy()
    done = np.zeros(n, bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        p = o[idx] + t[idx, None] * d[idx]
        dist = obj.sdf(p)
        conv = dist < eps
        done[idx[conv]] = True
        t[idx] += np.maximum(dist, 0.0) * 0.95 + 1e-5
        active[idx] = ~conv & (t[idx] <= tfar[idx] + 0.2)

    idx = np.nonzero(done)[0]
    if idx.size:
        p = o[idx] + t[idx, None] * d[idx]
        nrm = _sdf_normal(obj, p)
        lam = np.clip(np.sum(nrm * (-d[idx]), axis=1), 0.0, 1.0)
        shade = _HEADLIGHT_AMBIENT + _HEADLIGHT_DIFFUSE * lam
        img[idx] = np.clip(obj.albedo(p) * shade[:, None], 0.0, 1.0)
    return img.reshape(cam.height, cam.width, 3).astype(np.float32)


def _sdf_normal(obj, p, h=1e-4):
    grads = np.empty_like(p)
    for axis in range(3):
        dp = np.zeros(3)
        dp[axis] = h
        grads[:, axis] = obj.sdf(p + dp) - obj.sdf(p - dp)
    norm = np.linalg.norm(grads, axis=1, keepdims=True)
    return grads / np.maximum(norm, 1e-12)


def orbit_cameras(n_views, resolution, rng, radius=ORBIT_RADIUS, fov=ORBIT_FOV):
    """Cameras on the standard orbit: uniform azimuth, elevation in
    [-30, 60] degrees."""
    cams = []
    for k in range(n_views):
        az = 360.0 * k / n_views + float(rng.uniform(0, 360.0 / n_views))
        el = float(rng.uniform(-30.0, 60.0))
        cams.append(
            Camera(radius=radius, azimuth_deg=az, elevation_deg=el,
                   fov_deg=fov, width=resolution, height=resolution)
        )
    return cams


# ------------------------------------------------------------------- manifest


@dataclass
class DatasetManifest:
    path: Path
    records: list

    @property
    def object_ids(self):
        return [r["id"] for r in self.records]


def save_image(path, img):
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path):
    return np.asarray(Image.open(path), np.float32) / 255.0


def build_manifest(n_objects, n_views, resolution, out_dir, seed=0,
                   split="train") -> DatasetManifest:
    """Render a procedural dataset and write images plus a JSONL manifest.

    Deterministic given the seed: re-running produces a byte-identical
    manifest file.
    """
    if n_views < 2 and n_objects > 0:
        raise ValueError("need at least 2 views per object")
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_objects):
        obj_seed = seed * 100003 + i
        obj = sample_object(obj_seed)
        obj_id = f"obj{i:04d}"
        obj_dir = out_dir / obj_id
        obj_dir.mkdir(exist_ok=True)
        rng = np.random.default_rng(obj_seed + 1)
        cams = orbit_cameras(n_views, resolution, rng)
        views = []
        for k, cam in enumerate(cams):
            img = render_gt(obj, cam)
            rel = f"{obj_id}/view{k:02d}.png"
            save_image(out_dir / rel, img)
            views.append({"image": rel, "camera": cam.to_dict()})
        records.append(
            {
                "id": obj_id,
                "seed": obj_seed,
                "split": split,
                "caption": obj.caption,
                "quality_ok": True,
                "views": views,
            }
        )
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return DatasetManifest(path=manifest_path, records=records)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return DatasetManifest(path=path, records=records)


def filter_quality(manifest: DatasetManifest) -> DatasetManifest:
    """Metadata quality-flag filter (stands in for manual data cleaning)."""
    kept = [r for r in manifest.records if r.get("quality_ok", True)]
    return DatasetManifest(path=manifest.path, records=kept)


def manifest_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
