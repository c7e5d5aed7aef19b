"""Z-buffered triangle rasterization and differentiable textured rendering.

Visibility and barycentric weights are computed in plain numpy (treated as
constants); gradients flow through the interpolated 3D surface points into
vertex positions and through the texture lookup into texture parameters.
"""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import Tensor, ops
from ..triplane import Camera, WHITE


def camera_basis(cam: Camera):
    pos = cam.position
    fwd = -pos / np.linalg.norm(pos)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    right = np.array([1.0, 0.0, 0.0]) if nr < 1e-8 else right / nr
    cam_up = np.cross(right, fwd)
    return pos, right, cam_up, fwd


def project_points(points, cam: Camera):
    """World points -> (px, py, depth) matching Camera.rays() pixel centers."""
    pos, right, cam_up, fwd = camera_basis(cam)
    d = np.asarray(points, np.float64) - pos
    x = d @ right
    y = d @ cam_up
    z = d @ fwd
    tan_half = math.tan(math.radians(cam.fov_deg) / 2.0)
    aspect = cam.width / cam.height
    with np.errstate(divide="ignore", invalid="ignore"):
        ndc_x = x / z / (tan_half * aspect)
        ndc_y = y / z / tan_half
    px = (ndc_x + 1.0) / 2.0 * cam.width - 0.5
    py = (1.0 - ndc_y) / 2.0 * cam.height - 0.5
    return px, py, z


def _face_candidates(face_ids, xs, ys, zs, x0, y0, span, w, h):
    """Candidate (pixel, depth, bary) records for faces sharing a bbox span.

    xs/ys/zs: (F, 3) projected coords; x0/y0: (F,) bbox corners.
    """
    ox, oy = np.meshgrid(np.arange(span), np.arange(span))
    gx = x0[:, None] + ox.reshape(-1)[None, :]  # (F, S)
    gy = y0[:, None] + oy.reshape(-1)[None, :]
    valid = (gx < w) & (gy < h)
    gxf = gx.astype(np.float64)
    gyf = gy.astype(np.float64)
    d01 = (xs[:, 1:2] - xs[:, 0:1]) * (gyf - ys[:, 0:1]) - (
        ys[:, 1:2] - ys[:, 0:1]
    ) * (gxf - xs[:, 0:1])
    d12 = (xs[:, 2:3] - xs[:, 1:2]) * (gyf - ys[:, 1:2]) - (
        ys[:, 2:3] - ys[:, 1:2]
    ) * (gxf - xs[:, 1:2])
    d20 = (xs[:, 0:1] - xs[:, 2:3]) * (gyf - ys[:, 2:3]) - (
        ys[:, 0:1] - ys[:, 2:3]
    ) * (gxf - xs[:, 2:3])
    area = (
        (xs[:, 1] - xs[:, 0]) * (ys[:, 2] - ys[:, 0])
        - (ys[:, 1] - ys[:, 0]) * (xs[:, 2] - xs[:, 0])
    )[:, None]
    inside = (
        ((d01 >= 0) & (d12 >= 0) & (d20 >= 0))
        | ((d01 <= 0) & (d12 <= 0) & (d20 <= 0))
    ) & valid & (np.abs(area) > 1e-12)
    if not inside.any():
        return None
    fi, pi = np.nonzero(inside)
    l0 = d12[fi, pi] / area[fi, 0]
    l1 = d20[fi, pi] / area[fi, 0]
    l2 = d01[fi, pi] / area[fi, 0]
    w0 = l0 / zs[fi, 0]
    w1 = l1 / zs[fi, 1]
    w2 = l2 / zs[fi, 2]
    norm = w0 + w1 + w2
    w0, w1, w2 = w0 / norm, w1 / norm, w2 / norm
    depth = w0 * zs[fi, 0] + w1 * zs[fi, 1] + w2 * zs[fi, 2]
    pix = gy[fi, pi].astype(np.int64) * w + gx[fi, pi].astype(np.int64)
    return (face_ids[fi], pix, depth, np.stack([w0, w1, w2], axis=1))


def rasterize(vertices, faces, cam: Camera):
    """Returns (face_index (H*W,), barycentric (H*W, 3), covered mask).

    Perspective-correct barycentric weights; nearest surface wins. Faces are
    bucketed by bounding-box size so the whole pass stays vectorized.
    """
    h, w = cam.height, cam.width
    face_idx = np.full(h * w, -1, np.int64)
    bary = np.zeros((h * w, 3), np.float32)
    if len(faces) == 0:
        return face_idx, bary, np.zeros(h * w, bool)
    px, py, pz = project_points(vertices, cam)
    xs, ys, zs = px[faces], py[faces], pz[faces]
    ok = np.all(zs > 1e-6, axis=1)
    x0 = np.maximum(np.floor(xs.min(axis=1)), 0).astype(np.int64)
    x1 = np.minimum(np.ceil(xs.max(axis=1)), w - 1).astype(np.int64)
    y0 = np.maximum(np.floor(ys.min(axis=1)), 0).astype(np.int64)
    y1 = np.minimum(np.ceil(ys.max(axis=1)), h - 1).astype(np.int64)
    ok &= (x0 <= x1) & (y0 <= y1)
    span = np.maximum(x1 - x0, y1 - y0) + 1

    chunks = []
    for bucket in (4, 8, 16, 32, 64, max(h, w)):
        sel = np.nonzero(ok & (span <= bucket))[0]
        ok[sel] = False
        if sel.size == 0:
            continue
        got = _face_candidates(sel, xs[sel], ys[sel], zs[sel],
                               x0[sel], y0[sel], bucket, w, h)
        if got is not None:
            chunks.append(got)
    if not chunks:
        return face_idx, bary, np.zeros(h * w, bool)
    fids = np.concatenate([c[0] for c in chunks])
    pix = np.concatenate([c[1] for c in chunks])
    depth = np.concatenate([c[2] for c in chunks])
    bw = np.concatenate([c[3] for c in chunks])
    # nearest candidate wins per pixel
    order = np.lexsort((depth, pix))
    pix, fids, bw = pix[order], fids[order], bw[order]
    firsts = np.ones(len(pix), bool)
    firsts[1:] = pix[1:] != pix[:-1]
    pix, fids, bw = pix[firsts], fids[firsts], bw[firsts]
    face_idx[pix] = fids
    bary[pix] = bw.astype(np.float32)
    covered = face_idx >= 0
    return face_idx, bary, covered


def render_refined(verts, faces, texture, cam: Camera,
                   background=WHITE) -> Tensor:
    """Rasterize the mesh and shade covered pixels with the hash texture.

    verts may be a Tensor (gradients flow to geometry through the surface
    points) or a plain array. Empty meshes yield the background image.
    """
    h, w = cam.height, cam.width
    verts_t = verts if isinstance(verts, Tensor) else Tensor(
        np.asarray(verts, np.float32))
    if len(faces) == 0:
        return Tensor(np.tile(np.asarray(background, np.float32),
                              (h, w, 1)).copy())
    face_idx, bary, covered = rasterize(verts_t.data, faces, cam)
    pix = np.nonzero(covered)[0]
    if pix.size == 0:
        return Tensor(np.tile(np.asarray(background, np.float32),
                              (h, w, 1)).copy())
    tri = faces[face_idx[pix]]  # (P, 3)
    bw = bary[pix]  # (P, 3)
    corners = []
    for c in range(3):
        vc = ops.gather_rows(verts_t, tri[:, c])
        wc = Tensor(np.repeat(bw[:, c : c + 1], 3, axis=1))
        corners.append(ops.mul(vc, wc))
    surface = ops.add(ops.add(corners[0], corners[1]), corners[2])
    colors = texture.lookup(surface)
    return ops.scatter_image(colors, pix, h, w, background)
