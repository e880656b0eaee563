# backend/core/raster.py
# Software z-buffer rasterizer, per-vertex visibility and barycentric densification.

import logging
from dataclasses import dataclass

import numpy as np

from core.errors import ConfigError, DataError
from core.projection import project
from core.template import vertex_normals

logger = logging.getLogger(__name__)

EMPTY_FACE = -1
DEFAULT_EPS_DEPTH = 5e-3
# candidate (face, pixel) pairs evaluated per chunk
CHUNK_PAIRS = 1 << 21


# -------------------------------------------------------------------
# Types
# -------------------------------------------------------------------
@dataclass(frozen=True)
class DepthBuffer:
    depth: np.ndarray
    mask: np.ndarray
    face_id: np.ndarray
    barycentrics: np.ndarray

    @property
    def resolution(self):
        H, W = self.depth.shape
        return W, H


@dataclass(frozen=True)
class FeatureImage:
    """H x W x C raster with a coverage mask. Uncovered pixels hold `fill`."""

    data: np.ndarray
    coverage: np.ndarray
    fill: float = 0.0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ConfigError(f"FeatureImage data must be H x W x C, got shape {data.shape}")
        cov = np.array(self.coverage, dtype=bool)
        if cov.shape != data.shape[:2]:
            raise ConfigError("FeatureImage coverage must match the data's spatial shape")
        if not np.all(np.isfinite(data[cov])):
            raise DataError("FeatureImage has non-finite values inside coverage")
        data[~cov] = self.fill
        data.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "coverage", cov)
        object.__setattr__(self, "fill", float(self.fill))

    @classmethod
    def from_array(cls, data, coverage=None, fill=0.0):
        data = np.asarray(data, dtype=np.float64)
        if coverage is None:
            coverage = np.ones(data.shape[:2], dtype=bool)
        return cls(data, coverage, fill)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def select(self, channels, fill=None):
        return FeatureImage(self.data[:, :, channels], self.coverage, self.fill if fill is None else fill)


@dataclass(frozen=True)
class VisibilityMap:
    values: np.ndarray
    accumulated: bool = False

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 1:
            raise ConfigError("VisibilityMap values must be a vector")
        if not self.accumulated and not np.all((raw == 0) | (raw == 1)):
            raise DataError("Per-frame visibility must be binary")
        if np.any(raw < 0):
            raise DataError("Visibility counts must be nonnegative")
        vals = raw.astype(np.int64)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    @property
    def count(self):
        return int(np.count_nonzero(self.values))


# -------------------------------------------------------------------
# Rasterization
# -------------------------------------------------------------------
def _positions(verts):
    return np.asarray(getattr(verts, "positions", verts), dtype=np.float64)


def edge_function(ax, ay, bx, by, px, py):
    """2D cross product (a - p) x (b - p)."""
    return (ax - px) * (by - py) - (ay - py) * (bx - px)


def front_facing(cam_tri):
    """Camera-space triangles (F x 3 x 3) whose normal points toward the camera."""
    a, b, c = cam_tri[:, 0], cam_tri[:, 1], cam_tri[:, 2]
    n = np.cross(b - a, c - a)
    return np.einsum("fk,fk->f", n, a) < 0


def rasterize(verts, faces, camera, cull_backfaces=True, chunk_pairs=CHUNK_PAIRS):
    W, H = camera.resolution
    if W < 1 or H < 1:
        raise ConfigError("Cannot rasterize into a zero-resolution camera")
    pos = _positions(verts)
    faces = np.asarray(faces, dtype=np.int64)
    proj = project(pos, camera)
    cam_tri = camera.world_to_camera(pos)[faces]
    px_tri = proj.pixels[faces]

    ax, ay = px_tri[:, 0, 0], px_tri[:, 0, 1]
    bx, by = px_tri[:, 1, 0], px_tri[:, 1, 1]
    cx, cy = px_tri[:, 2, 0], px_tri[:, 2, 1]
    area2 = edge_function(ax, ay, bx, by, cx, cy)

    valid = np.all(proj.in_front[faces], axis=1) & (np.abs(area2) > 1e-12)
    if cull_backfaces:
        valid &= front_facing(cam_tri)

    xmin = np.clip(np.ceil(px_tri[:, :, 0].min(axis=1)), 0, W - 1).astype(np.int64)
    xmax = np.clip(np.floor(px_tri[:, :, 0].max(axis=1)), -1, W - 1).astype(np.int64)
    ymin = np.clip(np.ceil(px_tri[:, :, 1].min(axis=1)), 0, H - 1).astype(np.int64)
    ymax = np.clip(np.floor(px_tri[:, :, 1].max(axis=1)), -1, H - 1).astype(np.int64)
    valid &= (xmax >= xmin) & (ymax >= ymin)

    ids = np.flatnonzero(valid)
    nx = xmax[ids] - xmin[ids] + 1
    counts = nx * (ymax[ids] - ymin[ids] + 1)

    depth = np.full(H * W, np.inf)
    face_id = np.full(H * W, EMPTY_FACE, dtype=np.int64)
    bary = np.zeros((H * W, 3))

    start = 0
    while start < len(ids):
        stop = start + max(1, int(np.searchsorted(np.cumsum(counts[start:]), chunk_pairs, side="right")))
        sel = slice(start, stop)
        reps = counts[sel]
        f = np.repeat(ids[sel], reps)
        offsets = np.arange(int(reps.sum())) - np.repeat(np.cumsum(reps) - reps, reps)
        fx = np.repeat(nx[sel], reps)
        px = (xmin[f] + offsets % fx).astype(np.float64)
        py = (ymin[f] + offsets // fx).astype(np.float64)

        a2 = area2[f]
        l0 = edge_function(bx[f], by[f], cx[f], cy[f], px, py) / a2
        l1 = edge_function(cx[f], cy[f], ax[f], ay[f], px, py) / a2
        l2 = edge_function(ax[f], ay[f], bx[f], by[f], px, py) / a2
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        f, px, py = f[inside], px[inside], py[inside]
        lam = np.stack([l0[inside], l1[inside], l2[inside]], axis=1)

        w = lam / cam_tri[f, :, 2]
        s = w.sum(axis=1)
        d = 1.0 / s
        b = w / s[:, None]
        pix = py.astype(np.int64) * W + px.astype(np.int64)

        order = np.lexsort((f, d, pix))
        pix, d, f, b = pix[order], d[order], f[order], b[order]
        first = np.concatenate(([True], pix[1:] != pix[:-1]))
        pix, d, f, b = pix[first], d[first], f[first], b[first]

        better = (d < depth[pix]) | ((d == depth[pix]) & (f < face_id[pix]))
        pix = pix[better]
        depth[pix] = d[better]
        face_id[pix] = f[better]
        bary[pix] = b[better]
        start = stop

    mask = face_id != EMPTY_FACE
    return DepthBuffer(depth.reshape(H, W), mask.reshape(H, W), face_id.reshape(H, W), bary.reshape(H, W, 3))


# -------------------------------------------------------------------
# Visibility
# -------------------------------------------------------------------
def _depth_along_ray(faces, fid, projected, idx):
    """Depth of each gathered face where the vertex's own ray crosses it, inf where it misses."""
    tri = faces[fid]
    p = projected.pixels[tri]
    z = projected.depths[tri]
    qx = projected.pixels[idx, 0][:, None]
    qy = projected.pixels[idx, 1][:, None]
    ax, ay = p[..., 0, 0], p[..., 0, 1]
    bx, by = p[..., 1, 0], p[..., 1, 1]
    cx, cy = p[..., 2, 0], p[..., 2, 1]
    area2 = edge_function(ax, ay, bx, by, cx, cy)
    safe = np.where(np.abs(area2) > 1e-12, area2, 1.0)
    l0 = edge_function(bx, by, cx, cy, qx, qy) / safe
    l1 = edge_function(cx, cy, ax, ay, qx, qy) / safe
    l2 = 1.0 - l0 - l1
    hit = (np.abs(area2) > 1e-12) & (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
    inv = l0 / z[..., 0] + l1 / z[..., 1] + l2 / z[..., 2]
    return np.where(hit & (inv > 0), 1.0 / np.where(inv > 0, inv, 1.0), np.inf)


def vertex_visibility(verts, buffer, projected, eps_depth=DEFAULT_EPS_DEPTH, faces=None):
    """Binary V_t: a vertex is visible when its depth is within eps of the minimum
    depth gathered from the 2x2 pixel neighbourhood around its projection.

    Without `faces` every covered neighbour contributes its buffer depth. With the
    mesh faces a neighbour showing a face incident to the vertex contributes the
    vertex's own depth, and any other face contributes its depth along the vertex's
    ray, or nothing when the ray misses it. When no neighbour face crosses the ray
    the buffer depths are used as without `faces`. Uncovered neighbours contribute nothing,
    and at least one neighbour must be covered.
    """
    W, H = buffer.resolution
    M = len(_positions(verts))
    if len(projected.depths) != M:
        raise ConfigError("Projected points do not match the vertex count")
    inside = projected.inside((W, H))
    vis = np.zeros(M, dtype=np.int64)
    idx = np.flatnonzero(inside)
    if len(idx) == 0:
        return VisibilityMap(vis)

    u, v = projected.pixels[idx, 0], projected.pixels[idx, 1]
    u0 = np.clip(np.floor(u), 0, W - 1).astype(np.int64)
    v0 = np.clip(np.floor(v), 0, H - 1).astype(np.int64)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)

    us = np.stack([u0, u1, u0, u1], axis=1)
    vs = np.stack([v0, v0, v1, v1], axis=1)
    cov = buffer.mask[vs, us]
    own_depth = projected.depths[idx]
    raw = np.where(cov, buffer.depth[vs, us], np.inf)
    if faces is None:
        ref = raw.min(axis=1)
    else:
        faces = np.asarray(faces, dtype=np.int64)
        fid = np.where(cov, buffer.face_id[vs, us], 0)
        incident = (faces[fid] == idx[:, None, None]).any(axis=2)
        gathered = np.where(incident, own_depth[:, None], _depth_along_ray(faces, fid, projected, idx))
        gathered = np.where(cov, gathered, np.inf).min(axis=1)
        # no neighbour face crosses the ray: fall back to the buffer
        ref = np.where(np.isfinite(gathered), gathered, raw.min(axis=1))

    ok = cov.any(axis=1) & (own_depth <= ref + eps_depth)
    vis[idx[ok]] = 1
    return VisibilityMap(vis)


# -------------------------------------------------------------------
# Densification
# -------------------------------------------------------------------
def interpolate_features(verts, faces, vertex_features, camera, fill=0.0, buffer=None):
    feats = np.asarray(vertex_features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if len(feats) != len(_positions(verts)):
        raise ConfigError(f"vertex_features has {len(feats)} rows, mesh has {len(_positions(verts))} vertices")
    faces = np.asarray(faces, dtype=np.int64)
    if buffer is None:
        buffer = rasterize(verts, faces, camera)
    W, H = buffer.resolution
    data = np.full((H, W, feats.shape[1]), float(fill))
    m = buffer.mask
    tri = feats[faces[buffer.face_id[m]]]
    b = buffer.barycentrics[m]
    data[m] = tri[:, 0] + b[:, 1, None] * (tri[:, 1] - tri[:, 0]) + b[:, 2, None] * (tri[:, 2] - tri[:, 0])
    return FeatureImage(data, m, fill)


def render_normals(verts, faces, camera, buffer=None):
    """Camera-space normal image mapped to [0, 1]."""
    normals = vertex_normals(_positions(verts), faces) @ camera.rotation.T
    img = interpolate_features(verts, faces, normals, camera, fill=0.0, buffer=buffer)
    n = img.data.copy()
    length = np.linalg.norm(n, axis=2, keepdims=True)
    n = np.divide(n, length, out=np.zeros_like(n), where=length > 0)
    return FeatureImage((n + 1.0) / 2.0, img.coverage, 0.0)
