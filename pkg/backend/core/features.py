# backend/core/features.py
# Per-frame feature extraction (Gaussian pyramid + gradients) and vertex sampling.

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.ndimage import correlate1d

from core.errors import ConfigError, DataError
from core.raster import FeatureImage
from core.tensorio import read_tensor

logger = logging.getLogger(__name__)

BLUR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
NUM_LEVELS = 3
GRADIENT_CHANNELS = 2


class FeatureMode(str, Enum):
    PYRAMID = "pyramid"
    RAW_RGB = "raw_rgb"
    EXTERNAL = "external"


@dataclass(frozen=True)
class FeaturePyramid:
    """Sampled groups: the full-resolution base image, then `levels` (1/2, 1/4, 1/8)."""

    base: FeatureImage
    levels: tuple
    mode: FeatureMode
    base_scale: tuple = (1.0, 1.0)

    @property
    def channel_counts(self):
        return tuple(img.channels for img in (self.base, *self.levels))

    @property
    def channels(self):
        return sum(self.channel_counts)

    def groups(self):
        """(image, scale, offset) per group; level coordinate = frame coordinate * scale + offset."""
        sx, sy = self.base_scale
        out = [(self.base, np.array([sx, sy]), np.array([0.5 * sx - 0.5, 0.5 * sy - 0.5]))]
        for k, img in enumerate(self.levels, start=1):
            out.append((img, np.full(2, 0.5 ** k), np.zeros(2)))
        return out


@dataclass(frozen=True)
class VertexFeatureSet:
    rows: np.ndarray
    frame_time: int = 0

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float32)
        if rows.ndim != 2:
            raise ConfigError("VertexFeatureSet rows must be M x L")
        if not np.all(np.isfinite(rows)):
            raise DataError("VertexFeatureSet contains non-finite values")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "frame_time", int(self.frame_time))

    @property
    def num_vertices(self):
        return self.rows.shape[0]

    @property
    def channels(self):
        return self.rows.shape[1]


# -------------------------------------------------------------------
# Pyramid
# -------------------------------------------------------------------
def blur(data):
    """Separable 5-tap binomial blur with clamp-to-edge borders."""
    out = correlate1d(data, BLUR_KERNEL, axis=0, mode="nearest")
    return correlate1d(out, BLUR_KERNEL, axis=1, mode="nearest")


def gradient_channels(rgb):
    """|horizontal| and |vertical| central differences of the channel-mean luminance."""
    lum = rgb.mean(axis=2)
    padded = np.pad(lum, 1, mode="edge")
    gx = np.abs(padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = np.abs(padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return np.stack([gx, gy], axis=2)


def build_pyramid(image, mode=FeatureMode.PYRAMID, levels=NUM_LEVELS):
    mode = FeatureMode(mode)
    if image.channels != 3:
        raise ConfigError(f"build_pyramid expects an RGB image, got {image.channels} channels")
    if mode is FeatureMode.RAW_RGB:
        return FeaturePyramid(image, (), mode)
    if mode is not FeatureMode.PYRAMID:
        raise ConfigError("External features are loaded, not built")

    rgb = image.data
    cov = image.coverage.astype(np.float64)
    out = []
    for _ in range(levels):
        num = np.stack([blur(rgb[:, :, c] * cov) for c in range(3)], axis=2)
        den = blur(cov)
        blurred = np.divide(num, den[:, :, None], out=np.zeros_like(num), where=den[:, :, None] > 0)
        rgb = blurred[::2, ::2]
        cov_mask = den[::2, ::2] > 0
        out.append(FeatureImage(np.concatenate([rgb, gradient_channels(rgb)], axis=2), cov_mask))
        cov = cov_mask.astype(np.float64)
    return FeaturePyramid(image, tuple(out), mode)


def load_external_pyramid(path, frame_width, frame_height):
    """Wrap a precomputed H' x W' x L tensor as a single sampled group."""
    tensor = read_tensor(path).astype(np.float64)
    if tensor.ndim != 3:
        raise DataError(f"External features in {path} must be H x W x L, got rank {tensor.ndim}")
    h, w = tensor.shape[:2]
    return FeaturePyramid(FeatureImage.from_array(tensor), (), FeatureMode.EXTERNAL,
                          (w / frame_width, h / frame_height))


# -------------------------------------------------------------------
# Sampling
# -------------------------------------------------------------------
def bilinear_sample(image, u, v):
    """Coverage-normalized bilinear lookup; uncovered neighbours drop out of the weights."""
    H, W = image.height, image.width
    u = np.clip(u, 0, W - 1)
    v = np.clip(v, 0, H - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = u - u0
    fv = v - v0

    corners = ((v0, u0, (1 - fu) * (1 - fv)), (v0, u1, fu * (1 - fv)),
               (v1, u0, (1 - fu) * fv), (v1, u1, fu * fv))
    acc = np.zeros((len(u), image.channels))
    wsum = np.zeros(len(u))
    for vv, uu, w in corners:
        w = w * image.coverage[vv, uu]
        acc += w[:, None] * image.data[vv, uu]
        wsum += w
    return np.divide(acc, wsum[:, None], out=np.zeros_like(acc), where=wsum[:, None] > 0)


def sample_vertices(pyramid, projected, visibility, frame_time=0):
    M = len(visibility)
    if len(projected.depths) != M:
        raise ConfigError("Projection and visibility disagree on the vertex count")
    rows = np.zeros((M, pyramid.channels), dtype=np.float32)
    idx = np.flatnonzero(visibility.values)
    col = 0
    for img, scale, offset in pyramid.groups():
        uv = projected.pixels[idx] * scale + offset
        rows[idx, col:col + img.channels] = bilinear_sample(img, uv[:, 0], uv[:, 1])
        col += img.channels
    return VertexFeatureSet(rows, frame_time)


def standardize(s_t, visibility):
    """Per-channel zero mean / unit variance over the visible rows; invisible rows stay zero."""
    rows = s_t.rows.astype(np.float64)
    idx = np.flatnonzero(visibility.values)
    if len(idx) == 0:
        return s_t
    vis = rows[idx]
    std = vis.std(axis=0)
    std[std == 0] = 1.0
    out = np.zeros_like(rows)
    out[idx] = (vis - vis.mean(axis=0)) / std
    return VertexFeatureSet(out, s_t.frame_time)
