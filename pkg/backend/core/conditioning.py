# backend/core/conditioning.py
# Renderer conditioning: densified canonical context, live-frame state, latent codec.

import logging
from dataclasses import dataclass

import numpy as np

from core.errors import ConfigError, DataError
from core.raster import FeatureImage, interpolate_features, rasterize, render_normals
from core.template import pose_vertices
from core.tensorio import read_bundle, read_tensor, write_bundle

logger = logging.getLogger(__name__)

DOWNSCALE = 8
LATENT_CHANNELS = 4
PREVIEW_GRAY = 0.5


@dataclass(frozen=True)
class Latent:
    data: np.ndarray
    source_resolution: tuple

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        H, W = (int(x) for x in self.source_resolution)
        if data.ndim != 3:
            raise ConfigError("Latent data must be h x w x c")
        if H % DOWNSCALE or W % DOWNSCALE or data.shape[:2] != (H // DOWNSCALE, W // DOWNSCALE):
            raise ConfigError(f"Latent {data.shape[:2]} does not match source resolution {(H, W)}")
        if not np.all(np.isfinite(data)):
            raise ConfigError("Latent values must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "source_resolution", (H, W))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class ConditioningPair:
    context: np.ndarray
    live: np.ndarray
    frame_time: int = 0

    def __post_init__(self):
        ctx = np.asarray(self.context, dtype=np.float64)
        live = np.asarray(self.live, dtype=np.float64)
        if ctx.shape[:-1] != live.shape[:-1]:
            raise ConfigError(f"Context {ctx.shape} and live {live.shape} disagree spatially")
        object.__setattr__(self, "context", ctx)
        object.__setattr__(self, "live", live)

    @property
    def spatial_shape(self):
        return self.context.shape[-3:-1]

    def stacked(self):
        return np.concatenate([self.context, self.live], axis=-1)


@dataclass(frozen=True)
class ChannelMap:
    """Fixed per-pixel linear map C_in -> C_out; None weight means identity."""

    weight: np.ndarray = None

    def __call__(self, x):
        if self.weight is None:
            return x
        if x.shape[-1] != self.weight.shape[0]:
            raise ConfigError(f"Channel map expects {self.weight.shape[0]} channels, got {x.shape[-1]}")
        return x @ self.weight

    @classmethod
    def load(cls, path):
        w = read_tensor(path).astype(np.float64)
        if w.ndim != 2:
            raise ConfigError("Channel map tensor must be C_in x C_out")
        return cls(w)


IDENTITY_MAP = ChannelMap()


# -------------------------------------------------------------------
# Context
# -------------------------------------------------------------------
def densify_context(state, pose, mesh, novel_cam, fill=0.0, posed=None, buffer=None):
    """W_t: bank channels plus an interpolated `observed` indicator in the last channel."""
    if state.num_vertices != mesh.num_vertices:
        raise ConfigError(f"Canonical state has {state.num_vertices} vertices, mesh has {mesh.num_vertices}")
    if posed is None:
        posed = pose_vertices(mesh, pose)
    feats = np.concatenate([state.bank.astype(np.float64), state.observed[:, None].astype(np.float64)], axis=1)
    return interpolate_features(posed, mesh.faces, feats, novel_cam, fill=fill, buffer=buffer)


def context_preview(w_t, gray=PREVIEW_GRAY, background=None):
    """RGB view of W_t: observed colours blended with gray by the observed channel."""
    observed = w_t.data[:, :, -1:]
    rgb = w_t.data[:, :, :3] + gray * (1.0 - observed)
    fill = gray if background is None else background
    return FeatureImage(rgb, w_t.coverage, fill)


def normal_context(mesh, pose, camera, posed=None, buffer=None):
    """No-history context: live normal image plus an all-zero observed channel."""
    if posed is None:
        posed = pose_vertices(mesh, pose)
    if buffer is None:
        buffer = rasterize(posed, mesh.faces, camera)
    normals = render_normals(posed, mesh.faces, camera, buffer=buffer)
    data = np.concatenate([normals.data, np.zeros(normals.data.shape[:2] + (1,))], axis=2)
    return FeatureImage(data, normals.coverage, 0.0)


def _pool(data):
    H, W, C = data.shape
    if H % DOWNSCALE or W % DOWNSCALE:
        raise ConfigError(f"Spatial dims {H}x{W} are not divisible by {DOWNSCALE}")
    return data.reshape(H // DOWNSCALE, DOWNSCALE, W // DOWNSCALE, DOWNSCALE, C).mean(axis=(1, 3))


def encode_context(w_t, channel_map=IDENTITY_MAP):
    return channel_map(_pool(w_t.data))


# -------------------------------------------------------------------
# Latent codec
# -------------------------------------------------------------------
def latent_encode(image):
    pooled = _pool(image.data[:, :, :3])
    data = np.concatenate([pooled, np.zeros(pooled.shape[:2] + (LATENT_CHANNELS - 3,))], axis=2)
    return Latent(data, (image.height, image.width))


def latent_decode(z, background=None):
    rgb = np.repeat(np.repeat(z.data[:, :, :3], DOWNSCALE, axis=0), DOWNSCALE, axis=1)
    fill = 0.0 if background is None else background
    return FeatureImage(rgb, np.ones(rgb.shape[:2], dtype=bool), fill)


def encode_live(image, channel_map=IDENTITY_MAP):
    return channel_map(latent_encode(image).data)


def build_conditioning(w_t, live_image, frame_time=0, context_map=IDENTITY_MAP, live_map=IDENTITY_MAP):
    return ConditioningPair(encode_context(w_t, context_map), encode_live(live_image, live_map), frame_time)


def save_conditioning(path, pair):
    write_bundle(path, {"context": pair.context.astype(np.float32), "live": pair.live.astype(np.float32)},
                 {"frame_time": int(pair.frame_time)})


def load_conditioning(path):
    tensors, meta = read_bundle(path)
    try:
        return ConditioningPair(tensors["context"], tensors["live"], int(meta.get("frame_time", 0)))
    except KeyError as e:
        raise DataError(f"Conditioning bundle {path} is missing tensor {e}") from e
