# backend/core/fusion.py
# Canonical feature bank: visibility-frequency-weighted running mean over frames.

import logging
from dataclasses import dataclass

import numpy as np

from core.errors import ConfigError, DataError
from core.raster import VisibilityMap
from core.tensorio import read_bundle, write_bundle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CanonicalState:
    bank: np.ndarray
    vis_count: np.ndarray
    frames_fused: int = 0

    def __post_init__(self):
        bank = np.array(self.bank, dtype=np.float32)
        counts = np.array(self.vis_count, dtype=np.int64)
        if bank.ndim != 2 or counts.shape != (bank.shape[0],):
            raise ConfigError("CanonicalState needs an M x L bank and M counts")
        if np.any(counts < 0):
            raise DataError("Visibility counts must be nonnegative")
        if not np.all(np.isfinite(bank)):
            raise DataError("Canonical bank must be finite")
        if np.any(bank[counts == 0] != 0):
            raise DataError("Canonical rows never observed must be zero")
        bank.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "bank", bank)
        object.__setattr__(self, "vis_count", counts)
        object.__setattr__(self, "frames_fused", int(self.frames_fused))

    @property
    def num_vertices(self):
        return self.bank.shape[0]

    @property
    def channels(self):
        return self.bank.shape[1]

    @property
    def observed(self):
        return self.vis_count > 0


def init_canonical(M, L):
    if M < 1 or L < 1:
        raise ConfigError(f"Canonical dims must be positive, got M={M}, L={L}")
    return CanonicalState(np.zeros((M, L), dtype=np.float32), np.zeros(M, dtype=np.int64), 0)


def _check(state, s_t, v_t):
    rows = s_t.rows
    if rows.shape != state.bank.shape:
        raise ConfigError(f"Feature set {rows.shape} does not match canonical bank {state.bank.shape}")
    vals = np.asarray(v_t.values)
    if vals.shape != (state.num_vertices,):
        raise ConfigError("Visibility map does not match the vertex count")
    if not np.all((vals == 0) | (vals == 1)):
        raise DataError("Per-frame visibility must be binary")
    return rows, vals


def fuse_frame(state, s_t, v_t):
    """bank' = (s_t*v_t + bank*n) / max(v_t + n, 1); n' = n + v_t."""
    rows, v = _check(state, s_t, v_t)
    n = state.vis_count
    num = rows.astype(np.float64) * v[:, None] + state.bank.astype(np.float64) * n[:, None]
    bank = num / np.maximum(v + n, 1)[:, None]
    return CanonicalState(bank.astype(np.float32), n + v, state.frames_fused + 1)


def fuse_batch_oracle(observations):
    observations = list(observations)
    if not observations:
        raise ConfigError("fuse_batch_oracle needs at least one observation")
    first = observations[0][0].rows
    state = init_canonical(*first.shape)
    total = np.zeros(first.shape, dtype=np.float64)
    counts = np.zeros(first.shape[0], dtype=np.int64)
    for s_t, v_t in observations:
        rows, v = _check(state, s_t, v_t)
        total += rows.astype(np.float64) * v[:, None]
        counts += v
    bank = total / np.maximum(counts, 1)[:, None]
    return CanonicalState(bank.astype(np.float32), counts, len(observations))


def coverage(state):
    return float(np.count_nonzero(state.vis_count)) / state.num_vertices


# -------------------------------------------------------------------
# Streaming wrapper (single writer)
# -------------------------------------------------------------------
class CanonicalFusion:
    def __init__(self, num_vertices, channels):
        self.state = init_canonical(num_vertices, channels)
        self.coverage_curve = []

    def push(self, s_t, v_t):
        self.state = fuse_frame(self.state, s_t, v_t)
        self.coverage_curve.append(coverage(self.state))
        logger.debug("fused frame %d, coverage %.4f", s_t.frame_time, self.coverage_curve[-1])
        return self.state

    def accumulated_visibility(self):
        return VisibilityMap(self.state.vis_count, accumulated=True)

    def snapshot(self):
        return self.state


# -------------------------------------------------------------------
# Persistence
# -------------------------------------------------------------------
def save_state(path, state, meta=None):
    info = {"frames_fused": state.frames_fused, **(meta or {})}
    write_bundle(path, {"bank": state.bank, "vis_count": state.vis_count}, info)


def load_state(path):
    tensors, meta = read_bundle(path)
    try:
        state = CanonicalState(tensors["bank"], tensors["vis_count"], meta.get("frames_fused", 0))
    except KeyError as e:
        raise DataError(f"Canonical snapshot {path} is missing tensor {e}") from e
    except ConfigError as e:
        raise DataError(f"Canonical snapshot {path} is malformed: {e}") from e
    return state, meta
