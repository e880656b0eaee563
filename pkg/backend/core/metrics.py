# backend/core/metrics.py
# Image-quality metrics for the stream report: masked PSNR, Laplacian energy, frame differences.

import logging

import numpy as np
from scipy.ndimage import binary_erosion, convolve

from core.errors import DataError

logger = logging.getLogger(__name__)

PEAK = 1.0
LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                      [1.0, -4.0, 1.0],
                      [0.0, 1.0, 0.0]])


def _pixels(image):
    data = image.data if hasattr(image, "data") else image
    data = np.asarray(data, dtype=np.float64)
    return data[:, :, None] if data.ndim == 2 else data


def _mask(mask, shape):
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise DataError(f"Mask {m.shape} does not match image {shape}")
    if not m.any():
        raise DataError("Mask selects no pixels")
    return m


def masked_mse(a, b, mask):
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise DataError(f"Image shapes differ: {pa.shape} vs {pb.shape}")
    m = _mask(mask, pa.shape[:2])
    return float(np.mean((pa[m] - pb[m]) ** 2))


def psnr(a, b, mask, peak=PEAK):
    """Masked PSNR in dB; +inf when the masked pixels agree exactly (saturated)."""
    mse = masked_mse(a, b, mask)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / mse))


def is_saturated(value):
    return bool(np.isinf(value))


def laplacian(image):
    data = _pixels(image)
    return np.stack([convolve(data[:, :, c], LAPLACIAN, mode="nearest") for c in range(data.shape[2])], axis=2)


def high_freq_energy(image, mask):
    """Mean squared Laplacian response over the mask interior (the mask itself if erosion empties it)."""
    data = _pixels(image)
    m = _mask(mask, data.shape[:2])
    interior = binary_erosion(m, structure=np.ones((3, 3), dtype=bool), border_value=0)
    if not interior.any():
        interior = m
    return float(np.mean(laplacian(data)[interior] ** 2))


def frame_diff(prev, cur, mask=None):
    """Mean absolute difference between consecutive frames, over a mask when given."""
    pa, pb = _pixels(prev), _pixels(cur)
    if pa.shape != pb.shape:
        raise DataError(f"Frame shapes differ: {pa.shape} vs {pb.shape}")
    if mask is None:
        return float(np.mean(np.abs(pa - pb)))
    m = _mask(mask, pa.shape[:2])
    return float(np.mean(np.abs(pa[m] - pb[m])))
