"""Atmospheric scattering model: I = J * t + A * (1 - t).

Images are unit-range ``H x W x 3`` arrays, transmission maps ``H x W`` and
airlight a length-3 RGB vector.
"""

import math

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError
from .imageproc import load_gray

T_FLOOR = 0.05
DARK_WINDOW = 15
TOP_FRACTION = 0.001
SKY_MIN_FRACTION = 0.01
AIRLIGHT_RANGE = (0.7, 1.0)


def transmission_from_depth(depth, beta):
    """``exp(-beta * depth)`` elementwise."""
    depth = np.asarray(depth, dtype=np.float64)
    if beta < 0:
        raise ContractError(f"scattering coefficient must be non-negative, got {beta}")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise ContractError("depth must be finite and non-negative")
    return np.exp(-beta * depth)


def load_depth(path, d_max):
    """Single-channel PNG depth map: byte v maps to ``v / 255 * d_max``."""
    return load_gray(path) * d_max


def _check(image, t, a):
    image = np.asarray(image, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64).reshape(3)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected H x W x 3 image, got {image.shape}")
    if t.shape != image.shape[:2]:
        raise DimensionError(f"transmission {t.shape} does not match image {image.shape[:2]}")
    return image, t[..., None], a


def synthesize_fog(clear, t, a):
    clear, t, a = _check(clear, t, a)
    return clear * t + a * (1.0 - t)


def invert_fog(foggy, t, a, t_floor=T_FLOOR):
    """Recover the clear scene given transmission and airlight, clamped to [0, 1]."""
    if t_floor <= 0:
        raise ContractError("t_floor must be positive")
    foggy, t, a = _check(foggy, t, a)
    t = np.maximum(t, t_floor)
    return np.clip((foggy - a * (1.0 - t)) / t, 0.0, 1.0)


def dark_channel(image, window=DARK_WINDOW):
    image = np.asarray(image, dtype=np.float64)
    return _kernels.min_filter(image.min(axis=2), window)


def atmospheric_light_dark_channel(foggy, top_fraction=TOP_FRACTION, window=DARK_WINDOW):
    """Brightest pixel among the top ``top_fraction`` of the dark channel.

    At least ``ceil(n * top_fraction)`` candidates are taken; pixels tied with
    the last candidate's dark value are included so the result does not
    depend on pixel order. Brightness is the RGB mean, ties broken on RGB.
    """
    foggy = np.asarray(foggy, dtype=np.float64)
    if foggy.size == 0:
        raise ContractError("empty image")
    if not np.isfinite(foggy).all():
        raise ContractError("image contains non-finite values")
    dark = dark_channel(foggy, window).ravel()
    n = max(1, math.ceil(dark.size * top_fraction))
    cutoff = np.sort(dark)[::-1][n - 1]
    pix = foggy.reshape(-1, 3)[dark >= cutoff]
    keys = np.column_stack([pix.mean(axis=1), pix])
    best = np.lexsort(keys.T[::-1])[-1]
    return pix[best].copy()


def estimate_airlight(foggy, sky_mask, threshold=0.5, min_fraction=SKY_MIN_FRACTION):
    """Airlight from the mean colour of the sky region.

    Returns ``(rgb, source)`` where source is ``"sky"`` or ``"dark_channel"``;
    the dark-channel estimate is used when the sky covers less than
    ``min_fraction`` of the image.
    """
    foggy = np.asarray(foggy, dtype=np.float64)
    sky_mask = np.asarray(sky_mask, dtype=np.float64)
    if sky_mask.shape != foggy.shape[:2]:
        raise DimensionError(f"sky mask {sky_mask.shape} does not match image {foggy.shape[:2]}")
    sky = sky_mask > threshold
    if sky.mean() < min_fraction:
        return atmospheric_light_dark_channel(foggy), "dark_channel"
    return foggy[sky].mean(axis=0), "sky"


def atmospheric_light_from_sky(foggy, sky_mask):
    return estimate_airlight(foggy, sky_mask)[0]


def sample_airlight(rng, low=AIRLIGHT_RANGE[0], high=AIRLIGHT_RANGE[1]):
    """Gray airlight drawn uniformly from ``[low, high]``."""
    return np.full(3, rng.uniform(low, high))
