"""Synthetic scenes for toy-scale training and the acceptance runs.

Clear scenes are smooth colour fields with blocks and stripes, so they have
both flat regions and edges. By default depth follows the blurred scene
luminance (bright regions read as far away), so the fog density is
predictable from the clear image; a vertical depth ramp is also available.
"""

from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import asm
from .imageproc import load_image, resize, save_image, to_signed


class FogSample(NamedTuple):
    foggy: np.ndarray
    clear: np.ndarray
    transmission: np.ndarray
    airlight: np.ndarray


class SkySample(NamedTuple):
    foggy: np.ndarray
    mask: np.ndarray
    clear: np.ndarray
    airlight: np.ndarray


def _smooth_field(rng, h, w, cells=4):
    """Bilinear upsampling of a coarse random grid."""
    coarse = rng.random((cells, cells, 3))
    return resize(coarse, h, w)


def textured_scene(rng, h, w):
    """Clear unit-range ``h x w x 3`` image."""
    img = 0.15 + 0.6 * _smooth_field(rng, h, w)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    for _ in range(rng.integers(3, 7)):
        y0, x0 = rng.integers(0, h - 2), rng.integers(0, w - 2)
        bh, bw = rng.integers(h // 8, h // 2 + 1), rng.integers(w // 8, w // 2 + 1)
        img[y0 : y0 + bh, x0 : x0 + bw] = rng.random(3) * 0.9 + 0.05
    freq = rng.uniform(6, 18)
    angle = rng.uniform(0, np.pi)
    stripes = 0.08 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    return np.clip(img + stripes[..., None], 0.0, 1.0)


def scene_depth(rng, h, w, near=0.5, far=5.0):
    """Depth increasing from the bottom row (near) to the top row (far), with mild waviness."""
    rows = np.linspace(1.0, 0.0, h)[:, None]
    wave = 0.1 * np.sin(np.linspace(0, rng.uniform(1, 4) * np.pi, w) + rng.uniform(0, 2 * np.pi))[None, :]
    frac = np.clip(rows + wave * (1 - rows), 0.0, 1.0)
    return near + (far - near) * frac


def content_depth(clear, near=0.5, far=5.0, blur=9):
    """Depth read off the scene itself: brighter, low-contrast surroundings are farther.

    Ties depth to appearance so a network that sees only the clear image can
    predict transmission, which position-only depth would not allow.
    """
    lum = clear.mean(axis=2)
    k = np.ones(blur) / blur
    pad = blur // 2
    smooth = np.pad(lum, pad, mode="edge")
    smooth = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, smooth)
    smooth = np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, smooth)
    lo, hi = smooth.min(), smooth.max()
    frac = (smooth - lo) / (hi - lo) if hi > lo else np.zeros_like(smooth)
    return near + (far - near) * frac


def fog_sample(rng, h, w, beta_range=(0.3, 0.6), airlight=None, depth="content"):
    clear = textured_scene(rng, h, w)
    d = content_depth(clear) if depth == "content" else scene_depth(rng, h, w)
    t = asm.transmission_from_depth(d, rng.uniform(*beta_range))
    a = asm.sample_airlight(rng) if airlight is None else np.asarray(airlight, dtype=np.float64)
    return FogSample(asm.synthesize_fog(clear, t, a), clear, t, a)


def fog_set(seed, n, size=64, beta_range=(0.3, 0.6), depth="content"):
    rng = np.random.default_rng(seed)
    return [fog_sample(rng, size, size, beta_range, depth=depth) for _ in range(n)]


def sky_sample(rng, h, w, sky_depth=60.0, beta_range=(0.3, 0.6)):
    """Sky above a wavy horizon over textured ground, fogged; mask is 1 on sky."""
    ground = textured_scene(rng, h, w) * 0.8
    horizon = rng.uniform(0.3, 0.6) * h
    cols = np.arange(w)
    line = horizon + 0.06 * h * np.sin(2 * np.pi * cols / w * rng.uniform(0.5, 2.0) + rng.uniform(0, 2 * np.pi))
    mask = (np.arange(h)[:, None] < line[None, :]).astype(np.float64)
    top = np.array([0.45, 0.6, 0.85]) + rng.uniform(-0.1, 0.1, 3)
    bottom = np.array([0.75, 0.8, 0.9]) + rng.uniform(-0.05, 0.05, 3)
    ramp = np.linspace(0.0, 1.0, h)[:, None, None]
    sky = np.broadcast_to(top * (1 - ramp) + bottom * ramp, (h, w, 3))
    clear = np.clip(np.where(mask[..., None] > 0, sky, ground), 0.0, 1.0)
    depth = scene_depth(rng, h, w, near=0.5, far=6.0)
    depth = np.where(mask > 0, sky_depth, depth)
    t = asm.transmission_from_depth(depth, rng.uniform(*beta_range))
    a = asm.sample_airlight(rng)
    return SkySample(asm.synthesize_fog(clear, t, a), mask, clear, a)


def sky_set(seed, n, size=64):
    rng = np.random.default_rng(seed)
    return [sky_sample(rng, size, size) for _ in range(n)]


# -- disk datasets ---------------------------------------------------------------


def write_fog_dataset(samples, root):
    """``root/foggy/NNN.png`` and ``root/clear/NNN.png``."""
    root = Path(root)
    (root / "foggy").mkdir(parents=True, exist_ok=True)
    (root / "clear").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_image(s.foggy, root / "foggy" / f"{i:03d}.png")
        save_image(s.clear, root / "clear" / f"{i:03d}.png")


def write_sky_dataset(samples, root):
    """``root/{foggy,mask,clear}/NNN.png`` paired by stem."""
    root = Path(root)
    for sub in ("foggy", "mask", "clear"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_image(s.foggy, root / "foggy" / f"{i:03d}.png")
        save_image(s.mask, root / "mask" / f"{i:03d}.png")
        save_image(s.clear, root / "clear" / f"{i:03d}.png")


def list_pngs(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def load_batch(paths, size):
    """Signed float32 ``N x 3 x size x size`` array from PNG paths."""
    imgs = [resize(load_image(p), size, size) for p in paths]
    return to_signed(np.stack(imgs).transpose(0, 3, 1, 2)).astype(np.float32)


def to_nchw(images):
    """Unit ``H x W x 3`` images -> signed float32 NCHW batch."""
    return to_signed(np.stack(images).transpose(0, 3, 1, 2)).astype(np.float32)
