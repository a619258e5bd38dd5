"""Image I/O, range conversion and the derived inputs of the fusion generator.

Images are float ``H x W x 3`` arrays. "Unit" images live in [0, 1]; the
networks consume "signed" images in [-1, 1].
"""

from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from .errors import DegenerateInputError

GAMMA = 2.5
GAMMA_GAIN = 1.0


class DerivedInputs(NamedTuple):
    wb: np.ndarray
    ce: np.ndarray
    gc: np.ndarray


def load_image(path):
    """Read an 8-bit PNG as a unit-range ``H x W x 3`` float64 array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise OSError(f"{path}: expected a PNG file, got {im.format}")
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise OSError(f"{path}: unsupported PNG mode {im.mode} (need 8-bit RGB)")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def to_bytes(image):
    """Quantise a unit-range image to uint8, rounding half up and clamping."""
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(image, path):
    path = Path(path)
    arr = to_bytes(image)
    mode = "L" if arr.ndim == 2 else "RGB"
    try:
        Image.fromarray(arr, mode=mode).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def load_gray(path):
    """Read a single-channel PNG as ``H x W`` values in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def to_signed(image):
    return np.asarray(image) * 2.0 - 1.0


def to_unit(image):
    return (np.asarray(image) + 1.0) / 2.0


def _axis_weights(n_in, n_out):
    # half-pixel centres (align_corners off), edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(image, target_h, target_w):
    """Bilinear resize; returns the input unchanged when the size already matches."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if (h, w) == (target_h, target_w):
        return image.copy()
    if target_h < 1 or target_w < 1:
        raise ValueError("resize targets must be >= 1")
    r0, r1, fr = _axis_weights(h, target_h)
    c0, c1, fc = _axis_weights(w, target_w)
    extra = (None,) * (image.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    fc = fc[(None, slice(None)) + extra]
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bot = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def white_balance(image, clamp=True):
    """Gray-world balance: scale each channel by (mean of channel means) / (channel mean)."""
    image = np.asarray(image, dtype=np.float64)
    means = image.reshape(-1, 3).mean(axis=0)
    if np.any(means <= 0):
        raise DegenerateInputError(f"white balance needs non-zero channel means, got {means}")
    gains = means.mean() / means
    out = image * gains
    return np.clip(out, 0.0, 1.0) if clamp else out


def contrast_enhance(image, clamp=True):
    """``mu * (I - mean)`` with ``mu = 2 * (0.5 + mean)``; mean over all pixels and channels."""
    image = np.asarray(image, dtype=np.float64)
    lum = image.mean()
    out = 2.0 * (0.5 + lum) * (image - lum)
    return np.clip(out, 0.0, 1.0) if clamp else out


def gamma_correct(image, gamma=GAMMA, alpha=GAMMA_GAIN):
    return alpha * np.power(np.asarray(image, dtype=np.float64), gamma)


def derive_inputs(image):
    """White-balanced, contrast-enhanced and gamma-corrected copies, in signed range."""
    image = np.asarray(image, dtype=np.float64)
    return DerivedInputs(
        wb=to_signed(white_balance(image)),
        ce=to_signed(contrast_enhance(image)),
        gc=to_signed(gamma_correct(image)),
    )


def derive_batch(signed_nchw):
    """Derived inputs for a batch of signed NCHW images, as three signed NCHW arrays.

    Channels whose mean is zero (fully black) fall back to the unbalanced
    image for the white-balance input so a degenerate training sample cannot
    abort a run.
    """
    x = np.asarray(signed_nchw, dtype=np.float64)
    wb, ce, gc = [], [], []
    for img in to_unit(x).transpose(0, 2, 3, 1):
        img = np.clip(img, 0.0, 1.0)
        try:
            wb.append(white_balance(img))
        except DegenerateInputError:
            wb.append(img)
        ce.append(contrast_enhance(img))
        gc.append(gamma_correct(img))

    def pack(lst):
        return to_signed(np.stack(lst).transpose(0, 3, 1, 2)).astype(signed_nchw.dtype)

    return DerivedInputs(pack(wb), pack(ce), pack(gc))
