"""Single-image inference with trained networks (eval-mode batch norm)."""

import numpy as np

from . import asm
from . import tensor as T
from .imageproc import derive_batch, resize, to_signed, to_unit
from .tensor import Tensor


def fit_size(h, w, multiple):
    """Largest ``multiple``-aligned size not above ``(h, w)`` (at least one multiple)."""
    return max(multiple, h // multiple * multiple), max(multiple, w // multiple * multiple)


def _to_batch(unit, dtype):
    return Tensor(to_signed(unit).transpose(2, 0, 1)[None].astype(dtype))


def _to_image(t):
    return np.clip(to_unit(t.data[0].transpose(1, 2, 0).astype(np.float64)), 0.0, 1.0)


def defog_image(nets, image, use_ctr=False):
    """Defog a unit image; output size is the input rounded down to a multiple of 4."""
    h, w = fit_size(*image.shape[:2], 4)
    image = resize(image, h, w)
    dtype = nets.defog.parameters()[0].dtype
    nets.defog.eval()
    nets.ctr.eval()
    with T.no_grad():
        x = _to_batch(image, dtype)
        out = nets.defog(x)
        if use_ctr:
            d = derive_batch(x.data)
            out = nets.ctr(out, Tensor(d.wb), Tensor(d.ce), Tensor(d.gc))
    return _to_image(out)


def sky_probability(ssm, image):
    """Per-pixel sky probability at the input resolution."""
    h0, w0 = image.shape[:2]
    h, w = fit_size(h0, w0, 8)
    ssm.eval()
    dtype = ssm.parameters()[0].dtype
    with T.no_grad():
        _, prob = ssm(_to_batch(resize(image, h, w), dtype))
    return np.clip(resize(prob.data[0, 0].astype(np.float64), h0, w0), 0.0, 1.0)


def segment_sky(ssm, image):
    """``(probability map, airlight rgb, source)`` where source is "sky" or "dark_channel"."""
    prob = sky_probability(ssm, image)
    rgb, source = asm.estimate_airlight(image, prob)
    return prob, rgb, source
