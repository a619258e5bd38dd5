"""Training objectives: least-squares adversarial terms, cycle consistency,
fixed-feature perceptual distance and their weighted total."""

from dataclasses import astuple, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor

COMPONENTS = ("adv_r", "adv_ctr", "adv_s", "cyc1", "cyc2", "perc")


@dataclass
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 10.0
    lambda4: float = 5.0
    lambda5: float = 5.0
    lambda6: float = 1.0

    def __post_init__(self):
        if any(not np.isfinite(w) or w < 0 for w in astuple(self)):
            raise ConfigError(f"loss weights must be finite and non-negative: {astuple(self)}")

    def as_tuple(self):
        return astuple(self)


def _mse(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return T.reduce(d * d, "mean")


def _mse_to(x, target):
    d = x - target
    return T.reduce(d * d, "mean")


def adversarial_loss(fake, real=None, side="generator"):
    """Least-squares GAN loss on raw logits.

    generator: mean((fake - 1)^2). discriminator: mean((real - 1)^2) + mean(fake^2).
    """
    if side == "generator":
        return _mse_to(fake, 1.0)
    if side == "discriminator":
        if real is None:
            raise ValueError("discriminator side needs real logits")
        return _mse_to(real, 1.0) + _mse_to(fake, 0.0)
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


# the three adversarial terms share one form; the names mark which pair they score
adv_loss_removal = adversarial_loss
adv_loss_ctr = adversarial_loss
adv_loss_synth = adversarial_loss


def cycle_loss_fog(i_rf, i_rcf1, i_rcf2):
    """Foggy input against both of its reconstructions."""
    return _mse(i_rf, i_rcf1) + _mse(i_rf, i_rcf2)


def cycle_loss_fogfree(i_rff, i_rcff, i_rr_sf):
    """Clear input against its plain and fused reconstructions."""
    return _mse(i_rff, i_rcff) + _mse(i_rff, i_rr_sf)


class PerceptualExtractor:
    """Fixed random conv stack standing in for a pretrained feature network.

    Five 3x3 conv + ReLU stages with stride 2 at stages 2 and 4; features are
    tapped after stages 2 and 5. Weights never receive gradients.
    """

    CHANNELS = (16, 32, 64, 64, 64)
    STRIDES = (1, 2, 1, 2, 1)
    TAPS = (2, 5)
    SEED = 0xC0FFEE

    def __init__(self, seed=SEED, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.weights = []
        cin = 3
        for cout in self.CHANNELS:
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3)).astype(dtype)
            self.weights.append(Tensor(w))
            cin = cout

    def features(self, x):
        taps = []
        for i, (w, s) in enumerate(zip(self.weights, self.STRIDES), start=1):
            x = T.relu(T.conv2d(x, w, None, stride=s, padding=1))
            if i in self.TAPS:
                taps.append(x)
        return taps


def perceptual_loss(extractor, pairs):
    """Sum over (original, reconstruction) pairs of mean-squared feature distances at each tap."""
    total = None
    for a, b in pairs:
        if a.shape != b.shape:
            raise DimensionError(f"perceptual pair shape mismatch {a.shape} vs {b.shape}")
        for fa, fb in zip(extractor.features(a), extractor.features(b)):
            term = _mse(fa, fb)
            total = term if total is None else total + term
    return total if total is not None else Tensor(np.zeros(()))


def total_loss(weights, components):
    """Weighted sum of (adv_r, adv_ctr, adv_s, cyc1, cyc2, perc); Tensors or floats."""
    components = list(components)
    if len(components) != 6:
        raise ValueError(f"expected 6 loss components, got {len(components)}")
    out = None
    for name, lam, c in zip(COMPONENTS, weights.as_tuple(), components):
        value = c.data if isinstance(c, Tensor) else np.asarray(c, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"loss component {name} is not finite: {float(value)}")
        term = c * lam if isinstance(c, Tensor) else Tensor(np.asarray(float(c) * lam))
        out = term if out is None else out + term
    return out


BCE_EPS = 1e-7


def binary_cross_entropy(prob, target, eps=BCE_EPS):
    """Mean per-pixel BCE; ``prob`` is clamped to ``[eps, 1 - eps]`` before the logs."""
    if prob.shape != target.shape:
        raise DimensionError(f"shape mismatch {prob.shape} vs {target.shape}")
    p = T.clamp(prob, eps, 1.0 - eps)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=prob.dtype)
    return -T.reduce(T.log(p) * t + T.log(1.0 - p) * (1.0 - t), "mean")
