"""The HAAN generators and discriminators.

Channel widths are the full-size widths divided by ``width_scale``
(never below 1). All generators take and return signed NCHW tensors.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, GeometryError
from .nn import BatchNorm2d, Conv2d, ConvBlock, ConvTranspose2d, Module, ResBlock


@dataclass
class ArchConfig:
    width_scale: int = 4
    image_size: int = 64
    resblocks: int = 6
    ssm_resblocks: int = 6
    reduction: int = 4

    def __post_init__(self):
        if self.width_scale < 1:
            raise ConfigError("width_scale must be a positive integer")
        if self.image_size % 4:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 4")

    def ch(self, c):
        return max(1, c // self.width_scale)


def _require_divisible(x, k, who):
    h, w = x.shape[2:]
    if h % k or w % k:
        raise ConfigError(f"{who} needs H and W divisible by {k}, got {h}x{w}")


# ---------------------------------------------------------------------------
# defogging generator
# ---------------------------------------------------------------------------


class DenseBlock(Module):
    """Three 3x3 ConvBlocks, each fed the concatenation of all earlier maps."""

    def __init__(self, cin, growth, rng, dtype):
        super().__init__()
        self.b1 = ConvBlock(cin, growth, 3, rng=rng, dtype=dtype)
        self.b2 = ConvBlock(cin + growth, growth, 3, rng=rng, dtype=dtype)
        self.b3 = ConvBlock(cin + 2 * growth, growth, 3, rng=rng, dtype=dtype)
        self.out_channels = cin + 3 * growth

    def forward(self, x):
        f1 = self.b1(x)
        f2 = self.b2(T.concat_channels([x, f1]))
        f3 = self.b3(T.concat_channels([x, f1, f2]))
        return T.concat_channels([x, f1, f2, f3])


class DenseDown(Module):
    """[pool(x), pool(conv1x1(BN(dense(x))))]: doubles channels, halves H and W."""

    def __init__(self, cin, growth, rng, dtype):
        super().__init__()
        self.dense = DenseBlock(cin, growth, rng, dtype)
        self.bn = BatchNorm2d(self.dense.out_channels, rng=rng, dtype=dtype)
        self.conv = Conv2d(self.dense.out_channels, cin, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        y = self.conv(self.bn(self.dense(x)))
        return T.concat_channels([T.pool(x, "avg", 2, 2), T.pool(y, "avg", 2, 2)])


class UpStage(Module):
    """relu(conv1x1(ConvBlock3([relu(up3(x)), skip])))."""

    def __init__(self, cin, cout, rng, dtype):
        super().__init__()
        self.up = ConvTranspose2d(cin, cout, 3, rng=rng, dtype=dtype)
        self.block = ConvBlock(2 * cout, cout, 3, rng=rng, dtype=dtype)
        self.conv = Conv2d(cout, cout, 1, rng=rng, dtype=dtype)

    def forward(self, x, skip):
        u = T.relu(self.up(x))
        return T.relu(self.conv(self.block(T.concat_channels([u, skip]))))


class DefogGenerator(Module):
    arch_tag = "defog"

    def __init__(self, arch, rng, dtype=np.float32):
        super().__init__()
        c1, c2 = arch.ch(64), arch.ch(128)
        growth = arch.ch(32)
        self.stem = ConvBlock(3, c1, 7, rng=rng, dtype=dtype)
        self.down1 = DenseDown(c1, growth, rng, dtype)
        self.mid = ConvBlock(2 * c1, c2, 3, rng=rng, dtype=dtype)
        self.down2 = DenseDown(c2, growth, rng, dtype)
        self.bottleneck_channels = 2 * c2
        self.res = Module()
        for i in range(arch.resblocks):
            self.res.add(str(i), ResBlock(2 * c2, rng=rng, dtype=dtype))
        self.up1 = UpStage(2 * c2, c2, rng, dtype)
        self.up2 = UpStage(c2, c1, rng, dtype)
        self.head = Conv2d(c1, 3, 7, rng=rng, dtype=dtype)

    def encode(self, x):
        _require_divisible(x, 4, "defog generator")
        fc1 = self.stem(x)
        fc2 = self.mid(self.down1(fc1))
        f = self.down2(fc2)
        for block in self.res._children.values():
            f = block(f)
        return f, fc1, fc2

    def forward(self, x):
        f, fc1, fc2 = self.encode(x)
        d1 = self.up1(f, fc2)
        d2 = self.up2(d1, fc1)
        return T.tanh(self.head(d2))


# ---------------------------------------------------------------------------
# synthesizing generator
# ---------------------------------------------------------------------------


class TransmissionNet(Module):
    """sigmoid(C3(M(M(M(C9([J, max_c J])))))) with M = conv3x3 + ReLU."""

    arch_tag = "transmission"

    def __init__(self, arch, rng, dtype=np.float32):
        super().__init__()
        w = arch.ch(64)
        self.inp = Conv2d(4, w, 9, rng=rng, dtype=dtype)
        self.m1 = Conv2d(w, w, 3, rng=rng, dtype=dtype)
        self.m2 = Conv2d(w, w, 3, rng=rng, dtype=dtype)
        self.m3 = Conv2d(w, w, 3, rng=rng, dtype=dtype)
        self.out = Conv2d(w, 1, 3, rng=rng, dtype=dtype)

    def forward(self, clear):
        x = T.concat_channels([clear, T.reduce(clear, "max", axes=(1,), keepdims=True)])
        f = self.inp(x)
        for m in (self.m1, self.m2, self.m3):
            f = T.relu(m(f))
        return T.sigmoid(self.out(f))


def _airlight_tensor(airlight, n, dtype):
    a = np.asarray(airlight, dtype=dtype)
    if a.ndim == 1:
        a = np.broadcast_to(a, (n, 3))
    if a.shape != (n, 3):
        raise DimensionError(f"airlight must be (3,) or ({n}, 3), got {a.shape}")
    return T.Tensor(np.ascontiguousarray(a).reshape(n, 3, 1, 1))


class SynthGenerator(Module):
    """Fog synthesis with the scattering model inside: T from the network, A from the caller."""

    arch_tag = "synth"

    def __init__(self, arch, rng, dtype=np.float32):
        super().__init__()
        self.trans = TransmissionNet(arch, rng, dtype)

    def forward(self, clear, airlight, return_transmission=False):
        t = self.trans(clear)
        a = _airlight_tensor(airlight, clear.shape[0], clear.dtype)
        unit = (clear + 1.0) * 0.5
        fog = unit * t + a * (1.0 - t)
        out = fog * 2.0 - 1.0
        return (out, t) if return_transmission else out


# ---------------------------------------------------------------------------
# sky segmentation model
# ---------------------------------------------------------------------------


class EnhanceBlock(Module):
    """Three stride-2 4x4 encoders, three learned 4x4 up-samplers, dense fusion head."""

    def __init__(self, arch, rng, dtype):
        super().__init__()
        e1, e2, e3 = arch.ch(64), arch.ch(128), arch.ch(256)
        self.enc1 = Conv2d(3, e1, 4, 2, 1, rng=rng, dtype=dtype)
        self.enc2 = Conv2d(e1, e2, 4, 2, 1, rng=rng, dtype=dtype)
        self.enc3 = Conv2d(e2, e3, 4, 2, 1, rng=rng, dtype=dtype)
        self.dec1 = ConvTranspose2d(e3, e2, 4, rng=rng, dtype=dtype)
        self.dec2 = ConvTranspose2d(2 * e2, e1, 4, rng=rng, dtype=dtype)
        self.dec3 = ConvTranspose2d(2 * e1, e1, 4, rng=rng, dtype=dtype)
        self.fuse = Conv2d(e3 + 2 * e2 + 2 * e1 + e1, e1, 1, rng=rng, dtype=dtype)
        self.out = Conv2d(e1, 3, 3, rng=rng, dtype=dtype)

    def forward(self, x):
        E1 = T.relu(self.enc1(x))
        E2 = T.relu(self.enc2(E1))
        E3 = T.relu(self.enc3(E2))
        D1 = self.dec1(E3)
        s2 = T.concat_channels([D1, E2])
        D2 = self.dec2(s2)
        s1 = T.concat_channels([D2, E1])
        D3 = self.dec3(s1)
        cat = T.concat_channels([T.upsample(E3, "nearest", 8), T.upsample(s2, "nearest", 4), T.upsample(s1, "nearest", 2), D3])
        return T.tanh(self.out(T.relu(self.fuse(cat))))


class SegmentBlock(Module):
    def __init__(self, arch, rng, dtype):
        super().__init__()
        s1, s2, s3 = arch.ch(64), arch.ch(128), arch.ch(256)
        self.enc1 = ConvBlock(3, s1, 7, rng=rng, dtype=dtype)
        self.enc2 = Conv2d(s1, s2, 3, 2, 1, rng=rng, dtype=dtype)
        self.enc3 = Conv2d(s2, s3, 3, 2, 1, rng=rng, dtype=dtype)
        self.res = Module()
        for i in range(arch.ssm_resblocks):
            self.res.add(str(i), ResBlock(s3, rng=rng, dtype=dtype))
        self.up1 = ConvTranspose2d(s3, s2, 3, rng=rng, dtype=dtype)
        self.mix2 = Conv2d(2 * s2, s2, 3, rng=rng, dtype=dtype)
        self.up2 = ConvTranspose2d(s2, s1, 3, rng=rng, dtype=dtype)
        self.mix1 = Conv2d(2 * s1, s1, 3, rng=rng, dtype=dtype)
        self.out = Conv2d(s1, 1, 7, rng=rng, dtype=dtype)

    def forward(self, x):
        E1 = self.enc1(x)
        E2 = T.relu(self.enc2(E1))
        r = T.relu(self.enc3(E2))
        for block in self.res._children.values():
            r = block(r)
        D1 = self.up1(r)
        D2 = self.up2(T.relu(self.mix2(T.concat_channels([D1, E2]))))
        return T.tanh(self.out(T.relu(self.mix1(T.concat_channels([D2, E1])))))


class SkySegmenter(Module):
    """Enhance-then-segment; returns (enhanced image, sky probability in [0, 1])."""

    arch_tag = "ssm"

    def __init__(self, arch, rng, dtype=np.float32):
        super().__init__()
        self.enhance = EnhanceBlock(arch, rng, dtype)
        self.segment = SegmentBlock(arch, rng, dtype)

    def forward(self, x):
        _require_divisible(x, 8, "sky segmentation model")
        enhanced = self.enhance(x)
        o = self.segment(enhanced)
        return enhanced, (o + 1.0) * 0.5


# ---------------------------------------------------------------------------
# holistic attention-fusion generator
# ---------------------------------------------------------------------------


class AttentionFusion(Module):
    arch_tag = "ctr"

    def __init__(self, arch, rng, dtype=np.float32):
        super().__init__()
        hidden = max(1, 12 // arch.reduction)
        self.init = Conv2d(12, 12, 3, rng=rng, dtype=dtype)
        self.fc1 = Conv2d(12, hidden, 1, rng=rng, dtype=dtype)
        self.fc2 = Conv2d(hidden, 12, 1, rng=rng, dtype=dtype)
        self.spatial = Conv2d(2, 1, 3, rng=rng, dtype=dtype)

    def _mlp(self, g):
        return self.fc2(T.relu(self.fc1(g)))

    def channel_weights(self, f_ct):
        f = self.init(f_ct)
        return T.sigmoid(self._mlp(T.global_pool(f, "avg")) + self._mlp(T.global_pool(f, "max")))

    @staticmethod
    def fuse(w_c, f_ct):
        """Weighted sum of the four 3-channel inputs, weights per channel."""
        n, _, h, w = f_ct.shape
        return T.reduce(T.reshape(w_c * f_ct, (n, 4, 3, h, w)), "sum", axes=(1,))

    def spatial_weights(self, fused):
        g = T.concat_channels([T.reduce(fused, "mean", (1,), keepdims=True), T.reduce(fused, "max", (1,), keepdims=True)])
        return T.sigmoid(self.spatial(g))

    def forward(self, defogged, wb, ce, gc, return_maps=False):
        for name, t in (("wb", wb), ("ce", ce), ("gc", gc)):
            if t.shape != defogged.shape:
                raise DimensionError(f"{name} input {t.shape} does not match defogged {defogged.shape}")
        f_ct = T.concat_channels([defogged, ce, gc, wb])
        w_c = self.channel_weights(f_ct)
        fused = self.fuse(w_c, f_ct)
        w_s = self.spatial_weights(fused)
        out = T.clamp(w_s * fused, -1.0, 1.0)
        return (out, w_c, w_s) if return_maps else out


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

DISC_FILTERS = (64, 128, 256, 512, 512)
DISC_STRIDES = (2, 2, 2, 1, 1, 1)
# the third layer pads by 2 so 256 -> 30 and 64 -> 6 (PatchGAN receptive grid)
DISC_PADDING = (1, 1, 2, 1, 1, 1)


class Discriminator(Module):
    """Six 4x4 conv layers emitting a grid of raw real/fake logits."""

    arch_tag = "disc"

    def __init__(self, arch, rng, dtype=np.float32):
        super().__init__()
        widths = [arch.ch(c) for c in DISC_FILTERS] + [1]
        cin = 3
        self.layers = Module()
        for i, (cout, s, p) in enumerate(zip(widths, DISC_STRIDES, DISC_PADDING)):
            layer = self.layers.add(str(i), Module())
            layer.conv = Conv2d(cin, cout, 4, s, p, rng=rng, dtype=dtype)
            if 1 <= i <= 4:
                layer.bn = BatchNorm2d(cout, rng=rng, dtype=dtype)
            cin = cout

    def forward(self, x):
        if disc_output_size(min(x.shape[2:])) < 1:
            raise GeometryError(f"discriminator input {x.shape[2:]} too small (need at least {DISC_MIN_SIZE})")
        layers = list(self.layers._children.values())
        for i, layer in enumerate(layers):
            x = layer.conv(x)
            if i < len(layers) - 1:
                if "bn" in layer._children:
                    x = layer.bn(x)
                x = T.leaky_relu(x, 0.2)
        return x


def disc_output_size(n):
    for s, p in zip(DISC_STRIDES, DISC_PADDING):
        n = (n + 2 * p - 4) // s + 1
        if n < 1:
            return 0
    return n


DISC_MIN_SIZE = next(n for n in range(1, 64) if disc_output_size(n) >= 1)


# ---------------------------------------------------------------------------


class Networks:
    """All HAAN networks built from one seed in a fixed order."""

    names = ("defog", "synth", "ssm", "ctr", "d_ff", "d_f")

    def __init__(self, arch, seed=0, dtype=np.float32):
        self.arch = arch
        rng = np.random.default_rng(seed)
        self.defog = DefogGenerator(arch, rng, dtype)
        self.synth = SynthGenerator(arch, rng, dtype)
        self.ssm = SkySegmenter(arch, rng, dtype)
        self.ctr = AttentionFusion(arch, rng, dtype)
        self.d_ff = Discriminator(arch, rng, dtype)
        self.d_f = Discriminator(arch, rng, dtype)

    def items(self):
        return [(n, getattr(self, n)) for n in self.names]

    def generators(self):
        return [self.defog, self.synth, self.ctr]

    def discriminators(self):
        return [self.d_ff, self.d_f]
