"""Parameter containers and the layer building blocks shared by all networks."""

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds named parameters, buffers and child modules in insertion order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, arr):
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def add(self, name, module):
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_arrays(self):
        """Parameters then buffers as ``{name: ndarray}`` (live references)."""
        out = OrderedDict((n, p.data) for n, p in self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_arrays(self, arrays, strict=True):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [n for n in list(params) + list(buffers) if n not in arrays]
        if strict and missing:
            raise KeyError(f"missing entries: {missing[:5]}")
        for name, p in params.items():
            if name in arrays:
                src = np.asarray(arrays[name])
                if src.shape != p.shape:
                    raise ValueError(f"{name}: shape {src.shape} != {p.shape}")
                p.data[...] = src
        for name, b in buffers.items():
            if name in arrays:
                b[...] = np.asarray(arrays[name])

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=None, rng=None, dtype=np.float32, bias=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(rng.normal(0.0, 0.02, (cout, cin, k, k)).astype(dtype), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Learned 2x upsampling; output is exactly twice the input size."""

    def __init__(self, cin, cout, k, factor=2, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.factor = factor
        self.weight = Tensor(rng.normal(0.0, 0.02, (cin, cout, k, k)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.upsample(x, "learned", self.factor, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, c, rng=None, dtype=np.float32, momentum=0.1, eps=1e-5):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.momentum = momentum
        self.eps = eps
        self.update_stats = True
        self.gamma = Tensor(rng.normal(1.0, 0.02, c).astype(dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))

    def forward(self, x):
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
            update_stats=self.update_stats,
        )


def set_bn_update(module, flag):
    """Toggle running-statistic updates on every BatchNorm2d under ``module``."""
    if isinstance(module, BatchNorm2d):
        module.update_stats = flag
    for child in module._children.values():
        set_bn_update(child, flag)


class ConvBlock(Module):
    """conv -> BN -> ReLU."""

    def __init__(self, cin, cout, k, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, rng=rng, dtype=dtype)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class ResBlock(Module):
    """x + BN(conv3(ConvBlock3(x)))."""

    def __init__(self, c, rng=None, dtype=np.float32):
        super().__init__()
        self.block = ConvBlock(c, c, 3, rng=rng, dtype=dtype)
        self.conv = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(c, rng=rng, dtype=dtype)

    def forward(self, x):
        return x + self.bn(self.conv(self.block(x)))


def set_requires_grad(module, flag):
    """Freeze (False) or unfreeze every parameter under ``module``."""
    for p in module.parameters():
        p.requires_grad = flag
