"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Every op builds its output eagerly and, when any input requires a gradient,
attaches a closure mapping the output gradient to input gradients. Calling
:func:`backward` on a scalar replays the reachable ops in exact reverse
execution order (see :class:`GradTape`) and accumulates into leaf ``.grad``.

Only the ops the HAAN networks need are provided.
"""

import contextlib
import itertools

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, GeometryError, NumericError

_seq = itertools.count()
_grad_enabled = True
_checked = False


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked():
    """Raise :class:`NumericError` as soon as an op yields NaN or inf."""
    global _checked
    prev, _checked = _checked, True
    try:
        yield
    finally:
        _checked = prev


def _freed(g):
    raise ContractError("graph was freed by an earlier backward(); pass retain_graph=True to reuse it")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self.op = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None, retain_graph=False):
        backward(self, grad=grad, retain_graph=retain_graph)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, "max", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward_fn, op):
    out = Tensor(data)
    if _checked and not np.all(np.isfinite(out.data)):
        raise NumericError(f"{op} produced non-finite values")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


class GradTape:
    """The ops reachable from a root tensor, ordered by reverse execution."""

    def __init__(self, ops):
        self.ops = ops

    @classmethod
    def from_root(cls, root):
        seen = set()
        ops = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            ops.append(t)
            stack.extend(t._parents)
        ops.sort(key=lambda t: t._seq, reverse=True)
        return cls(ops)

    def __len__(self):
        return len(self.ops)


def backward(loss, grad=None, retain_graph=False):
    """Accumulate d(loss)/d(leaf) into every reachable leaf with ``requires_grad``.

    Repeated calls accumulate; clear with ``zero_grad`` between steps.
    """
    if grad is None and loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    if loss._backward is None:
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return
    tape = GradTape.from_root(loss)
    pending = {id(loss): seed}
    for node in tape.ops:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        in_grads = node._backward(g)
        for parent, pg in zip(node._parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
        if not retain_graph:
            node._backward = _freed
            node._parents = ()


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} against {b.shape}") from None
    return a, b


def add(a, b):
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bw, "div")


def elementwise(a, b, kind):
    """Broadcasting binary op; ``kind`` is one of add, sub, mul, div."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul, "div": div}[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def neg(x):
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x, p):
    p = float(p)
    return _result(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1),), "pow")


def log(x):
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x):
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def clamp(x, lo, hi):
    """Clip to ``[lo, hi]``; gradient passes only where the input is inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x):
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope=0.2):
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x):
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x):
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.2)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------


def reshape(x, shape):
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, idx):
    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(np.array(x.data[idx]), (x,), bw, "getitem")


def concat(tensors, axis=1):
    """Concatenate along ``axis`` (channels by default), preserving order."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise DimensionError(f"concat shape mismatch: {ref} vs {t.shape} on axis {axis}")
    if len(tensors) == 1:
        return tensors[0]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def concat_channels(tensors):
    return concat(tensors, axis=1)


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def reduce(x, kind, axes=None, keepdims=False):
    """Reduce over ``axes`` with sum, mean, max or min. Empty ``axes`` is the identity."""
    if axes is not None and not isinstance(axes, int) and len(axes) == 0:
        return x
    axes = _norm_axes(axes, x.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    if kind in ("sum", "mean"):
        out = x.data.sum(axis=axes, keepdims=keepdims) if kind == "sum" else x.data.mean(axis=axes, keepdims=keepdims)
        count = 1
        for a in axes:
            count *= x.shape[a]
        scale = 1.0 if kind == "sum" else 1.0 / count

        def bw(g):
            return (np.broadcast_to(g.reshape(kept_shape) * scale, x.shape).astype(x.dtype),)

        return _result(np.asarray(out), (x,), bw, kind)

    if kind in ("max", "min"):
        red = np.max if kind == "max" else np.min
        full = red(x.data, axis=axes, keepdims=True)
        hit = x.data == full
        share = hit / hit.sum(axis=axes, keepdims=True)

        def bw(g):
            return (g.reshape(kept_shape) * share,)

        out = full if keepdims else full.reshape([n for i, n in enumerate(x.shape) if i not in axes])
        return _result(np.asarray(out), (x,), bw, kind)

    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------


def _out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of NCHW ``x`` with OIKK ``w`` via im2col + GEMM."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, i, k, k2 = w.shape
    if c != i:
        raise DimensionError(f"conv2d input has {c} channels, weight expects {i}")
    if k != k2:
        raise DimensionError("only square kernels are supported")
    if b is not None and b.shape != (o,):
        raise DimensionError(f"bias shape {b.shape} does not match {o} output channels")
    if stride < 1 or padding < 0:
        raise ContractError("stride must be positive and padding non-negative")
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise GeometryError(f"conv2d output would be {ho}x{wo} for input {h}x{wd}, kernel {k}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2:]
    cols = _kernels.im2col(xp, k, stride, ho, wo)
    wm = w.data.reshape(o, -1)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _kernels.col2im(wm.T @ gm, n, c, hp, wp, k, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=1)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, bw, "conv2d")


def conv_transpose2d(x, w, b=None, stride=2, padding=1, output_padding=0):
    """Transposed convolution (adjoint of :func:`conv2d`); weight is IOKK."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    i, o, k, _ = w.shape
    if c != i:
        raise DimensionError(f"conv_transpose2d input has {c} channels, weight expects {i}")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    if ho <= 0 or wo <= 0:
        raise GeometryError(f"conv_transpose2d output would be {ho}x{wo}")
    hp, wp = ho + 2 * padding, wo + 2 * padding

    xm = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    wm = w.data.reshape(i, -1)
    full = _kernels.col2im(wm.T @ xm, n, o, hp, wp, k, stride, h, wd)
    out = np.ascontiguousarray(full[:, :, padding : padding + ho, padding : padding + wo])
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _kernels.im2col(gp, k, stride, h, wd)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wm @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3))
        if w.requires_grad:
            gw = (xm @ gcols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, bw, "conv_transpose2d")


def batch_norm(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5, update_stats=True):
    """Per-channel normalisation over N, H, W.

    ``running_mean``/``running_var`` are plain arrays updated in place in
    training mode (unbiased variance, torch convention) unless
    ``update_stats`` is false.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm over {c} channels got gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ContractError("batch_norm eps must be positive")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // c
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var, m = running_mean, running_var, None
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * invstd.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = gxhat.sum(axis=axes, keepdims=True)
                s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
                gx = invstd.reshape(bshape) / m * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * invstd.reshape(bshape)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------


def pool(x, kind="avg", kernel=2, stride=2):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kernel, stride, 0), _out_size(w, kernel, stride, 0)
    if ho <= 0 or wo <= 0 or kernel < 1 or stride < 1:
        raise GeometryError(f"pool kernel {kernel} does not fit {h}x{w}")
    if kind == "max":
        out, idx = _kernels.maxpool(x.data, kernel, stride, ho, wo)
        return _result(out, (x,), lambda g: (_kernels.maxpool_backward(g, idx, h, w, kernel, stride),), "max_pool")
    if kind != "avg":
        raise ValueError(f"unknown pool kind {kind!r}")
    flat = x.data.reshape(n * c, 1, h, w)
    cols = _kernels.im2col(flat, kernel, stride, ho, wo)
    out = cols.mean(axis=0).reshape(n, c, ho, wo)
    kk = kernel * kernel

    def bw(g):
        gcols = np.broadcast_to(g.reshape(1, -1) / kk, (kk, g.size))
        return (_kernels.col2im(gcols, n * c, 1, h, w, kernel, stride, ho, wo).reshape(n, c, h, w),)

    return _result(out, (x,), bw, "avg_pool")


def global_pool(x, kind="avg"):
    """Reduce each channel to 1x1 by mean or max."""
    return reduce(x, "mean" if kind == "avg" else kind, axes=(2, 3), keepdims=True)


def upsample_nearest(x, factor=2):
    if factor < 1:
        raise ContractError("upsample factor must be >= 1")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),), "upsample")


def upsample(x, mode="nearest", factor=2, weight=None, bias=None, kernel=None):
    """Nearest replication, or a learned stride-``factor`` transposed conv."""
    if mode == "nearest":
        return upsample_nearest(x, factor)
    if mode != "learned":
        raise ValueError(f"unknown upsample mode {mode!r}")
    k = weight.shape[2] if kernel is None else kernel
    # padding/output_padding chosen so the output is exactly factor * input
    padding = (k - factor + 1) // 2
    output_padding = factor - k + 2 * padding
    return conv_transpose2d(x, weight, bias, stride=factor, padding=padding, output_padding=output_padding)
