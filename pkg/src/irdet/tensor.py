"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is NCHW and float64. Each op attaches a backward closure to its
output; Tensor.backward() walks the recorded tape in reverse topological
order, accumulates gradients into every requires_grad leaf, then frees the
tape. Reductions use a fixed order (plain numpy/BLAS calls) so repeated runs
on one machine are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent; message names the offending dimension."""


_grad_enabled = True


class no_grad:
    """Disable tape recording (teacher passes, plain evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class _Profiler:
    """Tallies floating-point ops actually executed (multiply+add counted)."""

    def __init__(self):
        self.active = False
        self.flops = 0

    def __enter__(self):
        self.active = True
        self.flops = 0
        return self

    def __exit__(self, *exc):
        self.active = False
        return False


profiler = _Profiler()


def _tally(n):
    if profiler.active:
        profiler.flops += int(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; heavy lifting lives in the module-level functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(-self, other)

    def __truediv__(self, s):
        if isinstance(s, Tensor):
            raise TypeError("tensor/tensor division unsupported; multiply by reciprocal")
        return mul(self, 1.0 / float(s))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self):
        """Reverse-mode sweep from a scalar loss; clears the tape afterwards."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._done:
            raise RuntimeError("backward already ran on this tape; run a new forward first")
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            if node._backward is not None:  # interior node: free tape + grad buffer
                node.grad = None if node is not self else node.grad
                node._parents = ()
                node._backward = None
        self._done = True


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _attach(out, parents, backward):
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (the gradient of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    _tally(out.size)

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _attach(out, (a, b), back)


def mul(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        out = Tensor(a.data * s)
        _tally(out.size)
        return _attach(out, (a,), lambda g: _accum(a, g * s))
    out = Tensor(a.data * b.data)
    _tally(out.size)

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _attach(out, (a, b), back)


def maximum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(np.maximum(a.data, b.data))
    pick_a = a.data >= b.data  # ties route to a

    def back(g):
        _accum(a, _unbroadcast(g * pick_a, a.shape))
        _accum(b, _unbroadcast(g * ~pick_a, b.shape))

    return _attach(out, (a, b), back)


def minimum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(np.minimum(a.data, b.data))
    pick_a = a.data <= b.data

    def back(g):
        _accum(a, _unbroadcast(g * pick_a, a.shape))
        _accum(b, _unbroadcast(g * ~pick_a, b.shape))

    return _attach(out, (a, b), back)


def reciprocal(x):
    out = Tensor(1.0 / x.data)
    _tally(x.size)
    return _attach(out, (x,), lambda g: _accum(x, -g * out.data * out.data))


def exp(x):
    out = Tensor(np.exp(x.data))
    _tally(x.size)
    return _attach(out, (x,), lambda g: _accum(x, g * out.data))


def log(x):
    out = Tensor(np.log(x.data))
    _tally(x.size)
    return _attach(out, (x,), lambda g: _accum(x, g / x.data))


def sigmoid(x):
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor(y)
    _tally(4 * x.size)
    return _attach(out, (x,), lambda g: _accum(x, g * y * (1.0 - y)))


def leaky_relu(x, slope=0.1):
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, slope * x.data))
    _tally(x.size)
    return _attach(out, (x,), lambda g: _accum(x, g * np.where(pos, 1.0, slope)))


def logsoftmax(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"logsoftmax axis {axis} out of range for ndim {x.ndim}")
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)
    _tally(4 * x.size)

    def back(g):
        _accum(x, g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))

    return _attach(out, (x,), back)


def bce_with_logits(z, target, pos_weight=None):
    """Per-element binary cross-entropy on logits (numerically stable).

    target is a plain array (labels are constants). pos_weight scales the
    target==1 terms and their gradients.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"bce target shape {t.shape} != logits shape {z.shape}")
    d = z.data
    raw = np.maximum(d, 0.0) - d * t + np.log1p(np.exp(-np.abs(d)))
    w = np.ones_like(raw) if pos_weight is None else np.where(t > 0.5, pos_weight, 1.0)
    out = Tensor(raw * w)
    _tally(6 * z.size)

    def back(g):
        s = np.empty_like(d)
        pos = d >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        s[~pos] = e / (1.0 + e)
        _accum(z, g * w * (s - t))

    return _attach(out, (z,), back)


def tsum(x, axis=None, keepdims=False):
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    _tally(x.size)

    def back(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(gg, x.shape).copy())

    return _attach(out, (x,), back)


def tmean(x, axis=None, keepdims=False):
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    return _attach(out, (x,), lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x, axes):
    out = Tensor(x.data.transpose(axes))
    inv = np.argsort(axes)
    return _attach(out, (x,), lambda g: _accum(x, g.transpose(inv)))


def getitem(x, idx):
    out = Tensor(x.data[idx])

    def back(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        _accum(x, buf)

    return _attach(out, (x,), back)


def concat(tensors, axis):
    if not tensors:
        raise ShapeError("concat of zero tensors")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat axis {axis} out of range for ndim {nd}")
    axis = axis % nd
    base = list(tensors[0].shape)
    for i, t in enumerate(tensors[1:], 1):
        for ax in range(nd):
            if ax != axis and t.shape[ax] != base[ax]:
                raise ShapeError(
                    f"concat operand {i} dimension {ax} is {t.shape[ax]}, expected {base[ax]}"
                )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _attach(out, tuple(tensors), back)


def split(x, axis, parts=2):
    """Split into `parts` equal sections along axis; inverse of concat."""
    n = x.shape[axis]
    if n % parts != 0:
        raise ShapeError(f"cannot split axis {axis} of size {n} into {parts} equal parts")
    step = n // parts
    outs = []
    for i in range(parts):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(i * step, (i + 1) * step)
        outs.append(getitem(x, tuple(sl)))
    return outs


def scatter_channels(x, positions, length):
    """Place x's channel entries (axis 1) at `positions` in a zero-filled axis
    of size `length`. Used after pruning so channel-neighbourhood ops keep the
    original layout.
    """
    if x.shape[1] != len(positions):
        raise ShapeError(f"scatter positions {len(positions)} != channels {x.shape[1]}")
    shp = list(x.shape)
    shp[1] = length
    buf = np.zeros(shp, dtype=np.float64)
    pos = np.asarray(positions, dtype=np.intp)
    buf[:, pos] = x.data
    out = Tensor(buf)
    return _attach(out, (x,), lambda g: _accum(x, g[:, pos]))


# ---------------------------------------------------------------------------
# spatial ops


def adaptive_avg_pool(x):
    """[B,C,H,W] -> [B,C,1,1] spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool wants 4-D input, got {x.ndim}-D")
    B, C, H, W = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
    _tally(x.size)

    def back(g):
        _accum(x, np.broadcast_to(g / (H * W), x.shape).copy())

    return _attach(out, (x,), back)


def upsample_nearest(x, factor):
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return _attach(Tensor(x.data.copy()), (x,), lambda g: _accum(x, g))
    B, C, H, W = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3))

    def back(g):
        _accum(x, g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)))

    return _attach(out, (x,), back)


def _pad2d(a, p):
    if p == 0:
        return a
    B, C, H, W = a.shape
    buf = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=a.dtype)
    buf[:, :, p : p + H, p : p + W] = a
    return buf


def _im2col(xp, k, stride, dilation, Ho, Wo):
    B, C, Hp, Wp = xp.shape
    sB, sC, sH, sW = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, k, k, Ho, Wo),
        strides=(sB, sC, sH * dilation, sW * dilation, sH * stride, sW * stride),
        writeable=False,
    )
    return view


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """2-D cross-correlation over [B,Cin,H,W] with square kernels.

    Output H' = floor((H + 2p - d*(k-1) - 1)/s) + 1. Differentiable w.r.t.
    x, weight, and bias.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [B,Cin,H,W], got {x.ndim}-D")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D [Cout,Cin,k,k], got {weight.ndim}-D")
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"only square kernels supported, got {kh}x{kw}")
    if Cin_w != Cin:
        raise ShapeError(f"conv2d input channels {Cin} != weight input channels {Cin_w}")
    k, s, p, d = kh, int(stride), int(padding), int(dilation)
    span = d * (k - 1) + 1
    Ho = (H + 2 * p - span) // s + 1
    Wo = (W + 2 * p - span) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty: {Ho}x{Wo} from {H}x{W}")

    xp = _pad2d(x.data, p)
    cols = _im2col(xp, k, s, d, Ho, Wo)
    y = np.tensordot(weight.data, cols, axes=([1, 2, 3], [1, 2, 3]))  # [Cout,B,Ho,Wo]
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    _tally(2 * B * Ho * Wo * Cout * Cin * k * k)
    if bias is not None:
        if bias.data.shape != (Cout,):
            raise ShapeError(f"bias shape {bias.data.shape} != ({Cout},)")
        y += bias.data.reshape(1, Cout, 1, 1)
        _tally(B * Cout * Ho * Wo)
    out = Tensor(y)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        if weight.requires_grad:
            _accum(weight, np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            # W^T @ dY scattered back through the k x k taps
            gw = np.tensordot(weight.data, g, axes=([0], [1]))  # [Cin,k,k,B,Ho,Wo]
            dxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    dxp[:, :, u * d : u * d + s * (Ho - 1) + 1 : s,
                        v * d : v * d + s * (Wo - 1) + 1 : s] += gw[:, u, v].transpose(1, 0, 2, 3)
            _accum(x, dxp[:, :, p : p + H, p : p + W] if p else dxp)

    return _attach(out, parents, back)


def conv1d(x, weight, padding=None):
    """Length-preserving 1-D conv over [B,1,C] with a [1,1,k] kernel (k odd)."""
    if x.ndim != 3 or x.shape[1] != 1:
        raise ShapeError(f"conv1d input must be [B,1,C], got {x.shape}")
    if weight.ndim != 3 or weight.shape[:2] != (1, 1):
        raise ShapeError(f"conv1d weight must be [1,1,k], got {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel size must be odd, got {k}")
    p = (k - 1) // 2 if padding is None else int(padding)
    if p != (k - 1) // 2:
        raise ShapeError(f"conv1d padding must be (k-1)/2 = {(k - 1) // 2}, got {p}")
    B, _, C = x.shape
    xp = np.zeros((B, C + 2 * p), dtype=np.float64)
    xp[:, p : p + C] = x.data[:, 0]
    sB, sC = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(B, C, k), strides=(sB, sC, sC), writeable=False
    )
    y = np.tensordot(view, weight.data[0, 0], axes=([2], [0]))  # [B,C]
    _tally(2 * B * C * k)
    out = Tensor(y.reshape(B, 1, C))

    def back(g):
        g2 = g[:, 0]  # [B,C]
        if weight.requires_grad:
            _accum(weight, np.tensordot(g2, view, axes=([0, 1], [0, 1])).reshape(1, 1, k))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for t in range(k):
                dxp[:, t : t + C] += g2 * weight.data[0, 0, t]
            _accum(x, dxp[:, p : p + C].reshape(B, 1, C))

    return _attach(out, parents=(x, weight), backward=back)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BNParams:
    """Per-channel scale/shift with running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.03

    @staticmethod
    def create(channels, eps=1e-5, momentum=0.03):
        if eps <= 0:
            raise ValueError(f"bn eps must be > 0, got {eps}")
        return BNParams(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self):
        return self.gamma.data.shape[0]


def batchnorm(x, bn, training):
    """Normalize [B,C,H,W] per channel, then scale by gamma and shift by beta.

    Training mode uses batch statistics and updates the running stats by EMA;
    eval mode uses the running stats. Differentiable w.r.t. x, gamma, beta.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm input must be 4-D, got {x.ndim}-D")
    B, C, H, W = x.shape
    if bn.channels != C:
        raise ShapeError(f"batchnorm params have {bn.channels} channels, input has {C}")
    n = B * H * W
    if training and n == 0:
        raise ShapeError("batchnorm in training mode needs at least one batch element")
    g = bn.gamma.data.reshape(1, C, 1, 1)
    b = bn.beta.data.reshape(1, C, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + bn.eps)
        xhat = (x.data - mu) * inv
        m = bn.momentum
        bn.running_mean *= 1.0 - m
        bn.running_mean += m * mu.reshape(C)
        unbias = n / (n - 1) if n > 1 else 1.0
        bn.running_var *= 1.0 - m
        bn.running_var += m * unbias * var.reshape(C)
    else:
        inv = 1.0 / np.sqrt(bn.running_var.reshape(1, C, 1, 1) + bn.eps)
        xhat = (x.data - bn.running_mean.reshape(1, C, 1, 1)) * inv
    out = Tensor(g * xhat + b)
    _tally(2 * x.size)

    def back(gr):
        if bn.beta.requires_grad:
            _accum(bn.beta, gr.sum(axis=(0, 2, 3)))
        if bn.gamma.requires_grad:
            _accum(bn.gamma, (gr * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            if training:
                dxhat = gr * g
                dx = (
                    dxhat
                    - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                ) * inv
                _accum(x, dx)
            else:
                _accum(x, gr * g * inv)

    return _attach(out, (x, bn.gamma, bn.beta), back)


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with momentum and optional L2 weight decay on selected tensors."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0, decayed=None):
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._decayed = set(id(p) for p in (decayed if decayed is not None else self.params))
        self._vel = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self._vel):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.weight_decay and id(p) in self._decayed:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v
