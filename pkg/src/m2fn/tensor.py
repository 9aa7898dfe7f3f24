"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the primitive set the fusion network needs: convolution,
batch normalization, affine layers, relu/tanh, last-dim softmax, max
pooling, element-wise arithmetic, concatenation, spatial replication,
reductions, and a finite-difference gradient checker.

Conventions:
  - row-major numpy storage, float64 by default (tests run 64-bit,
    training may run 32-bit)
  - no implicit broadcasting between tensors; the one sanctioned
    broadcast is `replicate_spatial`, which copies a [N, C] tensor
    along trailing spatial dims
  - every primitive validates shapes up front and checks its output for
    NaN/Inf (a non-finite value raises immediately, never propagates)
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(TensorError):
    """Operand shapes are incompatible; message names the offending axes."""


class NumericError(TensorError):
    """A primitive produced NaN or Inf."""


class TapeError(TensorError):
    """Backward-pass misuse, e.g. running backward twice without reset."""


class GradCheckError(TensorError):
    """grad_check contract violation (non-scalar objective, wrong dtype)."""


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite value in output")


class Tensor:
    """A dense N-d value, optionally tracked for reverse-mode autodiff.

    Tensors produced by primitives hold references to their parents and
    a closure that propagates gradients; `backward()` on a root replays
    those closures in reverse topological order. A root's tape can run
    only once; build a fresh graph (or call from a new root) to rerun.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents",
                 "_backward_fn", "_backward_ran")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf",
                 parents=()):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._backward_fn = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar; delegates to the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """A leaf tensor sharing this tensor's values, cut from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        _check_finite(g, f"backward({self.op})")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None):
        """Run the tape rooted at this tensor, accumulating into `.grad`."""
        if self._backward_ran:
            raise TapeError("backward already ran for this root; rebuild the graph to rerun")
        self._backward_ran = True
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.shape:
                raise ShapeError(f"seed gradient shape {seed.shape} != tensor shape {self.shape}")
        self._accumulate_root(seed)
        for node in reversed(ComputationTape(self).nodes):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def _accumulate_root(self, seed):
        # the root participates in the sweep even when it is not a leaf
        if self.grad is None:
            self.grad = np.array(seed, copy=True)
        else:
            self.grad += seed


class ComputationTape:
    """Ordered record of the primitives reachable from a root tensor.

    `nodes` lists tensors in forward (topological) order; the backward
    sweep visits them reversed, which guarantees every node's gradient
    is complete before its closure fires.
    """

    def __init__(self, root):
        nodes = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.nodes = nodes


def tensor(data, requires_grad=False, dtype=None):
    """Create a leaf tensor (float64 unless `dtype` says otherwise)."""
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _result(data, op, parents, backward):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 op=op, parents=parents)
    _check_finite(out.data, op)
    if out.requires_grad:
        out._backward_fn = backward
    return out


def _as_pair(a, b, op):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError(f"{op}: both operands must be Tensors (use scale() for scalars)")
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


# ---------------------------------------------------------------------------
# element-wise primitives

def add(a, b):
    a, b = _as_pair(a, b, "add")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _result(a.data + b.data, "add", (a, b), backward)


def sub(a, b):
    a, b = _as_pair(a, b, "sub")

    def backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _result(a.data - b.data, "sub", (a, b), backward)


def mul(a, b):
    a, b = _as_pair(a, b, "mul")

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _result(a.data * b.data, "mul", (a, b), backward)


def neg(a):
    def backward(g):
        a._accumulate(-g)

    return _result(-a.data, "neg", (a,), backward)


def scale(a, c):
    """Multiply by a python scalar."""
    c = float(c)

    def backward(g):
        a._accumulate(g * c)

    return _result(a.data * c, "scale", (a,), backward)


def add_scalar(a, c):
    c = float(c)

    def backward(g):
        a._accumulate(g)

    return _result(a.data + c, "add_scalar", (a,), backward)


def square(a):
    def backward(g):
        a._accumulate(g * (2.0 * a.data))

    return _result(a.data * a.data, "square", (a,), backward)


def log(a):
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")

    def backward(g):
        a._accumulate(g / a.data)

    return _result(np.log(a.data), "log", (a,), backward)


def sqrt(a):
    if np.any(a.data < 0):
        raise NumericError("sqrt: negative input")
    y = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * (0.5 / np.maximum(y, np.finfo(y.dtype).tiny)))

    return _result(y, "sqrt", (a,), backward)


def absolute(a):
    # subgradient 0 at exactly 0
    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _result(np.abs(a.data), "abs", (a,), backward)


def maximum_scalar(a, c):
    """Element-wise max(x, c); gradient passes where x > c."""
    c = float(c)
    mask = a.data > c

    def backward(g):
        a._accumulate(g * mask)

    return _result(np.maximum(a.data, c), "maximum_scalar", (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _result(np.maximum(a.data, 0), "relu", (a,), backward)


def tanh(a):
    y = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - y * y))

    return _result(y, "tanh", (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape

    def backward(g):
        a._accumulate(g.reshape(old))

    return _result(a.data.reshape(shape), "reshape", (a,), backward)


def moveaxis(a, source, destination):
    def backward(g):
        a._accumulate(np.moveaxis(g, destination, source))

    return _result(np.ascontiguousarray(np.moveaxis(a.data, source, destination)),
                   "moveaxis", (a,), backward)


def concat(parts, axis):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: empty input list")
    ref = parts[0].shape
    for i, p in enumerate(parts[1:], start=1):
        if p.ndim != len(ref):
            raise ShapeError(f"concat: operand {i} has ndim {p.ndim}, expected {len(ref)}")
        for ax in range(p.ndim):
            if ax != axis and p.shape[ax] != ref[ax]:
                raise ShapeError(f"concat: operand {i} differs on axis {ax} "
                                 f"({p.shape[ax]} vs {ref[ax]})")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p._accumulate(g[tuple(idx)])

    return _result(np.concatenate([p.data for p in parts], axis=axis),
                   "concat", tuple(parts), backward)


def replicate_spatial(a, h, w):
    """Copy a [N, C] tensor to [N, C, h, w] (the one sanctioned broadcast)."""
    if a.ndim != 2:
        raise ShapeError(f"replicate_spatial: expected [N, C] input, got {a.shape}")
    n, c = a.shape
    data = np.broadcast_to(a.data[:, :, None, None], (n, c, h, w)).copy()

    def backward(g):
        a._accumulate(g.sum(axis=(2, 3)))

    return _result(data, "replicate_spatial", (a,), backward)


def replicate_rows(a, n):
    """Copy a [C] vector to [n, C] (per-sample view of shared parameters)."""
    if a.ndim != 1:
        raise ShapeError(f"replicate_rows: expected 1-D input, got {a.shape}")
    data = np.broadcast_to(a.data[None, :], (n, a.shape[0])).copy()

    def backward(g):
        a._accumulate(g.sum(axis=0))

    return _result(data, "replicate_rows", (a,), backward)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(out, "reduce_sum", (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape) / count)

    return _result(out, "reduce_mean", (a,), backward)


def cumsum_lastdim(a):
    def backward(g):
        a._accumulate(np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1))

    return _result(np.cumsum(a.data, axis=-1), "cumsum_lastdim", (a,), backward)


# ---------------------------------------------------------------------------
# dense / softmax

def dense_affine(x, weight, bias):
    """y = x @ weight.T + bias, for x [N, Din], weight [Dout, Din], bias [Dout]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense_affine: expected 2-D x and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense_affine: inner dims differ, x axis 1 is {x.shape[1]} "
                         f"but weight axis 1 is {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense_affine: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        x._accumulate(g @ weight.data)
        weight._accumulate(g.T @ x.data)
        bias._accumulate(g.sum(axis=0))

    return _result(out, "dense_affine", (x, weight, bias), backward)


def softmax_lastdim(x):
    """Numerically stable softmax along the last axis."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(y * (g - dot))

    return _result(y, "softmax_lastdim", (x,), backward)


# ---------------------------------------------------------------------------
# convolution / pooling

def _im2col(data, kh, kw, stride, padding):
    n, c, h, w = data.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        data = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s = data.strides
    windows = np.lib.stride_tricks.as_strided(
        data, (n, c, kh, kw, ho, wo),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride))
    return windows.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols, x_shape, kh, kw, stride, padding):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    dx = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x, kernel, bias, stride=1, padding=0):
    """2-D cross-correlation over [N, Cin, H, W] with kernel [Cout, Cin, kh, kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input channel axis is {cin} but kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input "
                         f"{h + 2 * padding}x{w + 2 * padding} on spatial axes 2, 3")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernel.data.reshape(cout, -1)
    out = (kmat @ cols).reshape(n, cout, ho, wo) + bias.data[None, :, None, None]

    def backward(g):
        gm = g.reshape(n, cout, ho * wo)
        x._accumulate(_col2im(np.einsum("ok,nop->nkp", kmat, gm, optimize=True),
                              x.shape, kh, kw, stride, padding))
        kernel._accumulate(np.einsum("nop,nkp->ok", gm, cols, optimize=True)
                           .reshape(kernel.shape))
        bias._accumulate(g.sum(axis=(0, 2, 3)))

    return _result(out, "conv2d", (x, kernel, bias), backward)


def max_pool2d(x, kernel=2, stride=None):
    """Max pooling over [N, C, H, W]; trailing rows/cols that do not fill a
    window are dropped. Ties send the gradient to the first maximal position."""
    if stride is None:
        stride = kernel
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"max_pool2d: window {kernel} exceeds spatial dims {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    s = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data, (n, c, ho, wo, kernel, kernel),
        (s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]))
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros_like(flat)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dwin = dwin.reshape(n, c, ho, wo, kernel, kernel)
        dx = np.zeros_like(x.data)
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dwin[:, :, :, :, i, j]
        x._accumulate(dx)

    return _result(out, "max_pool2d", (x,), backward)


def attention_pool(features, attn):
    """Weighted spatial sum: pooled[n, c] = sum_p attn[n, p] * features[n, c, p].

    `features` is [N, C, H, W], `attn` is [N, H*W].
    """
    if features.ndim != 4:
        raise ShapeError(f"attention_pool: expected 4-D features, got {features.shape}")
    n, c, h, w = features.shape
    if attn.shape != (n, h * w):
        raise ShapeError(f"attention_pool: attn shape {attn.shape} != ({n}, {h * w})")
    feat = features.data.reshape(n, c, h * w)
    out = np.einsum("ncp,np->nc", feat, attn.data, optimize=True)

    def backward(g):
        features._accumulate((g[:, :, None] * attn.data[:, None, :]).reshape(features.shape))
        attn._accumulate(np.einsum("ncp,nc->np", feat, g, optimize=True))

    return _result(out, "attention_pool", (features, attn), backward)


# ---------------------------------------------------------------------------
# batch normalization

class RunningStats:
    """Per-channel EMA of batch mean/variance, consumed in eval mode."""

    def __init__(self, channels, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, batch_mean, batch_var, momentum):
        self.mean = (1.0 - momentum) * self.mean + momentum * batch_mean
        self.var = (1.0 - momentum) * self.var + momentum * batch_var


def bn_normalize(x, eps=1e-5, training=True, running=None, momentum=0.1):
    """Per-channel standardization of [N, C, ...] without the affine part.

    Train mode uses batch statistics and updates `running`; eval mode
    standardizes with the running statistics.
    """
    if x.ndim < 2:
        raise ShapeError(f"bn_normalize: expected [N, C, ...] input, got {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    expand = tuple(None if ax in axes else slice(None) for ax in range(x.ndim))
    if training:
        if x.shape[0] < 2:
            raise ShapeError(f"bn_normalize: train mode needs batch size >= 2, got {x.shape[0]}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running is not None:
            running.update(mean, var, momentum)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[expand]) * ivar[expand]
        m = x.size // x.shape[1]

        def backward(g):
            gsum = g.sum(axis=axes)
            gdot = (g * xhat).sum(axis=axes)
            x._accumulate((ivar[expand] / m)
                          * (m * g - gsum[expand] - xhat * gdot[expand]))

        return _result(xhat, "bn_normalize", (x,), backward)

    if running is None:
        raise TensorError("bn_normalize: eval mode requires running statistics")
    ivar = 1.0 / np.sqrt(running.var + eps)
    xhat = (x.data - running.mean[expand]) * ivar[expand]

    def backward(g):
        x._accumulate(g * ivar[expand])

    return _result(xhat, "bn_normalize", (x,), backward)


def channel_scale_shift(xhat, gamma, beta):
    """y = xhat * gamma[c] + beta[c] with per-channel parameters."""
    c = xhat.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"channel_scale_shift: gamma/beta must be ({c},), "
                         f"got {gamma.shape}, {beta.shape}")
    expand = (None, slice(None)) + (None,) * (xhat.ndim - 2)
    axes = (0,) + tuple(range(2, xhat.ndim))
    out = xhat.data * gamma.data[expand] + beta.data[expand]

    def backward(g):
        xhat._accumulate(g * gamma.data[expand])
        gamma._accumulate((g * xhat.data).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))

    return _result(out, "channel_scale_shift", (xhat, gamma, beta), backward)


def batch_norm(x, gamma, beta, eps=1e-5, training=True, running=None, momentum=0.1):
    """Standard batch normalization: standardize, then per-channel affine."""
    return channel_scale_shift(
        bn_normalize(x, eps=eps, training=training, running=running, momentum=momentum),
        gamma, beta)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(fn, inputs, eps=1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    `fn` must map the given tensors to a scalar tensor, and inputs must be
    float64 (finite differences are meaningless in 32-bit). Relative error
    per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise GradCheckError(f"grad_check requires float64 inputs, got {t.dtype}")
        t.zero_grad()
        t.requires_grad = True
    out = fn(*inputs)
    if out.size != 1:
        raise GradCheckError(f"grad_check objective must be scalar, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*inputs).item()
            flat[i] = orig - eps
            lo = fn(*inputs).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        err = np.max(np.abs(analytic - numeric) / denom)
        worst = max(worst, float(err))
    return worst
