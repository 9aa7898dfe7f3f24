"""Layers, parameter bookkeeping, and the SGD optimizer.

Every block exposes `parameters()` (trainable tensors) and `buffers()`
(non-trained state like running BN statistics) as flat name -> value
maps; containers join names with dots to form checkpoint paths.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def flatten_tree(tree, prefix=""):
    """Flatten nested dicts of values into {'a.b.c': value}."""
    flat = {}
    for name, value in tree.items():
        path = f"{prefix}{name}"
        if isinstance(value, dict):
            flat.update(flatten_tree(value, prefix=path + "."))
        else:
            flat[path] = value
    return flat


class Dense:
    """Affine layer y = x W^T + b.

    `use_bias=False` pins the bias at zero and keeps it out of the
    parameter map (for layers feeding shift-invariant consumers like a
    softmax over logits, where the bias gradient is identically zero)."""

    def __init__(self, rng, din, dout, dtype=np.float64, zero_init=False,
                 use_bias=True):
        if zero_init:
            w = np.zeros((dout, din), dtype=dtype)
        else:
            w = kaiming_uniform(rng, (dout, din), fan_in=din, dtype=dtype)
        self.use_bias = use_bias
        self.weight = T.tensor(w, requires_grad=True)
        self.bias = T.tensor(np.zeros(dout, dtype=dtype), requires_grad=use_bias)

    def __call__(self, x):
        return T.dense_affine(x, self.weight, self.bias)

    def parameters(self):
        if not self.use_bias:
            return {"weight": self.weight}
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}


class Conv2d:
    """Convolution stage; bias is dropped when a batch norm follows
    (normalization cancels any constant channel shift exactly)."""

    def __init__(self, rng, cin, cout, kernel=3, stride=1, padding=None,
                 dtype=np.float64, use_bias=True):
        if padding is None:
            padding = kernel // 2
        self.stride = stride
        self.padding = padding
        self.use_bias = use_bias
        k = kaiming_uniform(rng, (cout, cin, kernel, kernel),
                            fan_in=cin * kernel * kernel, dtype=dtype)
        self.kernel = T.tensor(k, requires_grad=True)
        self.bias = T.tensor(np.zeros(cout, dtype=dtype), requires_grad=use_bias)

    def __call__(self, x):
        return T.conv2d(x, self.kernel, self.bias, stride=self.stride,
                        padding=self.padding)

    def parameters(self):
        if not self.use_bias:
            return {"kernel": self.kernel}
        return {"kernel": self.kernel, "bias": self.bias}

    def buffers(self):
        return {}


class BatchNorm:
    """Plain batch norm; eps and momentum follow the engine defaults."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        self.eps = eps
        self.momentum = momentum
        self.gamma = T.tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = T.tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running = T.RunningStats(channels, dtype=dtype)

    def __call__(self, x, training=True):
        return T.batch_norm(x, self.gamma, self.beta, eps=self.eps,
                            training=training, running=self.running,
                            momentum=self.momentum)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running.mean, "running_var": self.running.var}


class MLP:
    """Two affine layers with a relu in between."""

    def __init__(self, rng, din, hidden, dout, dtype=np.float64,
                 zero_init_last=False):
        self.fc1 = Dense(rng, din, hidden, dtype=dtype)
        self.fc2 = Dense(rng, hidden, dout, dtype=dtype, zero_init=zero_init_last)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))

    def parameters(self):
        return {"fc1": self.fc1.parameters(), "fc2": self.fc2.parameters()}

    def buffers(self):
        return {"fc1": self.fc1.buffers(), "fc2": self.fc2.buffers()}


class SGD:
    """Plain SGD with classical momentum."""

    def __init__(self, params, lr=1e-3, momentum=0.9):
        self.params = list(params.values()) if isinstance(params, dict) else list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v -= self.lr * p.grad
            p.data += v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
