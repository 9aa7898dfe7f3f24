"""The three modality-fusion blocks.

Low-level fusion conditions the first batch norm's scale/shift on the
auxiliary vector; the attention block scores each spatial position of
the feature map against the replicated auxiliary vector and pools with
the resulting softmax weights; high-level fusion gates tanh-projected
visual and auxiliary vectors against each other element-wise.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Dense
from .tensor import ShapeError


def _check_aux(aux, n, dim_aux, who):
    if aux.ndim != 2 or aux.shape[1] != dim_aux:
        raise ShapeError(f"{who}: aux dim is {aux.shape}, block expects (N, {dim_aux})")
    if aux.shape[0] != n:
        raise ShapeError(f"{who}: batch mismatch, {n} feature rows vs {aux.shape[0]} aux rows")


class CbnBlock:
    """Batch norm whose affine parameters get per-sample residual deltas.

    A one-hidden-layer network maps the auxiliary vector to (d_gamma,
    d_beta); the effective scale/shift per sample is (gamma + d_gamma,
    beta + d_beta). The delta heads are zero-initialized, so a fresh
    block reproduces plain batch norm bit for bit.
    """

    def __init__(self, rng, channels, dim_aux, hidden, eps=1e-5, momentum=0.1,
                 dtype=np.float64):
        self.channels = channels
        self.dim_aux = dim_aux
        self.eps = eps
        self.momentum = momentum
        self.gamma = T.tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = T.tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running = T.RunningStats(channels, dtype=dtype)
        self.hidden = Dense(rng, dim_aux, hidden, dtype=dtype)
        self.scale_head = Dense(rng, hidden, channels, dtype=dtype, zero_init=True)
        self.shift_head = Dense(rng, hidden, channels, dtype=dtype, zero_init=True)

    def __call__(self, features, aux, training=True):
        n, c, h, w = features.shape
        if c != self.channels:
            raise ShapeError(f"cbn: feature channel axis is {c}, block expects {self.channels}")
        _check_aux(aux, n, self.dim_aux, "cbn")
        xhat = T.bn_normalize(features, eps=self.eps, training=training,
                              running=self.running, momentum=self.momentum)
        hid = T.relu(self.hidden(aux))
        scale = T.add(T.replicate_rows(self.gamma, n), self.scale_head(hid))
        shift = T.add(T.replicate_rows(self.beta, n), self.shift_head(hid))
        return T.add(T.mul(xhat, T.replicate_spatial(scale, h, w)),
                     T.replicate_spatial(shift, h, w))

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta,
                "delta": {"hidden": self.hidden.parameters(),
                          "scale_head": self.scale_head.parameters(),
                          "shift_head": self.shift_head.parameters()}}

    def buffers(self):
        return {"running_mean": self.running.mean, "running_var": self.running.var}


def cbn_forward(block, features, aux, mode="train"):
    return block(features, aux, training=(mode == "train"))


def replicate_and_concat(features, aux):
    """Stack the aux vector onto every spatial position as extra channels.

    [N, C, H, W] features and [N, A] aux give [N, C+A, H, W]; the aux value
    at (n, d) appears at channel C+d of every position of sample n.
    """
    n = features.shape[0]
    if aux.ndim != 2 or aux.shape[0] != n:
        raise ShapeError(f"replicate_and_concat: batch mismatch, features {n} vs aux {aux.shape}")
    if aux.shape[1] == 0:
        return features
    h, w = features.shape[2], features.shape[3]
    return T.concat([features, T.replicate_spatial(aux, h, w)], axis=1)


class SpatialAttentionBlock:
    """Aux-conditioned softmax attention over the W*H feature positions.

    Each position's (feature, aux) stack goes through a small MLP to one
    logit; softmax over positions gives the attention row, and the block
    pools the feature map with those weights. Pooling directly into a
    [N, C] vector (rather than re-multiplying into the map and continuing
    convolutionally) is an interpretation choice; it is the standard
    soft-attention readout for a head that fuses two vectors.
    """

    def __init__(self, rng, channels, dim_aux, hidden, dtype=np.float64):
        self.channels = channels
        self.dim_aux = dim_aux
        self.score = Dense(rng, channels + dim_aux, hidden, dtype=dtype)
        # logits feed a softmax; a bias would be shift-invariant dead weight
        self.out = Dense(rng, hidden, 1, dtype=dtype, use_bias=False)

    def __call__(self, features, aux):
        n, c, h, w = features.shape
        if c != self.channels:
            raise ShapeError(f"attention: feature channel axis is {c}, block expects {self.channels}")
        _check_aux(aux, n, self.dim_aux, "attention")
        stacked = replicate_and_concat(features, aux)
        per_pos = T.reshape(T.moveaxis(stacked, 1, 3), (n * h * w, c + self.dim_aux))
        logits = T.reshape(self.out(T.relu(self.score(per_pos))), (n, h * w))
        attn = T.softmax_lastdim(logits)
        pooled = T.attention_pool(features, attn)
        return pooled, attn

    def parameters(self):
        return {"mlp": {"score": self.score.parameters(), "out": self.out.parameters()}}

    def buffers(self):
        return {}


def spatial_attention(block, features, aux):
    return block(features, aux)


class HighFusionBlock:
    """tanh-gated element-wise product of projected visual and aux vectors.

    Output entries live in the open interval (-1, 1); in float64 the
    interval survives rounding only while the tanh arguments stay below
    ~19 in magnitude (beyond that tanh rounds to exactly +-1.0).
    """

    def __init__(self, rng, visual_dim, dim_aux, fused_dim, dtype=np.float64):
        self.visual_dim = visual_dim
        self.dim_aux = dim_aux
        self.fused_dim = fused_dim
        self.visual = Dense(rng, visual_dim, fused_dim, dtype=dtype)
        self.aux = Dense(rng, dim_aux, fused_dim, dtype=dtype)

    def __call__(self, visual, aux):
        if visual.ndim != 2 or visual.shape[1] != self.visual_dim:
            raise ShapeError(f"high_fusion: visual dim is {visual.shape}, "
                             f"block expects (N, {self.visual_dim})")
        _check_aux(aux, visual.shape[0], self.dim_aux, "high_fusion")
        return T.mul(T.tanh(self.visual(visual)), T.tanh(self.aux(aux)))

    def parameters(self):
        return {"visual": self.visual.parameters(), "aux": self.aux.parameters()}

    def buffers(self):
        return {}


def high_level_fuse(block, visual, aux):
    return block(visual, aux)
