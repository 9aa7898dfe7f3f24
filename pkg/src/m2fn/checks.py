"""Finite-difference gradient suite over every primitive, the fusion
blocks, and the full network loss on a micro-batch.

Shared by the test suite and the `gradcheck` CLI subcommand. Shapes are
tiny and seeds fixed; inputs are nudged away from relu/max kinks so the
central differences stay meaningful.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .fusion import CbnBlock, HighFusionBlock, SpatialAttentionBlock
from .model import ModelConfig, StageSpec, Toggles, build_model
from .objectives import kld_loss, weighted_mse
from .tensor import grad_check

TOLERANCE = 1e-4


def _rt(rng, *shape):
    return T.tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)


def _rt_pos(rng, *shape):
    return T.tensor(rng.uniform(0.5, 1.5, size=shape), requires_grad=True)


def _sum(x):
    return T.reduce_sum(x)


def primitive_checks(seed=7):
    """Yield (name, fn, inputs) triples for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    a = _rt(rng, 3, 4)
    b = _rt(rng, 3, 4)
    yield "add", lambda x, y: _sum(T.add(x, y)), (a, b)
    yield "sub", lambda x, y: _sum(T.mul(T.sub(x, y), T.sub(x, y))), (a, b)
    yield "mul", lambda x, y: _sum(T.mul(x, y)), (a, b)
    yield "neg", lambda x: _sum(T.mul(T.neg(x), x)), (a,)
    yield "scale", lambda x: _sum(T.scale(T.mul(x, x), 2.5)), (a,)
    yield "add_scalar", lambda x: _sum(T.square(T.add_scalar(x, 0.3))), (a,)
    yield "square", lambda x: _sum(T.square(x)), (a,)
    yield "log", lambda x: _sum(T.log(x)), (_rt_pos(rng, 3, 4),)
    yield "sqrt", lambda x: _sum(T.sqrt(x)), (_rt_pos(rng, 3, 4),)
    yield "abs", lambda x: _sum(T.absolute(x)), (T.tensor(rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)), requires_grad=True),)
    yield "maximum_scalar", lambda x: _sum(T.maximum_scalar(T.scale(x, 2.0), 0.5)), (_rt_pos(rng, 3, 4),)
    yield "relu", lambda x: _sum(T.relu(x)), (T.tensor(rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)), requires_grad=True),)
    yield "tanh", lambda x: _sum(T.square(T.tanh(x))), (a,)
    yield "reshape", lambda x: _sum(T.square(T.reshape(x, (4, 3)))), (a,)
    yield "moveaxis", lambda x: _sum(T.square(T.moveaxis(x, 0, 1))), (a,)
    yield "concat", lambda x, y: _sum(T.square(T.concat([x, y], axis=1))), (a, b)
    yield "replicate_spatial", lambda x: _sum(T.square(T.replicate_spatial(x, 2, 3))), (a,)
    yield "replicate_rows", lambda x: _sum(T.square(T.replicate_rows(x, 3))), (_rt(rng, 5),)
    yield "reduce_sum", lambda x: _sum(T.square(T.reduce_sum(x, axis=1))), (a,)
    yield "reduce_mean", lambda x: _sum(T.square(T.reduce_mean(x, axis=0))), (a,)
    yield "cumsum_lastdim", lambda x: _sum(T.square(T.cumsum_lastdim(x))), (a,)
    x2 = _rt(rng, 3, 4)
    w2 = _rt(rng, 5, 4)
    b2 = _rt(rng, 5)
    yield "dense_affine", lambda x, w, b_: _sum(T.square(T.dense_affine(x, w, b_))), (x2, w2, b2)
    smw = T.tensor(rng.uniform(-1, 1, (3, 4)))
    yield "softmax_lastdim", lambda x: _sum(T.mul(T.softmax_lastdim(x), smw)), (a,)
    xc = _rt(rng, 2, 3, 5, 5)
    kc = _rt(rng, 4, 3, 3, 3)
    bc = _rt(rng, 4)
    yield "conv2d", lambda x, k, b_: _sum(T.square(T.conv2d(x, k, b_, stride=1, padding=1))), (xc, kc, bc)
    yield "conv2d_stride2", lambda x, k, b_: _sum(T.square(T.conv2d(x, k, b_, stride=2, padding=0))), (xc, kc, bc)
    yield "max_pool2d", lambda x: _sum(T.square(T.max_pool2d(x, 2))), (_rt(rng, 2, 2, 4, 4),)
    xf = _rt(rng, 2, 3, 2, 2)
    at = T.tensor(rng.uniform(0.1, 0.9, (2, 4)), requires_grad=True)
    yield "attention_pool", lambda f, w: _sum(T.square(T.attention_pool(f, w))), (xf, at)
    xb = _rt(rng, 4, 3, 2, 2)
    gm = _rt_pos(rng, 3)
    bt = _rt(rng, 3)
    # probe batch norm with a random linear functional: sums of squares of
    # standardized values are nearly invariant to the input (batch statistics
    # cancel them), which would starve the finite differences of signal
    bnw = T.tensor(rng.uniform(0.5, 1.5, (4, 3, 2, 2)))
    yield "bn_normalize_train", lambda x: _sum(T.mul(T.bn_normalize(x), bnw)), (xb,)
    yield "channel_scale_shift", lambda x, g, b_: _sum(T.square(T.channel_scale_shift(x, g, b_))), (xb, gm, bt)
    yield "batch_norm_train", lambda x, g, b_: _sum(T.mul(T.batch_norm(x, g, b_), bnw)), (xb, gm, bt)
    run = T.RunningStats(3)
    run.mean[:] = rng.uniform(-0.2, 0.2, 3)
    run.var[:] = rng.uniform(0.5, 1.5, 3)
    yield "batch_norm_eval", (lambda x, g, b_: _sum(T.square(
        T.batch_norm(x, g, b_, training=False, running=run)))), (xb, gm, bt)


def fusion_checks(seed=11):
    rng = np.random.default_rng(seed)
    prng = np.random.default_rng(seed + 1)
    cbn = CbnBlock(prng, channels=3, dim_aux=4, hidden=5)
    # nonzero deltas so the conditioning path carries gradient
    cbn.scale_head.weight.data[:] = prng.uniform(-0.3, 0.3, cbn.scale_head.weight.shape)
    cbn.shift_head.weight.data[:] = prng.uniform(-0.3, 0.3, cbn.shift_head.weight.shape)
    feats = T.tensor(rng.uniform(-1, 1, (4, 3, 2, 2)), requires_grad=True)
    aux = T.tensor(rng.uniform(-1, 1, (4, 4)), requires_grad=True)

    def cbn_loss(f, x):
        return T.reduce_sum(T.square(cbn(f, x, training=True)))

    yield "cbn_forward", cbn_loss, (feats, aux)

    attn = SpatialAttentionBlock(prng, channels=3, dim_aux=4, hidden=6)

    def attn_loss(f, x):
        pooled, _ = attn(f, x)
        return T.reduce_sum(T.square(pooled))

    yield "spatial_attention", attn_loss, (feats, aux)

    high = HighFusionBlock(prng, visual_dim=3, dim_aux=4, fused_dim=5)
    vis = T.tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)

    def high_loss(v, x):
        return T.reduce_sum(T.square(high(v, x)))

    yield "high_level_fuse", high_loss, (vis, aux)


MICRO_CONFIG = ModelConfig(
    backbone=(StageSpec(4, pool=True), StageSpec(4, pool=False)),
    cbn_hidden=4, attn_hidden=6, high_dim=5,
    toggles=Toggles(True, True, True, True),
    head="scalar", dim_aux=3, seed=3, dtype="float64")


def model_loss_checks(seed=23):
    """Full forward+loss on a 2-sample micro-batch, all toggles on,
    gradients checked through every parameter and both inputs."""
    rng = np.random.default_rng(seed)
    images = T.tensor(rng.uniform(0.0, 1.0, (2, 3, 8, 8)), requires_grad=True)
    aux = T.tensor(rng.uniform(-1.0, 1.0, (2, 3)), requires_grad=True)
    y = rng.uniform(0.1, 0.3, 2)
    w = rng.uniform(50.0, 150.0, 2)

    scalar_model = build_model(MICRO_CONFIG)
    scalar_params = list(scalar_model.parameters().values())

    def scalar_loss(img, ax, *params):
        out, _ = scalar_model.forward(img, ax, training=True)
        return weighted_mse(out, y, w)

    yield "m2fn_wmse_loss", scalar_loss, [images, aux] + scalar_params

    from dataclasses import replace
    dist_model = build_model(replace(MICRO_CONFIG, head="distribution"))
    target = rng.uniform(0.05, 1.0, (2, 10))
    target /= target.sum(axis=1, keepdims=True)
    dist_params = list(dist_model.parameters().values())

    def dist_loss(img, ax, *params):
        out, _ = dist_model.forward(img, ax, training=True)
        return kld_loss(target, out)

    yield "m2fn_kld_loss", dist_loss, [images, aux] + dist_params


def gradient_suite(include_model=True):
    """Run every check; returns a list of {'name', 'error', 'ok'} dicts."""
    results = []
    checks = list(primitive_checks()) + list(fusion_checks())
    if include_model:
        checks += list(model_loss_checks())
    for name, fn, inputs in checks:
        err = grad_check(fn, inputs)
        results.append({"name": name, "error": err, "ok": err < TOLERANCE})
    return results
