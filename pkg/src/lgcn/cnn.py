"""Convolutional local-texture stream and the alignment upsampler.

Three stride-2 conv+ReLU stages and a final average pool produce the coarse
local map; the upsampler then resamples to an intermediate side, remaps
channels with a 3x3 conv, and resamples again so the result is aligned with
the transformer map in both spatial and channel dimensions.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .params import acc_grad, he_init, zeros


def stage_channels(cfg) -> tuple[int, int, int]:
    c = cfg.cnn_channels
    return max(1, c // 4), max(1, c // 2), c


def init_cnn_params(cfg, rng) -> dict:
    c1, c2, c3 = stage_channels(cfg)
    d = cfg.embed_dim
    # Gains above plain He init keep the local stream comparable in scale to
    # the transformer stream at init (there is no batch norm to do it later).
    return {
        "cnn.stage1.w": he_init(rng, (c1, 3, 3, 3), fan_in=3 * 9) * 1.5,
        "cnn.stage1.b": zeros((c1,)),
        "cnn.stage2.w": he_init(rng, (c2, c1, 3, 3), fan_in=c1 * 9) * 1.5,
        "cnn.stage2.b": zeros((c2,)),
        "cnn.stage3.w": he_init(rng, (c3, c2, 3, 3), fan_in=c2 * 9) * 1.5,
        "cnn.stage3.b": zeros((c3,)),
        "cnn.align.w": he_init(rng, (d, c3, 3, 3), fan_in=c3 * 9) * 2.0,
        "cnn.align.b": zeros((d,)),
    }


def cnn_forward(images, params, cfg):
    """images (B, S, S, 3) -> local map (B, G_res, G_res, C_res)."""
    x = images
    caches = []
    for i in (1, 2, 3):
        y, c_conv = ops.conv2d_fwd(x, params[f"cnn.stage{i}.w"], params[f"cnn.stage{i}.b"],
                                   stride=2, padding=1)
        x, c_relu = ops.relu_fwd(y)
        caches.append((c_conv, c_relu))
    pooled, c_pool = ops.avg_pool2d_fwd(x, cfg.pool_factor)
    return pooled, (caches, c_pool)


def cnn_backward(dy, cache, grads):
    caches, c_pool = cache
    dx = ops.avg_pool2d_bwd(dy, c_pool)
    for i, (c_conv, c_relu) in zip((3, 2, 1), reversed(caches)):
        dx = ops.relu_bwd(dx, c_relu)
        dx, dw, db = ops.conv2d_bwd(dx, c_conv)
        acc_grad(grads, f"cnn.stage{i}.w", dw)
        acc_grad(grads, f"cnn.stage{i}.b", db)
    return dx


def align_upsample(fres, params, cfg):
    """Resample, convolve, resample again: G_res -> mid -> G alignment.

    Output matches the transformer map (B, G, G, D) exactly in shape.
    """
    mid, g = cfg.align_mid, cfg.grid
    up1, c_r1 = ops.bilinear_resize_fwd(fres, mid, mid)
    conv, c_conv = ops.conv2d_fwd(up1, params["cnn.align.w"], params["cnn.align.b"],
                                  stride=1, padding=1)
    up2, c_r2 = ops.bilinear_resize_fwd(conv, g, g)
    trace = (tuple(np.shape(fres)), tuple(up1.shape), tuple(conv.shape), tuple(up2.shape))
    return up2, (c_r1, c_conv, c_r2, trace)


def align_trace(cache) -> tuple:
    """Shapes traversed by the upsampler: input, mid resize, conv, output."""
    return cache[3]


def align_backward(dy, cache, grads):
    c_r1, c_conv, c_r2, _ = cache
    dconv = ops.bilinear_resize_bwd(dy, c_r2)
    dup1, dw, db = ops.conv2d_bwd(dconv, c_conv)
    acc_grad(grads, "cnn.align.w", dw)
    acc_grad(grads, "cnn.align.b", db)
    return ops.bilinear_resize_bwd(dup1, c_r1)
