"""Differentiable operator set: each op ships a forward and a hand-written backward.

Conventions:
  - feature maps are channels-last, (H, W, C) or batched (B, H, W, C)
  - forward returns (output, cache); backward takes (grad_output, cache)
    and returns gradients in the same order as the forward inputs
  - float64 is used for training and tests; ops preserve the input dtype
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


class ShapeError(ValueError):
    """Shape mismatch, naming the offending axis."""


# Test hook: when True, conv2d's kernel gradient is deliberately scaled by 2
# so the gradient-check suite can demonstrate it catches broken backwards.
INJECT_GRADIENT_BUG = False


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _batched(x: np.ndarray):
    """Promote (H, W, C) to (1, H, W, C); return (array, had_batch)."""
    if x.ndim == 3:
        return x[None], False
    _check(x.ndim == 4, f"expected 3- or 4-d map, got {x.ndim}-d")
    return x, True


def _debatch(y: np.ndarray, had_batch: bool) -> np.ndarray:
    return y if had_batch else y[0]


# ---------------------------------------------------------------------------
# dense / elementwise
# ---------------------------------------------------------------------------

def linear_fwd(x, w, b=None):
    """y = x @ w (+ b) over the last axis."""
    _check(x.shape[-1] == w.shape[0],
           f"linear: input features (last axis) {x.shape[-1]} != weight rows {w.shape[0]}")
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_bwd(dy, cache):
    x, w, has_b = cache
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0) if has_b else None
    return dx, dw, db


def relu_fwd(x):
    mask = x > 0
    return x * mask, mask


def relu_bwd(dy, mask):
    return dy * mask


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_fwd(x):
    """tanh-approximation GELU."""
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    return y, (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    dt = (1.0 - t ** 2) * dinner
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def sigmoid_fwd(x):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_bwd(dy, y):
    return dy * y * (1.0 - y)


def softplus_fwd(x):
    """log(1 + e^x), computed stably."""
    y = np.logaddexp(0.0, x)
    return y, x


def softplus_bwd(dy, x):
    return dy * sigmoid_fwd(x)[0]


def softmax_fwd(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def softmax_bwd(dy, cache):
    y, axis = cache
    dot = (dy * y).sum(axis=axis, keepdims=True)
    return (dy - dot) * y


def layernorm_fwd(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma * xhat + beta
    return y, (xhat, inv, gamma)


def layernorm_bwd(dy, cache):
    xhat, inv, gamma = cache
    n = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, n).sum(axis=0)
    dbeta = dy.reshape(-1, n).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def add_fwd(a, b):
    _check(a.shape == b.shape, f"add: shapes {a.shape} and {b.shape} differ")
    return a + b, None


def add_bwd(dy, cache):
    return dy, dy


def mul_fwd(a, b):
    _check(a.shape == b.shape, f"mul: shapes {a.shape} and {b.shape} differ")
    return a * b, (a, b)


def mul_bwd(dy, cache):
    a, b = cache
    return dy * b, dy * a


def l2_normalize_fwd(x, axis=-1):
    n = np.sqrt((x ** 2).sum(axis=axis, keepdims=True))
    y = x / n
    return y, (y, n, axis)


def l2_normalize_bwd(dy, cache):
    y, n, axis = cache
    dot = (dy * y).sum(axis=axis, keepdims=True)
    return (dy - y * dot) / n


# ---------------------------------------------------------------------------
# attention core
# ---------------------------------------------------------------------------

def attention_fwd(q, k, v):
    """Scaled dot-product attention over the last two axes.

    q, k: (..., n, d_k); v: (..., n, d_v). Rows of the softmaxed score
    matrix sum to 1, so each output row is a convex mix of value rows.
    """
    _check(q.shape[-1] == k.shape[-1],
           f"attention: q depth {q.shape[-1]} != k depth {k.shape[-1]}")
    _check(q.shape[-2] == k.shape[-2] == v.shape[-2],
           "attention: q/k/v row counts differ")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    attn, sm_cache = softmax_fwd(scores, axis=-1)
    out = attn @ v
    return out, (q, k, v, attn, sm_cache, scale)


def attention_bwd(dy, cache):
    q, k, v, attn, sm_cache, scale = cache
    dv = np.swapaxes(attn, -1, -2) @ dy
    dattn = dy @ np.swapaxes(v, -1, -2)
    dscores = softmax_bwd(dattn, sm_cache) * scale
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    return dq, dk, dv


# ---------------------------------------------------------------------------
# convolutions (tap-loop form: one matmul per kernel tap, no scatter)
# ---------------------------------------------------------------------------

def conv2d_fwd(x, w, b=None, stride=1, padding=0):
    """2-d convolution (cross-correlation) on channels-last maps.

    x: (B, H, W, Cin) or (H, W, Cin); w: (Cout, Cin, kh, kw).
    Output spatial side: floor((H + 2p - k) / stride) + 1.
    """
    xb, had_batch = _batched(x)
    cout, cin, kh, kw = w.shape
    _check(stride >= 1 and kh >= 1 and kw >= 1, "conv2d: stride and kernel must be >= 1")
    _check(xb.shape[3] == cin,
           f"conv2d: input channel axis has {xb.shape[3]}, kernel expects {cin}")
    B, H, W, _ = xb.shape
    _check(H + 2 * padding >= kh,
           f"conv2d: padded height {H + 2 * padding} smaller than kernel {kh}")
    _check(W + 2 * padding >= kw,
           f"conv2d: padded width {W + 2 * padding} smaller than kernel {kw}")
    xp = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    oh = (H + 2 * padding - kh) // stride + 1
    ow = (W + 2 * padding - kw) // stride + 1
    cols = np.empty((B, oh, ow, kh, kw, cin), dtype=xb.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    wmat = w.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    y = (cols.reshape(-1, kh * kw * cin) @ wmat).reshape(B, oh, ow, cout)
    if b is not None:
        y += b
    cache = (cols, w, b is not None, stride, padding, xb.shape, had_batch)
    return _debatch(y, had_batch), cache


def conv2d_bwd(dy, cache):
    cols, w, has_b, stride, padding, xshape, had_batch = cache
    dyb, _ = _batched(dy)
    cout, cin, kh, kw = w.shape
    B, H, W, _ = xshape
    oh, ow = dyb.shape[1], dyb.shape[2]
    dy_flat = dyb.reshape(-1, cout)
    dwmat = cols.reshape(-1, kh * kw * cin).T @ dy_flat
    dw = dwmat.reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
    if INJECT_GRADIENT_BUG:
        dw = dw * 2.0
    db = dyb.sum(axis=(0, 1, 2)) if has_b else None
    dxp = np.zeros((B, H + 2 * padding, W + 2 * padding, cin), dtype=dyb.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dyb @ w[:, :, i, j]
    dx = dxp[:, padding:padding + H, padding:padding + W, :]
    return _debatch(dx, had_batch), dw, db


def depthwise_conv2d_fwd(x, k, padding=1):
    """Per-channel 2-d convolution: one k x k slice per input channel.

    x: (B, H, W, C) or (H, W, C); k: (C, kh, kw). Stride is fixed at 1.
    Channel c of the output depends only on channel c of the input.
    """
    xb, had_batch = _batched(x)
    C, kh, kw = k.shape
    _check(xb.shape[3] == C,
           f"depthwise_conv2d: input channel axis has {xb.shape[3]}, kernel has {C} slices")
    B, H, W, _ = xb.shape
    xp = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    oh = H + 2 * padding - kh + 1
    ow = W + 2 * padding - kw + 1
    y = np.zeros((B, oh, ow, C), dtype=xb.dtype)
    for i in range(kh):
        for j in range(kw):
            y += xp[:, i:i + oh, j:j + ow, :] * k[:, i, j]
    cache = (xp, k, padding, xb.shape, had_batch)
    return _debatch(y, had_batch), cache


def depthwise_conv2d_bwd(dy, cache):
    xp, k, padding, xshape, had_batch = cache
    dyb, _ = _batched(dy)
    C, kh, kw = k.shape
    B, H, W, _ = xshape
    oh, ow = dyb.shape[1], dyb.shape[2]
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(k)
    for i in range(kh):
        for j in range(kw):
            dk[:, i, j] = (dyb * xp[:, i:i + oh, j:j + ow, :]).sum(axis=(0, 1, 2))
            dxp[:, i:i + oh, j:j + ow, :] += dyb * k[:, i, j]
    dx = dxp[:, padding:padding + H, padding:padding + W, :]
    return _debatch(dx, had_batch), dk


def avg_pool2d_fwd(x, factor):
    """Non-overlapping factor x factor mean pool."""
    xb, had_batch = _batched(x)
    B, H, W, C = xb.shape
    _check(H % factor == 0 and W % factor == 0,
           f"avg_pool2d: spatial side {H}x{W} not divisible by factor {factor}")
    y = xb.reshape(B, H // factor, factor, W // factor, factor, C).mean(axis=(2, 4))
    return _debatch(y, had_batch), (factor, xb.shape, had_batch)


def avg_pool2d_bwd(dy, cache):
    factor, xshape, had_batch = cache
    dyb, _ = _batched(dy)
    B, H, W, C = xshape
    dx = np.repeat(np.repeat(dyb, factor, axis=1), factor, axis=2) / (factor * factor)
    return _debatch(dx, had_batch)


# ---------------------------------------------------------------------------
# bilinear resize (align-corners-false, edge clamped)
# ---------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _resize_axis(in_size: int, out_size: int):
    src = (np.arange(out_size) + 0.5) * in_size / out_size - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize_fwd(x, out_h, out_w):
    """Resize spatial axes with the half-pixel-center sampling convention."""
    _check(out_h >= 1 and out_w >= 1, "bilinear_resize: output sides must be >= 1")
    xb, had_batch = _batched(x)
    B, H, W, C = xb.shape
    i0, i1, fi = _resize_axis(H, out_h)
    j0, j1, fj = _resize_axis(W, out_w)
    wi = fi[:, None, None]
    wj = fj[None, :, None]
    y = (xb[:, i0[:, None], j0[None, :], :] * (1 - wi) * (1 - wj)
         + xb[:, i0[:, None], j1[None, :], :] * (1 - wi) * wj
         + xb[:, i1[:, None], j0[None, :], :] * wi * (1 - wj)
         + xb[:, i1[:, None], j1[None, :], :] * wi * wj)
    return _debatch(y, had_batch), (xb.shape, out_h, out_w, had_batch)


def bilinear_resize_bwd(dy, cache):
    xshape, out_h, out_w, had_batch = cache
    dyb, _ = _batched(dy)
    B, H, W, C = xshape
    i0, i1, fi = _resize_axis(H, out_h)
    j0, j1, fj = _resize_axis(W, out_w)
    wi = fi[:, None, None]
    wj = fj[None, :, None]
    dx = np.zeros(xshape, dtype=dyb.dtype)
    for ii, jj, wt in ((i0, j0, (1 - wi) * (1 - wj)),
                       (i0, j1, (1 - wi) * wj),
                       (i1, j0, wi * (1 - wj)),
                       (i1, j1, wi * wj)):
        np.add.at(dx, (slice(None), ii[:, None], jj[None, :]), dyb * wt)
    return _debatch(dx, had_batch)


# ---------------------------------------------------------------------------
# losses / pooling helpers
# ---------------------------------------------------------------------------

def gem_pool_fwd(x, p=3.0, axes=None):
    """Generalized-mean pool: (mean over pooled axes of softplus(x)^p)^(1/p).

    Inputs are shifted positive with softplus before the power mean, so the
    fractional power is always defined. axes=None pools every axis except
    the last (channel) one.
    """
    u, sp_cache = softplus_fwd(x)
    up = u ** p
    if axes is None:
        axes = tuple(range(x.ndim - 1))
    m = up.mean(axis=axes)
    n_pix = 1
    for a in axes:
        n_pix *= x.shape[a]
    y = m ** (1.0 / p)
    return y, (u, m, p, sp_cache, axes, n_pix)


def gem_pool_bwd(dy, cache):
    u, m, p, sp_cache, axes, n_pix = cache
    dm = dy * (1.0 / p) * m ** (1.0 / p - 1.0)
    for a in sorted(axes):
        dm = np.expand_dims(dm, axis=a)
    du = (p * u ** (p - 1.0)) * (dm / n_pix)
    return softplus_bwd(du, sp_cache)
