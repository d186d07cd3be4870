"""Gated dynamic fusion of the two feature streams.

The gate is a per-position bottleneck: a 1x1 projection down to a quarter of
the channels, ReLU, a 1x1 projection back up, and a sigmoid, giving weights
omega in (0, 1). The default "paper-text" mode routes omega to the
transformer stream and (1 - omega) to the CNN stream, with learnable scalars
alpha1/alpha2 balancing the two terms. The "verbatim-eq5" mode applies both
masks to the transformer stream; with equal alphas it collapses to an
identity on that stream, which is kept as a documented degenerate variant.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .params import acc_grad, normal_init, scalar, zeros

DFM_MODES = ("paper-text", "verbatim-eq5")


def init_dfm_params(cfg, rng) -> dict:
    d, d4 = cfg.embed_dim, cfg.gate_dim
    return {
        "dfm.w1": normal_init(rng, (d, d4)),
        "dfm.b1": zeros((d4,)),
        "dfm.w2": normal_init(rng, (d4, d)),
        "dfm.b2": zeros((d,)),
        "dfm.alpha1": scalar(1.0),
        "dfm.alpha2": scalar(1.0),
    }


def gate_weights_fwd(f, params):
    """omega = sigmoid(w2 . relu(w1 . f)) per spatial position."""
    h1, c1 = ops.linear_fwd(f, params["dfm.w1"], params["dfm.b1"])
    a1, c_relu = ops.relu_fwd(h1)
    h2, c2 = ops.linear_fwd(a1, params["dfm.w2"], params["dfm.b2"])
    omega, c_sig = ops.sigmoid_fwd(h2)
    return omega, (c1, c_relu, c2, c_sig)


def gate_weights_bwd(domega, cache, grads):
    c1, c_relu, c2, c_sig = cache
    dh2 = ops.sigmoid_bwd(domega, c_sig)
    da1, dw2, db2 = ops.linear_bwd(dh2, c2)
    acc_grad(grads, "dfm.w2", dw2)
    acc_grad(grads, "dfm.b2", db2)
    dh1 = ops.relu_bwd(da1, c_relu)
    df, dw1, db1 = ops.linear_bwd(dh1, c1)
    acc_grad(grads, "dfm.w1", dw1)
    acc_grad(grads, "dfm.b1", db1)
    return df


def dfm_forward(fvit, fres, params, mode="paper-text"):
    """Fuse aligned maps (B, G, G, D) into one map of the same shape."""
    if mode not in DFM_MODES:
        raise ValueError(f"unknown dfm mode {mode!r}")
    if fvit.shape != fres.shape:
        raise ops.ShapeError(f"dfm_forward: stream shapes {fvit.shape} and {fres.shape} differ")
    f = fvit + fres
    omega, c_gate = gate_weights_fwd(f, params)
    a1 = params["dfm.alpha1"]
    a2 = params["dfm.alpha2"]
    second = fvit if mode == "verbatim-eq5" else fres
    out = a1 * (omega * fvit) + a2 * ((1.0 - omega) * second)
    return out, (fvit, fres, omega, c_gate, a1, a2, mode)


def dfm_backward(dout, cache, params, grads):
    fvit, fres, omega, c_gate, a1, a2, mode = cache
    second = fvit if mode == "verbatim-eq5" else fres
    acc_grad(grads, "dfm.alpha1", np.array((dout * omega * fvit).sum()))
    acc_grad(grads, "dfm.alpha2", np.array((dout * (1.0 - omega) * second).sum()))
    dfvit = dout * a1 * omega
    dsecond = dout * a2 * (1.0 - omega)
    domega = dout * a1 * fvit - dout * a2 * second
    if mode == "verbatim-eq5":
        dfvit = dfvit + dsecond
        dfres = np.zeros_like(fres)
    else:
        dfres = dsecond
    df = gate_weights_bwd(domega, c_gate, grads)
    return dfvit + df, dfres + df
