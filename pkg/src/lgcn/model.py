"""Full image-to-descriptor model: stream construction, fusion, and backprop."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import cnn, dfm, head, vit
from .config import AblationFlags, ModelConfig
from .fsa import init_fsa_params

FUSION_MODES = ("vit-only", "concat", "dfm", "sum")


def head_channels(cfg: ModelConfig, fusion: str) -> int:
    return 2 * cfg.embed_dim if fusion == "concat" else cfg.embed_dim


def descriptor_dim(cfg: ModelConfig, fusion: str) -> int:
    return head.NUM_REGIONS * head_channels(cfg, fusion)


def init_model(cfg: ModelConfig, ablation: AblationFlags, seed: int) -> dict:
    """Seeded parameter construction; insertion order is the archive order."""
    rng = np.random.default_rng(seed)
    params = {}
    params.update(vit.init_vit_params(cfg, rng))
    if not ablation.disable_fsa:
        for i in range(cfg.depth):
            params.update(init_fsa_params(cfg, rng, f"fsa.block{i}"))
    fusion = ablation.fusion
    if fusion != "vit-only":
        params.update(cnn.init_cnn_params(cfg, rng))
    if fusion == "dfm":
        params.update(dfm.init_dfm_params(cfg, rng))
    params.update(head.init_head_params(rng, head_channels(cfg, fusion)))
    return params


@dataclass
class ModelTape:
    """Forward caches plus the intermediate maps the diagnostics read."""

    c_vit: object
    c_cnn: object
    c_align: object
    c_dfm: object
    c_head: object
    fusion: str
    fvit: np.ndarray
    fres: np.ndarray | None
    omega: np.ndarray | None
    fused: np.ndarray


def model_forward(images, params, cfg: ModelConfig, fusion: str = "dfm",
                  adapters_enabled: bool = True, cross: bool = False):
    """images (B, S, S, 3) -> unit descriptors (B, D_out) plus the tape.

    cross=True turns on cross-image attention in the head (training mode);
    inference keeps images independent.
    """
    if fusion not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {fusion!r}")
    fvit, c_vit = vit.vit_forward(images, params, cfg, adapters_enabled)
    c_cnn = c_align = c_dfm = None
    fres = omega = None
    if fusion == "vit-only":
        fused = fvit
    else:
        fres_raw, c_cnn = cnn.cnn_forward(images, params, cfg)
        fres, c_align = cnn.align_upsample(fres_raw, params, cfg)
        if fusion == "dfm":
            fused, c_dfm = dfm.dfm_forward(fvit, fres, params, cfg.dfm_mode)
            omega = c_dfm[2]
        elif fusion == "concat":
            fused = np.concatenate([fvit, fres], axis=-1)
        else:  # sum: gate bypass used by eval-time ablation overrides
            fused = fvit + fres
    desc, c_head = head.head_forward(fused, params, cfg.num_heads, cross)
    tape = ModelTape(c_vit, c_cnn, c_align, c_dfm, c_head, fusion, fvit, fres, omega, fused)
    return desc, tape


def model_backward(ddesc, tape: ModelTape, params, grads):
    """Backpropagate descriptor gradients into the grads dict."""
    dfused = head.head_backward(ddesc, tape.c_head, grads)
    if tape.fusion == "vit-only":
        dfvit, dfres = dfused, None
    elif tape.fusion == "dfm":
        dfvit, dfres = dfm.dfm_backward(dfused, tape.c_dfm, params, grads)
    elif tape.fusion == "concat":
        d = tape.fvit.shape[-1]
        dfvit, dfres = dfused[..., :d], dfused[..., d:]
    else:
        dfvit, dfres = dfused, dfused
    if dfres is not None:
        dfres_raw = cnn.align_backward(dfres, tape.c_align, grads)
        cnn.cnn_backward(dfres_raw, tape.c_cnn, grads)
    vit.vit_backward(dfvit, tape.c_vit, params, grads)


def compute_descriptors(images, params, cfg: ModelConfig, fusion: str = "dfm",
                        adapters_enabled: bool = True, batch_size: int = 64,
                        threads: int = 1) -> np.ndarray:
    """Inference descriptors for a stack of images, batched, no cross talk."""
    n = images.shape[0]
    chunks = [images[i:i + batch_size] for i in range(0, n, batch_size)]

    def run(chunk):
        desc, _ = model_forward(chunk, params, cfg, fusion, adapters_enabled, cross=False)
        return desc

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, descriptor_dim(cfg, fusion)))


def stream_maps(image, params, cfg: ModelConfig, fusion: str = "dfm",
                adapters_enabled: bool = True) -> dict:
    """Named per-stream maps for one image, for heatmap export."""
    _, tape = model_forward(image[None], params, cfg, fusion, adapters_enabled, cross=False)
    maps = {"fvit": tape.fvit[0], "fused": tape.fused[0]}
    if tape.fres is not None:
        maps["fres"] = tape.fres[0]
    if tape.omega is not None:
        maps["omega"] = tape.omega[0]
    return maps
