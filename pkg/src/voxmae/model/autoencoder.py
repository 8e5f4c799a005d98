"""Masked-autoencoder forward pass, reconstruction loss, and backward pass.

Visible tokens are embedded (dual path), run through the encoder with full
global self-attention, projected to the decoder width, and scattered back
into the full canonical sequence where masked slots carry a shared learned
mask vector. Every slot receives its positional encoding plus the learned
per-scale row announcing its granularity. Scale-specific heads map decoded
tokens back to flattened voxel vectors.

The objective averages squared error per scale by masked-token count and
by patch voxel volume, then sums over scales, so a scale whose tokens are
8x larger contributes no more than the fine scale for the same per-voxel
error. Scales with no masked tokens are skipped, not divided by zero.

``forward_loss`` optionally records a tape; ``backward`` replays it and
returns exact analytic gradients for every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import (
    CountMismatchError,
    EmptyInputError,
    LengthMismatchError,
    ShapeMismatchError,
)
from ..tokenizer import MaskPlan, TokenLayout, TokenRec, extract_token_voxels
from ..volume import Volume4D
from .config import ModelConfig
from .embedding import embed_scale_bwd, embed_scale_fwd
from .layers import affine_bwd, affine_fwd, stack_bwd, stack_fwd
from .params import ModelParams
from .posembed import sincos_embedding, token_center

__all__ = [
    "LossReport",
    "embed_token",
    "encoder_forward",
    "decoder_inputs",
    "reconstruct",
    "scale_aware_loss",
    "normalize_targets",
    "forward_loss",
    "backward",
]

PATCH_NORM_VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class LossReport:
    """Total objective plus its per-scale decomposition."""

    total: float
    per_scale: tuple[float, ...]
    masked_counts: tuple[int, ...]
    voxel_volumes: tuple[int, ...]


def _centers(tokens, base_edge: int) -> np.ndarray:
    return np.array([token_center(t, base_edge) for t in tokens], dtype=np.float64)


def embed_token(params: ModelParams, tok: TokenRec, voxels: np.ndarray) -> np.ndarray:
    """Composite embedding of a single token (see the embedding module)."""
    cfg = params.config
    voxels = np.asarray(voxels).reshape(-1)
    expected = cfg.patch_len(tok.scale)
    if voxels.size != expected:
        raise LengthMismatchError(
            f"scale-{tok.scale} token needs {expected} values, got {voxels.size}"
        )
    pos = sincos_embedding(_centers([tok], cfg.base_edge), cfg.embed_dim).astype(params.dtype)
    z, _ = embed_scale_fwd(
        params.arrays, voxels[None, :].astype(params.dtype), tok.scale, pos, cfg
    )
    return z[0]


def encoder_forward(params: ModelParams, visible_embeddings: np.ndarray) -> np.ndarray:
    """Pre-norm transformer over the visible tokens (depth 0 = identity)."""
    x = np.asarray(visible_embeddings)
    if x.ndim != 2 or x.shape[0] < 1:
        raise EmptyInputError("encoder needs at least one visible token")
    out, _ = stack_fwd(x, params.arrays, "enc", params.config.enc_depth, params.config.enc_heads)
    return out


def decoder_inputs(
    params: ModelParams, latents: np.ndarray, layout: TokenLayout, plan: MaskPlan
) -> np.ndarray:
    """Full-length decoder sequence in canonical token order.

    Visible slots receive the projected latents, masked slots the shared
    mask vector; every slot then adds its positional encoding and the
    learned scale-table row for its scale index.
    """
    cfg = params.config
    latents = np.asarray(latents).reshape(-1, cfg.dec_dim)
    n = len(layout)
    visible = np.flatnonzero(~plan.masked)
    if latents.shape[0] != visible.size:
        raise CountMismatchError(f"{latents.shape[0]} latents for {visible.size} visible tokens")

    seq = np.empty((n, cfg.dec_dim), dtype=params.dtype)
    seq[plan.masked] = params["mask_token"]
    seq[visible] = latents.astype(params.dtype)
    pos = sincos_embedding(_centers(layout.tokens, layout.base_edge), cfg.dec_dim)
    scales = np.array([t.scale for t in layout.tokens], dtype=np.int64)
    return seq + pos.astype(params.dtype) + params["scale_table"][scales]


def reconstruct(params: ModelParams, decoded: np.ndarray, layout: TokenLayout) -> list[np.ndarray]:
    """Per-token voxel predictions; token i at scale s has length T * V_s."""
    decoded = np.asarray(decoded)
    preds: list[np.ndarray | None] = [None] * len(layout)
    for s in range(layout.num_scales - 1, -1, -1):
        idx = [t.linear_index for t in layout.tokens if t.scale == s]
        if not idx:
            continue
        block, _ = affine_fwd(decoded[idx], params[f"psi.{s}.W"], params[f"psi.{s}.b"])
        for row, i in enumerate(idx):
            preds[i] = block[row]
    return preds


def normalize_targets(y: np.ndarray) -> np.ndarray:
    """Per-token standardization of target rows, with a variance floor so
    constant targets stay finite."""
    mu = y.mean(axis=-1, keepdims=True)
    var = y.var(axis=-1, keepdims=True)
    return (y - mu) / np.sqrt(np.maximum(var, PATCH_NORM_VAR_FLOOR))


def scale_aware_loss(
    predictions,
    targets,
    layout: TokenLayout,
    plan: MaskPlan,
    patch_norm: bool = False,
) -> LossReport:
    """Squared error over masked tokens, normalized per scale by masked
    count and patch volume, summed over scales."""
    if len(predictions) != len(layout) or len(targets) != len(layout):
        raise ShapeMismatchError("predictions/targets must align with the token layout")
    k = layout.num_scales
    per_scale = [0.0] * k
    masked_counts = [0] * k
    volumes = [(layout.base_edge * (1 << s)) ** 3 for s in range(k)]

    for s in range(k):
        rows = [t.linear_index for t in layout.tokens if t.scale == s and plan.masked[t.linear_index]]
        masked_counts[s] = len(rows)
        if not rows:
            continue
        length = None
        sq_sum = 0.0
        for i in rows:
            pred = np.asarray(predictions[i], dtype=np.float64).reshape(-1)
            y = np.asarray(targets[i], dtype=np.float64).reshape(-1)
            if length is None:
                length = pred.size
            if pred.size != y.size or pred.size != length:
                raise ShapeMismatchError(f"token {i}: prediction/target size mismatch")
            if patch_norm:
                y = normalize_targets(y[None, :])[0]
            diff = pred - y
            sq_sum += float(diff @ diff)
        per_scale[s] = sq_sum / (masked_counts[s] * volumes[s])

    total = 0.0
    for v in per_scale:
        total += v
    return LossReport(total, tuple(per_scale), tuple(masked_counts), tuple(volumes))


def _grouped_positions(layout: TokenLayout, selector: np.ndarray) -> list[np.ndarray]:
    """Canonical positions of selected tokens, grouped per scale."""
    groups = [[] for _ in range(layout.num_scales)]
    for t in layout.tokens:
        if selector[t.linear_index]:
            groups[t.scale].append(t.linear_index)
    return [np.asarray(g, dtype=np.int64) for g in groups]


def forward_loss(
    params: ModelParams,
    vol: Volume4D,
    layout: TokenLayout,
    plan: MaskPlan,
    config: ModelConfig | None = None,
    *,
    with_tape: bool = False,
):
    """End-to-end objective on one volume: extract, embed visible, encode,
    decode with mask substitution, reconstruct, score."""
    cfg = config or params.config
    if cfg.base_edge != layout.base_edge or cfg.num_scales != layout.num_scales:
        raise ShapeMismatchError("layout patching disagrees with the model config")
    if vol.dims[3] != cfg.frames:
        raise ShapeMismatchError(f"volume has {vol.dims[3]} frames, model expects {cfg.frames}")
    p = params.arrays
    dtype = params.dtype
    n = len(layout)
    if plan.masked.shape[0] != n:
        raise ShapeMismatchError("mask plan length disagrees with the layout")

    visible_pos = np.flatnonzero(~plan.masked)
    if visible_pos.size == 0:
        raise EmptyInputError("mask plan leaves no visible tokens to encode")
    vis_groups = _grouped_positions(layout, ~plan.masked)
    mask_groups = _grouped_positions(layout, plan.masked)

    # visible embeddings, batched per scale, scattered into encoder order
    emb = np.zeros((visible_pos.size, cfg.embed_dim), dtype=dtype)
    embed_caches: list[tuple] = [None] * cfg.num_scales
    for s in range(cfg.num_scales - 1, -1, -1):
        pos_idx = vis_groups[s]
        if pos_idx.size == 0:
            continue
        toks = [layout.tokens[i] for i in pos_idx]
        x = np.stack([extract_token_voxels(vol, t, layout.base_edge) for t in toks]).astype(dtype)
        pos_enc = sincos_embedding(_centers(toks, layout.base_edge), cfg.embed_dim).astype(dtype)
        z, cache = embed_scale_fwd(p, x, s, pos_enc, cfg)
        emb[np.searchsorted(visible_pos, pos_idx)] = z
        embed_caches[s] = cache

    enc_out, enc_caches = stack_fwd(emb, p, "enc", cfg.enc_depth, cfg.enc_heads)
    latents, _ = affine_fwd(enc_out, p["enc_to_dec.W"], p["enc_to_dec.b"])

    seq = decoder_inputs(params, latents, layout, plan)
    decoded, dec_caches = stack_fwd(seq, p, "dec", cfg.dec_depth, cfg.dec_heads)

    per_scale = [0.0] * cfg.num_scales
    masked_counts = [0] * cfg.num_scales
    volumes = [cfg.voxel_volume(s) for s in range(cfg.num_scales)]
    residuals: list[np.ndarray | None] = [None] * cfg.num_scales
    for s in range(cfg.num_scales - 1, -1, -1):
        pos_idx = mask_groups[s]
        masked_counts[s] = int(pos_idx.size)
        if pos_idx.size == 0:
            continue
        toks = [layout.tokens[i] for i in pos_idx]
        y = np.stack([extract_token_voxels(vol, t, layout.base_edge) for t in toks]).astype(np.float64)
        if cfg.patch_norm_targets:
            y = normalize_targets(y)
        preds, _ = affine_fwd(decoded[pos_idx], p[f"psi.{s}.W"], p[f"psi.{s}.b"])
        r = preds.astype(np.float64) - y
        residuals[s] = r
        per_scale[s] = float((r * r).sum()) / (pos_idx.size * volumes[s])

    total = 0.0
    for v in per_scale:
        total += v
    report = LossReport(total, tuple(per_scale), tuple(masked_counts), tuple(volumes))
    if not with_tape:
        return report

    tape = {
        "cfg": cfg,
        "layout": layout,
        "plan": plan,
        "visible_pos": visible_pos,
        "vis_groups": vis_groups,
        "mask_groups": mask_groups,
        "embed_caches": embed_caches,
        "enc_caches": enc_caches,
        "enc_out": enc_out,
        "dec_caches": dec_caches,
        "decoded": decoded,
        "residuals": residuals,
        "volumes": volumes,
    }
    return report, tape


def backward(params: ModelParams, tape: dict) -> dict[str, np.ndarray]:
    """Analytic gradients of the total loss for every parameter array.

    Accumulation follows the fixed canonical order (scales descending,
    tokens in layout order), so repeated runs are bit-identical.
    """
    cfg: ModelConfig = tape["cfg"]
    p = params.arrays
    dtype = params.dtype
    grads = params.zeros_like()

    layout: TokenLayout = tape["layout"]
    plan: MaskPlan = tape["plan"]
    visible_pos: np.ndarray = tape["visible_pos"]
    decoded: np.ndarray = tape["decoded"]
    n = len(layout)

    ddecoded = np.zeros_like(decoded)
    for s in range(cfg.num_scales - 1, -1, -1):
        pos_idx = tape["mask_groups"][s]
        if pos_idx.size == 0:
            continue
        r = tape["residuals"][s]
        dpred = (2.0 / (pos_idx.size * tape["volumes"][s]) * r).astype(dtype)
        ddecoded[pos_idx] += affine_bwd(
            dpred, decoded[pos_idx], p[f"psi.{s}.W"], grads, f"psi.{s}.W", f"psi.{s}.b"
        )

    dseq = stack_bwd(ddecoded, p, "dec", cfg.dec_depth, cfg.dec_heads, tape["dec_caches"], grads)

    scales_arr = np.array([t.scale for t in layout.tokens], dtype=np.int64)
    for s in range(cfg.num_scales - 1, -1, -1):
        rows = dseq[scales_arr == s]
        if rows.size:
            grads["scale_table"][s] += rows.sum(axis=0)
    if plan.masked.any():
        grads["mask_token"] += dseq[plan.masked].sum(axis=0)

    dlatents = dseq[visible_pos]
    denc_out = affine_bwd(
        dlatents, tape["enc_out"], p["enc_to_dec.W"], grads, "enc_to_dec.W", "enc_to_dec.b"
    )
    demb = stack_bwd(denc_out, p, "enc", cfg.enc_depth, cfg.enc_heads, tape["enc_caches"], grads)

    for s in range(cfg.num_scales - 1, -1, -1):
        pos_idx = tape["vis_groups"][s]
        if pos_idx.size == 0:
            continue
        dz = demb[np.searchsorted(visible_pos, pos_idx)]
        embed_scale_bwd(p, dz, s, tape["embed_caches"][s], cfg, grads)
    return grads
