"""Dual-path projection of mixed-scale tokens into the shared latent space.

Base-resolution tokens go straight through the shared patch projection
``phi``. A token at scale s >= 1 combines two paths:

* low-frequency: spatially average-pool the patch by 2^s down to the base
  edge (time untouched) and apply ``phi``;
* detail residual: apply ``phi`` to each of the 2^s-per-axis base-edge
  sub-patches, fuse the resulting grid pairwise per axis with the shared
  8C -> C aggregator (applied s times), and pass the fused vector through
  the zero-initialized residual MLP.

Both terms plus the positional encoding sum into the composite embedding;
because the residual MLP's last layer starts at zero, a fresh model sees
only the low-frequency path.

The batched entry points below process all same-scale tokens as one matrix
(N, T * V_s); gradients accumulate into the shared parameter dict.
"""

from __future__ import annotations

import numpy as np

from .layers import affine_bwd, affine_fwd, gelu_bwd, gelu_fwd

__all__ = ["embed_scale_fwd", "embed_scale_bwd"]


def _pool_to_base(x: np.ndarray, frames: int, base: int, factor: int) -> np.ndarray:
    """(N, T*E^3) -> (N, T*base^3) average pooling by ``factor`` per axis."""
    n = x.shape[0]
    blocked = x.reshape(n, frames, base, factor, base, factor, base, factor)
    return blocked.mean(axis=(3, 5, 7)).reshape(n, frames * base**3)


def _split_grid(x: np.ndarray, frames: int, base: int, factor: int) -> np.ndarray:
    """(N, T*E^3) -> (N, factor^3, T*base^3) base-edge sub-patches (z, y, x order)."""
    n = x.shape[0]
    blocked = x.reshape(n, frames, factor, base, factor, base, factor, base)
    grid = blocked.transpose(0, 2, 4, 6, 1, 3, 5, 7)
    return grid.reshape(n, factor**3, frames * base**3)


def _merge_grid_bwd(dgrid: np.ndarray, frames: int, base: int, factor: int) -> np.ndarray:
    """Adjoint of ``_split_grid``: scatter sub-patch grads back to (N, T*E^3)."""
    n = dgrid.shape[0]
    g = dgrid.reshape(n, factor, factor, factor, frames, base, base, base)
    blocked = g.transpose(0, 4, 1, 5, 2, 6, 3, 7)
    return blocked.reshape(n, frames * (base * factor) ** 3)


def embed_scale_fwd(p, x: np.ndarray, scale: int, pos: np.ndarray, config):
    """Composite embeddings for a batch of same-scale tokens.

    ``x`` is (N, T*V_s) in the canonical (t, z, y, x) flat order, ``pos``
    the matching (N, C) positional encodings. Returns (z, cache).
    """
    frames, base = config.frames, config.base_edge
    if scale == 0:
        direct, _ = affine_fwd(x, p["phi.W"], p["phi.b"])
        return direct + pos, (x, None)

    factor = 1 << scale
    x_down = _pool_to_base(x, frames, base, factor)
    low, _ = affine_fwd(x_down, p["phi.W"], p["phi.b"])

    grid = _split_grid(x, frames, base, factor)
    n = grid.shape[0]
    sub, _ = affine_fwd(grid.reshape(n * factor**3, -1), p["phi.W"], p["phi.b"])
    cur = sub.reshape(n, factor, factor, factor, -1)
    level_inputs = []
    half = factor
    while half > 1:
        half //= 2
        c = cur.shape[-1]
        blocks = cur.reshape(n, half, 2, half, 2, half, 2, c)
        flat = blocks.transpose(0, 1, 3, 5, 2, 4, 6, 7).reshape(n * half**3, 8 * c)
        level_inputs.append(flat)
        fused, _ = affine_fwd(flat, p["grid_agg.W"], p["grid_agg.b"])
        cur = fused.reshape(n, half, half, half, c)
    conv_out = cur.reshape(n, -1)

    z1, _ = affine_fwd(conv_out, p["zero_mlp.W1"], p["zero_mlp.b1"])
    g, _ = gelu_fwd(z1)
    detail, _ = affine_fwd(g, p["zero_mlp.W2"], p["zero_mlp.b2"])

    z = low + detail + pos
    cache = (x, (x_down, grid, level_inputs, conv_out, z1, g))
    return z, cache


def embed_scale_bwd(p, dz: np.ndarray, scale: int, cache, config, grads) -> None:
    """Accumulate parameter gradients for one same-scale batch."""
    frames, base = config.frames, config.base_edge
    x, deep = cache
    if scale == 0:
        affine_bwd(dz, x, p["phi.W"], grads, "phi.W", "phi.b")
        return

    factor = 1 << scale
    x_down, grid, level_inputs, conv_out, z1, g = deep
    affine_bwd(dz, x_down, p["phi.W"], grads, "phi.W", "phi.b")

    dg = affine_bwd(dz, g, p["zero_mlp.W2"], grads, "zero_mlp.W2", "zero_mlp.b2")
    dz1 = gelu_bwd(dg, z1)
    dconv = affine_bwd(dz1, conv_out, p["zero_mlp.W1"], grads, "zero_mlp.W1", "zero_mlp.b1")

    n = dz.shape[0]
    c = dconv.shape[-1]
    dcur = dconv.reshape(n, 1, 1, 1, c)
    half_sizes = []
    half = factor
    while half > 1:
        half //= 2
        half_sizes.append(half)
    for half, flat in zip(reversed(half_sizes), reversed(level_inputs)):
        dflat = affine_bwd(
            dcur.reshape(n * half**3, c), flat, p["grid_agg.W"], grads,
            "grid_agg.W", "grid_agg.b",
        )
        dblocks = dflat.reshape(n, half, half, half, 2, 2, 2, c)
        dcur = dblocks.transpose(0, 1, 4, 2, 5, 3, 6, 7).reshape(n, 2 * half, 2 * half, 2 * half, c)

    dsub = dcur.reshape(n * factor**3, c)
    affine_bwd(dsub, grid.reshape(n * factor**3, -1), p["phi.W"], grads, "phi.W", "phi.b")
