"""Fixed 3D sinusoidal positional encoding of token centers.

Tokens are located by the center of their voxel extent: origin plus
(edge - 1)/2 per axis, in voxel units. Scale never enters here; two tokens
with the same center share the same encoding regardless of granularity.

Channels split into three equal per-axis groups (x, then y, then z), each
an interleaved sin/cos ladder over frequencies 10000^(-2k/d). When ``dim``
is not a multiple of 6 the trailing remainder channels are zero.
"""

from __future__ import annotations

import numpy as np

from ..errors import BadDimError
from ..tokenizer import TokenRec

__all__ = ["token_center", "sincos_embedding", "positional_embedding"]


def token_center(tok: TokenRec, base_edge: int) -> tuple[float, float, float]:
    edge = tok.edge(base_edge)
    x, y, z = tok.origin
    half = (edge - 1) / 2.0
    return (x + half, y + half, z + half)


def sincos_embedding(centers: np.ndarray, dim: int) -> np.ndarray:
    """(N, 3) centers -> (N, dim) float64 encodings."""
    if dim < 6 or dim % 2:
        raise BadDimError(f"embedding dim must be even and >= 6, got {dim}")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    per_axis = 2 * (dim // 6)
    freqs = 1.0 / (10000.0 ** (np.arange(per_axis // 2, dtype=np.float64) * 2.0 / per_axis))

    out = np.zeros((centers.shape[0], dim), dtype=np.float64)
    for axis in range(3):
        phase = centers[:, axis:axis + 1] * freqs[None, :]
        block = np.empty((centers.shape[0], per_axis), dtype=np.float64)
        block[:, 0::2] = np.sin(phase)
        block[:, 1::2] = np.cos(phase)
        out[:, axis * per_axis:(axis + 1) * per_axis] = block
    return out


def positional_embedding(tok: TokenRec, dim: int, base_edge: int, grid_dims=None) -> np.ndarray:
    """Encoding of one token's center; ``grid_dims`` is accepted for
    interface stability but unused by the sinusoidal form."""
    return sincos_embedding(np.array([token_center(tok, base_edge)]), dim)[0]
