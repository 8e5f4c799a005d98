"""Per-coarse-patch spatiotemporal complexity scores.

Four interchangeable metrics over a non-overlapping grid of cubic patches:

* ``variance`` (default gate input): mean over time of the per-frame spatial
  population variance within the patch, E[I_t^2] - E[I_t]^2 averaged over t;
* ``entropy``: Shannon entropy (bits) of the patch's temporal-mean intensity
  histogram, binned over the volume-global value range;
* ``laplacian``: mean absolute response of the temporal mean under the
  3x3x3 stencil with 26 unit neighbors and center weight -26 (replicated
  edge values at the volume border, so constant volumes score zero);
* ``recon_mse``: mean squared error of the temporal mean against its
  average-pool-then-trilinear-upsample reconstruction.

Scores are stored z-outer / x-fastest, mirroring the volume layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NotDivisibleError
from .volume import Volume4D, resample_spatial_trilinear

__all__ = [
    "ComplexityMap",
    "METRICS",
    "temporal_mean",
    "variance_map",
    "entropy_map",
    "laplacian_map",
    "recon_error_map",
    "complexity_map",
    "write_complexity_map",
    "read_complexity_map",
]

METRICS = ("variance", "entropy", "laplacian", "recon_mse")

ENTROPY_EPS = 1e-12


@dataclass(frozen=True)
class ComplexityMap:
    """Non-negative per-patch scores on the coarse grid.

    ``scores`` has shape (Gz, Gy, Gx); ``grid_dims`` is reported as
    (Gx, Gy, Gz) to match the volume's (H, W, D) axis naming.
    """

    scores: np.ndarray
    coarse_edge: int
    metric: str

    def __post_init__(self):
        arr = np.ascontiguousarray(self.scores, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("scores must be a 3D grid")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if not np.isfinite(arr).all() or (arr < 0).any():
            raise ValueError("scores must be finite and non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "scores", arr)

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        gz, gy, gx = self.scores.shape
        return (gx, gy, gz)


def _check_divisible(vol: Volume4D, edge: int) -> tuple[int, int, int]:
    h, w, d, _ = vol.dims
    if edge < 1:
        raise ValueError("coarse_edge must be >= 1")
    if h % edge or w % edge or d % edge:
        raise NotDivisibleError(f"spatial dims {(h, w, d)} not divisible by edge {edge}")
    return h // edge, w // edge, d // edge


def _pool_mean(frames: np.ndarray, edge: int) -> np.ndarray:
    """Non-overlapping average pooling of (..., D, W, H) blocks of edge^3."""
    *lead, d, w, h = frames.shape
    blocked = frames.reshape(*lead, d // edge, edge, w // edge, edge, h // edge, edge)
    return blocked.mean(axis=(-5, -3, -1))


def _patchify(field: np.ndarray, edge: int) -> np.ndarray:
    """(D, W, H) scalar field -> (Gz*Gy*Gx, edge^3) rows in grid C-order."""
    d, w, h = field.shape
    blocked = field.reshape(d // edge, edge, w // edge, edge, h // edge, edge)
    return blocked.transpose(0, 2, 4, 1, 3, 5).reshape(-1, edge**3)


def temporal_mean(vol: Volume4D) -> Volume4D:
    """Per-voxel arithmetic mean over time, returned as a T=1 volume."""
    if vol.dims[3] == 1:
        return vol
    m = vol.data.astype(np.float64).mean(axis=0, keepdims=True)
    return vol.with_data(m.astype(vol.data.dtype))


def variance_map(vol: Volume4D, coarse_edge: int) -> ComplexityMap:
    """Time-averaged per-patch spatial population variance."""
    _check_divisible(vol, coarse_edge)
    frames = vol.data.astype(np.float64)
    mean = _pool_mean(frames, coarse_edge)
    mean_sq = _pool_mean(frames * frames, coarse_edge)
    per_frame_var = mean_sq - mean * mean
    scores = np.maximum(per_frame_var.mean(axis=0), 0.0)
    return ComplexityMap(scores, coarse_edge, "variance")


def entropy_map(vol: Volume4D, coarse_edge: int, bins: int = 512) -> ComplexityMap:
    """Shannon entropy (bits) of the temporal-mean histogram per patch.

    Bin edges span the global min-max of the temporal mean, so patches with
    different offsets remain comparable; a globally constant field scores 0.
    """
    gx, gy, gz = _check_divisible(vol, coarse_edge)  # noqa: F841 (validation)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    mean_field = temporal_mean(vol).data[0].astype(np.float64)
    lo, hi = mean_field.min(), mean_field.max()
    n_patches = mean_field.size // coarse_edge**3

    if hi == lo:
        scores = np.zeros(n_patches, dtype=np.float64)
    else:
        idx = np.floor((mean_field - lo) / (hi - lo) * bins).astype(np.int64)
        np.clip(idx, 0, bins - 1, out=idx)
        rows = _patchify(idx, coarse_edge)
        offsets = np.arange(n_patches, dtype=np.int64)[:, None] * bins
        counts = np.bincount((rows + offsets).ravel(), minlength=n_patches * bins)
        p = counts.reshape(n_patches, bins) / rows.shape[1]
        scores = np.maximum(-(p * np.log2(p + ENTROPY_EPS)).sum(axis=1), 0.0)

    d, w, h = mean_field.shape
    grid = (d // coarse_edge, w // coarse_edge, h // coarse_edge)
    return ComplexityMap(scores.reshape(grid), coarse_edge, "entropy")


def laplacian_response(vol: Volume4D) -> np.ndarray:
    """Temporal mean convolved with the 26-neighbor / -26 center stencil.

    Border voxels see replicated edge values, which keeps the response of a
    constant volume identically zero; returns the (D, W, H) response field.
    """
    field = temporal_mean(vol).data[0].astype(np.float64)
    padded = np.pad(field, 1, mode="edge")
    d, w, h = field.shape
    neighborhood = np.zeros_like(field)
    for dz in (0, 1, 2):
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                neighborhood += padded[dz:dz + d, dy:dy + w, dx:dx + h]
    return neighborhood - 27.0 * field


def laplacian_map(vol: Volume4D, coarse_edge: int) -> ComplexityMap:
    """Mean absolute 3D Laplacian stencil response per patch."""
    _check_divisible(vol, coarse_edge)
    response = np.abs(laplacian_response(vol))
    scores = _pool_mean(response, coarse_edge)
    return ComplexityMap(scores, coarse_edge, "laplacian")


def recon_error_map(vol: Volume4D, coarse_edge: int, scale_factor: int = 2) -> ComplexityMap:
    """Per-patch MSE of the temporal mean against its pool-then-upsample proxy."""
    _check_divisible(vol, coarse_edge)
    h, w, d, _ = vol.dims
    if scale_factor < 1:
        raise ValueError("scale_factor must be >= 1")
    if h % scale_factor or w % scale_factor or d % scale_factor:
        raise NotDivisibleError(
            f"spatial dims {(h, w, d)} not divisible by scale_factor {scale_factor}"
        )
    mean_vol = temporal_mean(vol)
    pooled = _pool_mean(mean_vol.data.astype(np.float64), scale_factor)
    down = Volume4D(pooled, mean_vol.spacing_mm, mean_vol.tr_seconds)
    recon = resample_spatial_trilinear(down, (h, w, d))
    err = (mean_vol.data[0].astype(np.float64) - recon.data[0].astype(np.float64)) ** 2
    scores = _pool_mean(err, coarse_edge)
    return ComplexityMap(scores, coarse_edge, "recon_mse")


def complexity_map(vol: Volume4D, coarse_edge: int, metric: str = "variance", **kwargs) -> ComplexityMap:
    """Dispatch to one of the four metrics by name."""
    if metric == "variance":
        return variance_map(vol, coarse_edge)
    if metric == "entropy":
        return entropy_map(vol, coarse_edge, **kwargs)
    if metric == "laplacian":
        return laplacian_map(vol, coarse_edge)
    if metric == "recon_mse":
        return recon_error_map(vol, coarse_edge, **kwargs)
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


def write_complexity_map(cmap: ComplexityMap, path) -> None:
    """Write ``{"grid": [Gx,Gy,Gz], "coarse_edge", "metric", "scores"}`` JSON.

    Scores are serialized x-fastest (C-order of the internal grid).
    """
    gx, gy, gz = cmap.grid_dims
    Path(path).write_text(
        json.dumps(
            {
                "grid": [gx, gy, gz],
                "coarse_edge": cmap.coarse_edge,
                "metric": cmap.metric,
                "scores": cmap.scores.ravel().tolist(),
            }
        )
    )


def read_complexity_map(path) -> ComplexityMap:
    meta = json.loads(Path(path).read_text())
    gx, gy, gz = (int(v) for v in meta["grid"])
    scores = np.asarray(meta["scores"], dtype=np.float64).reshape(gz, gy, gx)
    return ComplexityMap(scores, int(meta["coarse_edge"]), str(meta["metric"]))
