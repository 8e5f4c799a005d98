"""Mixed-scale token partition of foreground voxels and MAE mask plans.

The pipeline: coarse cells whose normalized mean intensity sits below the
background threshold are pruned; surviving cells are kept as one coarse
token when their complexity score is below the gate ``tau`` and otherwise
split into 2^3 children per level down to the base edge. Fine children are
re-tested against the background threshold by default, so mixed tissue/air
cells shed their empty corners.

Background tests always run on the pre-standardization volume (normalized
by its global max into [0, 1]); complexity gating runs on whatever volume
the caller scored, conventionally the globally standardized one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as _rng
from .complexity import ComplexityMap, complexity_map, temporal_mean
from .errors import GridMismatchError, NotDivisibleError, OutOfBoundsError
from .volume import Volume4D, zscore_global

__all__ = [
    "TokenRec",
    "TokenLayout",
    "MaskPlan",
    "TokenCountReport",
    "prune_background",
    "partition",
    "tokenize",
    "token_count_report",
    "extract_token_voxels",
    "sample_mask",
    "write_token_layout",
    "read_token_layout",
    "write_mask_plan",
    "read_mask_plan",
]


@dataclass(frozen=True)
class TokenRec:
    """One token: origin voxel (x, y, z), scale index, canonical position."""

    origin: tuple[int, int, int]
    scale: int
    linear_index: int = -1

    def edge(self, base_edge: int) -> int:
        return base_edge * (1 << self.scale)


@dataclass(frozen=True)
class TokenLayout:
    """The exact mixed-scale partition of retained voxels.

    Tokens are in canonical order: scale descending, then z, y, x of the
    origin. ``fg_cells`` records how many coarse cells survived background
    pruning (needed for the uniform-grid comparison in count reports).
    """

    tokens: tuple[TokenRec, ...]
    base_edge: int
    num_scales: int
    volume_dims: tuple[int, int, int, int]
    tau: float
    bg_thresh: float
    fg_cells: int

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def coarse_edge(self) -> int:
        return self.base_edge * (1 << (self.num_scales - 1))

    def scale_counts(self) -> tuple[int, ...]:
        counts = [0] * self.num_scales
        for tok in self.tokens:
            counts[tok.scale] += 1
        return tuple(counts)


@dataclass(frozen=True)
class MaskPlan:
    """Seed-derived visible/masked assignment, one flag per token."""

    masked: np.ndarray
    ratio: float
    seed: int

    def __post_init__(self):
        arr = np.ascontiguousarray(self.masked, dtype=bool)
        arr.setflags(write=False)
        object.__setattr__(self, "masked", arr)

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())


@dataclass(frozen=True)
class TokenCountReport:
    per_scale: tuple[int, ...]
    total: int
    uniform_fine_total: int
    reduction_ratio: float


def _normalized_mean_field(vol: Volume4D) -> np.ndarray:
    """Temporal mean, max-normalized into [0, 1]; all zeros if max <= 0."""
    field = temporal_mean(vol).data[0].astype(np.float64)
    peak = field.max()
    if peak <= 0.0:
        return np.zeros_like(field)
    return field / peak


def prune_background(vol: Volume4D, coarse_edge: int, bg_thresh: float) -> np.ndarray:
    """Foreground mask over the coarse grid (True = keep).

    A cell is background iff the mean of the max-normalized temporal-mean
    intensity over its patch is below ``bg_thresh``. Shape (Gz, Gy, Gx).
    """
    h, w, d, _ = vol.dims
    if h % coarse_edge or w % coarse_edge or d % coarse_edge:
        raise NotDivisibleError(f"dims {(h, w, d)} not divisible by coarse edge {coarse_edge}")
    norm = _normalized_mean_field(vol)
    e = coarse_edge
    blocked = norm.reshape(d // e, e, w // e, e, h // e, e)
    cell_means = blocked.mean(axis=(1, 3, 5))
    return cell_means >= bg_thresh


def _box_is_background(norm: np.ndarray, origin: tuple[int, int, int], edge: int, thresh: float) -> bool:
    x, y, z = origin
    return float(norm[z:z + edge, y:y + edge, x:x + edge].mean()) < thresh


def _box_variance(vol: Volume4D, origin: tuple[int, int, int], edge: int) -> float:
    """Time-averaged spatial population variance of one box (gate metric)."""
    x, y, z = origin
    frames = vol.data[:, z:z + edge, y:y + edge, x:x + edge].astype(np.float64)
    per_frame = (frames * frames).mean(axis=(1, 2, 3)) - frames.mean(axis=(1, 2, 3)) ** 2
    return float(per_frame.mean())


def partition(
    cmap: ComplexityMap,
    fg: np.ndarray,
    tau: float,
    base_edge: int = 4,
    num_scales: int = 2,
    *,
    bg_thresh: float = 1e-3,
    bg_vol: Volume4D | None = None,
    score_vol: Volume4D | None = None,
    subpatch_bg_check: bool = True,
) -> TokenLayout:
    """Gate each foreground coarse cell into one coarse token or sub-tokens.

    A cell with score < tau stays coarse (ties subdivide); otherwise it is
    split recursively. ``bg_vol`` (the pre-standardization volume) enables
    the per-child background re-test; ``score_vol`` supplies the on-the-fly
    variance used to re-gate intermediate levels when num_scales > 2.
    """
    if num_scales < 1:
        raise ValueError("num_scales must be >= 1")
    coarse = base_edge * (1 << (num_scales - 1))
    if cmap.coarse_edge != coarse:
        raise GridMismatchError(
            f"cmap coarse_edge {cmap.coarse_edge} != base_edge * 2^(K-1) = {coarse}"
        )
    fg = np.asarray(fg, dtype=bool)
    if fg.shape != cmap.scores.shape:
        raise GridMismatchError(f"fg grid {fg.shape} != score grid {cmap.scores.shape}")
    if num_scales > 2 and score_vol is None:
        raise ValueError("score_vol is required to re-gate intermediate levels (num_scales > 2)")
    check_children = subpatch_bg_check and num_scales > 1 and bg_vol is not None
    norm = _normalized_mean_field(bg_vol) if check_children else None

    gz, gy, gx = cmap.scores.shape
    dims = (gx * coarse, gy * coarse, gz * coarse)
    tokens: list[TokenRec] = []

    def descend(origin: tuple[int, int, int], scale: int, score: float) -> None:
        if scale == 0 or score < tau:
            tokens.append(TokenRec(origin, scale))
            return
        x, y, z = origin
        half = base_edge * (1 << (scale - 1))
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    child = (x + dx * half, y + dy * half, z + dz * half)
                    if check_children and _box_is_background(norm, child, half, bg_thresh):
                        continue
                    child_score = (
                        _box_variance(score_vol, child, half) if scale - 1 > 0 else 0.0
                    )
                    descend(child, scale - 1, child_score)

    for cz in range(gz):
        for cy in range(gy):
            for cx in range(gx):
                if not fg[cz, cy, cx]:
                    continue
                descend((cx * coarse, cy * coarse, cz * coarse), num_scales - 1,
                        float(cmap.scores[cz, cy, cx]))

    tokens.sort(key=lambda t: (-t.scale, t.origin[2], t.origin[1], t.origin[0]))
    ordered = tuple(
        TokenRec(t.origin, t.scale, i) for i, t in enumerate(tokens)
    )
    if bg_vol is not None:
        h, w, d, t = bg_vol.dims
        volume_dims = (h, w, d, t)
    elif score_vol is not None:
        h, w, d, t = score_vol.dims
        volume_dims = (h, w, d, t)
    else:
        volume_dims = (dims[0], dims[1], dims[2], 1)
    return TokenLayout(
        tokens=ordered,
        base_edge=base_edge,
        num_scales=num_scales,
        volume_dims=volume_dims,
        tau=float(tau),
        bg_thresh=float(bg_thresh),
        fg_cells=int(fg.sum()),
    )


def tokenize(
    vol: Volume4D,
    tau: float = 0.25,
    base_edge: int = 4,
    num_scales: int = 2,
    bg_thresh: float = 1e-3,
    metric: str = "variance",
    *,
    standardize: bool = True,
    subpatch_bg_check: bool = True,
) -> TokenLayout:
    """Full tokenization pipeline for a raw (non-negative) volume.

    Background pruning runs on ``vol`` as given; complexity scoring runs on
    the globally standardized copy when ``standardize`` is set (the working
    intensity scale the default tau is calibrated for).
    """
    coarse = base_edge * (1 << (num_scales - 1))
    fg = prune_background(vol, coarse, bg_thresh)
    if not fg.any():
        h, w, d, t = vol.dims
        return TokenLayout((), base_edge, num_scales, (h, w, d, t),
                           float(tau), float(bg_thresh), 0)
    scored = zscore_global(vol) if standardize else vol
    cmap = complexity_map(scored, coarse, metric)
    return partition(
        cmap, fg, tau, base_edge, num_scales,
        bg_thresh=bg_thresh, bg_vol=vol, score_vol=scored,
        subpatch_bg_check=subpatch_bg_check,
    )


def token_count_report(layout: TokenLayout) -> TokenCountReport:
    """Per-scale counts plus the uniform fine-grid comparison.

    ``uniform_fine_total`` is the fine-cell count of the foreground region
    (fg cells x 8^(K-1)); ``reduction_ratio`` divides the dynamic total by
    the uniform fine grid over the whole volume.
    """
    per_scale = layout.scale_counts()
    total = len(layout)
    uniform_fine = layout.fg_cells * 8 ** (layout.num_scales - 1)
    h, w, d, _ = layout.volume_dims
    b = layout.base_edge
    whole_grid = (h // b) * (w // b) * (d // b)
    ratio = total / whole_grid if whole_grid else 0.0
    return TokenCountReport(per_scale, total, uniform_fine, ratio)


def extract_token_voxels(vol: Volume4D, tok: TokenRec, base_edge: int) -> np.ndarray:
    """Flat (t outer, z, y, x inner) voxel vector of length T * edge^3."""
    edge = tok.edge(base_edge)
    x, y, z = tok.origin
    h, w, d, _ = vol.dims
    if x < 0 or y < 0 or z < 0 or x + edge > h or y + edge > w or z + edge > d:
        raise OutOfBoundsError(f"token at {tok.origin} edge {edge} exceeds dims {(h, w, d)}")
    return vol.data[:, z:z + edge, y:y + edge, x:x + edge].ravel()


def sample_mask(layout: TokenLayout, ratio: float, seed: int, *, stratified: bool = False) -> MaskPlan:
    """Mask floor(ratio * N) tokens via a seeded Fisher-Yates shuffle.

    Uniform over all tokens by default. ``stratified`` instead masks
    floor(ratio * N_s) tokens within each scale (descending scale order,
    one continuous draw stream), a config variant with no default role.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    n = len(layout)
    masked = np.zeros(n, dtype=bool)
    gen = _rng.stream(seed)
    if not stratified:
        order = _rng.shuffled(n, gen)
        masked[order[: int(math.floor(ratio * n))]] = True
    else:
        for s in range(layout.num_scales - 1, -1, -1):
            idx = np.array([t.linear_index for t in layout.tokens if t.scale == s], dtype=np.int64)
            order = _rng.shuffled(len(idx), gen)
            masked[idx[order[: int(math.floor(ratio * len(idx)))]]] = True
    return MaskPlan(masked, float(ratio), int(seed))


def write_token_layout(layout: TokenLayout, path) -> None:
    h, w, d, t = layout.volume_dims
    Path(path).write_text(
        json.dumps(
            {
                "dims": [h, w, d, t],
                "base_edge": layout.base_edge,
                "K": layout.num_scales,
                "tau": layout.tau,
                "bg_thresh": layout.bg_thresh,
                "fg_cells": layout.fg_cells,
                "tokens": [{"o": list(tok.origin), "s": tok.scale} for tok in layout.tokens],
            }
        )
    )


def read_token_layout(path) -> TokenLayout:
    meta = json.loads(Path(path).read_text())
    tokens = tuple(
        TokenRec((int(rec["o"][0]), int(rec["o"][1]), int(rec["o"][2])), int(rec["s"]), i)
        for i, rec in enumerate(meta["tokens"])
    )
    return TokenLayout(
        tokens=tokens,
        base_edge=int(meta["base_edge"]),
        num_scales=int(meta["K"]),
        volume_dims=tuple(int(v) for v in meta["dims"]),
        tau=float(meta["tau"]),
        bg_thresh=float(meta["bg_thresh"]),
        fg_cells=int(meta.get("fg_cells", 0)),
    )


def write_mask_plan(plan: MaskPlan, path) -> None:
    Path(path).write_text(
        json.dumps(
            {
                "seed": plan.seed,
                "ratio": plan.ratio,
                "masked": np.flatnonzero(plan.masked).tolist(),
            }
        )
    )


def read_mask_plan(path, num_tokens: int) -> MaskPlan:
    meta = json.loads(Path(path).read_text())
    masked = np.zeros(num_tokens, dtype=bool)
    masked[np.asarray(meta["masked"], dtype=np.int64)] = True
    return MaskPlan(masked, float(meta["ratio"]), int(meta["seed"]))
