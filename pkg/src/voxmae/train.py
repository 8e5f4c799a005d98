"""Desk-scale optimization loop, synthetic phantoms, and gradient checking.

Training is plain AdamW with a linear-warmup / cosine-decay schedule and a
fresh seed-derived mask plan per (sample, epoch). Everything is driven by
counter-based substreams, so a run is bit-reproducible from its seed.

Phantoms stand in for real acquisitions: a smooth baseline inside a
centered ellipsoid, a few Gaussian blobs oscillating over time, optional
white noise, and exact zeros outside. Blob patches carry visibly higher
spatiotemporal variance than the smooth interior, which is what gives the
complexity gate something to separate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as _rng
from .errors import BadSpecError, ShapeMismatchError
from .model import (
    ModelConfig,
    ModelParams,
    backward,
    forward_loss,
    init_model_params,
    save_checkpoint,
)
from .tokenizer import MaskPlan, TokenLayout, TokenRec, sample_mask, tokenize
from .volume import Volume4D, zscore_global

__all__ = [
    "TrainConfig",
    "PhantomSpec",
    "AdamWState",
    "TrainResult",
    "GradCheckReport",
    "make_phantom",
    "phantom_blob_centers",
    "lr_at",
    "adamw_step",
    "train_toy",
    "train_volumes",
    "evaluate_loss",
    "write_loss_csv",
    "gradcheck",
    "gradcheck_layout",
]

ADAM_EPS = 1e-8

# substream purposes (second Philox counter word)
_STREAM_MASK = 2
_STREAM_GRADCHECK_DATA = 7
_STREAM_GRADCHECK_SAMPLE = 11


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    min_lr: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    epochs: int = 35
    batch: int = 24
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.min_lr <= self.lr:
            raise ValueError("need 0 <= min_lr <= lr")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("need 0 <= warmup_epochs <= epochs")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")


@dataclass(frozen=True)
class PhantomSpec:
    """Seeded synthetic 4D volume description."""

    edge: int = 64
    frames: int = 8
    semi_axes: tuple[float, float, float] = (0.85, 0.85, 0.8)
    n_blobs: int = 6
    blob_amp: tuple[float, float] = (0.8, 1.6)
    blob_freq_hz: tuple[float, float] = (0.05, 0.2)
    blob_sigma: tuple[float, float] = (0.05, 0.10)
    baseline_offset: float = 1.0
    baseline_amp: tuple[float, float] = (0.05, 0.15)
    noise_sigma: float = 0.02
    tr_seconds: float = 0.72
    seed: int = 0

    def __post_init__(self):
        if self.edge < 8 or self.edge % 8:
            raise BadSpecError("edge must be a positive multiple of 8")
        if self.frames < 1:
            raise BadSpecError("frames must be >= 1")
        if not all(0.0 < a <= 1.0 for a in self.semi_axes):
            raise BadSpecError("semi_axes are fractions in (0, 1]")
        if self.n_blobs < 0 or self.noise_sigma < 0:
            raise BadSpecError("n_blobs and noise_sigma must be non-negative")
        for lo, hi in (self.blob_amp, self.blob_freq_hz, self.blob_sigma, self.baseline_amp):
            if not 0.0 < lo <= hi:
                raise BadSpecError("ranges must be positive with lo <= hi")
        if self.baseline_offset <= 0 or self.tr_seconds <= 0:
            raise BadSpecError("baseline_offset and tr_seconds must be positive")


def _draw_blobs(spec: PhantomSpec) -> list[tuple]:
    """Blob parameters (center, sigma, amp, freq, phase), seed-determined."""
    ax, ay, az = (f * spec.edge / 2.0 for f in spec.semi_axes)
    blob_rng = _rng.stream(spec.seed, 2)
    blobs = []
    for _ in range(spec.n_blobs):
        while True:
            cx, cy, cz = blob_rng.uniform(-1.0, 1.0, size=3)
            if cx * cx + cy * cy + cz * cz <= 1.0:
                break
        blobs.append(
            (
                (cx * ax, cy * ay, cz * az),
                blob_rng.uniform(*spec.blob_sigma) * spec.edge,
                blob_rng.uniform(*spec.blob_amp),
                blob_rng.uniform(*spec.blob_freq_hz),
                blob_rng.uniform(0.0, 2.0 * np.pi),
            )
        )
    return blobs


def phantom_blob_centers(spec: PhantomSpec) -> list[tuple[float, float, float]]:
    """Blob centers in centered voxel coordinates (x, y, z)."""
    return [blob[0] for blob in _draw_blobs(spec)]


def make_phantom(spec: PhantomSpec) -> Volume4D:
    """Deterministic phantom volume for the given spec.

    Outside the ellipsoid the volume is exactly zero; inside it is the
    baseline plus oscillating blobs plus noise, clamped at zero to keep
    intensities non-negative for the background test.
    """
    e, t = spec.edge, spec.frames
    axes = np.arange(e, dtype=np.float64) - (e - 1) / 2.0
    zc, yc, xc = np.meshgrid(axes, axes, axes, indexing="ij")
    ax, ay, az = (f * e / 2.0 for f in spec.semi_axes)
    mask = (xc / ax) ** 2 + (yc / ay) ** 2 + (zc / az) ** 2 <= 1.0

    base_rng = _rng.stream(spec.seed, 1)
    baseline = np.full((e, e, e), spec.baseline_offset)
    for grid in (xc, yc, zc):
        amp = base_rng.uniform(*spec.baseline_amp)
        phase = base_rng.uniform(0.0, 2.0 * np.pi)
        baseline += amp * np.cos(2.0 * np.pi * grid / e + phase)

    times = np.arange(t, dtype=np.float64) * spec.tr_seconds
    frames = np.broadcast_to(baseline, (t, e, e, e)).copy()
    for center, sigma, amp, freq, phase in _draw_blobs(spec):
        d2 = (xc - center[0]) ** 2 + (yc - center[1]) ** 2 + (zc - center[2]) ** 2
        envelope = amp * np.exp(-d2 / (2.0 * sigma * sigma))
        wave = np.sin(2.0 * np.pi * freq * times + phase)
        frames += wave[:, None, None, None] * envelope[None, :, :, :]

    if spec.noise_sigma > 0:
        noise_rng = _rng.stream(spec.seed, 3)
        frames = frames + noise_rng.normal(0.0, spec.noise_sigma, size=frames.shape)

    frames = np.maximum(frames, 0.0) * mask[None, :, :, :]
    return Volume4D(frames.astype(np.float32), spacing_mm=(2.0, 2.0, 2.0), tr_seconds=spec.tr_seconds)


def lr_at(step: int, total_steps: int, cfg: TrainConfig, warmup_steps: int | None = None) -> float:
    """Linear ramp 0 -> lr over the warmup span, then cosine decay to min_lr."""
    if not 0 <= step < total_steps:
        raise ValueError("need 0 <= step < total_steps")
    if warmup_steps is None:
        warmup_steps = round(total_steps * cfg.warmup_epochs / max(cfg.epochs, 1))
    if warmup_steps > 0 and step < warmup_steps:
        return cfg.lr * step / warmup_steps
    span = max(total_steps - 1 - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamWState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), t=0)


def adamw_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[ModelParams, AdamWState]:
    """One decoupled-weight-decay Adam update (in place, fixed key order)."""
    b1, b2 = cfg.betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in params.arrays:
        g = grads[name]
        if g.shape != params.arrays[name].shape:
            raise ShapeMismatchError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        theta = params.arrays[name]
        theta -= (lr * update + lr * cfg.weight_decay * theta).astype(theta.dtype)
    return params, state


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list[float]
    rows: list[tuple] = field(default_factory=list)  # (epoch, step, lr, total, *per_scale)

    @property
    def initial_loss(self) -> float:
        return self.rows[0][3]

    @property
    def final_loss(self) -> float:
        return self.rows[-1][3]


def _prepare_sample(vol: Volume4D, model_cfg: ModelConfig, tau: float, bg_thresh: float):
    layout = tokenize(
        vol, tau=tau, base_edge=model_cfg.base_edge,
        num_scales=model_cfg.num_scales, bg_thresh=bg_thresh,
    )
    if len(layout) == 0:
        raise BadSpecError("phantom tokenized to an empty layout")
    return zscore_global(vol), layout


def train_toy(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    phantom_specs: list[PhantomSpec],
    *,
    tau: float = 0.25,
    bg_thresh: float = 1e-3,
    mask_ratio: float | None = None,
    out_dir=None,
    dtype=np.float32,
) -> TrainResult:
    """Overfit the model on a handful of phantoms (see ``train_volumes``)."""
    return train_volumes(
        model_cfg, train_cfg, [make_phantom(s) for s in phantom_specs],
        tau=tau, bg_thresh=bg_thresh, mask_ratio=mask_ratio, out_dir=out_dir, dtype=dtype,
    )


def train_volumes(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    volumes: list[Volume4D],
    *,
    tau: float = 0.25,
    bg_thresh: float = 1e-3,
    mask_ratio: float | None = None,
    out_dir=None,
    dtype=np.float32,
    progress=None,
) -> TrainResult:
    """Masked-autoencoder pretraining over in-memory volumes.

    One optimizer step per batch of samples (ascending sample order, mean
    gradient); a fresh mask plan per (epoch, sample) drawn from the
    substream (seed; 2, epoch, sample). Writes ``checkpoint.bin`` and
    ``loss.csv`` into ``out_dir`` when given.
    """
    ratio = model_cfg.mask_ratio if mask_ratio is None else mask_ratio
    samples = [_prepare_sample(vol, model_cfg, tau, bg_thresh) for vol in volumes]
    params = init_model_params(model_cfg, seed=train_cfg.seed, dtype=dtype)
    state = AdamWState.for_params(params)

    n = len(samples)
    steps_per_epoch = math.ceil(n / train_cfg.batch)
    total_steps = train_cfg.epochs * steps_per_epoch
    rows: list[tuple] = []
    epoch_losses: list[float] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        epoch_total = 0.0
        for start in range(0, n, train_cfg.batch):
            chunk = range(start, min(start + train_cfg.batch, n))
            grads = params.zeros_like()
            totals = np.zeros(model_cfg.num_scales + 1)
            for i in chunk:
                vol_z, layout = samples[i]
                mask_seed = int(_rng.stream(train_cfg.seed, _STREAM_MASK, epoch, i)
                                .integers(0, 2**63, dtype=np.uint64))
                plan = sample_mask(layout, ratio, mask_seed)
                report, tape = forward_loss(params, vol_z, layout, plan, with_tape=True)
                sample_grads = backward(params, tape)
                for name in grads:
                    grads[name] += sample_grads[name]
                totals[0] += report.total
                totals[1:] += report.per_scale
            scale = 1.0 / len(chunk)
            for name in grads:
                grads[name] *= scale
            totals *= scale
            lr = lr_at(step, total_steps, train_cfg)
            adamw_step(params, grads, state, lr, train_cfg)
            rows.append((epoch, step, lr, float(totals[0]), *map(float, totals[1:])))
            epoch_total += totals[0]
            step += 1
        epoch_losses.append(float(epoch_total / steps_per_epoch))
        if progress is not None:
            progress(epoch, epoch_losses[-1])

    result = TrainResult(params=params, epoch_losses=epoch_losses, rows=rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, out / "checkpoint.bin")
        write_loss_csv(rows, model_cfg.num_scales, out / "loss.csv")
    return result


def evaluate_loss(
    params: ModelParams,
    vol_z: Volume4D,
    layout: TokenLayout,
    ratio: float,
    seed: int,
    n_plans: int = 4,
) -> float:
    """Mean reconstruction loss over ``n_plans`` fixed evaluation masks."""
    totals = []
    for j in range(n_plans):
        mask_seed = int(_rng.stream(seed, _STREAM_MASK, 0, j).integers(0, 2**63, dtype=np.uint64))
        plan = sample_mask(layout, ratio, mask_seed)
        totals.append(forward_loss(params, vol_z, layout, plan).total)
    return float(np.mean(totals))


def write_loss_csv(rows, num_scales: int, path) -> None:
    header = ["epoch", "step", "lr", "loss_total"] + [f"loss_scale_{s}" for s in range(num_scales)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    passed: bool
    num_checked: int
    tolerance: float


def gradcheck_layout(cfg: ModelConfig) -> TokenLayout:
    """Small fixed mixed-scale layout (12 tokens for K in {1, 2})."""
    b = cfg.base_edge
    k = cfg.num_scales
    coarse = b * (1 << (k - 1))
    tokens: list[TokenRec] = []
    if k == 1:
        dims = (4 * b, 4 * b, 2 * b, cfg.frames)
        count = 0
        for z in range(0, 2 * b, b):
            for y in range(0, 4 * b, b):
                for x in range(0, 4 * b, b):
                    if count == 12:
                        break
                    tokens.append(TokenRec((x, y, z), 0))
                    count += 1
        fg_cells = 12
    else:
        dims = (2 * coarse, 2 * coarse, 2 * coarse, cfg.frames)

        def split(origin, scale):
            if scale == 0:
                tokens.append(TokenRec(origin, 0))
                return
            half = b * (1 << (scale - 1))
            x, y, z = origin
            first = True
            for dz in (0, 1):
                for dy in (0, 1):
                    for dx in (0, 1):
                        child = (x + dx * half, y + dy * half, z + dz * half)
                        if first:
                            split(child, scale - 1)
                            first = False
                        else:
                            tokens.append(TokenRec(child, scale - 1))

        split((0, 0, 0), k - 1)
        for origin in ((coarse, 0, 0), (0, coarse, 0), (0, 0, coarse), (coarse, coarse, coarse)):
            tokens.append(TokenRec(origin, k - 1))
        fg_cells = 5
    tokens.sort(key=lambda t: (-t.scale, t.origin[2], t.origin[1], t.origin[0]))
    ordered = tuple(TokenRec(t.origin, t.scale, i) for i, t in enumerate(tokens))
    return TokenLayout(ordered, b, k, dims, tau=0.0, bg_thresh=0.0, fg_cells=fg_cells)


def gradcheck(
    model_cfg: ModelConfig,
    seed: int = 0,
    step_size: float = 1e-5,
    tolerance: float = 1e-6,
    *,
    mask_ratio: float | None = None,
    sample_budget: int = 10_000,
    fault: tuple[str, int, float] | str | None = None,
) -> GradCheckReport:
    """Central-difference verification of the analytic backward pass.

    Runs in float64 on a fixed small layout. Every parameter coordinate is
    checked when the model has at most ``sample_budget`` of them; larger
    models get a seeded coordinate subsample. The per-coordinate relative
    error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-2), i.e.
    absolute below magnitude 1e-2 and relative above. ``fault`` scales one
    analytic gradient entry (name, flat index, multiplier) before the
    comparison, to demonstrate that corrupted gradients are flagged; the
    shorthand ``"psi"`` corrupts the strongest head gradient by 1.01.
    """
    layout = gradcheck_layout(model_cfg)
    h, w, d, t = layout.volume_dims
    data_rng = _rng.stream(seed, _STREAM_GRADCHECK_DATA)
    vol = Volume4D(data_rng.normal(0.0, 1.0, size=(t, d, w, h)), tr_seconds=0.72)
    ratio = model_cfg.mask_ratio if mask_ratio is None else mask_ratio
    plan = sample_mask(layout, ratio, seed)
    # every scale must appear on both sides of the mask, or whole parameter
    # groups would be structurally absent from the check
    masked = plan.masked.copy()
    for s in range(model_cfg.num_scales):
        idx = [tk.linear_index for tk in layout.tokens if tk.scale == s]
        if all(masked[i] for i in idx):
            masked[idx[0]] = False
        if not any(masked[i] for i in idx):
            masked[idx[-1]] = True
    plan = MaskPlan(masked, ratio, seed)

    params = init_model_params(model_cfg, seed=seed, dtype=np.float64)
    _, tape = forward_loss(params, vol, layout, plan, with_tape=True)
    analytic = backward(params, tape)
    if fault == "psi":
        heads = [n for n in analytic if n.startswith("psi.")]
        name = max(heads, key=lambda n: np.abs(analytic[n]).max())
        fault = (name, int(np.abs(analytic[name]).argmax()), 1.01)
    if fault is not None:
        name, idx, mult = fault
        analytic[name].flat[idx] *= mult

    coords: list[tuple[str, int]] = []
    for name in params.arrays:
        coords.extend((name, i) for i in range(params.arrays[name].size))
    if len(coords) > sample_budget:
        pick_rng = _rng.stream(seed, _STREAM_GRADCHECK_SAMPLE)
        chosen = pick_rng.choice(len(coords), size=sample_budget, replace=False)
        coords = [coords[i] for i in sorted(chosen)]
    if fault is not None and (fault[0], fault[1]) not in coords:
        coords.append((fault[0], fault[1]))

    max_err = 0.0
    worst = ""
    for name, idx in coords:
        theta = params.arrays[name]
        orig = theta.flat[idx]
        h_step = step_size * (1.0 + abs(orig))
        theta.flat[idx] = orig + h_step
        up = forward_loss(params, vol, layout, plan).total
        theta.flat[idx] = orig - h_step
        down = forward_loss(params, vol, layout, plan).total
        theta.flat[idx] = orig
        numeric = (up - down) / (2.0 * h_step)
        a = analytic[name].flat[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-2)
        if err > max_err:
            max_err = err
            worst = f"{name}[{idx}]"
    return GradCheckReport(
        max_rel_err=float(max_err),
        worst_param=worst,
        passed=bool(max_err < tolerance),
        num_checked=len(coords),
        tolerance=tolerance,
    )
