"""Scikit-learn estimator facade over the functional core.

These wrappers exist so the pipeline composes with the wider ecosystem:
``get_params``/``set_params``/``clone`` work, hyperparameters are stored
verbatim at construction, and all validation happens at fit/transform time
(the scikit-learn convention). Samples are ``Volume4D`` objects (or 4D
arrays), not feature matrices.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .complexity import complexity_map
from .model import ModelConfig
from .tokenizer import tokenize
from .train import TrainConfig, evaluate_loss, train_volumes
from .validation import as_volume_list
from .volume import (
    crop_or_pad,
    pad_to_multiple,
    resample_spatial_trilinear,
    resample_time_linear,
    zscore_global,
)

__all__ = [
    "VolumePreprocessor",
    "ComplexityScorer",
    "DynamicPatchTokenizer",
    "ScaleAwareMaskedAutoencoder",
]


class VolumePreprocessor(BaseEstimator, TransformerMixin):
    """Spatial/temporal regridding and optional global standardization.

    Mirrors the acquisition-side contract: optional trilinear resample to
    ``resample_shape``, center crop/pad to ``target_shape``, optional
    temporal resample to ``target_tr``, optional global z-scoring.
    """

    def __init__(self, target_shape=None, resample_shape=None, target_tr=None,
                 standardize=False):
        self.target_shape = target_shape
        self.resample_shape = resample_shape
        self.target_tr = target_tr
        self.standardize = standardize

    def fit(self, X, y=None):
        as_volume_list(X)
        return self

    def transform(self, X):
        out = []
        for vol in as_volume_list(X):
            if self.resample_shape is not None:
                vol = resample_spatial_trilinear(vol, self.resample_shape)
            if self.target_shape is not None:
                vol = crop_or_pad(vol, self.target_shape)
            if self.target_tr is not None:
                vol = resample_time_linear(vol, self.target_tr)
            if self.standardize:
                vol = zscore_global(vol)
            out.append(vol)
        return out


class ComplexityScorer(BaseEstimator, TransformerMixin):
    """Per-volume complexity maps under the configured metric."""

    def __init__(self, metric="variance", coarse_edge=8, pad=True):
        self.metric = metric
        self.coarse_edge = coarse_edge
        self.pad = pad

    def fit(self, X, y=None):
        as_volume_list(X)
        return self

    def transform(self, X):
        out = []
        for vol in as_volume_list(X):
            if self.pad:
                vol = pad_to_multiple(vol, self.coarse_edge)
            out.append(complexity_map(vol, self.coarse_edge, self.metric))
        return out


class DynamicPatchTokenizer(BaseEstimator, TransformerMixin):
    """Volume -> mixed-scale token layout.

    Expects raw (non-negative) intensities: background pruning runs on the
    input as given, complexity gating on its standardized copy.
    """

    def __init__(self, tau=0.25, base_edge=4, num_scales=2, bg_thresh=1e-3,
                 metric="variance", standardize=True, subpatch_bg_check=True, pad=True):
        self.tau = tau
        self.base_edge = base_edge
        self.num_scales = num_scales
        self.bg_thresh = bg_thresh
        self.metric = metric
        self.standardize = standardize
        self.subpatch_bg_check = subpatch_bg_check
        self.pad = pad

    def fit(self, X, y=None):
        as_volume_list(X)
        return self

    def transform(self, X):
        coarse = self.base_edge * (1 << (self.num_scales - 1))
        out = []
        for vol in as_volume_list(X):
            if self.pad:
                vol = pad_to_multiple(vol, coarse)
            out.append(
                tokenize(
                    vol, tau=self.tau, base_edge=self.base_edge,
                    num_scales=self.num_scales, bg_thresh=self.bg_thresh,
                    metric=self.metric, standardize=self.standardize,
                    subpatch_bg_check=self.subpatch_bg_check,
                )
            )
        return out


class ScaleAwareMaskedAutoencoder(BaseEstimator):
    """Fit the masked autoencoder on raw volumes; score by reconstruction.

    After ``fit``: ``params_`` holds the trained weights, ``loss_curve_``
    the per-epoch mean loss, ``step_rows_`` the per-step log. ``score``
    follows the scikit-learn convention (higher is better) by returning the
    negative held-out reconstruction loss.
    """

    def __init__(self, embed_dim=16, enc_depth=2, enc_heads=2, dec_dim=16,
                 dec_depth=2, dec_heads=2, num_scales=2, base_edge=2,
                 mask_ratio=0.75, patch_norm_targets=False, mlp_ratio=4.0,
                 tau=0.25, bg_thresh=1e-3, lr=4e-3, min_lr=1e-5,
                 weight_decay=0.05, warmup_epochs=2, epochs=20, batch=4, seed=0,
                 dtype="float32"):
        self.embed_dim = embed_dim
        self.enc_depth = enc_depth
        self.enc_heads = enc_heads
        self.dec_dim = dec_dim
        self.dec_depth = dec_depth
        self.dec_heads = dec_heads
        self.num_scales = num_scales
        self.base_edge = base_edge
        self.mask_ratio = mask_ratio
        self.patch_norm_targets = patch_norm_targets
        self.mlp_ratio = mlp_ratio
        self.tau = tau
        self.bg_thresh = bg_thresh
        self.lr = lr
        self.min_lr = min_lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.epochs = epochs
        self.batch = batch
        self.seed = seed
        self.dtype = dtype

    def _model_config(self, frames: int) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim, enc_depth=self.enc_depth, enc_heads=self.enc_heads,
            dec_dim=self.dec_dim, dec_depth=self.dec_depth, dec_heads=self.dec_heads,
            num_scales=self.num_scales, base_edge=self.base_edge, frames=frames,
            mask_ratio=self.mask_ratio, patch_norm_targets=self.patch_norm_targets,
            mlp_ratio=self.mlp_ratio,
        )

    def fit(self, X, y=None):
        volumes = as_volume_list(X)
        coarse = self.base_edge * (1 << (self.num_scales - 1))
        volumes = [pad_to_multiple(v, coarse) for v in volumes]
        cfg = self._model_config(volumes[0].dims[3])
        train_cfg = TrainConfig(
            lr=self.lr, min_lr=self.min_lr, weight_decay=self.weight_decay,
            warmup_epochs=min(self.warmup_epochs, self.epochs), epochs=self.epochs,
            batch=min(self.batch, len(volumes)), seed=self.seed,
        )
        result = train_volumes(
            cfg, train_cfg, volumes, tau=self.tau, bg_thresh=self.bg_thresh,
            dtype=np.dtype(self.dtype).type,
        )
        self.params_ = result.params
        self.loss_curve_ = result.epoch_losses
        self.step_rows_ = result.rows
        return self

    def score_samples(self, X) -> np.ndarray:
        """Per-volume reconstruction loss under fixed evaluation masks."""
        if not hasattr(self, "params_"):
            raise RuntimeError("fit the estimator before scoring")
        cfg = self.params_.config
        coarse = self.base_edge * (1 << (self.num_scales - 1))
        losses = []
        for vol in as_volume_list(X):
            vol = pad_to_multiple(vol, coarse)
            layout = tokenize(
                vol, tau=self.tau, base_edge=self.base_edge,
                num_scales=self.num_scales, bg_thresh=self.bg_thresh,
            )
            losses.append(
                evaluate_loss(self.params_, zscore_global(vol), layout,
                              cfg.mask_ratio, seed=self.seed)
            )
        return np.asarray(losses)

    def score(self, X, y=None) -> float:
        return -float(self.score_samples(X).mean())
