"""Model hyperparameter container."""

from __future__ import annotations

from dataclasses import dataclass, asdict


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for the scale-aware masked autoencoder.

    ``paper_profile()`` reproduces the reference pretraining configuration;
    ``toy_profile()`` is the desk-scale setup used by the verification
    harnesses.
    """

    embed_dim: int = 768
    enc_depth: int = 12
    enc_heads: int = 12
    dec_dim: int = 512
    dec_depth: int = 8
    dec_heads: int = 16
    num_scales: int = 2
    base_edge: int = 4
    frames: int = 8
    mask_ratio: float = 0.75
    patch_norm_targets: bool = False
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")
        if self.enc_depth and self.embed_dim % self.enc_heads:
            raise ValueError("embed_dim must be divisible by enc_heads")
        if self.dec_depth and self.dec_dim % self.dec_heads:
            raise ValueError("dec_dim must be divisible by dec_heads")
        if self.base_edge < 1 or self.frames < 1:
            raise ValueError("base_edge and frames must be positive")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def dec_hidden_dim(self) -> int:
        return int(self.dec_dim * self.mlp_ratio)

    def patch_len(self, scale: int) -> int:
        """Flattened voxel-vector length T * (base_edge * 2^scale)^3."""
        return self.frames * self.voxel_volume(scale)

    def voxel_volume(self, scale: int) -> int:
        """Spatial voxel count of a scale-s patch."""
        return (self.base_edge * (1 << scale)) ** 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def paper_profile(cls, frames: int = 8) -> "ModelConfig":
        return cls(
            embed_dim=768, enc_depth=12, enc_heads=12,
            dec_dim=512, dec_depth=8, dec_heads=16,
            num_scales=2, base_edge=4, frames=frames, mask_ratio=0.75,
        )

    @classmethod
    def toy_profile(cls, frames: int = 2, **overrides) -> "ModelConfig":
        base = dict(
            embed_dim=16, enc_depth=2, enc_heads=2,
            dec_dim=32, dec_depth=2, dec_heads=4,
            num_scales=2, base_edge=2, frames=frames, mask_ratio=0.75,
        )
        base.update(overrides)
        return cls(**base)
