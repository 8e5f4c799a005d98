"""Scale-aware masked autoencoder: forward and analytic backward passes."""

from .autoencoder import (
    LossReport,
    backward,
    decoder_inputs,
    embed_token,
    encoder_forward,
    forward_loss,
    reconstruct,
    scale_aware_loss,
)
from .config import ModelConfig
from .params import ModelParams, init_model_params, load_checkpoint, save_checkpoint
from .posembed import positional_embedding, sincos_embedding

__all__ = [
    "ModelConfig",
    "ModelParams",
    "LossReport",
    "init_model_params",
    "save_checkpoint",
    "load_checkpoint",
    "positional_embedding",
    "sincos_embedding",
    "embed_token",
    "encoder_forward",
    "decoder_inputs",
    "reconstruct",
    "scale_aware_loss",
    "forward_loss",
    "backward",
]
