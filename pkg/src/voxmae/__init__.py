"""voxmae: dynamic mixed-scale patch tokenization and scale-aware masked
autoencoding for 4D volumetric time-series.

The pipeline, end to end: load or synthesize a 4D volume, prune background
patches, gate the survivors into coarse or fine tokens by spatiotemporal
complexity, embed the mixed-scale tokens through a dual-path projection,
pretrain a masked autoencoder whose decoder is scale-conditioned and whose
reconstruction loss is normalized per scale. All numerics are plain numpy
with hand-written backward passes verified against central differences.
"""

from .complexity import (
    ComplexityMap,
    complexity_map,
    entropy_map,
    laplacian_map,
    read_complexity_map,
    recon_error_map,
    temporal_mean,
    variance_map,
    write_complexity_map,
)
from .errors import *  # noqa: F401,F403
from .estimators import (
    ComplexityScorer,
    DynamicPatchTokenizer,
    ScaleAwareMaskedAutoencoder,
    VolumePreprocessor,
)
from .model import (
    LossReport,
    ModelConfig,
    ModelParams,
    backward,
    decoder_inputs,
    embed_token,
    encoder_forward,
    forward_loss,
    init_model_params,
    load_checkpoint,
    positional_embedding,
    reconstruct,
    save_checkpoint,
    scale_aware_loss,
)
from .tokenizer import (
    MaskPlan,
    TokenLayout,
    TokenRec,
    extract_token_voxels,
    partition,
    prune_background,
    read_mask_plan,
    read_token_layout,
    sample_mask,
    token_count_report,
    tokenize,
    write_mask_plan,
    write_token_layout,
)
from .train import (
    GradCheckReport,
    PhantomSpec,
    TrainConfig,
    TrainResult,
    adamw_step,
    evaluate_loss,
    gradcheck,
    lr_at,
    make_phantom,
    train_toy,
    train_volumes,
)
from .volume import (
    NiftiHeaderSubset,
    Volume4D,
    crop_or_pad,
    load_volume,
    pad_to_multiple,
    parse_nifti_header,
    resample_spatial_trilinear,
    resample_time_linear,
    write_raw_volume,
    zscore_global,
)

__version__ = "0.1.0"
