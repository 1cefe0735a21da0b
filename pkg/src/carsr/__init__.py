"""Joint compression-artifact reduction and 4x super-resolution.

One network maps JPEG-compressed low-resolution images directly to clean
high-resolution output. The package covers training-set synthesis from
clean images, the model with its ablation variants, deterministic
training with cosine restarts, luma-channel PSNR/SSIM evaluation with
optional self-ensembling, and a CLI that drives all of it from one
config file.
"""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .degradation import (
    CODEC_ID,
    DatasetManifest,
    DegradeSpec,
    PatchPair,
    bicubic_downscale,
    bicubic_upscale,
    build_manifest,
    degrade_testset,
    jpeg_roundtrip,
    synthesize_pair,
)
from .dihedral import apply_dihedral, compose_dihedral, invert_dihedral
from .errors import (
    ConfigError,
    DomainError,
    InputError,
    NumericError,
    ShapeError,
)
from .metrics import (
    EvalResult,
    evaluate_dataset,
    psnr_y,
    rgb_to_y,
    self_ensemble,
    ssim_y,
)
from .model import (
    CARSRNet,
    ModelConfig,
    bilinear_upsample,
    build_model,
    count_params,
    param_inventory,
    pixel_shuffle,
    pixel_unshuffle,
)
from .training import (
    LossReport,
    TrainConfig,
    combined_loss,
    cosine_lr,
    desk_preset,
    pixel_loss,
    train_loop,
    train_step,
)

__all__ = [
    "CARSRNet",
    "CODEC_ID",
    "ConfigError",
    "DatasetManifest",
    "DegradeSpec",
    "DomainError",
    "EvalResult",
    "InputError",
    "LossReport",
    "ModelConfig",
    "NumericError",
    "PatchPair",
    "ShapeError",
    "TrainConfig",
    "apply_dihedral",
    "bicubic_downscale",
    "bicubic_upscale",
    "bilinear_upsample",
    "build_manifest",
    "build_model",
    "combined_loss",
    "compose_dihedral",
    "cosine_lr",
    "count_params",
    "degrade_testset",
    "desk_preset",
    "evaluate_dataset",
    "invert_dihedral",
    "jpeg_roundtrip",
    "load_checkpoint",
    "param_inventory",
    "pixel_loss",
    "pixel_shuffle",
    "pixel_unshuffle",
    "psnr_y",
    "restore_model",
    "rgb_to_y",
    "save_checkpoint",
    "self_ensemble",
    "ssim_y",
    "synthesize_pair",
    "train_loop",
    "train_step",
]
