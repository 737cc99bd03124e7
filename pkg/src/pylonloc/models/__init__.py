"""Mini-encoder, PYLON decoder, baseline and ablation variants, checkpoints."""
from .checkpoint import load_model, model_from_config, read_checkpoint, save_model, write_checkpoint
from .layers import BatchNorm2d, Conv2d, ConvNormAct, GroupNorm, Module
from .pylon import (
    VARIANTS,
    BackboneNet,
    CAMNet,
    Encoder,
    EncoderConfig,
    ModelOutput,
    PAModule,
    PylonConfig,
    PylonNet,
    UPModule,
    build_variant,
    cam_extract,
    forward,
    pyramid_levels,
    variant_config,
)

__all__ = [
    "VARIANTS", "BackboneNet", "BatchNorm2d", "CAMNet", "Conv2d", "ConvNormAct", "Encoder",
    "EncoderConfig", "GroupNorm", "Module", "ModelOutput", "PAModule", "PylonConfig", "PylonNet",
    "UPModule", "build_variant", "cam_extract", "forward", "load_model", "model_from_config",
    "pyramid_levels", "read_checkpoint", "save_model", "variant_config", "write_checkpoint",
]
