"""iFormer: mobile hybrid CNN/attention inference, verification and cost analysis on numpy."""

__version__ = "0.1.0"

from .attention import (
    CpeParams,
    MhaParams,
    ShmaParams,
    chunked_window_partition,
    chunked_window_reverse,
    cpe,
    head_cosine_similarity,
    mha_forward,
    sha,
    sha_attention_forward,
    shma_backward,
    shma_forward,
    window_partition,
    window_reverse,
)
from .config import PRESETS, BlockSpec, Downsample, ModelConfig, StageConfig, preset_config, stage_feature_shapes
from .errors import ConfigError, ShapeError, WeightIOError
from .fusion import (
    count_macs,
    count_params,
    ffn_complexity_formula,
    fold_bn_into_conv,
    fuse_model,
    shma_complexity_formula,
)
from .model import ForwardTrace, Model, build_model, forward
from .model_io import (
    WeightStore,
    load_config,
    load_image_ppm,
    load_weights,
    save_config,
    save_weights,
)
from .ops import BnParams, ConvParams, batchnorm_infer, conv2d, gelu, linear, sigmoid, softmax_lastdim
from .tensor import Tensor, count_layout_changes, elementwise, matmul, permute, reshape

__all__ = [
    "BlockSpec",
    "BnParams",
    "ConfigError",
    "ConvParams",
    "CpeParams",
    "Downsample",
    "ForwardTrace",
    "MhaParams",
    "Model",
    "ModelConfig",
    "PRESETS",
    "ShapeError",
    "ShmaParams",
    "StageConfig",
    "Tensor",
    "WeightIOError",
    "WeightStore",
    "batchnorm_infer",
    "build_model",
    "chunked_window_partition",
    "chunked_window_reverse",
    "conv2d",
    "count_layout_changes",
    "count_macs",
    "count_params",
    "cpe",
    "elementwise",
    "ffn_complexity_formula",
    "fold_bn_into_conv",
    "forward",
    "fuse_model",
    "gelu",
    "head_cosine_similarity",
    "linear",
    "load_config",
    "load_image_ppm",
    "load_weights",
    "matmul",
    "mha_forward",
    "permute",
    "preset_config",
    "reshape",
    "save_config",
    "save_weights",
    "sha",
    "sha_attention_forward",
    "shma_backward",
    "shma_complexity_formula",
    "shma_forward",
    "sigmoid",
    "softmax_lastdim",
    "stage_feature_shapes",
    "window_partition",
    "window_reverse",
]
