"""Float64 tensor math with reverse-mode gradients, AdamW and checkpoint I/O."""

from .archive import load_store, read_archive, save_store, write_archive
from .gradcheck import GradReport, finite_diff_check, finite_diff_report
from .layers import (
    EVAL,
    Mode,
    affine,
    dropout,
    dropout_mask,
    layer_norm,
    log_softmax_array,
    multi_head_attention,
    positional_encoding,
    softmax_stable,
    transformer_encoder_block,
)
from .optim import NumericalError, OptimizerState, adamw_step, clip_grad_norm, global_grad_norm, lr_schedule
from .params import Param, ParamStore, init_affine, init_layer_norm
from .tensor import Tensor, as_tensor

__all__ = [
    "EVAL",
    "GradReport",
    "Mode",
    "NumericalError",
    "OptimizerState",
    "Param",
    "ParamStore",
    "Tensor",
    "adamw_step",
    "affine",
    "as_tensor",
    "clip_grad_norm",
    "dropout",
    "dropout_mask",
    "finite_diff_check",
    "finite_diff_report",
    "global_grad_norm",
    "init_affine",
    "init_layer_norm",
    "layer_norm",
    "load_store",
    "log_softmax_array",
    "lr_schedule",
    "multi_head_attention",
    "positional_encoding",
    "read_archive",
    "save_store",
    "softmax_stable",
    "transformer_encoder_block",
    "write_archive",
]
