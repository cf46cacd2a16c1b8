"""Minimal dense-tensor and reverse-mode autodiff core."""

from .gradcheck import GradCheckReport, ParamCheck, gradient_check
from .nn import (
    MLP,
    CrossAttentionBlock,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    SelfAttentionBlock,
    parameter,
)
from .optim import OptimizerState, adamw_step, lr_at
from .tensor import (
    Tensor,
    add,
    as_tensor,
    bce_with_logits,
    broadcast_to,
    concat,
    gelu,
    get_dtype,
    getitem,
    is_verification_mode,
    layer_norm,
    linear,
    masked_multihead_attention,
    matmul,
    mul,
    reshape,
    set_dtype,
    sigmoid,
    sigmoid_array,
    softmax,
    softmax_array,
    take,
    tensor,
    tlog,
    tsum,
    tmean,
    tabs,
    transpose,
    verification_mode,
)

__all__ = [
    "GradCheckReport", "ParamCheck", "gradient_check",
    "MLP", "CrossAttentionBlock", "LayerNorm", "Linear", "Module", "MultiHeadAttention",
    "SelfAttentionBlock", "parameter",
    "OptimizerState", "adamw_step", "lr_at",
    "Tensor", "add", "as_tensor", "bce_with_logits", "broadcast_to", "concat", "gelu",
    "get_dtype", "getitem", "is_verification_mode", "layer_norm", "linear",
    "masked_multihead_attention", "matmul", "mul", "reshape", "set_dtype", "sigmoid",
    "sigmoid_array", "softmax", "softmax_array", "take", "tensor", "tlog", "tsum", "tmean", "tabs", "transpose",
    "verification_mode",
]
