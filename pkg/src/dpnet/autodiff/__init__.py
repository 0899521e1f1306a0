from .functional import (
    BatchNormState,
    batchnorm2d,
    conv2d,
    conv_out_extent,
    crop_to,
    pad2d,
    tensor_create,
    upsample_nearest,
)
from .gradcheck import GradcheckReport, gradcheck, relative_error
from .rng import Rng
from .tensor import (
    Tensor,
    backward,
    concat,
    grad,
    is_grad_enabled,
    no_grad,
    pointwise_binary,
    pointwise_unary,
    reduce,
    track_branches,
)

__all__ = [
    "BatchNormState",
    "batchnorm2d",
    "conv2d",
    "conv_out_extent",
    "crop_to",
    "pad2d",
    "tensor_create",
    "upsample_nearest",
    "GradcheckReport",
    "gradcheck",
    "relative_error",
    "Rng",
    "Tensor",
    "backward",
    "concat",
    "grad",
    "is_grad_enabled",
    "no_grad",
    "pointwise_binary",
    "pointwise_unary",
    "reduce",
    "track_branches",
]
