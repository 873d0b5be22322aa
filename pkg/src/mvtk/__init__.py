"""MobileViT v1/v2/v3 blocks on a small numpy autodiff engine, with cost
accounting and verification tooling."""

from . import ops
from ._kernels import BACKEND
from .blocks import (
    PRESETS,
    ABLATION,
    V1,
    V2,
    V3,
    FusionConfig,
    InvertedResidual,
    MobileViTBlock,
    MobileViTBlockSpec,
    MV2Spec,
)
from .cost import CostReport, count_macs, count_params, instrumented_mac_check, report
from .errors import ConfigError, DivergenceError, FormatError, GradientError, MvtkError, ShapeError
from .layers import PatchSpec, fold, unfold
from .tensor import Tensor, backward, no_grad
from .zoo import MODEL_NAMES, Model, ModelSpec, StageSpec, build, deserialize, named_spec, serialize

__version__ = "0.1.0"
