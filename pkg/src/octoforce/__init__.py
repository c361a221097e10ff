"""octoforce: force estimation from synthetic OCT-like volumes.

A self-contained CPU pipeline: a reverse-mode autodiff engine with the
3D/2D convolution kernels the models need, Siamese and single-path
volumetric CNNs plus planar surface baselines, a deterministic phantom
simulator with an analytic force oracle, training with plateau-halving
Adam, and an evaluator for MAE / aCC / R-squared reporting.
"""

from .blocks import BlockSpec, bottleneck_block
from .errors import (CheckpointFormatError, ConfigError, DatasetFormatError,
                     GraphError, OctoforceError, ShapeError, TrainingDivergedError)
from .gradcheck import GradCheckReport, grad_check
from .models import (ArchSpec, MODEL_FAMILIES, ModelGraph, build_diffcnn,
                     build_model, build_siamcnn, build_surfcnn, count_params,
                     default_arch_spec)
from .ops import (BNState, batch_norm, concat_channels, conv2d, conv3d, dense,
                  gap, mse_loss, relu)
from .optim import AdamState, adam_step, zero_grads
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "AdamState", "ArchSpec", "BNState", "BlockSpec", "CheckpointFormatError",
    "ConfigError", "DatasetFormatError", "GradCheckReport", "GraphError",
    "MODEL_FAMILIES", "ModelGraph", "OctoforceError", "ShapeError", "Tensor",
    "TrainingDivergedError", "adam_step", "batch_norm", "bottleneck_block",
    "build_diffcnn", "build_model", "build_siamcnn", "build_surfcnn",
    "concat_channels", "conv2d", "conv3d", "count_params", "default_arch_spec",
    "dense", "gap", "grad_check", "mse_loss", "relu", "zero_grads",
]
