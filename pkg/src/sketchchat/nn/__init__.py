"""Model-building layer: attention stacks, recurrent encoders, mixture
densities, the clipped optimizer, schedules and checkpoint IO."""

from sketchchat.nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from sketchchat.nn.gmm import (
    GMMParams,
    gmm_log_likelihood,
    gmm_params_from_raw,
    gmm_sample,
    gmm_sample_many,
    sample_categorical,
)
from sketchchat.nn.gradcheck import (
    central_difference,
    check_gradients,
    check_module_gradients,
)
from sketchchat.nn.ops import (
    ConvMaskEncoder,
    MaskedSelfAttention,
    TransformerBlock,
    TransformerStack,
    seeded_init_,
)
from sketchchat.nn.optim import ClippedAdam, ExpSchedule, clip_global_norm
from sketchchat.nn.recurrent import BiLSTMEncoder, LSTMDecoderCell

__all__ = [
    "BiLSTMEncoder",
    "Checkpoint",
    "ClippedAdam",
    "ConvMaskEncoder",
    "ExpSchedule",
    "GMMParams",
    "LSTMDecoderCell",
    "MaskedSelfAttention",
    "TransformerBlock",
    "TransformerStack",
    "central_difference",
    "check_gradients",
    "check_module_gradients",
    "clip_global_norm",
    "gmm_log_likelihood",
    "gmm_params_from_raw",
    "gmm_sample",
    "gmm_sample_many",
    "load_checkpoint",
    "sample_categorical",
    "save_checkpoint",
    "seeded_init_",
]
