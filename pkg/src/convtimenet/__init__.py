"""Multi-length 1-D convolutional networks for univariate time-series classification.

numpy-only: forward and backward passes, multi-head pretraining, fine-tuning,
filter relevance and occlusion analysis, and a binary checkpoint format.
"""

__version__ = "0.1.0"

from .errors import CheckpointError, ConfigError, CtnError, DataFormatError, DimensionError, EmptyInputError, NumericError
from .model import ArchConfig, CtnModel, Head, build_ctn, forward_classify, forward_embed, new_head, parameter_count
from .optim import AdamState, adam_step, finite_diff_check
from .data import Dataset, gen_cbf, gen_mixed_scale, gen_two_patterns, load_ucr_file, write_ucr_file
from .train import FinetuneConfig, PretrainConfig, ValidationTask, evaluate, finetune_target, pretrain, predict
from .analysis import activation_map, filter_relevance, occlusion_sensitivity
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "AdamState", "ArchConfig", "CheckpointError", "ConfigError", "CtnError", "CtnModel", "DataFormatError",
    "Dataset", "DimensionError", "EmptyInputError", "FinetuneConfig", "Head", "NumericError", "PretrainConfig",
    "ValidationTask", "activation_map", "adam_step", "build_ctn", "evaluate", "filter_relevance",
    "finetune_target", "finite_diff_check", "forward_classify", "forward_embed", "gen_cbf", "gen_mixed_scale",
    "gen_two_patterns", "load_checkpoint", "load_ucr_file", "new_head", "occlusion_sensitivity",
    "parameter_count", "predict", "pretrain", "save_checkpoint", "write_ucr_file",
]
