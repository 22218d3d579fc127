"""Group-robust training with KL-regularised group weights, on a small numpy autodiff engine."""

from .data import GenConfig, GroupedDataset, generate
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, forward, init_params
from .robust import DroConfig, GroupWeights, group_losses, total_loss, update_weights
from .trainer import RunConfig, compare_objectives, sweep_alpha, train

__all__ = ["GenConfig", "GroupedDataset", "generate", "MetricsReport", "evaluate", "ModelConfig",
           "forward", "init_params", "DroConfig", "GroupWeights", "group_losses", "total_loss",
           "update_weights", "RunConfig", "compare_objectives", "sweep_alpha", "train"]

__version__ = "0.1.0"
