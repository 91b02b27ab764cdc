"""Grouped head attention lab: group-constrained training and voting-based head pruning."""

from .grouping import GroupConfig, GroupingState, discover_hidden_units, gct_loss_categorical, gct_loss_continuous
from .metrics import count_params, dunn_index, estimate_flops, silhouette
from .model import HeadMask, ModelConfig, TransformerModel, apply_head_mask, preset, structural_prune
from .v2s import PruneReport, run_voting_epoch

__version__ = "0.1.0"

__all__ = [
    "GroupConfig", "GroupingState", "discover_hidden_units", "gct_loss_categorical",
    "gct_loss_continuous", "count_params", "dunn_index", "estimate_flops", "silhouette",
    "HeadMask", "ModelConfig", "TransformerModel", "apply_head_mask", "preset",
    "structural_prune", "PruneReport", "run_voting_epoch",
]
