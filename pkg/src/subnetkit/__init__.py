"""Checkpoint diffing and subnetwork analysis for fine-tuned models."""

from .checkpoint import CheckpointIndex, TensorMeta, open_checkpoint, read_tensor, read_tensor_f32
from .diff import DeltaStats, SparsityReport, checkpoint_sparsity, layer_breakdown, tensor_delta_stats
from .dynamics import DynamicsSeries, ParamPartition, classify_params, outside_final_fraction, series_sparsity
from .masks import OverlapReport, SubnetMask, extract_mask, mask_ops, overlap, random_mask, read_mask, write_mask
from .precision import bf16_round
from .rank import RankPolicy, RankReport, delta_rank, rank_report
from .roles import Kind, TensorRole, classify_tensor

__version__ = "0.1.0"

__all__ = [
    "CheckpointIndex", "DeltaStats", "DynamicsSeries", "Kind", "OverlapReport", "ParamPartition",
    "RankPolicy", "RankReport", "SparsityReport", "SubnetMask", "TensorMeta", "TensorRole",
    "bf16_round", "checkpoint_sparsity", "classify_params", "classify_tensor", "delta_rank",
    "extract_mask", "layer_breakdown", "mask_ops", "open_checkpoint", "outside_final_fraction",
    "overlap", "random_mask", "rank_report", "read_mask", "read_tensor", "read_tensor_f32",
    "series_sparsity", "tensor_delta_stats", "write_mask",
]
