from .data import Teacher, sample_preference_batch, sample_sft_batch
from .policy import Batch, ParamLayout, dpo_loss_and_grad, policy_forward, sft_loss_and_grad
from .train import (Objective, ReplayResult, Storage, ToyConfig, ToyRun, conjecture_replay,
                    save_run, sweep, train)

__all__ = [
    "Batch", "Objective", "ParamLayout", "ReplayResult", "Storage", "Teacher", "ToyConfig",
    "ToyRun", "conjecture_replay", "dpo_loss_and_grad", "policy_forward", "sample_preference_batch",
    "sample_sft_batch", "save_run", "sft_loss_and_grad", "sweep", "train",
]
