"""Desk-scale training harness with bf16-emulated parameter storage.

A run is fully determined by ``(config, seed)``: the initial policy, the
teacher and every step's data are drawn from generators seeded by the run
seed, so a replay with a gradient mask sees the same contexts and uniforms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from ..checkpoint import open_checkpoint, read_tensor, write_checkpoint
from ..diff import tensor_delta_stats
from ..errors import MaskSchemaMismatch
from ..masks import SubnetMask, write_mask
from ..precision import bf16_round
from .data import Teacher, init_params, sample_preference_batch, sample_sft_batch
from .policy import ParamLayout, dpo_loss_and_grad, sft_loss_and_grad


class Objective(str, Enum):
    SFT_OOD = "SFT_OOD"
    DPO_IND = "DPO_IND"


class Storage(str, Enum):
    BF16_EMULATED = "BF16_EMULATED"
    F32 = "F32"


# offsets keep the teacher and per-step data streams apart from the init stream
_TEACHER_STREAM = 1_000_003
_DATA_STREAM = 7


@dataclass(frozen=True)
class ToyConfig:
    input_dim: int = 32
    hidden_dim: int = 64
    num_actions: int = 16
    steps: int = 2000
    batch: int = 32
    lr: float = 0.01
    beta: float = 0.1
    seed: int = 0
    objective: Objective = Objective.DPO_IND
    param_storage: Storage = Storage.BF16_EMULATED
    optimizer: str = "sgd"
    init_scale: float = 1.0
    teacher_scale: float = 1.0
    teacher_temperature: float = 1.0
    save_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))
        object.__setattr__(self, "param_storage", Storage(self.param_storage))
        if min(self.input_dim, self.hidden_dim, self.num_actions) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.num_actions < 2 and self.objective is Objective.DPO_IND:
            raise ValueError("preference pairs need at least two actions")
        if self.objective is Objective.DPO_IND and not self.beta > 0:
            raise ValueError("beta must be positive for DPO_IND")
        if self.steps < 0 or self.batch < 1 or self.lr < 0:
            raise ValueError("steps >= 0, batch >= 1 and lr >= 0 are required")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout(self.input_dim, self.hidden_dim, self.num_actions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = self.objective.value
        d["param_storage"] = self.param_storage.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ToyConfig":
        """Read a JSON or TOML config file (a ``[toy]`` table is accepted in TOML)."""
        path = Path(path)
        if path.suffix == ".toml":
            import tomli

            data = tomli.loads(path.read_text())
            data = data.get("toy", data)
        else:
            data = json.loads(path.read_text())
        return cls.from_dict(data)


@dataclass
class ToyRun:
    config: ToyConfig
    init_params: np.ndarray
    final_params: np.ndarray
    step_sparsity: list[float]
    loss_curve: list[float]
    final_mask: SubnetMask
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    def bit_identical(self, other: "ToyRun") -> bool:
        return (self.config == other.config
                and np.array_equal(self.init_params.view(np.uint32), other.init_params.view(np.uint32))
                and np.array_equal(self.final_params.view(np.uint32), other.final_params.view(np.uint32))
                and self.step_sparsity == other.step_sparsity
                and self.loss_curve == other.loss_curve
                and self.final_mask.same_bits(other.final_mask)
                and self.snapshots.keys() == other.snapshots.keys()
                and all(np.array_equal(self.snapshots[k], other.snapshots[k]) for k in self.snapshots))


def _store(x: np.ndarray, storage: Storage) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return bf16_round(x) if storage is Storage.BF16_EMULATED else x


def teacher_for(config: ToyConfig, seed: int) -> Teacher:
    return Teacher.random(config.layout, seed + _TEACHER_STREAM, config.teacher_scale,
                          config.teacher_temperature)


def initial_params(config: ToyConfig, seed: int) -> np.ndarray:
    return _store(init_params(config.layout, seed, config.init_scale), config.param_storage)


def mask_from_params(layout: ParamLayout, init: np.ndarray, final: np.ndarray, source: str = "") -> SubnetMask:
    """Mask of parameters whose stored value changed (tolerance 0)."""
    a, b = layout.split(init), layout.split(final)
    flags = {n: ~(a[n] == b[n]) for n in layout.shapes}
    return SubnetMask.from_flags(layout.schema(), flags, 0.0, source)


def _sparsity(init: np.ndarray, params: np.ndarray) -> float:
    return tensor_delta_stats(init, params, [0.0])[0].sparsity


def train(config: ToyConfig, seed: Optional[int] = None,
          gradient_mask: Optional[SubnetMask] = None) -> ToyRun:
    """Plain SGD (or Adam) on the configured objective.

    Gradients are computed in float64, masked (when a mask is given), cast to
    float32 and applied to the stored parameters; with bf16 storage every
    update is re-rounded onto the bf16 grid, so sub-half-ulp steps vanish.
    """
    seed = config.seed if seed is None else seed
    config = replace(config, seed=seed)
    layout = config.layout
    keep = None
    if gradient_mask is not None:
        if gradient_mask.schema != layout.schema():
            raise MaskSchemaMismatch("gradient mask does not match the toy parameter layout",
                                     sorted(set(gradient_mask.schema) ^ set(layout.schema())) or list(layout.shapes))
        keep = gradient_mask.flat_flags()

    init = initial_params(config, seed)
    ref = init.astype(np.float64)
    teacher = teacher_for(config, seed)
    params = init.copy()
    lr = np.float32(config.lr)
    m = v = None
    if config.optimizer == "adam":
        m = np.zeros_like(params)
        v = np.zeros_like(params)
    losses, sparsity, snaps = [], [], {}
    for step in range(config.steps):
        data_seed = (seed, _DATA_STREAM, step)
        if config.objective is Objective.DPO_IND:
            batch = sample_preference_batch(params, teacher, config.batch, data_seed, layout)
            loss, grad = dpo_loss_and_grad(params, ref, batch, config.beta, layout)
        else:
            x, y = sample_sft_batch(teacher, config.batch, data_seed)
            loss, grad = sft_loss_and_grad(params, x, y, layout)
        if keep is not None:
            grad = np.where(keep, grad, 0.0)
        g = grad.astype(np.float32)
        if m is None:
            update = lr * g
        else:
            t = step + 1
            m = np.float32(0.9) * m + np.float32(0.1) * g
            v = np.float32(0.999) * v + np.float32(0.001) * g * g
            mhat = m / np.float32(1 - 0.9 ** t)
            vhat = v / np.float32(1 - 0.999 ** t)
            update = lr * mhat / (np.sqrt(vhat) + np.float32(1e-8))
        params = _store(params - update, config.param_storage)
        losses.append(loss)
        sparsity.append(_sparsity(init, params))
        if config.save_every and (step + 1) % config.save_every == 0:
            snaps[step + 1] = params.copy()
    mask = mask_from_params(layout, init, params, f"toy:{config.objective.value}:seed={seed}")
    return ToyRun(config, init, params, sparsity, losses, mask, snaps)


def final_train_loss(run: ToyRun, window: int = 50) -> float:
    """Mean loss over the last ``window`` steps (single-step losses are noisy)."""
    tail = run.loss_curve[-window:] if run.loss_curve else [float("nan")]
    return float(np.mean(tail))


@dataclass
class ReplayResult:
    agreement_1e4: float
    agreement_1e5: float
    full_run: ToyRun
    masked_run: ToyRun

    def to_dict(self) -> dict:
        return {"agreement_1e-4": self.agreement_1e4, "agreement_1e-5": self.agreement_1e5,
                "full_final_loss": final_train_loss(self.full_run),
                "masked_final_loss": final_train_loss(self.masked_run),
                "full_sparsity": self.full_run.step_sparsity[-1] if self.full_run.step_sparsity else 1.0,
                "mask_density": self.full_run.final_mask.density,
                "seed": self.full_run.config.seed}


def conjecture_replay(config: ToyConfig, seed: Optional[int] = None) -> ReplayResult:
    """Train fully, take the updated set as a mask, retrain only that subnetwork
    from the same init and data stream, and compare the two final models."""
    full = train(config, seed)
    masked = train(config, seed, gradient_mask=full.final_mask)
    at_1e5, at_1e4 = tensor_delta_stats(full.final_params, masked.final_params, [1e-5, 1e-4])
    return ReplayResult(at_1e4.sparsity, at_1e5.sparsity, full, masked)


def sweep(config: ToyConfig, seeds, objectives=(Objective.DPO_IND, Objective.SFT_OOD)) -> list[dict]:
    rows = []
    for objective in objectives:
        for s in seeds:
            run = train(replace(config, objective=Objective(objective)), s)
            rows.append({"objective": Objective(objective).value, "seed": s,
                         "final_sparsity": run.step_sparsity[-1] if run.step_sparsity else 1.0,
                         "final_loss": final_train_loss(run)})
    return rows


# -- persistence -------------------------------------------------------------

def _dtype(config: ToyConfig) -> str:
    return "BF16" if config.param_storage is Storage.BF16_EMULATED else "F32"


def save_run(run: ToyRun, directory) -> Path:
    """Write a run directory readable by the checkpoint tools.

    Layout: ``config.json``, ``init.safetensors``, ``final.safetensors``,
    ``step-XXXXXX.safetensors`` per snapshot, ``final_mask.snmk``, ``log.csv``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layout = run.config.layout
    dtype = _dtype(run.config)
    meta = {"format": "subnetkit-toy", "seed": str(run.config.seed)}
    (directory / "config.json").write_text(json.dumps(run.config.to_dict(), indent=2) + "\n")
    write_checkpoint(directory / "init.safetensors", layout.split(run.init_params), dtype, meta)
    write_checkpoint(directory / "final.safetensors", layout.split(run.final_params), dtype, meta)
    for step, params in sorted(run.snapshots.items()):
        write_checkpoint(directory / f"step-{step:06d}.safetensors", layout.split(params), dtype, meta)
    write_mask(run.final_mask, directory / "final_mask.snmk")
    with open(directory / "log.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "sparsity"])
        for i, (loss, sp) in enumerate(zip(run.loss_curve, run.step_sparsity), 1):
            w.writerow([i, repr(loss), repr(sp)])
    return directory


def load_params(path, layout: ParamLayout) -> np.ndarray:
    with open_checkpoint(path) as index:
        return layout.join({n: read_tensor(index, n).astype(np.float32) for n in layout.shapes})
