"""Two-layer tanh policy over a discrete action set, with manual backprop.

Parameters live in one flat vector laid out as ``fc1.weight`` (hidden x input),
``fc1.bias``, ``fc2.weight`` (actions x hidden), ``fc2.bias``. Forward and
backward passes run in float64 regardless of how the vector is stored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..errors import DegeneratePair, DimMismatch


@dataclass(frozen=True)
class ParamLayout:
    input_dim: int
    hidden_dim: int
    num_actions: int

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "policy.fc1.weight": (self.hidden_dim, self.input_dim),
            "policy.fc1.bias": (self.hidden_dim,),
            "policy.fc2.weight": (self.num_actions, self.hidden_dim),
            "policy.fc2.bias": (self.num_actions,),
        }

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def schema(self) -> dict[str, tuple[tuple[int, ...], int]]:
        return {n: (s, int(np.prod(s))) for n, s in self.shapes.items()}

    def split(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Views of each named tensor inside ``flat``."""
        flat = np.asarray(flat)
        if flat.shape != (self.size,):
            raise DimMismatch(f"expected {self.size} parameters, got shape {flat.shape}")
        out, pos = {}, 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            out[name] = flat[pos:pos + n].reshape(shape)
            pos += n
        return out

    def join(self, tensors: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(tensors[n]).ravel() for n in self.shapes])


class Batch(NamedTuple):
    x: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray


def _unpack(params, layout: ParamLayout):
    p = layout.split(np.asarray(params, dtype=np.float64))
    return p["policy.fc1.weight"], p["policy.fc1.bias"], p["policy.fc2.weight"], p["policy.fc2.bias"]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _hidden_logits(params, x, layout):
    w1, b1, w2, b2 = _unpack(params, layout)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layout.input_dim:
        raise DimMismatch(f"input has {x.shape[-1]} features, policy expects {layout.input_dim}")
    h = np.tanh(x @ w1.T + b1)
    return x, h, h @ w2.T + b2


def policy_forward(params, x, layout: ParamLayout) -> np.ndarray:
    """Action log-probabilities for one input vector or a batch of rows."""
    return _log_softmax(_hidden_logits(params, x, layout)[2])


def _backward(params, x, h, dz, layout) -> np.ndarray:
    _, _, w2, _ = _unpack(params, layout)
    dpre = (dz @ w2) * (1.0 - h * h)
    return np.concatenate([(dpre.T @ x).ravel(), dpre.sum(0), (dz.T @ h).ravel(), dz.sum(0)])


def sft_loss_and_grad(params, x, targets, layout: ParamLayout) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``targets`` and its gradient."""
    x = np.atleast_2d(x)
    targets = np.asarray(targets)
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= layout.num_actions:
        raise DimMismatch("targets must lie in [0, num_actions)")
    x, h, z = _hidden_logits(params, x, layout)
    logp = _log_softmax(z)
    rows = np.arange(len(targets))
    loss = -logp[rows, targets].mean()
    dz = np.exp(logp)
    dz[rows, targets] -= 1.0
    dz /= len(targets)
    return float(loss), _backward(params, x, h, dz, layout)


def dpo_loss_and_grad(params, ref_params, batch: Batch, beta: float,
                      layout: ParamLayout) -> tuple[float, np.ndarray]:
    """DPO loss ``mean(-log sigmoid(beta * margin))`` and its gradient w.r.t. ``params``.

    ``margin = (logp(yw) - ref_logp(yw)) - (logp(yl) - ref_logp(yl))``.
    """
    x = np.atleast_2d(batch.x)
    yw, yl = np.asarray(batch.chosen), np.asarray(batch.rejected)
    if np.any(yw == yl):
        raise DegeneratePair("chosen and rejected actions must differ in every pair")
    rows = np.arange(len(yw))
    x, h, z = _hidden_logits(params, x, layout)
    logp = _log_softmax(z)
    ref = policy_forward(ref_params, x, layout)
    margin = (logp[rows, yw] - ref[rows, yw]) - (logp[rows, yl] - ref[rows, yl])
    m = beta * margin
    loss = np.logaddexp(0.0, -m).mean()
    # d/dm softplus(-m) = -sigmoid(-m); the log-softmax normalizers cancel in the margin
    coef = -beta * np.exp(-np.logaddexp(0.0, m)) / len(yw)
    dz = np.zeros_like(z)
    dz[rows, yw] += coef
    dz[rows, yl] -= coef
    return float(loss), _backward(params, x, h, dz, layout)
