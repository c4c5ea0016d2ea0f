"""Contexts, a frozen teacher, and the two data regimes used by the toy trainer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import Batch, ParamLayout, _hidden_logits, policy_forward


@dataclass(frozen=True)
class Teacher:
    """Frozen random network; its logits score actions and, divided by
    ``temperature``, define the supervised target distribution."""

    params: np.ndarray
    layout: ParamLayout
    temperature: float = 1.0

    @classmethod
    def random(cls, layout: ParamLayout, seed: int, scale: float = 1.0,
               temperature: float = 1.0) -> "Teacher":
        return cls(init_params(layout, seed, scale), layout, temperature)

    def scores(self, x) -> np.ndarray:
        return _hidden_logits(self.params, np.atleast_2d(x), self.layout)[2]

    def log_probs(self, x) -> np.ndarray:
        return policy_forward(self.params, np.atleast_2d(x), self.layout) if self.temperature == 1.0 \
            else _log_softmax_t(self.scores(x), self.temperature)


def _log_softmax_t(z, t):
    z = z / t
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def init_params(layout: ParamLayout, seed: int, scale: float = 1.0) -> np.ndarray:
    """Gaussian weights with 1/sqrt(fan_in) spread times ``scale``; small biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in layout.shapes.items():
        if name.endswith("weight"):
            parts.append(rng.standard_normal(shape).ravel() * scale / np.sqrt(shape[1]))
        else:
            parts.append(rng.standard_normal(shape) * 0.1 * scale)
    return np.concatenate(parts)


def sample_contexts(rng: np.random.Generator, n: int, input_dim: int) -> np.ndarray:
    return rng.standard_normal((n, input_dim))


def sample_from(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row of ``probs`` using uniforms ``u``."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_pairs(probs: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two distinct actions per row, both from the row's distribution.

    The second draw conditions on differing from the first, which is the
    distribution rejection resampling converges to, using one uniform per row.
    """
    n, k = probs.shape
    u1, u2 = rng.random(n), rng.random(n)
    y1 = sample_from(probs, u1)
    rest = probs.copy()
    rest[np.arange(n), y1] = 0.0
    dead = rest.sum(axis=1) <= 0.0
    if dead.any():
        rest[dead] = 1.0
        rest[dead, y1[dead]] = 0.0
    y2 = sample_from(rest, u2)
    return y1, y2


def sample_preference_batch(params_policy, teacher: Teacher, n: int, seed,
                            layout: ParamLayout | None = None) -> Batch:
    """On-policy preference pairs: actions come from the current policy and
    the teacher's scores decide which one is preferred."""
    layout = layout or teacher.layout
    rng = np.random.default_rng(seed)
    x = sample_contexts(rng, n, layout.input_dim)
    probs = np.exp(policy_forward(params_policy, x, layout))
    y1, y2 = sample_pairs(probs, rng)
    s = teacher.scores(x)
    rows = np.arange(n)
    first = s[rows, y1] >= s[rows, y2]
    return Batch(x, np.where(first, y1, y2), np.where(first, y2, y1))


def sample_sft_batch(teacher: Teacher, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Contexts with targets drawn from the teacher, not from the policy."""
    rng = np.random.default_rng(seed)
    x = sample_contexts(rng, n, teacher.layout.input_dim)
    probs = np.exp(teacher.log_probs(x))
    return x, sample_from(probs, rng.random(n))
