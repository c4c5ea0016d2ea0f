"""Numerical rank of per-matrix update deltas."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointIndex, read_tensor
from .diff import SCHEMA_VERSION, check_schema, default_threads, run_units
from .errors import DataError, DimMismatch, NotAMatrix
from .precision import bf16_round

F32_EPS = 2.0 ** -23
RANDOMIZED_CUTOFF = 4096
OVERSAMPLING = 10


@dataclass(frozen=True)
class RankPolicy:
    """``rel``: threshold = sigma_max * max(rows, cols) * value; ``abs``: threshold = value."""

    mode: str = "rel"
    value: float = F32_EPS
    quantize_bf16: bool = False
    randomized_cutoff: int = RANDOMIZED_CUTOFF

    def __post_init__(self):
        if self.mode not in ("rel", "abs"):
            raise ValueError(f"rank policy mode must be 'rel' or 'abs', got {self.mode!r}")
        if not self.value >= 0:
            raise ValueError("rank threshold must be non-negative")

    @classmethod
    def parse(cls, text: str, **kw) -> "RankPolicy":
        mode, _, value = text.partition(":")
        if not value:
            raise ValueError(f"rank policy must look like rel:EPS or abs:TAU, got {text!r}")
        return cls(mode, float(value), **kw)

    def threshold(self, sigma_max: float, shape: tuple[int, int]) -> float:
        if self.mode == "rel":
            return sigma_max * max(shape) * self.value
        return self.value

    def to_dict(self) -> dict:
        return {"mode": self.mode, "value": self.value, "quantize_bf16": self.quantize_bf16,
                "randomized_cutoff": self.randomized_cutoff,
                "rule": ("count(sigma > sigma_max * max(rows, cols) * value)" if self.mode == "rel"
                         else "count(sigma > value)")}


def _delta(init, tuned, policy: RankPolicy) -> np.ndarray:
    a = np.asarray(init)
    b = np.asarray(tuned)
    if a.ndim != 2 or b.ndim != 2:
        raise NotAMatrix(f"rank needs 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise DimMismatch(f"operand shapes differ: {a.shape} vs {b.shape}")
    d = b.astype(np.float64) - a.astype(np.float64)
    if policy.quantize_bf16:
        d = bf16_round(d.astype(np.float32)).astype(np.float64)
    if not np.isfinite(d).all():
        raise DataError("update delta contains non-finite values")
    return d


def _randomized_rank(d: np.ndarray, policy: RankPolicy, seed: int = 0) -> Optional[int]:
    """Rank from a randomized range finder, or None when it cannot be certified.

    The sketch ``Q B`` has residual ``R = d - Q B``; by Weyl, every singular
    value of ``d`` lies within ``||R||_F`` of the sketch's, so the count is
    certified when no sketch value falls inside that band around the threshold.
    """
    rng = np.random.default_rng(seed)
    m, n = d.shape
    p = min(m, n)
    k = 64
    while k + OVERSAMPLING < p // 2:
        width = k + OVERSAMPLING
        q, _ = np.linalg.qr(d @ rng.standard_normal((n, width)))
        b = q.T @ d
        s = np.linalg.svd(b, compute_uv=False)
        r = float(np.linalg.norm(d - q @ b))
        lo = policy.threshold(s[0], d.shape)
        hi = policy.threshold(s[0] + r, d.shape)
        if r <= lo and not np.any((s > lo - r) & (s <= hi)):
            return int(np.count_nonzero(s > hi))
        if np.count_nonzero(s > hi) >= width - OVERSAMPLING // 2:
            # sketch is saturated: the matrix is high-rank, go exact
            return None
        k *= 2
    return None


def delta_rank(init_matrix, tuned_matrix, policy: RankPolicy = RankPolicy()) -> int:
    d = _delta(init_matrix, tuned_matrix, policy)
    if not d.any():
        return 0
    if min(d.shape) > policy.randomized_cutoff:
        r = _randomized_rank(d, policy)
        if r is not None:
            return r
    s = np.linalg.svd(d, compute_uv=False)
    return int(np.count_nonzero(s > policy.threshold(float(s[0]), d.shape)))


@dataclass(frozen=True)
class MatrixRank:
    name: str
    rows: int
    cols: int
    rank: int

    @property
    def max_rank(self) -> int:
        return min(self.rows, self.cols)

    @property
    def rank_pct(self) -> float:
        return 100.0 * self.rank / self.max_rank if self.max_rank else 0.0

    def to_dict(self) -> dict:
        return {"name": self.name, "rows": self.rows, "cols": self.cols, "rank": self.rank,
                "max_rank": self.max_rank, "rank_pct": self.rank_pct}


@dataclass
class RankReport:
    per_matrix: list[MatrixRank]
    policy: RankPolicy = field(default_factory=RankPolicy)

    @property
    def mean_rank_pct(self) -> float:
        if not self.per_matrix:
            return 0.0
        return sum(m.rank_pct for m in self.per_matrix) / len(self.per_matrix)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "mean_rank_pct": self.mean_rank_pct,
                "threshold_policy": self.policy.to_dict(),
                "per_matrix": [m.to_dict() for m in self.per_matrix]}

    def rows(self) -> list[dict]:
        return [m.to_dict() for m in self.per_matrix]


def rank_report(init: CheckpointIndex, tuned: CheckpointIndex, policy: RankPolicy = RankPolicy(),
                exclude: Sequence[str] = (), min_dim: int = 1,
                threads: Optional[int] = None) -> RankReport:
    """Rank of every 2-D tensor's delta; 0-D/1-D tensors are skipped."""
    names = check_schema([init, tuned], exclude)
    names = [n for n in names if len(init.tensors[n].shape) == 2 and min(init.tensors[n].shape) >= min_dim]

    def job(name):
        shape = init.tensors[name].shape
        r = delta_rank(read_tensor(init, name).reshape(shape), read_tensor(tuned, name).reshape(shape), policy)
        return MatrixRank(name, shape[0], shape[1], r)

    threads = default_threads() if threads is None else threads
    return RankReport(run_units(job, names, threads), policy)
