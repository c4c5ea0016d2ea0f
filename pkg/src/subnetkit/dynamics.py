"""Sparsity along an ordered sequence of checkpoints.

All checkpoints are streamed in lockstep, one chunk of every file at a time,
so memory stays at O(chunk x checkpoints) and per-element histories are
never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .checkpoint import DEFAULT_CHUNK_ELEMS, CheckpointIndex
from .diff import SCHEMA_VERSION, check_schema, default_threads, raw_changed_flags, run_units, work_units
from .errors import EmptySequence, InsufficientCheckpoints, SchemaMismatch
from .masks import SubnetMask


@dataclass
class DynamicsSeries:
    checkpoints: list[str]
    tolerance: float
    total: int
    changed_vs_init: list[int]
    changed_consecutive: list[int]
    outside_final: list[int]
    cumulative_outside_final: list[int]
    ever_updated: list[int]

    def _frac(self, counts):
        return [c / self.total if self.total else 0.0 for c in counts]

    @property
    def sparsity_vs_init(self) -> list[float]:
        return [1.0 - f for f in self._frac(self.changed_vs_init)]

    @property
    def sparsity_consecutive(self) -> list[float]:
        return [1.0 - f for f in self._frac(self.changed_consecutive)]

    @property
    def outside_final_frac(self) -> list[float]:
        return self._frac(self.outside_final)

    @property
    def cumulative_outside_final_frac(self) -> list[float]:
        """Fraction of all parameters updated at some checkpoint up to t but not in the final mask."""
        return self._frac(self.cumulative_outside_final)

    @property
    def ever_updated_outside_final_share(self) -> float:
        """Share of ever-updated parameters that end up outside the final subnetwork."""
        ever = self.ever_updated[-1]
        return self.cumulative_outside_final[-1] / ever if ever else 0.0

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "checkpoints": self.checkpoints,
            "tolerance": self.tolerance,
            "total": self.total,
            "sparsity_vs_init": self.sparsity_vs_init,
            "sparsity_consecutive": self.sparsity_consecutive,
            "outside_final_frac": self.outside_final_frac,
            "cumulative_outside_final_frac": self.cumulative_outside_final_frac,
            "ever_updated_outside_final_share": self.ever_updated_outside_final_share,
        }

    def rows(self) -> list[dict]:
        out = []
        for k, ck in enumerate(self.checkpoints):
            out.append({
                "step": k, "checkpoint": ck,
                "sparsity_vs_init": self.sparsity_vs_init[k],
                "sparsity_consecutive": self.sparsity_consecutive[k - 1] if k else "",
                "outside_final_frac": self.outside_final_frac[k],
                "cumulative_outside_final_frac": self.cumulative_outside_final_frac[k],
            })
        return out


def series_sparsity(init: CheckpointIndex, seq: Sequence[CheckpointIndex], tolerance: float,
                    exclude: Sequence[str] = (), chunk_elems: int = DEFAULT_CHUNK_ELEMS,
                    threads: Optional[int] = None, ids: Optional[Sequence[str]] = None) -> DynamicsSeries:
    """Sparsity of every checkpoint vs ``init`` and vs its predecessor.

    The final subnetwork is the set of elements changed at ``seq[-1]``.
    """
    if not seq:
        raise EmptySequence("dynamics needs at least one checkpoint")
    names = check_schema([init, *seq], exclude)
    k = len(seq)

    def job(unit):
        name, start, stop = unit
        dtype = init.tensors[name].dtype
        base = init.raw(name, start, stop)
        raws = [c.raw(name, start, stop) for c in seq]
        vs_init = [raw_changed_flags(base, r, dtype, tolerance) for r in raws]
        consec = [int(np.count_nonzero(raw_changed_flags(x, y, dtype, tolerance)))
                  for x, y in zip(raws, raws[1:])]
        inside = vs_init[-1]
        ever = np.zeros(stop - start, dtype=bool)
        out_now, cum, ever_n = [], [], []
        for flags in vs_init:
            ever |= flags
            out_now.append(int(np.count_nonzero(flags & ~inside)))
            cum.append(int(np.count_nonzero(ever & ~inside)))
            ever_n.append(int(np.count_nonzero(ever)))
        return [int(np.count_nonzero(f)) for f in vs_init], consec, out_now, cum, ever_n

    threads = default_threads() if threads is None else threads
    sums = [[0] * k, [0] * (k - 1), [0] * k, [0] * k, [0] * k]
    for parts in run_units(job, list(work_units(init, names, chunk_elems)), threads):
        for acc, vals in zip(sums, parts):
            for i, v in enumerate(vals):
                acc[i] += v
    ids = list(ids) if ids is not None else [str(c.path) for c in seq]
    total = sum(init.tensors[n].numel for n in names)
    return DynamicsSeries(ids, float(tolerance), total, *sums)


@dataclass(frozen=True)
class ParamPartition:
    untouched: int
    canceled: int
    subnetwork: int

    @property
    def total(self) -> int:
        return self.untouched + self.canceled + self.subnetwork

    @property
    def untouched_frac(self) -> float:
        return self.untouched / self.total

    @property
    def canceled_frac(self) -> float:
        return self.canceled / self.total

    @property
    def subnetwork_frac(self) -> float:
        return self.subnetwork / self.total

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "untouched": self.untouched,
                "canceled": self.canceled, "subnetwork": self.subnetwork, "total": self.total,
                "untouched_frac": self.untouched_frac, "canceled_frac": self.canceled_frac,
                "subnetwork_frac": self.subnetwork_frac}


def classify_params(init: CheckpointIndex, seq: Sequence[CheckpointIndex],
                    final: Optional[CheckpointIndex] = None, tolerance: float = 1e-5,
                    exclude: Sequence[str] = (), chunk_elems: int = DEFAULT_CHUNK_ELEMS,
                    threads: Optional[int] = None) -> ParamPartition:
    """Split parameters into untouched, canceled and subnetwork.

    ``final`` defaults to ``seq[-1]``; the remaining checkpoints are the
    intermediates. Subnetwork: differs from init at final. Canceled: equal
    to init at final but different at some intermediate. Untouched: equal
    to init everywhere.
    """
    if final is None:
        if not seq:
            raise EmptySequence("dynamics needs at least one checkpoint")
        *inter, final = seq
    else:
        inter = list(seq)
    if not inter:
        raise InsufficientCheckpoints(
            "canceled and untouched parameters cannot be told apart without an intermediate checkpoint")
    names = check_schema([init, *inter, final], exclude)

    def job(unit):
        name, start, stop = unit
        dtype = init.tensors[name].dtype
        base = init.raw(name, start, stop)
        at_final = raw_changed_flags(base, final.raw(name, start, stop), dtype, tolerance)
        ever = np.zeros(stop - start, dtype=bool)
        for c in inter:
            ever |= raw_changed_flags(base, c.raw(name, start, stop), dtype, tolerance)
        sub = int(np.count_nonzero(at_final))
        canceled = int(np.count_nonzero(ever & ~at_final))
        return stop - start - sub - canceled, canceled, sub

    threads = default_threads() if threads is None else threads
    u = c = s = 0
    for a, b, d in run_units(job, list(work_units(init, names, chunk_elems)), threads):
        u += a
        c += b
        s += d
    return ParamPartition(u, c, s)


def outside_final_fraction(init: CheckpointIndex, ck: CheckpointIndex, final_mask: SubnetMask,
                           tolerance: float, chunk_elems: int = DEFAULT_CHUNK_ELEMS,
                           threads: Optional[int] = None) -> float:
    """Fraction of all parameters updated at ``ck`` but outside ``final_mask``."""
    names = [n for n in check_schema([init, ck]) if n in final_mask.schema]
    expected = {n: (init.tensors[n].shape, init.tensors[n].numel) for n in names}
    if len(names) != len(final_mask.schema) or any(final_mask.schema[n] != expected[n] for n in names):
        bad = sorted(set(final_mask.schema) ^ set(names)
                     | {n for n in names if final_mask.schema[n] != expected[n]})
        raise SchemaMismatch("mask does not match checkpoint tensors", bad)
    chunk_elems = max(8, chunk_elems - chunk_elems % 8)

    def job(unit):
        name, start, stop = unit
        flags = raw_changed_flags(init.raw(name, start, stop), ck.raw(name, start, stop),
                                  init.tensors[name].dtype, tolerance)
        inside = np.unpackbits(final_mask.bits[name][start // 8:(stop + 7) // 8],
                               count=stop - start, bitorder="little").astype(bool)
        return int(np.count_nonzero(flags & ~inside))

    threads = default_threads() if threads is None else threads
    total = sum(expected[n][1] for n in names)
    outside = sum(run_units(job, list(work_units(init, names, chunk_elems)), threads))
    return outside / total if total else 0.0
