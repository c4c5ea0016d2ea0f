"""Elementwise update sparsity between two checkpoints.

Two stored values are equal under tolerance ``tol`` when both are finite and
``|a - b| <= tol`` (difference taken in float64 on the exact upcasts), or when
either is non-finite and their stored bit patterns are identical.
"""

from __future__ import annotations

import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .checkpoint import DEFAULT_CHUNK_ELEMS, CheckpointIndex
from .errors import LengthMismatch, SchemaMismatch
from .precision import decode
from .roles import Kind, TensorRole

DEFAULT_TOLERANCES = (1e-8, 1e-7, 1e-6, 1e-5)
SCHEMA_VERSION = "1.0"
THREADS_ENV = "SUBNETKIT_THREADS"


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


@dataclass(frozen=True)
class DeltaStats:
    tolerance: float
    changed: int
    total: int

    @property
    def sparsity(self) -> float:
        if self.total == 0:
            return 1.0
        return (self.total - self.changed) / self.total

    @property
    def density(self) -> float:
        return 1.0 - self.sparsity if self.total else 0.0

    def __add__(self, other: "DeltaStats") -> "DeltaStats":
        if other.tolerance != self.tolerance:
            raise ValueError("cannot add DeltaStats at different tolerances")
        return DeltaStats(self.tolerance, self.changed + other.changed, self.total + other.total)

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "changed": self.changed,
                "total": self.total, "sparsity": self.sparsity}


def check_tolerances(tolerances: Iterable[float]) -> tuple[float, ...]:
    tols = tuple(float(t) for t in tolerances)
    if not tols:
        raise ValueError("at least one tolerance is required")
    if any(t < 0 or t != t for t in tols):
        raise ValueError(f"tolerances must be non-negative: {tols}")
    if any(b <= a for a, b in zip(tols, tols[1:])):
        raise ValueError(f"tolerances must be strictly increasing: {tols}")
    return tols


def _bits(x: np.ndarray) -> np.ndarray:
    return x.view(np.dtype(f"u{x.dtype.itemsize}"))


def _abs_delta(a_vals: np.ndarray, b_vals: np.ndarray, a_bits: np.ndarray, b_bits: np.ndarray):
    """Return (|a-b| with -1 at non-finite pairs, count of non-finite mismatches)."""
    with np.errstate(invalid="ignore", over="ignore"):
        a = a_vals.astype(np.float64, copy=False)
        b = b_vals.astype(np.float64, copy=False)
        d = np.abs(a - b)
    finite = np.isfinite(a) & np.isfinite(b)
    if finite.all():
        return d, 0
    bad = ~finite
    mismatched = int(np.count_nonzero(a_bits[bad] != b_bits[bad]))
    d[bad] = -1.0
    return d, mismatched


def changed_flags(a_vals, b_vals, tolerance: float, a_bits=None, b_bits=None) -> np.ndarray:
    """Boolean array, True where the element counts as updated."""
    a_vals, b_vals = np.asarray(a_vals), np.asarray(b_vals)
    a_bits = _bits(a_vals) if a_bits is None else a_bits
    b_bits = _bits(b_vals) if b_bits is None else b_bits
    with np.errstate(invalid="ignore", over="ignore"):
        a = a_vals.astype(np.float64, copy=False)
        b = b_vals.astype(np.float64, copy=False)
        out = np.abs(a - b) > tolerance
    finite = np.isfinite(a) & np.isfinite(b)
    if not finite.all():
        bad = ~finite
        out[bad] = a_bits[bad] != b_bits[bad]
    return out


def raw_changed_flags(a_raw: np.ndarray, b_raw: np.ndarray, dtype: str, tolerance: float) -> np.ndarray:
    """:func:`changed_flags` on stored (raw) elements of a given safetensors dtype."""
    return changed_flags(decode(a_raw, dtype), decode(b_raw, dtype), tolerance, _bits(a_raw), _bits(b_raw))


def _count(a_vals, b_vals, tols, a_bits, b_bits) -> list[int]:
    d, mismatched = _abs_delta(a_vals, b_vals, a_bits, b_bits)
    return [int(np.count_nonzero(d > t)) + mismatched for t in tols]


def tensor_delta_stats(a, b, tolerances: Sequence[float]) -> list[DeltaStats]:
    """Changed/total counts between two flat float arrays, one entry per tolerance."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"arrays differ in length: {a.size} vs {b.size}")
    tols = check_tolerances(tolerances)
    counts = _count(a, b, tols, _bits(a), _bits(b))
    return [DeltaStats(t, c, a.size) for t, c in zip(tols, counts)]


def check_schema(indices: Sequence[CheckpointIndex], exclude: Sequence[str] = ()) -> list[str]:
    """Names shared by all checkpoints (minus excluded), in the first one's order.

    Raises :class:`SchemaMismatch` listing every tensor whose presence,
    shape or dtype differs.
    """
    patterns = [re.compile(p) for p in exclude]
    first = indices[0]
    offenders = []
    for other in indices[1:]:
        for name in first.tensors.keys() ^ other.tensors.keys():
            offenders.append(name)
        for name in first.tensors.keys() & other.tensors.keys():
            a, b = first.tensors[name], other.tensors[name]
            if a.shape != b.shape or a.dtype != b.dtype:
                offenders.append(name)
    if offenders:
        raise SchemaMismatch("checkpoints disagree on tensors",
                             sorted(dict.fromkeys(offenders)))
    return [n for n in first.tensors if not any(p.search(n) for p in patterns)]


def work_units(index: CheckpointIndex, names: Sequence[str], chunk_elems: int):
    for name in names:
        n = index.tensors[name].numel
        for start in range(0, n, chunk_elems):
            yield name, start, min(start + chunk_elems, n)


def run_units(fn, units, threads: int):
    """Map ``fn`` over work units; serial for one thread."""
    if threads <= 1:
        return [fn(u) for u in units]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, units))


@dataclass
class SparsityReport:
    tolerances: tuple[float, ...]
    per_tensor: dict[str, list[DeltaStats]]
    roles: dict[str, TensorRole]
    per_layer: dict[int, list[DeltaStats]] = field(default_factory=dict)
    per_role: dict[str, list[DeltaStats]] = field(default_factory=dict)
    global_stats: list[DeltaStats] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tolerances": list(self.tolerances),
            "global": [s.to_dict() for s in self.global_stats],
            "per_layer": {str(k): [s.to_dict() for s in v] for k, v in self.per_layer.items()},
            "per_role": {k: [s.to_dict() for s in v] for k, v in self.per_role.items()},
            "per_tensor": {
                name: {"layer_index": self.roles[name].layer_index,
                       "kind": self.roles[name].kind.value,
                       "stats": [s.to_dict() for s in stats]}
                for name, stats in self.per_tensor.items()
            },
        }

    def rows(self) -> list[dict]:
        """Flat rows for CSV output: one per (scope, key, tolerance)."""
        out = []

        def emit(scope, key, stats):
            for s in stats:
                out.append({"scope": scope, "key": key, **s.to_dict()})

        emit("global", "", self.global_stats)
        for k, v in self.per_layer.items():
            emit("layer", k, v)
        for k, v in self.per_role.items():
            emit("role", k, v)
        for k, v in self.per_tensor.items():
            emit("tensor", k, v)
        return out


def _sum_stats(tols, groups: Iterable[list[DeltaStats]]) -> list[DeltaStats]:
    changed = [0] * len(tols)
    total = 0
    for stats in groups:
        total += stats[0].total
        for i, s in enumerate(stats):
            changed[i] += s.changed
    return [DeltaStats(t, c, total) for t, c in zip(tols, changed)]


def aggregate(tols: tuple[float, ...], per_tensor: dict[str, list[DeltaStats]],
              roles: dict[str, TensorRole]) -> SparsityReport:
    layers: dict[int, list[str]] = {}
    kinds: dict[str, list[str]] = {}
    for name in per_tensor:
        role = roles[name]
        if role.layer_index is not None:
            layers.setdefault(role.layer_index, []).append(name)
        kinds.setdefault(role.kind.value, []).append(name)
    order = [k.value for k in Kind]
    return SparsityReport(
        tolerances=tols,
        per_tensor=per_tensor,
        roles=roles,
        per_layer={k: _sum_stats(tols, (per_tensor[n] for n in layers[k])) for k in sorted(layers)},
        per_role={k: _sum_stats(tols, (per_tensor[n] for n in kinds[k]))
                  for k in sorted(kinds, key=order.index)},
        global_stats=_sum_stats(tols, per_tensor.values()),
    )


def checkpoint_sparsity(init: CheckpointIndex, tuned: CheckpointIndex,
                        tolerances: Sequence[float] = DEFAULT_TOLERANCES,
                        exclude: Sequence[str] = (), chunk_elems: int = DEFAULT_CHUNK_ELEMS,
                        threads: Optional[int] = None, progress=None) -> SparsityReport:
    """Stream both checkpoints chunk by chunk and count changed elements.

    Counts are exact integers summed per tensor, so the result does not
    depend on ``threads`` or scheduling order.
    """
    tols = check_tolerances(tolerances)
    names = check_schema([init, tuned], exclude)
    threads = default_threads() if threads is None else threads

    def job(unit):
        name, start, stop = unit
        dtype = init.tensors[name].dtype
        a_raw, b_raw = init.raw(name, start, stop), tuned.raw(name, start, stop)
        counts = _count(decode(a_raw, dtype), decode(b_raw, dtype), tols, _bits(a_raw), _bits(b_raw))
        if progress is not None:
            progress(stop - start)
        return name, counts

    changed = {n: [0] * len(tols) for n in names}
    for name, counts in run_units(job, list(work_units(init, names, chunk_elems)), threads):
        acc = changed[name]
        for i, c in enumerate(counts):
            acc[i] += c
    per_tensor = {n: [DeltaStats(t, c, init.tensors[n].numel) for t, c in zip(tols, changed[n])]
                  for n in names}
    return aggregate(tols, per_tensor, {n: init.tensors[n].role for n in names})


@dataclass(frozen=True)
class LayerRow:
    layer_index: Optional[int]
    kind: str
    tolerance: float
    changed: int
    total: int

    @property
    def sparsity(self) -> float:
        return DeltaStats(self.tolerance, self.changed, self.total).sparsity

    def to_dict(self) -> dict:
        return {"layer_index": self.layer_index, "kind": self.kind, "tolerance": self.tolerance,
                "changed": self.changed, "total": self.total, "sparsity": self.sparsity}


AVERAGE = "Average"


def layer_breakdown(report: SparsityReport, tolerance: Optional[float] = None) -> list[LayerRow]:
    """Per (layer, kind) sparsity rows plus one pooled ``Average`` row per layer.

    Uses the largest tolerance in the report unless one is given. Tensors
    without a layer index are grouped under ``layer_index=None`` at the end.
    """
    tol = report.tolerances[-1] if tolerance is None else float(tolerance)
    if tol not in report.tolerances:
        raise ValueError(f"tolerance {tol} not in report {report.tolerances}")
    i = report.tolerances.index(tol)
    cells: dict[tuple[Optional[int], str], list[int]] = {}
    for name, stats in report.per_tensor.items():
        role = report.roles[name]
        for key in ((role.layer_index, role.kind.value), (role.layer_index, AVERAGE)):
            acc = cells.setdefault(key, [0, 0])
            acc[0] += stats[i].changed
            acc[1] += stats[i].total
    order = [k.value for k in Kind] + [AVERAGE]

    def sort_key(key):
        layer, kind = key
        return (layer is None, layer if layer is not None else 0, order.index(kind))

    return [LayerRow(layer, kind, tol, c, t) for (layer, kind), (c, t) in sorted(cells.items(), key=lambda kv: sort_key(kv[0]))]
