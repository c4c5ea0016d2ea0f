"""Subnetwork masks: extraction, set algebra, overlap and random baselines.

A mask stores one bit per parameter (1 = updated) packed little-endian per
tensor: bit ``k`` of byte ``j`` is element ``8*j + k`` in row-major order.
Padding bits past the last element are always zero.

On-disk layout (``.snmk``), all integers little-endian::

    b"SNMK" | u16 version | f64 tolerance | u64 n | n bytes of JSON schema
    | per-tensor bitsets in schema order, each padded to a byte boundary
    | 32-byte SHA-256 of every preceding byte

The JSON schema is ``{"source": str, "tensors": [{"name", "shape", "numel"}]}``.

Random masks use a counter-based SplitMix64 stream so any implementation can
reproduce them: with ``G = 0x9E3779B97F4A7C15`` and ``mix`` the SplitMix64
finalizer, ``key = mix(seed + G)``; element ``i`` (global row-major index
across tensors in schema order) is set iff
``mix(key + (i + 1) * G) >> 11 < floor(density * 2**53)``, arithmetic mod 2**64.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from .checkpoint import DEFAULT_CHUNK_ELEMS, CheckpointIndex
from .diff import check_schema, raw_changed_flags, run_units, work_units, default_threads
from .errors import EmptyMask, IoFailure, MaskFormatError, SchemaMismatch
from .roles import RoleClassifier, classify_tensor

MAGIC = b"SNMK"
FORMAT_VERSION = 1
_POP8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def _popcount(packed: np.ndarray) -> int:
    return int(_POP8[packed].sum(dtype=np.int64))


def _nbytes(numel: int) -> int:
    return (numel + 7) // 8


Schema = Mapping[str, tuple[tuple[int, ...], int]]


@dataclass(eq=False)
class SubnetMask:
    schema: dict[str, tuple[tuple[int, ...], int]]
    bits: dict[str, np.ndarray]
    tolerance: float
    source: str = ""
    _digest: Optional[bytes] = field(default=None, repr=False)

    def __post_init__(self):
        if self.schema.keys() != self.bits.keys():
            raise MaskFormatError("mask schema and bitsets name different tensors")
        for name, (shape, numel) in self.schema.items():
            if math.prod(shape) != numel:
                raise MaskFormatError(f"{name}: shape {shape} does not hold {numel} elements")
            b = self.bits[name]
            if b.dtype != np.uint8 or b.shape != (_nbytes(numel),):
                raise MaskFormatError(f"{name}: bitset has {b.size} bytes, expected {_nbytes(numel)}")

    @property
    def total(self) -> int:
        return sum(n for _, n in self.schema.values())

    def popcount(self, name: Optional[str] = None) -> int:
        if name is not None:
            return _popcount(self.bits[name])
        return sum(_popcount(b) for b in self.bits.values())

    @property
    def density(self) -> float:
        total = self.total
        return self.popcount() / total if total else 0.0

    def flags(self, name: str) -> np.ndarray:
        """Unpacked boolean flags of one tensor, flat."""
        numel = self.schema[name][1]
        return np.unpackbits(self.bits[name], count=numel, bitorder="little").astype(bool)

    def flat_flags(self) -> np.ndarray:
        return np.concatenate([self.flags(n) for n in self.schema]) if self.schema else np.zeros(0, bool)

    def indices(self) -> np.ndarray:
        """Global indices of set bits across tensors in schema order."""
        return np.flatnonzero(self.flat_flags())

    @classmethod
    def from_flags(cls, schema: Schema, flags: Mapping[str, np.ndarray], tolerance: float,
                   source: str = "") -> "SubnetMask":
        bits = {n: np.packbits(np.asarray(flags[n], dtype=bool).ravel(), bitorder="little")
                for n in schema}
        return cls(dict(schema), bits, float(tolerance), source)

    @classmethod
    def empty(cls, schema: Schema, tolerance: float = 0.0, source: str = "") -> "SubnetMask":
        return cls(dict(schema), {n: np.zeros(_nbytes(k), np.uint8) for n, (_, k) in schema.items()},
                   tolerance, source)

    def _parts(self) -> Iterator[bytes]:
        meta = {"source": self.source,
                "tensors": [{"name": n, "shape": list(s), "numel": k} for n, (s, k) in self.schema.items()]}
        blob = json.dumps(meta, separators=(",", ":")).encode()
        yield MAGIC + struct.pack("<Hd", FORMAT_VERSION, self.tolerance) + struct.pack("<Q", len(blob))
        yield blob
        for n in self.schema:
            yield self.bits[n].tobytes()

    @property
    def digest(self) -> bytes:
        if self._digest is None:
            h = hashlib.sha256()
            for part in self._parts():
                h.update(part)
            self._digest = h.digest()
        return self._digest

    def same_bits(self, other: "SubnetMask") -> bool:
        return (self.schema == other.schema
                and all(np.array_equal(self.bits[n], other.bits[n]) for n in self.schema))

    def __eq__(self, other):
        if not isinstance(other, SubnetMask):
            return NotImplemented
        same_tol = self.tolerance == other.tolerance or (self.tolerance != self.tolerance
                                                         and other.tolerance != other.tolerance)
        return same_tol and self.source == other.source and self.same_bits(other)

    def summary(self) -> dict:
        return {"tolerance": self.tolerance, "source": self.source, "updated": self.popcount(),
                "total": self.total, "density": self.density, "digest": self.digest.hex(),
                "tensors": len(self.schema)}


def write_mask(mask: SubnetMask, path) -> Path:
    path = Path(path)
    h = hashlib.sha256()
    try:
        with open(path, "wb") as f:
            for part in mask._parts():
                h.update(part)
                f.write(part)
            f.write(h.digest())
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
    mask._digest = h.digest()
    return path


def read_mask(path) -> SubnetMask:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
    fixed = 4 + 2 + 8 + 8
    if len(data) < fixed + 32 or data[:4] != MAGIC:
        raise MaskFormatError(f"{path}: not a subnetwork mask file")
    version, tolerance = struct.unpack_from("<Hd", data, 4)
    if version != FORMAT_VERSION:
        raise MaskFormatError(f"{path}: unsupported mask format version {version}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise MaskFormatError(f"{path}: content digest mismatch")
    (n,) = struct.unpack_from("<Q", data, 14)
    if fixed + n > len(body):
        raise MaskFormatError(f"{path}: schema block overruns the file")
    try:
        meta = json.loads(data[fixed:fixed + n].decode())
        entries = [(t["name"], tuple(t["shape"]), int(t["numel"])) for t in meta["tensors"]]
    except (ValueError, KeyError, TypeError) as e:
        raise MaskFormatError(f"{path}: bad schema block ({e})") from e
    pos = fixed + n
    schema, bits = {}, {}
    for name, shape, numel in entries:
        k = _nbytes(numel)
        if pos + k > len(body):
            raise MaskFormatError(f"{path}: bitset for {name!r} overruns the file")
        bits[name] = np.frombuffer(body, np.uint8, count=k, offset=pos).copy()
        schema[name] = (shape, numel)
        pos += k
    if pos != len(body):
        raise MaskFormatError(f"{path}: {len(body) - pos} trailing bytes before digest")
    mask = SubnetMask(schema, bits, tolerance, meta.get("source", ""))
    mask._digest = digest
    return mask


def schema_of(index: CheckpointIndex, names: Optional[Sequence[str]] = None) -> dict:
    names = list(index.tensors) if names is None else names
    return {n: (index.tensors[n].shape, index.tensors[n].numel) for n in names}


def extract_mask(init: CheckpointIndex, tuned: CheckpointIndex, tolerance: float,
                 exclude: Sequence[str] = (), chunk_elems: int = DEFAULT_CHUNK_ELEMS,
                 threads: Optional[int] = None, source: Optional[str] = None) -> SubnetMask:
    """Bit i set iff element i counts as updated between ``init`` and ``tuned``."""
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    names = check_schema([init, tuned], exclude)
    chunk_elems = max(8, chunk_elems - chunk_elems % 8)
    threads = default_threads() if threads is None else threads

    def job(unit):
        name, start, stop = unit
        flags = raw_changed_flags(init.raw(name, start, stop), tuned.raw(name, start, stop),
                                  init.tensors[name].dtype, tolerance)
        return name, np.packbits(flags, bitorder="little")

    pieces: dict[str, list[np.ndarray]] = {n: [] for n in names}
    for name, packed in run_units(job, list(work_units(init, names, chunk_elems)), threads):
        pieces[name].append(packed)
    bits = {n: np.concatenate(p) if p else np.zeros(0, np.uint8) for n, p in pieces.items()}
    if source is None:
        source = f"{init.path} -> {tuned.path}"
    return SubnetMask(schema_of(init, names), bits, float(tolerance), source)


def _check_same_schema(a: SubnetMask, b: SubnetMask) -> None:
    if a.schema != b.schema:
        offenders = sorted(set(a.schema) ^ set(b.schema)
                           | {n for n in set(a.schema) & set(b.schema) if a.schema[n] != b.schema[n]})
        raise SchemaMismatch("masks cover different tensors", offenders or ["<tensor order>"])


def mask_ops(a: SubnetMask, b: SubnetMask, op: str) -> SubnetMask:
    """Elementwise ``intersect``, ``union`` or ``difference`` (a and not b)."""
    _check_same_schema(a, b)
    fns = {"intersect": np.bitwise_and, "union": np.bitwise_or,
           "difference": lambda x, y: x & ~y}
    if op not in fns:
        raise ValueError(f"unknown mask op {op!r}; expected one of {sorted(fns)}")
    bits = {n: fns[op](a.bits[n], b.bits[n]).astype(np.uint8) for n in a.schema}
    tol = a.tolerance if a.tolerance == b.tolerance else max(a.tolerance, b.tolerance)
    return SubnetMask(dict(a.schema), bits, tol, f"{op}({a.source}; {b.source})")


def complement(a: SubnetMask) -> SubnetMask:
    bits = {}
    for n, (_, numel) in a.schema.items():
        inv = ~a.bits[n]
        tail = numel % 8
        if tail:
            inv[-1] &= (1 << tail) - 1
        bits[n] = inv
    return SubnetMask(dict(a.schema), bits, a.tolerance, f"not({a.source})")


@dataclass
class OverlapReport:
    common: int
    updated1: int
    updated2: int
    total: int
    per_layer: Optional[dict] = None

    @property
    def o1(self) -> float:
        return self.common / self.updated1

    @property
    def o2(self) -> float:
        return self.common / self.updated2

    @property
    def density1(self) -> float:
        return self.updated1 / self.total

    @property
    def density2(self) -> float:
        return self.updated2 / self.total

    # a uniformly random subnetwork of the same size covers each index with
    # probability equal to its density
    @property
    def o1_random(self) -> float:
        return self.density2

    @property
    def o2_random(self) -> float:
        return self.density1

    def to_dict(self) -> dict:
        out = {"common": self.common, "updated1": self.updated1, "updated2": self.updated2,
               "total": self.total, "o1": self.o1, "o2": self.o2,
               "o1_random": self.o1_random, "o2_random": self.o2_random,
               "density1": self.density1, "density2": self.density2}
        if self.per_layer is not None:
            out["per_layer"] = self.per_layer
            out["per_layer_note"] = "extension: per-layer overlap, beyond the whole-model metric"
        return out


def _layer_entry(common, u1, u2, total) -> dict:
    return {"common": common, "updated1": u1, "updated2": u2, "total": total,
            "o1": common / u1 if u1 else None, "o2": common / u2 if u2 else None,
            "density1": u1 / total if total else None, "density2": u2 / total if total else None,
            "o1_random": u2 / total if total else None, "o2_random": u1 / total if total else None}


def overlap(a: SubnetMask, b: SubnetMask, per_layer: bool = False,
            classifier: Optional[RoleClassifier] = None) -> OverlapReport:
    """One-sided overlaps ``o1 = |I1 & I2| / |I1|`` and ``o2 = |I1 & I2| / |I2|``."""
    _check_same_schema(a, b)
    counts = {n: (_popcount(a.bits[n] & b.bits[n]), _popcount(a.bits[n]), _popcount(b.bits[n]))
              for n in a.schema}
    common = sum(c[0] for c in counts.values())
    u1 = sum(c[1] for c in counts.values())
    u2 = sum(c[2] for c in counts.values())
    if u1 == 0 or u2 == 0:
        raise EmptyMask(f"overlap needs non-empty masks (updated counts {u1}, {u2})")
    layers = None
    if per_layer:
        acc: dict = {}
        for n, (c, x, y) in counts.items():
            layer = classify_tensor(n, classifier).layer_index
            key = "none" if layer is None else str(layer)
            s = acc.setdefault(key, [0, 0, 0, 0])
            s[0] += c
            s[1] += x
            s[2] += y
            s[3] += a.schema[n][1]
        ordered = sorted(acc, key=lambda k: (k == "none", int(k) if k != "none" else 0))
        layers = {k: _layer_entry(*acc[k]) for k in ordered}
    return OverlapReport(common, u1, u2, a.total, layers)


# -- seeded random masks ------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def random_uniform53(seed: int, start: int, stop: int) -> np.ndarray:
    """Raw 53-bit draws for global element indices ``[start, stop)``."""
    key = np.uint64(_mix_int(seed + 0x9E3779B97F4A7C15))
    i = np.arange(start + 1, stop + 1, dtype=np.uint64)
    return _mix(key + i * _GAMMA) >> np.uint64(11)


def random_mask(schema: Schema, density: float, seed: int, chunk_elems: int = DEFAULT_CHUNK_ELEMS,
                tolerance: float = float("nan")) -> SubnetMask:
    """Each bit set independently with probability ``density``; see module docs."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    threshold = np.uint64(math.floor(density * 2 ** 53))
    chunk_elems = max(8, chunk_elems - chunk_elems % 8)
    bits = {}
    offset = 0
    for name, (_, numel) in schema.items():
        pieces = []
        for s in range(0, numel, chunk_elems):
            e = min(s + chunk_elems, numel)
            pieces.append(np.packbits(random_uniform53(seed, offset + s, offset + e) < threshold,
                                      bitorder="little"))
        bits[name] = np.concatenate(pieces) if pieces else np.zeros(0, np.uint8)
        offset += numel
    return SubnetMask(dict(schema), bits, tolerance, f"random(density={density!r}, seed={seed})")
