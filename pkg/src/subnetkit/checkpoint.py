"""Read-only access to safetensors checkpoints.

The container is ``u64 LE header length | JSON header | data region``. The
header maps tensor names to ``{"dtype", "shape", "data_offsets"}`` with
offsets relative to the start of the data region. Payloads are never read
eagerly: every shard is memory-mapped once and tensors are exposed as
zero-copy numpy views over the map.
"""

from __future__ import annotations

import json
import math
import mmap
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterator, Mapping, Optional

import numpy as np

from .errors import IoFailure, MalformedHeader, OffsetOutOfBounds, UnknownTensor
from .precision import DTYPES, decode, encode
from .roles import RoleClassifier, TensorRole, classify_tensor

DEFAULT_CHUNK_ELEMS = 1 << 22
SHARD_INDEX_SUFFIX = ".safetensors.index.json"


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_range: tuple[int, int]
    role: TensorRole
    file: Path
    data_start: int

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def itemsize(self) -> int:
        return DTYPES[self.dtype][1]


@dataclass(frozen=True, eq=False)
class CheckpointIndex:
    path: Path
    tensors: Mapping[str, TensorMeta]
    metadata: Mapping[str, str]
    _maps: dict = field(default_factory=dict, repr=False)

    @property
    def total_params(self) -> int:
        return sum(t.numel for t in self.tensors.values())

    def __eq__(self, other):
        if not isinstance(other, CheckpointIndex):
            return NotImplemented
        return (self.path == other.path and dict(self.tensors) == dict(other.tensors)
                and dict(self.metadata) == dict(other.metadata))

    def __hash__(self):
        return hash((self.path, tuple(self.tensors)))

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def meta(self, name: str) -> TensorMeta:
        try:
            return self.tensors[name]
        except KeyError:
            raise UnknownTensor(f"no tensor named {name!r} in {self.path}") from None

    def raw(self, name: str, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Zero-copy flat view of stored elements ``[start, stop)``."""
        meta = self.meta(name)
        stop = meta.numel if stop is None else min(stop, meta.numel)
        start = min(start, stop)
        storage, width = DTYPES[meta.dtype]
        buf = self._maps.get(meta.file)
        if buf is None:
            raise IoFailure(f"checkpoint {self.path} is closed")
        if stop == start:
            return np.empty(0, dtype=storage)
        offset = meta.data_start + meta.byte_range[0] + start * width
        return np.frombuffer(buf, dtype=storage, count=stop - start, offset=offset)

    def view(self, name: str) -> np.ndarray:
        """Zero-copy view in the stored shape (bfloat16 as uint16 bit patterns)."""
        return self.raw(name).reshape(self.meta(name).shape)

    def close(self) -> None:
        for m in self._maps.values():
            if isinstance(m, mmap.mmap):
                try:
                    m.close()
                except BufferError:
                    # live numpy views still reference the map; let GC handle it
                    pass
        self._maps.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _parse_header(path: Path) -> tuple[dict, dict, int, int]:
    try:
        size = path.stat().st_size
        with open(path, "rb") as f:
            prefix = f.read(8)
            if len(prefix) < 8:
                raise MalformedHeader(f"{path}: file shorter than the 8-byte header length")
            (n,) = struct.unpack("<Q", prefix)
            if n == 0 or 8 + n > size:
                raise MalformedHeader(f"{path}: header length {n} inconsistent with file size {size}")
            blob = f.read(n)
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"{path}: header is not valid UTF-8 JSON ({e})") from e
    if not isinstance(header, dict):
        raise MalformedHeader(f"{path}: header must be a JSON object")
    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict):
        raise MalformedHeader(f"{path}: __metadata__ must be an object")
    return header, metadata, 8 + n, size


def _validate_entry(path: Path, name: str, entry) -> tuple[str, tuple[int, ...], tuple[int, int]]:
    if not isinstance(entry, dict) or not {"dtype", "shape", "data_offsets"} <= entry.keys():
        raise MalformedHeader(f"{path}: entry {name!r} lacks dtype/shape/data_offsets")
    dtype = entry["dtype"]
    if dtype not in DTYPES:
        raise MalformedHeader(
            f"{path}: tensor {name!r} has dtype {dtype!r}; only floating-point "
            f"dtypes {sorted(DTYPES)} are supported")
    shape = entry["shape"]
    offsets = entry["data_offsets"]
    if (not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape)):
        raise MalformedHeader(f"{path}: tensor {name!r} has invalid shape {shape!r}")
    if (not isinstance(offsets, list) or len(offsets) != 2
            or not all(isinstance(o, int) and o >= 0 for o in offsets)
            or offsets[1] < offsets[0]):
        raise MalformedHeader(f"{path}: tensor {name!r} has invalid data_offsets {offsets!r}")
    begin, end = offsets
    if math.prod(shape) * DTYPES[dtype][1] != end - begin:
        raise MalformedHeader(
            f"{path}: tensor {name!r} shape {shape} x {dtype} needs "
            f"{math.prod(shape) * DTYPES[dtype][1]} bytes, offsets span {end - begin}")
    return dtype, tuple(shape), (begin, end)


def _open_file(path: Path, classifier) -> tuple[dict, dict, mmap.mmap | bytes]:
    header, metadata, data_start, size = _parse_header(path)
    data_len = size - data_start
    metas = {}
    for name, entry in header.items():
        dtype, shape, (begin, end) = _validate_entry(path, name, entry)
        if end > data_len:
            raise OffsetOutOfBounds(
                f"{path}: tensor {name!r} ends at {end}, data region holds {data_len} bytes")
        metas[name] = TensorMeta(name, dtype, shape, (begin, end),
                                 classify_tensor(name, classifier), path, data_start)
    spans = sorted((m.byte_range, m.name) for m in metas.values() if m.byte_range[1] > m.byte_range[0])
    for ((_, prev_end), prev), ((begin, _), name) in zip(spans, spans[1:]):
        if begin < prev_end:
            raise OffsetOutOfBounds(f"{path}: tensors {prev!r} and {name!r} overlap")
    try:
        with open(path, "rb") as f:
            buf = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
    except (OSError, ValueError) as e:
        raise IoFailure(f"{path}: cannot map file ({e})") from e
    return metas, metadata, buf


def _resolve(path: Path) -> Path:
    if path.is_dir():
        index = sorted(path.glob("*" + SHARD_INDEX_SUFFIX))
        if index:
            return index[0]
        files = sorted(path.glob("*.safetensors"))
        if len(files) == 1:
            return files[0]
        raise IoFailure(f"{path}: expected one .safetensors file or a shard index, found {len(files)} files")
    return path


def open_checkpoint(path, classifier: RoleClassifier | None = None) -> CheckpointIndex:
    """Parse and validate a checkpoint without reading tensor payloads.

    ``path`` may be a single ``.safetensors`` file, a shard index JSON whose
    ``weight_map`` maps tensor names to shard files, or a directory holding
    either. A shard set is exposed as one logical index.
    """
    path = _resolve(Path(path))
    if not path.exists():
        raise IoFailure(f"{path}: no such file")
    if path.name.endswith(".json"):
        return _open_sharded(path, classifier)
    metas, metadata, buf = _open_file(path, classifier)
    return CheckpointIndex(path, MappingProxyType(metas), MappingProxyType(metadata), {path: buf})


def _open_sharded(path: Path, classifier) -> CheckpointIndex:
    try:
        spec = json.loads(path.read_text())
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
    except json.JSONDecodeError as e:
        raise MalformedHeader(f"{path}: shard index is not valid JSON ({e})") from e
    weight_map = spec.get("weight_map") if isinstance(spec, dict) else None
    if not isinstance(weight_map, dict):
        raise MalformedHeader(f"{path}: shard index lacks a weight_map object")
    shards: dict[Path, dict] = {}
    maps = {}
    for shard in dict.fromkeys(weight_map.values()):
        shard_path = path.parent / shard
        metas, _, buf = _open_file(shard_path, classifier)
        shards[shard_path] = metas
        maps[shard_path] = buf
    tensors = {}
    for name, shard in weight_map.items():
        metas = shards[path.parent / shard]
        if name not in metas:
            raise MalformedHeader(f"{path}: weight_map puts {name!r} in {shard}, which lacks it")
        tensors[name] = metas[name]
    metadata = spec.get("metadata") or {}
    return CheckpointIndex(path, MappingProxyType(tensors), MappingProxyType(dict(metadata)), maps)


def read_tensor(index: CheckpointIndex, name: str) -> np.ndarray:
    """Flat exact upcast: float32 for 16/32-bit storage, float64 for F64."""
    return decode(index.raw(name), index.meta(name).dtype)


def read_tensor_f32(index: CheckpointIndex, name: str) -> np.ndarray:
    """Flat float32 copy of a tensor, row-major.

    Exact for BF16/F16/F32. F64 tensors are rounded to float32; use
    :func:`read_tensor` when full precision matters.
    """
    return read_tensor(index, name).astype(np.float32, copy=False)


def iter_chunks(index: CheckpointIndex, name: str,
                chunk_elems: int = DEFAULT_CHUNK_ELEMS) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(start, raw_view)`` slices of at most ``chunk_elems`` elements."""
    n = index.meta(name).numel
    for start in range(0, n, chunk_elems):
        yield start, index.raw(name, start, start + chunk_elems)


# -- fixture / toy-run writer -------------------------------------------------

_NATIVE = {np.dtype(np.float16): "F16", np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], dtypes=None,
                     metadata: Mapping[str, str] | None = None) -> Path:
    """Write a safetensors file.

    ``dtypes`` is a single dtype string or a per-name mapping; when absent the
    dtype follows the array. For ``"BF16"`` a ``uint16`` array is taken as
    raw bit patterns, anything else is rounded to nearest even.
    """
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = dtypes if isinstance(dtypes, str) else (dtypes or {}).get(name)
        if dtype is None:
            dtype = _NATIVE.get(arr.dtype)
            if dtype is None:
                raise ValueError(f"cannot infer a floating dtype for {name!r} ({arr.dtype})")
        if dtype == "BF16" and arr.dtype == np.uint16:
            stored = arr.astype("<u2")
        else:
            stored = encode(arr, dtype)
        blob = np.ascontiguousarray(stored).tobytes()
        header[name] = {"dtype": dtype, "shape": list(arr.shape),
                        "data_offsets": [offset, offset + len(blob)]}
        blobs.append(blob)
        offset += len(blob)
    text = json.dumps(header, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)
    return path


def write_sharded(directory, tensors: Mapping[str, np.ndarray], per_shard: int, dtypes=None,
                  prefix: str = "model") -> Path:
    """Split ``tensors`` across shards of ``per_shard`` tensors plus a shard index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(tensors)
    groups = [names[i:i + per_shard] for i in range(0, len(names), per_shard)]
    weight_map = {}
    for k, group in enumerate(groups, 1):
        fname = f"{prefix}-{k:05d}-of-{len(groups):05d}.safetensors"
        sub_dtypes = dtypes if isinstance(dtypes, (str, type(None))) else {n: dtypes[n] for n in group if n in dtypes}
        write_checkpoint(directory / fname, {n: tensors[n] for n in group}, sub_dtypes)
        weight_map.update({n: fname for n in group})
    index = directory / (prefix + SHARD_INDEX_SUFFIX)
    index.write_text(json.dumps({"metadata": {}, "weight_map": weight_map}, indent=2))
    return index
