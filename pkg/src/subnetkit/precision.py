"""Bit-level helpers for 16-bit floating point storage formats.

bfloat16 has no native numpy dtype, so values travel as ``uint16`` bit
patterns and are widened to float32 by shifting into the high half-word.
"""

import numpy as np

# safetensors dtype string -> (storage dtype, bytes per element)
DTYPES = {
    "BF16": (np.dtype("<u2"), 2),
    "F16": (np.dtype("<f2"), 2),
    "F32": (np.dtype("<f4"), 4),
    "F64": (np.dtype("<f8"), 8),
}

CANONICAL_BF16_NAN = 0x7FC0


def bf16_bits_to_f32(bits) -> np.ndarray:
    """Widen bfloat16 bit patterns to float32. Exact for every pattern."""
    bits = np.asarray(bits, dtype=np.uint16)
    return (bits.astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16_bits(x) -> np.ndarray:
    """Round float32 values to bfloat16 bit patterns, nearest-even.

    NaNs keep their high payload bits (a quiet bit is forced only when
    truncation would otherwise turn the NaN into an infinity), so that
    ``f32_to_bf16_bits(bf16_bits_to_f32(p)) == p`` for all 65536 patterns.
    """
    u = np.asarray(x, dtype=np.float32).view(np.uint32)
    nan = (u & 0x7FFFFFFF) > 0x7F800000
    lsb = (u >> 16) & 1
    rounded = ((u.astype(np.uint64) + 0x7FFF + lsb) >> 16).astype(np.uint16)
    truncated = (u >> 16).astype(np.uint16)
    truncated = np.where((truncated & 0x7F) == 0, truncated | 0x40, truncated)
    return np.where(nan, truncated, rounded).astype(np.uint16)


def bf16_round(x) -> np.ndarray:
    """Restrict float32 values to the bfloat16 grid (round to nearest even).

    NaN inputs come back as the canonical quiet NaN.
    """
    x = np.asarray(x, dtype=np.float32)
    bits = f32_to_bf16_bits(x)
    bits = np.where(np.isnan(x), np.uint16(CANONICAL_BF16_NAN), bits)
    return bf16_bits_to_f32(bits)


def decode(raw: np.ndarray, dtype: str) -> np.ndarray:
    """Exact upcast of stored elements: float32 for 16/32-bit, float64 for F64."""
    if dtype == "BF16":
        return bf16_bits_to_f32(raw)
    if dtype == "F16":
        return raw.astype(np.float32)
    if dtype == "F32":
        return raw.astype(np.float32, copy=False)
    if dtype == "F64":
        return raw.astype(np.float64, copy=False)
    raise ValueError(f"unsupported dtype {dtype!r}")


def encode(values: np.ndarray, dtype: str) -> np.ndarray:
    """Convert float values to the storage representation of ``dtype``."""
    if dtype == "BF16":
        return f32_to_bf16_bits(np.asarray(values, dtype=np.float32))
    storage, _ = DTYPES[dtype]
    return np.asarray(values).astype(storage)
