import json
import struct

import ml_dtypes
import numpy as np
import pytest
import safetensors.numpy

from subnetkit.checkpoint import (iter_chunks, open_checkpoint, read_tensor, read_tensor_f32,
                                  write_checkpoint, write_sharded)
from subnetkit.errors import IoFailure, MalformedHeader, OffsetOutOfBounds, UnknownTensor
from subnetkit.roles import Kind


def raw_file(path, header: dict, payload: bytes):
    blob = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + payload)
    return path


def test_minimal_single_tensor(tmp_path):
    p = raw_file(tmp_path / "m.safetensors",
                 {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}},
                 np.arange(4, dtype="<f4").tobytes())
    with open_checkpoint(p) as idx:
        assert list(idx.tensors) == ["w"]
        assert idx.total_params == 4
        assert idx.tensors["w"].shape == (2, 2)
        np.testing.assert_array_equal(read_tensor(idx, "w"), [0, 1, 2, 3])


def test_offsets_past_end(tmp_path):
    p = raw_file(tmp_path / "bad.safetensors",
                 {"w": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, b"\0" * 8)
    with pytest.raises(OffsetOutOfBounds):
        open_checkpoint(p)


def test_metadata_key_is_not_a_tensor(tmp_path):
    header = {"__metadata__": {"format": "pt"}}
    for i, name in enumerate("abc"):
        header[name] = {"dtype": "F16", "shape": [2], "data_offsets": [4 * i, 4 * i + 4]}
    p = raw_file(tmp_path / "meta.safetensors", header, b"\0" * 12)
    with open_checkpoint(p) as idx:
        assert sorted(idx.tensors) == ["a", "b", "c"]
        assert dict(idx.metadata) == {"format": "pt"}


def test_overlapping_tensors_rejected(tmp_path):
    header = {"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
              "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}}
    with pytest.raises(OffsetOutOfBounds):
        open_checkpoint(raw_file(tmp_path / "o.safetensors", header, b"\0" * 12))


@pytest.mark.parametrize("header", [
    {"w": {"dtype": "I32", "shape": [1], "data_offsets": [0, 4]}},
    {"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}},
    {"w": {"dtype": "F32", "shape": [-1], "data_offsets": [0, 4]}},
    {"w": {"dtype": "F32", "shape": [1]}},
])
def test_malformed_headers(tmp_path, header):
    with pytest.raises(MalformedHeader):
        open_checkpoint(raw_file(tmp_path / "h.safetensors", header, b"\0" * 8))


def test_garbage_and_missing(tmp_path):
    p = tmp_path / "junk.safetensors"
    p.write_bytes(struct.pack("<Q", 5) + b"{oops")
    with pytest.raises(MalformedHeader):
        open_checkpoint(p)
    q = tmp_path / "short.safetensors"
    q.write_bytes(b"abc")
    with pytest.raises(MalformedHeader):
        open_checkpoint(q)
    with pytest.raises(IoFailure) as info:
        open_checkpoint(tmp_path / "absent.safetensors")
    assert isinstance(info.value, OSError)


def test_unknown_tensor(tmp_path):
    p = write_checkpoint(tmp_path / "a.safetensors", {"w": np.zeros(3, np.float32)})
    with open_checkpoint(p) as idx:
        with pytest.raises(UnknownTensor):
            idx.meta("nope")
        with pytest.raises(KeyError):
            read_tensor(idx, "nope")


def test_round_trip_all_dtypes(tmp_path, rng):
    tensors = {
        "model.layers.0.self_attn.q_proj.weight": rng.standard_normal((8, 4)).astype(np.float32),
        "model.layers.0.input_layernorm.weight": rng.standard_normal(8).astype(np.float16),
        "lm_head.weight": rng.standard_normal((3, 8)),
        "scalar": np.array(2.5, dtype=np.float32),
        "empty": np.zeros((0, 4), dtype=np.float32),
    }
    p = write_checkpoint(tmp_path / "rt.safetensors", tensors)
    with open_checkpoint(p) as idx:
        for name, arr in tensors.items():
            assert idx.tensors[name].shape == arr.shape
            got = read_tensor(idx, name).reshape(arr.shape)
            np.testing.assert_array_equal(got, arr)
            assert got.dtype == (np.float64 if arr.dtype == np.float64 else np.float32)
        assert idx.tensors["lm_head.weight"].role.kind is Kind.HEAD
        assert idx.tensors["model.layers.0.input_layernorm.weight"].role.kind is Kind.LAYER_NORM
        assert idx.total_params == 32 + 8 + 24 + 1


def test_bf16_written_and_viewed(tmp_path):
    x = np.array([1.0, -5.0, 1.0 + 2 ** -9, 0.0], dtype=np.float32)
    p = write_checkpoint(tmp_path / "b.safetensors", {"w": x}, "BF16")
    with open_checkpoint(p) as idx:
        assert idx.view("w").dtype == np.uint16
        np.testing.assert_array_equal(idx.view("w"), [0x3F80, 0xC0A0, 0x3F80, 0])
        np.testing.assert_array_equal(read_tensor_f32(idx, "w"), [1.0, -5.0, 1.0, 0.0])


def test_raw_is_zero_copy(tmp_path):
    p = write_checkpoint(tmp_path / "z.safetensors", {"w": np.arange(10, dtype=np.float32)})
    with open_checkpoint(p) as idx:
        v = idx.raw("w", 2, 5)
        assert not v.flags.owndata and not v.flags.writeable
        np.testing.assert_array_equal(v, [2, 3, 4])
        assert idx.raw("w", 7, 7).size == 0
        del v


def test_iter_chunks_cover_tensor(tmp_path):
    data = np.arange(103, dtype=np.float32)
    p = write_checkpoint(tmp_path / "c.safetensors", {"w": data})
    with open_checkpoint(p) as idx:
        pieces = list(iter_chunks(idx, "w", 10))
        assert [s for s, _ in pieces] == list(range(0, 103, 10))
        np.testing.assert_array_equal(np.concatenate([c for _, c in pieces]), data)


def test_agrees_with_reference_library(tmp_path, rng):
    tensors = {"a": rng.standard_normal((5, 7)).astype(np.float32),
               "b": rng.standard_normal(11).astype(np.float16),
               "c": rng.standard_normal((2, 3))}
    ref_path = tmp_path / "ref.safetensors"
    safetensors.numpy.save_file(tensors, str(ref_path), metadata={"k": "v"})
    with open_checkpoint(ref_path) as idx:
        assert dict(idx.metadata) == {"k": "v"}
        for name, arr in tensors.items():
            np.testing.assert_array_equal(read_tensor(idx, name).reshape(arr.shape), arr)
    ours = write_checkpoint(tmp_path / "ours.safetensors", tensors)
    loaded = safetensors.numpy.load_file(str(ours))
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name], arr)


def test_bf16_readable_by_reference_library(tmp_path, rng):
    pytest.importorskip("torch")
    x = rng.standard_normal(64).astype(np.float32)
    p = write_checkpoint(tmp_path / "bf.safetensors", {"w": x}, "BF16")
    from safetensors import safe_open
    with safe_open(str(p), framework="pt") as f:
        t = f.get_tensor("w").float().numpy()
    np.testing.assert_array_equal(t, x.astype(ml_dtypes.bfloat16).astype(np.float32))


def test_sharded_checkpoint(tmp_path, rng):
    tensors = {f"model.layers.{i}.mlp.up_proj.weight": rng.standard_normal((4, 4)).astype(np.float32)
               for i in range(5)}
    index_path = write_sharded(tmp_path / "shards", tensors, per_shard=2)
    for target in (index_path, tmp_path / "shards"):
        with open_checkpoint(target) as idx:
            assert list(idx.tensors) == list(tensors)
            assert len({m.file for m in idx.tensors.values()}) == 3
            for name, arr in tensors.items():
                np.testing.assert_array_equal(read_tensor(idx, name).reshape(4, 4), arr)


def test_shard_index_naming_missing_tensor(tmp_path):
    write_checkpoint(tmp_path / "s1.safetensors", {"a": np.zeros(2, np.float32)})
    idx = tmp_path / "m.safetensors.index.json"
    idx.write_text(json.dumps({"weight_map": {"a": "s1.safetensors", "b": "s1.safetensors"}}))
    with pytest.raises(MalformedHeader):
        open_checkpoint(idx)


def test_index_equality(tmp_path):
    p = write_checkpoint(tmp_path / "e.safetensors", {"w": np.ones(3, np.float32)})
    with open_checkpoint(p) as a, open_checkpoint(p) as b:
        assert a == b


def test_closed_index_refuses_reads(tmp_path):
    p = write_checkpoint(tmp_path / "c.safetensors", {"w": np.ones(3, np.float32)})
    idx = open_checkpoint(p)
    idx.close()
    with pytest.raises(IoFailure):
        idx.raw("w")
