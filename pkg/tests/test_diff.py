import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import opened, two_layer_model
from oracles import naive_changed, scan_changed
from subnetkit.diff import (DEFAULT_TOLERANCES, DeltaStats, check_tolerances, checkpoint_sparsity,
                            layer_breakdown, raw_changed_flags, tensor_delta_stats)
from subnetkit.errors import LengthMismatch, SchemaMismatch


def test_identity_any_values(rng):
    a = rng.standard_normal(1000).astype(np.float32)
    (s,) = tensor_delta_stats(a, a.copy(), [1e-5])
    assert (s.changed, s.sparsity) == (0, 1.0)


def test_single_change_counted():
    (s,) = tensor_delta_stats(np.zeros(4), np.array([2e-5, 0, 0, 0]), [1e-5])
    assert s.changed == 1 and s.sparsity == 0.75
    assert scan_changed([0, 0, 0, 0], [2e-5, 0, 0, 0], 1e-5) == 1


def test_uniform_shift_between_tolerances(rng):
    x = rng.standard_normal(100)
    lo, hi = tensor_delta_stats(x, x + 1e-6, [1e-7, 1e-5])
    assert lo.sparsity == 0.0 and hi.sparsity == 1.0
    assert scan_changed(x, x + 1e-6, 1e-7) == 100


def test_tolerance_zero_is_exact():
    a = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    b = np.array([1.0, np.nextafter(np.float32(2), np.float32(3)), 3.0], dtype=np.float32)
    (s,) = tensor_delta_stats(a, b, [0.0])
    assert s.changed == 1


def test_signed_zero_is_equal():
    (s,) = tensor_delta_stats(np.array([0.0]), np.array([-0.0]), [0.0])
    assert s.changed == 0


def test_nonfinite_compared_by_bits():
    inf, nan = np.inf, np.nan
    a = np.array([inf, inf, nan, 1.0, nan], dtype=np.float32)
    b = np.array([inf, -inf, nan, inf, 1.0], dtype=np.float32)
    (s,) = tensor_delta_stats(a, b, [1e10])
    assert s.changed == 3


def test_nan_payloads_differ_in_bf16():
    a = np.array([0x7FC0, 0x7FC1, 0xFF80], dtype=np.uint16)
    b = np.array([0x7FC0, 0x7FC0, 0xFF80], dtype=np.uint16)
    np.testing.assert_array_equal(raw_changed_flags(a, b, "BF16", 1.0), [False, True, False])


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        tensor_delta_stats(np.zeros(3), np.zeros(4), [0.0])


@pytest.mark.parametrize("bad", [[], [1e-5, 1e-6], [1e-6, 1e-6], [-1.0], [float("nan")]])
def test_bad_tolerances(bad):
    with pytest.raises(ValueError):
        check_tolerances(bad)


def test_delta_stats_arithmetic():
    s = DeltaStats(1e-5, 3, 10) + DeltaStats(1e-5, 2, 10)
    assert (s.changed, s.total, s.sparsity) == (5, 20, 0.75)
    assert s.to_dict() == {"tolerance": 1e-5, "changed": 5, "total": 20, "sparsity": 0.75}
    with pytest.raises(ValueError):
        DeltaStats(1e-5, 0, 1) + DeltaStats(1e-6, 0, 1)
    assert DeltaStats(0.0, 0, 0).sparsity == 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, width=32), min_size=1, max_size=50),
       st.lists(st.floats(-2.0 ** -10, 2.0 ** -10, width=32), min_size=50, max_size=50))
def test_monotone_and_symmetric(values, noise):
    a = np.array(values, dtype=np.float32)
    b = (a + np.array(noise[:len(a)], dtype=np.float32)).astype(np.float32)
    stats = tensor_delta_stats(a, b, (0.0,) + DEFAULT_TOLERANCES + (1e-3,))
    sp = [s.sparsity for s in stats]
    assert sp == sorted(sp)
    assert [s.changed for s in tensor_delta_stats(b, a, (0.0,) + DEFAULT_TOLERANCES)] == \
        [s.changed for s in stats[:-1]]
    for s, t in zip(stats, (0.0,) + DEFAULT_TOLERANCES + (1e-3,)):
        assert s.changed == naive_changed(a, b, t)


def test_thirty_percent_fixture(tmp_path, rng):
    n = 10_000
    a = rng.standard_normal(n).astype(np.float32)
    b = a.copy()
    idx = rng.permutation(n)[: 3 * n // 10]
    b[idx] += np.float32(1e-3)
    init = opened(tmp_path, "a", {"w": a[:4000], "v": a[4000:].reshape(60, 100)})
    tuned = opened(tmp_path, "b", {"w": b[:4000], "v": b[4000:].reshape(60, 100)})
    rep = checkpoint_sparsity(init, tuned, [1e-5], chunk_elems=333, threads=1)
    assert rep.global_stats[0].changed == naive_changed(a, b, 1e-5) == 3000
    assert rep.global_stats[0].sparsity == 0.7


def test_copied_checkpoint_is_fully_sparse(tmp_path, rng):
    t = two_layer_model(rng)
    rep = checkpoint_sparsity(opened(tmp_path, "a", t), opened(tmp_path, "b", t))
    assert [s.sparsity for s in rep.global_stats] == [1.0] * 4
    assert rep.to_dict()["tolerances"] == list(DEFAULT_TOLERANCES)


@pytest.mark.parametrize("dtype", ["BF16", "F16", "F32"])
def test_threads_and_chunks_do_not_change_counts(tmp_path, rng, dtype):
    t = two_layer_model(rng)
    u = {k: v + rng.standard_normal(v.shape).astype(np.float32) * 1e-3 * (rng.random(v.shape) < 0.3)
         for k, v in t.items()}
    init, tuned = opened(tmp_path, "a", t, dtype), opened(tmp_path, "b", u, dtype)
    base = checkpoint_sparsity(init, tuned, chunk_elems=1 << 20, threads=1).to_dict()
    for chunk, threads in ((7, 4), (64, 2), (1000, 8)):
        assert checkpoint_sparsity(init, tuned, chunk_elems=chunk, threads=threads).to_dict() == base


def test_aggregates_are_consistent(tmp_path, rng):
    t = two_layer_model(rng)
    u = {k: v + np.float32(0.01) * (rng.random(v.shape) < 0.5) for k, v in t.items()}
    rep = checkpoint_sparsity(opened(tmp_path, "a", t), opened(tmp_path, "b", u), [1e-5])
    total_changed = sum(s[0].changed for s in rep.per_tensor.values())
    assert rep.global_stats[0].changed == total_changed
    assert sum(s[0].changed for s in rep.per_role.values()) == total_changed
    assert set(rep.per_layer) == {0, 1}
    assert sum(s[0].total for s in rep.per_layer.values()) == \
        rep.global_stats[0].total - 2 * 16 * 8
    assert rep.rows()[0]["scope"] == "global"


def test_schema_mismatch_lists_offenders(tmp_path, rng):
    t = two_layer_model(rng)
    u = dict(t)
    u.pop("lm_head.weight")
    u["model.layers.0.mlp.up_proj.weight"] = np.zeros((3, 3), np.float32)
    with pytest.raises(SchemaMismatch) as info:
        checkpoint_sparsity(opened(tmp_path, "a", t), opened(tmp_path, "b", u))
    assert info.value.offenders == ["lm_head.weight", "model.layers.0.mlp.up_proj.weight"]


def test_dtype_mismatch_is_schema_mismatch(tmp_path):
    t = {"w": np.zeros(4, np.float32)}
    with pytest.raises(SchemaMismatch):
        checkpoint_sparsity(opened(tmp_path, "a", t), opened(tmp_path, "b", t, "BF16"))


def test_exclude_patterns(tmp_path, rng):
    t = two_layer_model(rng)
    u = {k: v + 1 if "embed" in k or "lm_head" in k else v for k, v in t.items()}
    rep = checkpoint_sparsity(opened(tmp_path, "a", t), opened(tmp_path, "b", u), [1e-5],
                              exclude=[r"embed", r"^lm_head"])
    assert rep.global_stats[0].sparsity == 1.0
    assert not any("embed" in n for n in rep.per_tensor)


def test_layer_breakdown_two_layers(tmp_path, rng):
    t = two_layer_model(rng)
    u = {k: v + 1 if k.startswith("model.layers.0.") else v for k, v in t.items()}
    rep = checkpoint_sparsity(opened(tmp_path, "a", t), opened(tmp_path, "b", u))
    rows = layer_breakdown(rep)
    avg = {r.layer_index: r.sparsity for r in rows if r.kind == "Average"}
    assert avg[0] == 0.0 and avg[1] == 1.0
    assert all(r.tolerance == 1e-5 for r in rows)
    assert rows[-1].layer_index is None
    assert [r.layer_index for r in rows if r.layer_index is not None] == sorted(
        r.layer_index for r in rows if r.layer_index is not None)


def test_layer_breakdown_untouched_norms(tmp_path, rng):
    t = two_layer_model(rng)
    u = {k: v if "layernorm" in k else v + 0.5 for k, v in t.items()}
    rep = checkpoint_sparsity(opened(tmp_path, "a", t), opened(tmp_path, "b", u))
    norm_rows = [r for r in layer_breakdown(rep, 1e-8) if r.kind == "LayerNorm"]
    assert len(norm_rows) == 2 and all(r.sparsity == 1.0 for r in norm_rows)
    with pytest.raises(ValueError):
        layer_breakdown(rep, 0.5)
