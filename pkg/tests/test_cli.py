import json
import re
import subprocess
import sys

import numpy as np
import pytest

from fixtures import save, two_layer_model
from subnetkit.cli import build_parser, dispatch
from subnetkit.masks import SubnetMask, read_mask, write_mask


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def pair(tmp_path, rng):
    t = two_layer_model(rng)
    u = {k: v + np.float32(0.25) * (rng.random(v.shape) < 0.4) for k, v in t.items()}
    return save(tmp_path, "init", t, "BF16"), save(tmp_path, "tuned", u, "BF16"), t


def test_sparsity_identical(capsys, tmp_path, pair):
    init, _, t = pair
    copy = save(tmp_path, "copy", t, "BF16")
    code, out, _ = run(capsys, "sparsity", "--init", init, "--tuned", copy, "--tol", "1e-5")
    assert code == 0
    doc = json.loads(out)
    assert doc["schema_version"] == "1.0"
    assert doc["report"]["global"] == [{"tolerance": 1e-5, "changed": 0,
                                        "total": doc["report"]["global"][0]["total"], "sparsity": 1.0}]
    m = doc["manifest"]
    assert m["command"] == "sparsity" and len(m["inputs"]) == 2
    assert all(i["digest"].startswith("sha256:") for i in m["inputs"])


def test_sparsity_default_tolerances_and_csv(capsys, tmp_path, pair):
    init, tuned, _ = pair
    code, out, _ = run(capsys, "sparsity", "--init", init, "--tuned", tuned, "--format", "csv",
                       "--threads", "2")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# manifest: ")
    assert lines[1] == "scope,key,tolerance,changed,total,sparsity"
    assert [l.split(",")[2] for l in lines[2:6]] == ["1e-08", "1e-07", "1e-06", "1e-05"]


def test_output_file(capsys, tmp_path, pair):
    init, tuned, _ = pair
    out_file = tmp_path / "rep.json"
    code, out, _ = run(capsys, "layers", "--init", init, "--tuned", tuned, "--out", out_file)
    assert code == 0 and out == ""
    rows = json.loads(out_file.read_text())["report"]["rows"]
    assert {r["kind"] for r in rows} >= {"Q", "LayerNorm", "Average"}


def test_reruns_identical_apart_from_timestamps(capsys, pair):
    init, tuned, _ = pair
    outs = [run(capsys, "sparsity", "--init", init, "--tuned", tuned)[1] for _ in range(2)]
    strip = [re.sub(r'"(started|finished)": "[^"]*"', "", o) for o in outs]
    assert strip[0] == strip[1]


def test_schema_mismatch_exit_2(capsys, tmp_path, pair):
    init, _, t = pair
    u = dict(t)
    del u["lm_head.weight"]
    other = save(tmp_path, "other", u, "BF16")
    code, out, err = run(capsys, "sparsity", "--init", init, "--tuned", other)
    assert code == 2 and out == ""
    assert "lm_head.weight" in err


def test_usage_and_io_errors(capsys, tmp_path, pair):
    init, tuned, _ = pair
    assert run(capsys, "sparsity", "--init", init)[0] == 1
    assert run(capsys, "nonsense")[0] == 1
    assert run(capsys, "sparsity", "--init", init, "--tuned", tuned, "--tol", "1e-5", "--tol", "-1")[0] == 1
    assert run(capsys, "rank", "--init", init, "--tuned", tuned, "--policy", "weird")[0] == 1
    assert run(capsys, "toy", "run", "--set", "nope=1")[0] == 1
    code, _, err = run(capsys, "sparsity", "--init", tmp_path / "missing.safetensors", "--tuned", tuned)
    assert code == 3 and "missing" in err
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"\x04\0\0\0\0\0\0\0nope")
    assert run(capsys, "sparsity", "--init", bad, "--tuned", tuned)[0] == 2


def test_mask_pipeline(capsys, tmp_path, pair):
    init, tuned, _ = pair
    m1 = tmp_path / "m1.snmk"
    code, out, _ = run(capsys, "mask", "extract", "--init", init, "--tuned", tuned, "--save", m1)
    assert code == 0
    rep = json.loads(out)["report"]
    assert 0.3 < rep["density"] < 0.5 and rep["digest"] == read_mask(m1).digest.hex()
    m2 = tmp_path / "m2.snmk"
    assert run(capsys, "mask", "random", "--like", m1, "--density", "0.4", "--seed", "3", "--save", m2)[0] == 0
    m3 = tmp_path / "m3.snmk"
    assert run(capsys, "mask", "random", "--checkpoint", init, "--density", "0.4", "--seed", "3",
               "--save", m3)[0] == 0
    assert read_mask(m2).same_bits(read_mask(m3))
    code, out, _ = run(capsys, "mask", "overlap", "--a", m1, "--b", m2, "--per-layer")
    ov = json.loads(out)["report"]
    assert ov["o1_random"] == pytest.approx(ov["density2"])
    assert abs(ov["o1"] - ov["o1_random"]) < 0.05
    assert "per_layer" in ov
    for op in ("intersect", "union", "difference"):
        assert run(capsys, "mask", op, "--a", m1, "--b", m2, "--save", tmp_path / f"{op}.snmk")[0] == 0
    assert run(capsys, "mask", "random", "--like", m1, "--density", "2", "--save", m2)[0] == 1


def test_disjoint_overlap(capsys, tmp_path):
    schema = {"w": ((10,), 10)}
    a = write_mask(SubnetMask.from_flags(schema, {"w": np.arange(10) < 4}, 0), tmp_path / "a.snmk")
    b = write_mask(SubnetMask.from_flags(schema, {"w": np.arange(10) >= 4}, 0), tmp_path / "b.snmk")
    code, out, _ = run(capsys, "mask", "overlap", "--a", a, "--b", b)
    rep = json.loads(out)["report"]
    assert code == 0 and rep["o1"] == rep["o2"] == 0.0
    empty = write_mask(SubnetMask.empty(schema), tmp_path / "e.snmk")
    assert run(capsys, "mask", "overlap", "--a", a, "--b", empty)[0] == 2
    junk = tmp_path / "junk.snmk"
    junk.write_bytes(b"not a mask at all" * 4)
    assert run(capsys, "mask", "overlap", "--a", a, "--b", junk)[0] == 2


def test_rank_command(capsys, pair):
    init, tuned, _ = pair
    code, out, _ = run(capsys, "rank", "--init", init, "--tuned", tuned, "--min-dim", "8")
    doc = json.loads(out)["report"]
    assert code == 0
    assert doc["threshold_policy"]["value"] == 2.0 ** -23
    assert doc["per_matrix"] and all(0 < m["rank"] <= m["max_rank"] for m in doc["per_matrix"])
    assert doc["mean_rank_pct"] > 50


def test_dynamics_and_classify(capsys, tmp_path, rng):
    w = rng.standard_normal(100).astype(np.float32)
    states = [w]
    for k in range(3):
        s = states[-1].copy()
        s[k * 10:(k + 1) * 10] += 1
        states.append(s)
    paths = [save(tmp_path, f"s{k}", {"w": s}) for k, s in enumerate(states)]
    code, out, _ = run(capsys, "dynamics", "--init", paths[0], "--ckpt", *paths[1:3], "--final", paths[3])
    doc = json.loads(out)["report"]
    assert code == 0 and doc["sparsity_vs_init"] == pytest.approx([0.9, 0.8, 0.7])
    code, out, _ = run(capsys, "classify", "--init", paths[0], "--ckpt", *paths[1:])
    doc = json.loads(out)["report"]
    assert (doc["untouched"], doc["canceled"], doc["subnetwork"]) == (70, 0, 30)
    assert run(capsys, "classify", "--init", paths[0], "--ckpt", paths[1])[0] == 2


def test_toy_commands(capsys, tmp_path):
    small = ["--set", "input_dim=4", "--set", "hidden_dim=5", "--set", "num_actions=3",
             "--set", "steps=10", "--set", "batch=4"]
    code, out, _ = run(capsys, "toy", "run", *small, "--seed", "1", "--save-dir", tmp_path / "r")
    assert code == 0 and (tmp_path / "r" / "final.safetensors").exists()
    assert json.loads(out)["report"]["config"]["seed"] == 1
    code, out, _ = run(capsys, "sparsity", "--init", tmp_path / "r" / "init.safetensors",
                       "--tuned", tmp_path / "r" / "final.safetensors", "--tol", "0")
    assert code == 0
    code, out, _ = run(capsys, "toy", "replay", *small, "--seeds", "0", "1")
    assert code == 0 and len(json.loads(out)["report"]["runs"]) == 2
    cfg = tmp_path / "c.toml"
    cfg.write_text("steps = 3\ninput_dim = 2\nhidden_dim = 2\nnum_actions = 2\n")
    code, out, _ = run(capsys, "toy", "sweep", "--config", cfg, "--seeds", "0", "--format", "csv")
    assert code == 0 and "DPO_IND" in out and "SFT_OOD" in out


def test_help_documents_defaults():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    sparsity_help = " ".join(sub["sparsity"].format_help().split())
    assert "1e-08 1e-07 1e-06 1e-05" in sparsity_help
    assert "4194304" in sparsity_help
    rank_help = " ".join(sub["rank"].format_help().split())
    assert "rel:1.1920928955078125e-07" in rank_help
    for name in ("layers", "dynamics", "classify"):
        assert "4194304" in sub[name].format_help()


def test_help_exits_zero(capsys):
    assert dispatch(["--help"]) == 0
    assert dispatch(["mask", "extract", "--help"]) == 0


def test_module_entry_point(pair):
    init, tuned, _ = pair
    proc = subprocess.run([sys.executable, "-m", "subnetkit", "sparsity", "--init", str(init),
                           "--tuned", str(tuned), "--tol", "1e-5"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["report"]["global"][0]["tolerance"] == 1e-5
