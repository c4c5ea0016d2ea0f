"""Small synthetic checkpoints for tests."""

import numpy as np

from subnetkit.checkpoint import open_checkpoint, write_checkpoint


def two_layer_model(rng, hidden=8):
    t = {"model.embed_tokens.weight": rng.standard_normal((16, hidden))}
    for i in range(2):
        p = f"model.layers.{i}."
        t[p + "input_layernorm.weight"] = np.ones(hidden)
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            t[p + f"self_attn.{proj}.weight"] = rng.standard_normal((hidden, hidden))
        t[p + "mlp.up_proj.weight"] = rng.standard_normal((2 * hidden, hidden))
        t[p + "mlp.down_proj.weight"] = rng.standard_normal((hidden, 2 * hidden))
    t["lm_head.weight"] = rng.standard_normal((16, hidden))
    return {k: v.astype(np.float32) for k, v in t.items()}


def save(tmp_path, name, tensors, dtype=None):
    return write_checkpoint(tmp_path / f"{name}.safetensors", tensors, dtype)


def opened(tmp_path, name, tensors, dtype=None):
    return open_checkpoint(save(tmp_path, name, tensors, dtype))
