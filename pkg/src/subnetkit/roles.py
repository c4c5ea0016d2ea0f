"""Map tensor names to architectural roles (layer index + matrix kind)."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence


class Kind(str, Enum):
    Q = "Q"
    K = "K"
    V = "V"
    O = "O"
    GATE_PROJ = "GateProj"
    UP_PROJ = "UpProj"
    DOWN_PROJ = "DownProj"
    LAYER_NORM = "LayerNorm"
    EMBEDDING = "Embedding"
    HEAD = "Head"
    OTHER = "Other"


@dataclass(frozen=True)
class TensorRole:
    layer_index: Optional[int]
    kind: Kind


# First match wins. Normalization patterns come first so that e.g.
# "q_norm" or "q_a_layernorm" never get classified as a projection.
DEFAULT_PATTERNS: tuple[tuple[str, Kind], ...] = (
    (r"(?i)(^|[._])(\w*layer_?norm\w*|\w*_norm|norm|ln_\w+|ln\d*|rms_?norm\w*)([._]|$)", Kind.LAYER_NORM),
    (r"(^|\.)(embed_tokens|wte|tok_embeddings|word_embeddings|embeddings?)([._]|$)", Kind.EMBEDDING),
    (r"(^|\.)(lm_head|output|embed_out)\.weight$", Kind.HEAD),
    (r"(^|\.)(lm_head|embed_out)(\.|$)", Kind.HEAD),
    (r"(^|\.)(q_proj|wq|query|q_a_proj|q_b_proj)(\.|$)", Kind.Q),
    (r"(^|\.)(k_proj|wk|key)(\.|$)", Kind.K),
    (r"(^|\.)(v_proj|wv|value)(\.|$)", Kind.V),
    (r"(^|\.)(o_proj|wo|out_proj|c_proj_attn)(\.|$)", Kind.O),
    (r"attention\.dense(\.|$)", Kind.O),
    (r"(^|\.)(gate_proj|w1)(\.|$)", Kind.GATE_PROJ),
    (r"(^|\.)(up_proj|w3|c_fc)(\.|$)", Kind.UP_PROJ),
    (r"(^|\.)(down_proj|w2)(\.|$)", Kind.DOWN_PROJ),
)

LAYER_PATTERN = r"(?:^|\.)(?:layers|layer|h|blocks|block)\.(\d+)(?:\.|$)"


class RoleClassifier:
    """Ordered regex table; the first pattern that ``re.search``-matches wins."""

    def __init__(self, patterns: Sequence[tuple[str, Kind | str]] = DEFAULT_PATTERNS,
                 layer_pattern: str = LAYER_PATTERN):
        self.patterns = [(re.compile(p), Kind(k)) for p, k in patterns]
        self.layer_pattern = re.compile(layer_pattern)

    @classmethod
    def from_file(cls, path: str | Path, extend_defaults: bool = True) -> "RoleClassifier":
        """Load a pattern file.

        JSON of the form ``{"patterns": [[regex, kind], ...], "layer_pattern": regex}``.
        User patterns are tried before the built-in table unless
        ``extend_defaults`` is false.
        """
        spec = json.loads(Path(path).read_text())
        user = [(p, Kind(k)) for p, k in spec.get("patterns", [])]
        patterns = user + list(DEFAULT_PATTERNS) if extend_defaults else user
        return cls(patterns, spec.get("layer_pattern", LAYER_PATTERN))

    def __call__(self, name: str) -> TensorRole:
        m = self.layer_pattern.search(name)
        layer = int(m.group(1)) if m else None
        for rx, kind in self.patterns:
            if rx.search(name):
                return TensorRole(layer, kind)
        return TensorRole(layer, Kind.OTHER)


@lru_cache(maxsize=1)
def default_classifier() -> RoleClassifier:
    return RoleClassifier()


def classify_tensor(name: str, classifier: RoleClassifier | None = None) -> TensorRole:
    return (classifier or default_classifier())(name)
