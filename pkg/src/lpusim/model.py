"""Decoder-only LLM descriptions: hyperparameters, tensor shape algebra,
memory footprints, and seeded synthetic FP16 parameters for functional tests."""

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .arch import FP16_BYTES, _preset_dir

POS_LEARNED = "learned"
POS_ROTARY = "rotary"
NORM_LAYERNORM = "layernorm"
NORM_RMSNORM = "rmsnorm"
ACT_RELU = "relu"
ACT_GELU = "gelu"
ACT_SILU = "silu"

# Tensor roles.  Matrix roles stream through the MAC-tree path; vector roles
# stream through the vector-engine path.
MATRIX_ROLES = ("wq", "wk", "wv", "wo", "fc1", "fc2", "lmhead")
VECTOR_ROLES = ("embed", "pos", "bq", "bk", "bv", "bo", "bfc1", "bfc2",
                "ln1_g", "ln1_b", "ln2_g", "ln2_b", "lnf_g", "lnf_b")


@dataclass(frozen=True)
class ModelConfig:
    name: str
    num_layers: int
    d_model: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    max_seq: int = 2048
    pos_encoding: str = POS_LEARNED
    norm_kind: str = NORM_LAYERNORM
    activation: str = ACT_RELU
    tie_embeddings: bool = True
    eos_token_id: int | None = None

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.pos_encoding not in (POS_LEARNED, POS_ROTARY):
            raise ValueError(f"bad pos_encoding {self.pos_encoding!r}")
        if self.norm_kind not in (NORM_LAYERNORM, NORM_RMSNORM):
            raise ValueError(f"bad norm_kind {self.norm_kind!r}")
        if self.activation not in (ACT_RELU, ACT_GELU, ACT_SILU):
            raise ValueError(f"bad activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class TensorSpec:
    """Shape descriptor for one parameter tensor.

    Matrices are stored contraction-major: shape = (in_dim, out_dim).
    Vector-path tensors are stored as (rows, d) row tables or (1, n) vectors.
    """
    role: str
    layer: int          # -1 for non-layer tensors
    shape: tuple

    @property
    def numel(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    @property
    def nbytes(self) -> int:
        return self.numel * FP16_BYTES

    @property
    def is_matrix(self) -> bool:
        return self.role in MATRIX_ROLES

    @property
    def key(self) -> str:
        return f"{self.role}.{self.layer}" if self.layer >= 0 else self.role


def tensor_specs(config: ModelConfig) -> list:
    """All parameter tensors of the model, in canonical (stream) order."""
    d, f, v = config.d_model, config.ffn_dim, config.vocab_size
    ln = config.norm_kind == NORM_LAYERNORM
    specs = [TensorSpec("embed", -1, (v, d))]
    if config.pos_encoding == POS_LEARNED:
        specs.append(TensorSpec("pos", -1, (config.max_seq, d)))
    for layer in range(config.num_layers):
        specs.append(TensorSpec("ln1_g", layer, (1, d)))
        if ln:
            specs.append(TensorSpec("ln1_b", layer, (1, d)))
        for r in ("wq", "wk", "wv"):
            specs.append(TensorSpec(r, layer, (d, d)))
            specs.append(TensorSpec("b" + r[1], layer, (1, d)))
        specs.append(TensorSpec("wo", layer, (d, d)))
        specs.append(TensorSpec("bo", layer, (1, d)))
        specs.append(TensorSpec("ln2_g", layer, (1, d)))
        if ln:
            specs.append(TensorSpec("ln2_b", layer, (1, d)))
        specs.append(TensorSpec("fc1", layer, (d, f)))
        specs.append(TensorSpec("bfc1", layer, (1, f)))
        specs.append(TensorSpec("fc2", layer, (f, d)))
        specs.append(TensorSpec("bfc2", layer, (1, d)))
    specs.append(TensorSpec("lnf_g", -1, (1, d)))
    if ln:
        specs.append(TensorSpec("lnf_b", -1, (1, d)))
    if not config.tie_embeddings:
        specs.append(TensorSpec("lmhead", -1, (d, v)))
    return specs


def param_count(config: ModelConfig) -> int:
    """Exact parameter count: weights, biases, norms, embeddings.
    Tied output embeddings are counted once."""
    return sum(s.numel for s in tensor_specs(config))


def model_bytes(config: ModelConfig) -> int:
    """FP16 resident footprint of all parameters."""
    return param_count(config) * FP16_BYTES


def kv_bytes(config: ModelConfig, seq_len: int) -> int:
    """FP16 footprint of a Key/Value cache holding seq_len entries."""
    if seq_len < 0 or seq_len > config.max_seq:
        raise ValueError(f"seq_len {seq_len} outside [0, {config.max_seq}]")
    return config.num_layers * 2 * seq_len * config.d_model * FP16_BYTES


@dataclass(frozen=True)
class KvCacheSpec:
    """Shape of the per-device KV cache at full context length."""
    num_layers: int
    max_seq: int
    d_model: int

    @property
    def nbytes(self) -> int:
        return self.num_layers * 2 * self.max_seq * self.d_model * FP16_BYTES


class ParamStore:
    """Per-tensor FP16 payloads, generated lazily from a seed.

    Payload magnitudes stay small (|x| <= 0.25) so tiny functional models do
    not overflow FP16.  Same seed => bit-identical payloads.
    """

    # Refuse accidental materialization of datacenter-scale weight sets.
    MATERIALIZE_LIMIT = 1 << 30

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        self.specs = {s.key: s for s in tensor_specs(config)}
        self._cache = {}

    @property
    def total_bytes(self) -> int:
        return sum(s.nbytes for s in self.specs.values())

    def get(self, key: str) -> np.ndarray:
        if key not in self._cache:
            spec = self.specs.get(key)
            if spec is None:
                raise KeyError(key)
            if spec.nbytes > self.MATERIALIZE_LIMIT:
                raise MemoryError(f"refusing to materialize {key}: {spec.nbytes} bytes")
            self._cache[key] = self._generate(spec)
        return self._cache[key]

    def _generate(self, spec: TensorSpec) -> np.ndarray:
        # Per-tensor stream keyed by (store seed, tensor identity) so payloads
        # are independent of generation order.  Norm gains sit near the top of
        # the permitted band to keep activations lively.
        rng = np.random.default_rng([self.seed, _stable_hash(spec.key)])
        if spec.role in ("ln1_g", "ln2_g", "lnf_g"):
            base = 0.2 + 0.02 * rng.standard_normal(spec.shape)
        else:
            base = 0.08 * rng.standard_normal(spec.shape)
        arr = np.clip(base, -0.25, 0.25).astype(np.float16)
        arr.flags.writeable = False
        return arr

    def lm_head(self) -> np.ndarray:
        """Output projection matrix, (d, vocab); transposed embed when tied."""
        if self.config.tie_embeddings:
            return self.get("embed").T
        return self.get("lmhead")


def _stable_hash(s: str) -> int:
    h = 2166136261
    for ch in s.encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def synth_params(config: ModelConfig, seed: int) -> ParamStore:
    return ParamStore(config, seed)


def load_model_preset(name: str) -> ModelConfig:
    path = os.path.join(_preset_dir(), "model", name + ".json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no model preset {name!r} at {path}")
    with open(path) as f:
        return ModelConfig.from_dict(json.load(f))


def list_model_presets():
    d = os.path.join(_preset_dir(), "model")
    return sorted(p[:-5] for p in os.listdir(d) if p.endswith(".json"))
