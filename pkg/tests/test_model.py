import numpy as np
import pytest

from lpusim.model import (ModelConfig, kv_bytes, load_model_preset,
                          list_model_presets, model_bytes, param_count,
                          synth_params, tensor_specs)


def shape_algebra_oracle(L, d, ffn, vocab, max_seq):
    """Independent tensor-by-tensor sum for a pre-norm decoder with learned
    positions, biases, two layernorms per layer, and tied output head."""
    total = vocab * d + max_seq * d
    per_layer = 4 * (d * d + d) + (d * ffn + ffn) + (ffn * d + d) + 2 * (2 * d)
    return total + L * per_layer + 2 * d


# Frozen outputs of the oracle above.
ORACLE_COUNTS = {
    "opt-1.3b": 1_315_753_984,
    "opt-6.7b": 6_658_465_792,
    "opt-30b": 29_974_525_952,
    "opt-66b": 65_719_683_072,
    "gpt3-20b": 20_256_221_184,
    "tiny-2l": 114_688,
}

NOMINAL = {"opt-1.3b": 1.3e9, "opt-6.7b": 6.7e9, "opt-30b": 30e9,
           "opt-66b": 66e9, "gpt3-20b": 20e9}


class TestParamCount:
    @pytest.mark.parametrize("name", sorted(ORACLE_COUNTS))
    def test_matches_shape_algebra(self, name):
        cfg = load_model_preset(name)
        expect = shape_algebra_oracle(cfg.num_layers, cfg.d_model, cfg.ffn_dim,
                                      cfg.vocab_size, cfg.max_seq)
        assert expect == ORACLE_COUNTS[name]
        assert param_count(cfg) == expect

    @pytest.mark.parametrize("name", sorted(NOMINAL))
    def test_within_two_percent_of_nominal(self, name):
        cfg = load_model_preset(name)
        assert param_count(cfg) == pytest.approx(NOMINAL[name], rel=0.02)

    def test_zero_layer_degenerate(self):
        cfg = ModelConfig("stub", num_layers=0, d_model=64, num_heads=2,
                          ffn_dim=256, vocab_size=100, max_seq=128)
        # embedding + positions + final norm only
        assert param_count(cfg) == 100 * 64 + 128 * 64 + 2 * 64

    def test_untied_head_adds_matrix(self):
        base = ModelConfig("a", 2, 64, 2, 256, 100, max_seq=128)
        untied = ModelConfig("b", 2, 64, 2, 256, 100, max_seq=128,
                             tie_embeddings=False)
        assert param_count(untied) - param_count(base) == 64 * 100


class TestFootprints:
    def test_66b_model_bytes_in_band(self):
        cfg = load_model_preset("opt-66b")
        assert 130e9 <= model_bytes(cfg) <= 134e9
        assert model_bytes(cfg) == 2 * param_count(cfg)

    def test_empty_model(self):
        cfg = ModelConfig("stub", 0, 64, 2, 256, 1, max_seq=1)
        assert model_bytes(cfg) == 2 * param_count(cfg)

    def test_13b_bytes(self):
        cfg = load_model_preset("opt-1.3b")
        assert model_bytes(cfg) == pytest.approx(2.6e9, rel=0.02)

    def test_bytes_always_double_count(self):
        for name in list_model_presets():
            cfg = load_model_preset(name)
            assert model_bytes(cfg) == 2 * param_count(cfg)

    def test_66b_kv_bytes(self):
        cfg = load_model_preset("opt-66b")
        got = kv_bytes(cfg, 2048)
        assert got == 64 * 2 * 2048 * 9216 * 2 == 4_831_838_208
        assert 4.5e9 <= got <= 5.5e9

    def test_kv_zero_and_linear(self):
        cfg = load_model_preset("opt-1.3b")
        assert kv_bytes(cfg, 0) == 0
        assert kv_bytes(cfg, 2048) == 24 * 2 * 2048 * 2048 * 2 == 402_653_184
        assert kv_bytes(cfg, 1024) * 2 == kv_bytes(cfg, 2048)

    def test_kv_linear_in_layers(self):
        a = ModelConfig("a", 8, 512, 8, 2048, 1000)
        b = ModelConfig("b", 16, 512, 8, 2048, 1000)
        assert 2 * kv_bytes(a, 100) == kv_bytes(b, 100)

    def test_kv_rejects_overlong(self):
        cfg = load_model_preset("tiny-2l")
        with pytest.raises(ValueError):
            kv_bytes(cfg, cfg.max_seq + 1)


class TestSynthParams:
    def test_deterministic(self):
        cfg = load_model_preset("tiny-2l")
        a, b = synth_params(cfg, 7), synth_params(cfg, 7)
        for spec in tensor_specs(cfg):
            assert np.array_equal(a.get(spec.key), b.get(spec.key))

    def test_seed_changes_payload(self):
        cfg = load_model_preset("tiny-2l")
        a, b = synth_params(cfg, 7), synth_params(cfg, 8)
        assert not np.array_equal(a.get("wq.0"), b.get("wq.0"))

    def test_all_values_small_and_finite(self):
        cfg = load_model_preset("tiny-2l")
        store = synth_params(cfg, 3)
        for spec in tensor_specs(cfg):
            arr = store.get(spec.key)
            assert arr.dtype == np.float16
            assert np.isfinite(arr).all()
            assert float(np.abs(arr).max()) <= 0.25

    def test_shapes_match_spec_algebra(self):
        cfg = load_model_preset("tiny-2l")
        store = synth_params(cfg, 0)
        total = sum(store.get(s.key).size for s in tensor_specs(cfg))
        assert total == param_count(cfg)

    def test_refuses_huge_materialization(self):
        cfg = load_model_preset("opt-66b")
        store = synth_params(cfg, 0)
        with pytest.raises(MemoryError):
            store.get("fc1.0")

    def test_tied_head_is_transposed_embedding(self):
        cfg = load_model_preset("tiny-2l")
        store = synth_params(cfg, 5)
        assert np.array_equal(store.lm_head(), store.get("embed").T)


class TestConfigValidation:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig("bad", 2, 65, 2, 256, 100)

    def test_enum_fields(self):
        with pytest.raises(ValueError):
            ModelConfig("bad", 2, 64, 2, 256, 100, activation="tanh")
        with pytest.raises(ValueError):
            ModelConfig("bad", 2, 64, 2, 256, 100, norm_kind="batchnorm")
