import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build_checkpoint, two_pass_std
from tpfp.arch_map import ProjectionKind
from tpfp.errors import (
    DegenerateSequence,
    DocumentMalformed,
    HashMismatch,
    SchemaVersionUnsupported,
)
from tpfp.fingerprint import (
    Fingerprint,
    MoeMode,
    StdSequence,
    canonical_dumps,
    compute_content_hash,
    deserialize_fingerprint,
    extract_fingerprint,
    normalize,
    serialize_fingerprint,
)
from tpfp.synth import write_checkpoint_files
from tpfp.tensor_store import DType, open_checkpoint
from tpfp.arch_map import load_config

PK = ProjectionKind


def extract_from(tmp_path, name="ckpt", kinds=None, moe_mode=MoeMode.POOLED, **overrides):
    if kinds is not None:
        overrides.setdefault("kinds", kinds)
    ckpt_dir, spec, targets = build_checkpoint(tmp_path, name, **overrides)
    ckpt = open_checkpoint(ckpt_dir)
    cfg = load_config(ckpt_dir, ckpt)
    fp = extract_fingerprint(ckpt, cfg, kinds or spec.kinds, moe_mode=moe_mode)
    return fp, targets, ckpt_dir


class TestCanonicalJson:
    def test_sorted_keys_and_float_format(self):
        doc = {"b": 0.1, "a": [1, 2.5, True, None]}
        assert canonical_dumps(doc) == '{"a":[1,2.5,true,null],"b":0.10000000000000001}'

    def test_floats_round_trip_exactly(self):
        values = [0.1, 1 / 3, 1e-300, 123456789.123456789, -0.0, 2.0**-52]
        parsed = json.loads(canonical_dumps(values))
        assert all(a == b for a, b in zip(parsed, values))

    def test_non_finite_becomes_null(self):
        assert canonical_dumps([math.nan, math.inf]) == "[null,null]"

    def test_indented_form_parses_to_same_values(self):
        doc = {"k": [1.5, {"n": 2}]}
        assert json.loads(canonical_dumps(doc, indent=2)) == json.loads(canonical_dumps(doc))

    def test_rejects_non_string_keys(self):
        with pytest.raises(TypeError):
            canonical_dumps({1: 2})


class TestNormalize:
    def test_documented_example(self):
        out = normalize(StdSequence(PK.Q, (1.0, 2.0, 3.0)))
        assert out.values == pytest.approx((-1.0, 0.0, 1.0), abs=1e-15)

    def test_constant_sequence_rejected(self):
        with pytest.raises(DegenerateSequence):
            normalize(StdSequence(PK.Q, (5.0, 5.0, 5.0)))

    def test_too_short_rejected(self):
        with pytest.raises(DegenerateSequence):
            normalize(StdSequence(PK.Q, (1.0,)))

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        seq = StdSequence(PK.V, tuple(rng.uniform(0.5, 2.0, 24)))
        once = normalize(seq)
        twice = normalize(once)
        assert np.allclose(once.values, twice.values, rtol=0, atol=1e-12)

    @given(st.lists(st.floats(min_value=1e-3, max_value=1e3), min_size=3, max_size=64)
           .filter(lambda v: max(v) - min(v) > 1e-6))
    @settings(max_examples=200, deadline=None)
    def test_zero_mean_unit_sample_std(self, values):
        out = normalize(StdSequence(PK.K, tuple(values)))
        x = np.array(out.values)
        assert abs(x.mean()) <= 1e-9
        assert abs(math.sqrt(float(np.sum((x - x.mean()) ** 2)) / (x.size - 1)) - 1) <= 1e-9


class TestExtraction:
    def test_constant_layers_give_zero_sequence(self, tmp_path):
        fp, _, _ = extract_from(
            tmp_path, num_layers=4,
            targets={PK.Q: [0.0, 0.0, 0.0, 0.0]}, means={PK.Q: [1.0, 2.0, 3.0, 4.0]},
        )
        assert fp.kinds[PK.Q].values == (0.0, 0.0, 0.0, 0.0)

    def test_plus_minus_pairs_reproduce_closed_form(self, tmp_path):
        # equal counts of -a and +a: sample std is a*sqrt(n/(n-1))
        amplitudes = [0.5, 1.25, 2.0]
        tensors = {}
        for layer, a in enumerate(amplitudes):
            mat = np.tile([-a, a], 32).reshape(8, 8)
            tensors[f"model.layers.{layer}.self_attn.q_proj.weight"] = mat
        write_checkpoint_files(tmp_path / "pm", tensors, DType.F64, config={
            "model_id": "pm", "num_hidden_layers": 3, "hidden_size": 8,
            "num_attention_heads": 2, "head_dim": 4,
        })
        ckpt = open_checkpoint(tmp_path / "pm")
        cfg = load_config(tmp_path / "pm", ckpt)
        fp = extract_fingerprint(ckpt, cfg, (PK.Q,))
        n = 64
        for value, a in zip(fp.kinds[PK.Q].values, amplitudes):
            expected = a * math.sqrt(n / (n - 1))
            assert value == pytest.approx(expected, rel=1e-12)
            oracle = two_pass_std(np.tile([-a, a], 32))
            assert value == pytest.approx(oracle, rel=1e-12)

    def test_extraction_matches_targets_f32(self, tmp_path):
        fp, targets, _ = extract_from(tmp_path, num_layers=4, dtype_name="F32")
        for kind in fp.kinds:
            got = np.array(fp.kinds[kind].values)
            want = np.array(targets[kind])
            assert np.allclose(got, want, rtol=1e-6, atol=0)

    def test_deterministic_bytes(self, tmp_path):
        fp1, _, ckpt_dir = extract_from(tmp_path, seed=5)
        ckpt = open_checkpoint(ckpt_dir)
        cfg = load_config(ckpt_dir, ckpt)
        fp2 = extract_fingerprint(ckpt, cfg, (PK.Q, PK.K, PK.V, PK.O))
        assert serialize_fingerprint(fp1) == serialize_fingerprint(fp2)

    def test_rescale_invariance_after_normalization(self, tmp_path):
        from tpfp.synth import transform_checkpoint

        base_dir, _, _ = build_checkpoint(tmp_path, "base", dtype_name="F64", seed=10)
        for c in (1e-3, 7.0, 1e3):
            scaled_dir = tmp_path / f"scaled_{c}"
            transform_checkpoint(base_dir, scaled_dir, lambda _, arr: arr * c)
            base = open_checkpoint(base_dir)
            scaled = open_checkpoint(scaled_dir)
            cfg_b = load_config(base_dir, base)
            cfg_s = load_config(scaled_dir, scaled)
            fp_b = extract_fingerprint(base, cfg_b)
            fp_s = extract_fingerprint(scaled, cfg_s)
            for kind in fp_b.kinds:
                raw_b = np.array(fp_b.kinds[kind].values)
                raw_s = np.array(fp_s.kinds[kind].values)
                assert np.allclose(raw_s, c * raw_b, rtol=1e-12)
                norm_b = normalize(fp_b.kinds[kind]).values
                norm_s = normalize(fp_s.kinds[kind]).values
                assert np.allclose(norm_s, norm_b, rtol=0, atol=1e-12)

    def test_permuted_payload_keeps_sigma(self, tmp_path):
        from tpfp.synth import transform_checkpoint

        base_dir, _, _ = build_checkpoint(tmp_path, "base", dtype_name="F64", seed=2)
        rng = np.random.default_rng(0)
        shuf_dir = tmp_path / "shuffled"
        transform_checkpoint(
            base_dir, shuf_dir,
            lambda _, arr: rng.permutation(arr.ravel()).reshape(arr.shape),
        )
        base, shuf = open_checkpoint(base_dir), open_checkpoint(shuf_dir)
        fp_b = extract_fingerprint(base, load_config(base_dir, base))
        fp_s = extract_fingerprint(shuf, load_config(shuf_dir, shuf))
        for kind in fp_b.kinds:
            assert np.allclose(
                fp_s.kinds[kind].values, fp_b.kinds[kind].values, rtol=1e-12
            )


class TestMoeModes:
    def test_identical_experts_modes_coincide(self, tmp_path):
        # pooling k identical matrices only changes the Bessel divisor
        # (kn-1 vs n-1), an O(k/n) effect
        fp_pool, _, ckpt_dir = extract_from(
            tmp_path, "moe", kinds=(PK.GATE, PK.UP, PK.DOWN),
            num_experts=2, identical_experts=True,
        )
        ckpt = open_checkpoint(ckpt_dir)
        cfg = load_config(ckpt_dir, ckpt)
        fp_mean = extract_fingerprint(
            ckpt, cfg, (PK.GATE, PK.UP, PK.DOWN), moe_mode=MoeMode.PER_EXPERT_MEAN
        )
        for kind in fp_pool.kinds:
            pooled = np.array(fp_pool.kinds[kind].values)
            averaged = np.array(fp_mean.kinds[kind].values)
            assert np.allclose(pooled, averaged, rtol=1e-3)
            # the exact Bessel ratio between the two conventions
            n = 32 * 16  # per-expert elements (ffn_size x hidden)
            k = 2
            ratio = math.sqrt(k * (n - 1) / (k * n - 1))
            assert np.allclose(pooled, averaged * ratio, rtol=1e-12)

    def test_dense_model_mode_has_no_effect(self, tmp_path):
        fp_pool, _, ckpt_dir = extract_from(tmp_path, kinds=(PK.GATE, PK.UP, PK.DOWN))
        ckpt = open_checkpoint(ckpt_dir)
        cfg = load_config(ckpt_dir, ckpt)
        fp_mean = extract_fingerprint(
            ckpt, cfg, (PK.GATE, PK.UP, PK.DOWN), moe_mode=MoeMode.PER_EXPERT_MEAN
        )
        assert fp_pool.content_hash == fp_mean.content_hash
        for kind in fp_pool.kinds:
            assert fp_pool.kinds[kind].values == fp_mean.kinds[kind].values

    def test_mode_recorded_in_metadata(self, tmp_path):
        fp, _, _ = extract_from(tmp_path, moe_mode=MoeMode.PER_EXPERT_MEAN)
        assert fp.extraction["moe_mode"] == "per_expert_mean"


class TestSerialization:
    def test_round_trip_value_exact(self, tmp_path):
        fp, _, _ = extract_from(tmp_path, seed=8)
        data = serialize_fingerprint(fp)
        back = deserialize_fingerprint(data)
        assert back.model_id == fp.model_id
        assert back.num_layers == fp.num_layers
        assert back.content_hash == fp.content_hash
        for kind in fp.kinds:
            assert back.kinds[kind].values == fp.kinds[kind].values
        assert serialize_fingerprint(back) == data

    def test_tampered_values_detected(self, tmp_path):
        fp, _, _ = extract_from(tmp_path)
        doc = json.loads(serialize_fingerprint(fp))
        doc["kinds"]["Q"][0] += 1e-6
        with pytest.raises(HashMismatch):
            deserialize_fingerprint(json.dumps(doc).encode())

    def test_future_schema_rejected(self, tmp_path):
        fp, _, _ = extract_from(tmp_path)
        doc = json.loads(serialize_fingerprint(fp))
        doc["schema_version"] = 2
        with pytest.raises(SchemaVersionUnsupported):
            deserialize_fingerprint(json.dumps(doc).encode())

    def test_malformed_documents(self):
        with pytest.raises(DocumentMalformed):
            deserialize_fingerprint(b"not json")
        with pytest.raises(SchemaVersionUnsupported):
            deserialize_fingerprint(b"{}")

    def test_wrong_length_rejected(self):
        fp = Fingerprint.from_values("m", {PK.Q: [1.0, 2.0, 3.0]})
        doc = json.loads(serialize_fingerprint(fp))
        doc["num_layers"] = 4
        with pytest.raises(DocumentMalformed):
            deserialize_fingerprint(json.dumps(doc).encode())

    def test_content_hash_covers_only_kinds(self):
        a = Fingerprint.from_values("a", {PK.Q: [1.0, 2.0]})
        b = Fingerprint.from_values("b", {PK.Q: [1.0, 2.0]})
        assert a.content_hash == b.content_hash
        c = Fingerprint.from_values("a", {PK.Q: [1.0, 2.000001]})
        assert c.content_hash != a.content_hash

    def test_hash_stable_across_round_trip(self):
        fp = Fingerprint.from_values("m", {PK.Q: [0.1, 1 / 3, 7e-11]})
        back = deserialize_fingerprint(serialize_fingerprint(fp))
        assert compute_content_hash(back.kinds) == fp.content_hash
