import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgmel import numeric as nm
from pgmel.encoders import (ABLATIONS, EncoderConfig, apply_ablation, embed_entities, embed_mentions,
                            encode_entity_text, encode_mention_text, encoder_shapes, gmu_fuse, init_encoder,
                            project_vision)
from pgmel.numeric import ContractViolation, Tape

from conftest import small_encoder


def _leaky(x):
    return np.where(x > 0, x, 0.01 * x)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def conv_oracle(tokens, params, config):
    """Direct per-filter loop: max over windows of leaky(sum_j token[t+j] W_j + b)."""
    L = max(len(tokens), max(config.filter_widths))
    padded = np.zeros((L, tokens.shape[1]))
    padded[: len(tokens)] = tokens
    out = []
    for k in config.filter_widths:
        W, b = params[f"mention.conv{k}.weight"].value, params[f"mention.conv{k}.bias"].value
        windows = max(len(tokens), k) - k + 1
        best = np.full(config.d1, -np.inf)
        for t in range(windows):
            s = b.copy()
            for j in range(k):
                for f in range(tokens.shape[1]):
                    s = s + padded[t + j, f] * W[j, f]
            best = np.maximum(best, _leaky(s))
        out.append(best)
    return np.concatenate(out)


def linear_oracle(x, W, b):
    out = np.array(b, dtype=float)
    for i in range(W.shape[1]):
        out[i] += sum(x[f] * W[f, i] for f in range(W.shape[0]))
    return out


def gmu_oracle(t, v, params, config, side="mention"):
    P = {k: p.value for k, p in params.items()}
    p_t = t @ P[f"{side}.text_joint.weight"]
    has_vision = config.mention_vision if side == "mention" else config.entity_vision
    if not has_vision:
        return np.tanh(p_t @ P[f"{side}.fuse.weight"] + P[f"{side}.fuse.bias"])
    p_v = v @ P[f"{side}.vision_joint.weight"]
    if config.use_gated_fusion:
        rho = _sigmoid(np.concatenate([p_t, p_v]) @ P[f"{side}.gate.weight"] + P[f"{side}.gate.bias"])
        if config.gated_modality == "text":
            p_t = rho * p_t
        else:
            p_v = rho * p_v
    return np.tanh(np.concatenate([p_t, p_v]) @ P[f"{side}.fuse.weight"] + P[f"{side}.fuse.bias"])


def _params(config, seed=0, bias_scale=0.3):
    r = np.random.default_rng(seed)
    params = init_encoder(config, r)
    for p in params.values():
        if p.name.endswith(".bias"):
            p.value = bias_scale * r.standard_normal(p.shape)
    return params


# --- mention text -----------------------------------------------------------

def test_single_token_width_one_is_a_linear_map():
    cfg = small_encoder(filter_widths=(1,))
    params = _params(cfg)
    tok = np.random.default_rng(1).standard_normal((1, 8))
    W, b = params["mention.conv1.weight"].value[0], params["mention.conv1.bias"].value
    np.testing.assert_allclose(encode_mention_text(tok, params, cfg), _leaky(tok[0] @ W + b), rtol=1e-13)


def test_constant_sequence_length_does_not_matter():
    cfg = small_encoder()
    params = _params(cfg)
    row = np.random.default_rng(2).standard_normal(8)
    a = encode_mention_text(np.tile(row, (5, 1)), params, cfg)
    b = encode_mention_text(np.tile(row, (9, 1)), params, cfg)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("length", [1, 2, 4, 7])
def test_mention_text_matches_loop_oracle(length):
    cfg = small_encoder()
    params = _params(cfg, seed=length)
    tokens = np.random.default_rng(10 + length).standard_normal((length, 8))
    out = encode_mention_text(tokens, params, cfg)
    assert out.shape == (3 * cfg.d1,)
    np.testing.assert_allclose(out, conv_oracle(tokens, params, cfg), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("widths", [(1,), (1, 2), (2, 3), (3,)])
def test_reduced_filter_sets_shrink_output(widths):
    cfg = small_encoder(filter_widths=widths)
    params = _params(cfg)
    tokens = np.random.default_rng(3).standard_normal((4, 8))
    out = encode_mention_text(tokens, params, cfg)
    assert out.shape == (len(widths) * cfg.d1,)
    assert params["mention.text_joint.weight"].shape == (len(widths) * cfg.d1, cfg.d2)
    np.testing.assert_allclose(out, conv_oracle(tokens, params, cfg), rtol=1e-12, atol=1e-14)


def test_empty_token_list_rejected():
    cfg = small_encoder()
    with pytest.raises(ContractViolation):
        encode_mention_text(np.zeros((0, 8)), _params(cfg), cfg)


def test_token_width_mismatch_rejected():
    cfg = small_encoder()
    with pytest.raises(ContractViolation):
        encode_mention_text(np.zeros((3, 7)), _params(cfg), cfg)


def test_permutation_sensitive_for_wide_filters_and_invariant_for_unigrams():
    tokens = np.random.default_rng(4).standard_normal((5, 8))
    perm = tokens[[3, 0, 4, 1, 2]]
    wide = small_encoder(filter_widths=(2, 3))
    pw = _params(wide)
    assert not np.allclose(encode_mention_text(tokens, pw, wide), encode_mention_text(perm, pw, wide))
    uni = small_encoder(filter_widths=(1,))
    pu = _params(uni)
    assert np.array_equal(encode_mention_text(tokens, pu, uni), encode_mention_text(perm, pu, uni))


# --- projections ------------------------------------------------------------

@pytest.mark.parametrize("fn,weight", [(project_vision, "mention.vision_in"), (encode_entity_text, "entity.text_in")])
def test_projection_of_zero_with_zero_bias_is_zero(fn, weight):
    cfg = small_encoder()
    params = _params(cfg, bias_scale=0.0)
    assert not fn(np.zeros(8), params, cfg).any()


@pytest.mark.parametrize("fn,weight", [(project_vision, "mention.vision_in"), (encode_entity_text, "entity.text_in")])
def test_identity_projection_reproduces_input(fn, weight):
    cfg = EncoderConfig(d1=1, d2=2, d3=2, feature_dim_in=3)
    params = _params(cfg, bias_scale=0.0)
    params[f"{weight}.weight"].value = np.eye(3)
    x = np.array([0.5, -1.0, 2.0])
    assert np.array_equal(fn(x, params, cfg), x)


@pytest.mark.parametrize("fn,weight", [(project_vision, "mention.vision_in"), (encode_entity_text, "entity.text_in")])
def test_projection_matches_dot_product_loop(fn, weight):
    cfg = small_encoder()
    params = _params(cfg, seed=5)
    x = np.random.default_rng(6).standard_normal(8)
    expect = linear_oracle(x, params[f"{weight}.weight"].value, params[f"{weight}.bias"].value)
    np.testing.assert_allclose(fn(x, params, cfg), expect, rtol=1e-12)


def test_projection_width_mismatch_rejected():
    cfg = small_encoder()
    with pytest.raises(ContractViolation):
        project_vision(np.zeros(9), _params(cfg), cfg)
    with pytest.raises(ContractViolation):
        encode_entity_text(np.zeros(3), _params(cfg), cfg)


# --- gated fusion -----------------------------------------------------------

@pytest.mark.parametrize("modality", ["text", "vision"])
@pytest.mark.parametrize("side", ["mention", "entity"])
def test_gmu_matches_step_by_step_oracle(modality, side):
    cfg = small_encoder(gated_modality=modality)
    params = _params(cfg, seed=7)
    r = np.random.default_rng(8)
    t, v = r.standard_normal(3 * cfg.d1), r.standard_normal(3 * cfg.d1)
    np.testing.assert_allclose(gmu_fuse(t, v, params, cfg, side), gmu_oracle(t, v, params, cfg, side), rtol=1e-12)


def test_all_zero_inputs_with_zero_biases_give_zero():
    cfg = small_encoder()
    params = _params(cfg, bias_scale=0.0)
    assert not gmu_fuse(np.zeros(9), np.zeros(9), params, cfg).any()


@pytest.mark.parametrize("modality", ["text", "vision"])
def test_saturated_gate_reduces_to_ungated_fusion(modality):
    cfg = small_encoder(gated_modality=modality)
    params = _params(cfg, seed=9)
    params["mention.gate.weight"].value = np.zeros_like(params["mention.gate.weight"].value)
    params["mention.gate.bias"].value = np.full(cfg.d2, 60.0)
    plain_cfg = apply_ablation(cfg, "no-gated-fusion")
    plain = {k: p for k, p in params.items() if ".gate." not in k}
    r = np.random.default_rng(10)
    t, v = r.standard_normal(9), r.standard_normal(9)
    np.testing.assert_allclose(gmu_fuse(t, v, params, cfg), gmu_fuse(t, v, plain, plain_cfg), rtol=0, atol=1e-15)


def test_ungated_fusion_is_plain_concatenation_exactly():
    cfg = small_encoder(use_gated_fusion=False)
    params = _params(cfg, seed=11)
    assert not any(".gate." in k for k in params)
    r = np.random.default_rng(12)
    t, v = r.standard_normal(9), r.standard_normal(9)
    P = {k: p.value for k, p in params.items()}
    expect = np.tanh(np.concatenate([t @ P["mention.text_joint.weight"], v @ P["mention.vision_joint.weight"]])
                     @ P["mention.fuse.weight"] + P["mention.fuse.bias"])
    np.testing.assert_allclose(gmu_fuse(t, v, params, cfg), expect, rtol=1e-14)


def test_missing_modality_rejected_outside_ablation():
    cfg = small_encoder()
    with pytest.raises(ContractViolation):
        gmu_fuse(np.zeros(9), None, _params(cfg), cfg)


def test_text_only_ablation_needs_no_vision():
    cfg = apply_ablation(small_encoder(), "text-only")
    params = _params(cfg)
    assert not any("vision" in k for k in params)
    out = gmu_fuse(np.ones(9), None, params, cfg)
    np.testing.assert_allclose(out, gmu_oracle(np.ones(9), None, params, cfg))


@settings(max_examples=30)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 3.0))
def test_gate_and_output_ranges(seed, scale):
    cfg = small_encoder()
    params = _params(cfg, seed=seed % 1000)
    r = np.random.default_rng(seed)
    tape = Tape()
    w = {k: tape.watch(p, False) for k, p in params.items()}
    t = tape.constant(scale * r.standard_normal((4, 9)))
    v = tape.constant(scale * r.standard_normal((4, 9)))
    p_t, p_v = t @ w["mention.text_joint.weight"], v @ w["mention.vision_joint.weight"]
    gate = nm.sigmoid(nm.concat([p_t, p_v]) @ w["mention.gate.weight"] + w["mention.gate.bias"]).value
    out = gmu_fuse(t.value[0], v.value[0], params, cfg)
    assert np.all((gate > 0) & (gate < 1))
    assert np.all(np.abs(out) < 1)


def test_outputs_strictly_inside_unit_interval_at_moderate_scale():
    cfg = small_encoder()
    params = _params(cfg, seed=13)
    r = np.random.default_rng(14)
    for _ in range(50):
        out = gmu_fuse(r.standard_normal(9), r.standard_normal(9), params, cfg)
        assert np.all(np.abs(out) < 1)


# --- configuration and composition -----------------------------------------

def test_config_validation():
    for bad in (dict(d1=0), dict(filter_widths=()), dict(filter_widths=(4,)), dict(gated_modality="audio"),
                dict(dropout=1.0)):
        with pytest.raises(ContractViolation):
            small_encoder(**bad)


def test_unknown_ablation_rejected():
    with pytest.raises(ContractViolation):
        apply_ablation(small_encoder(), "no-such")


@pytest.mark.parametrize("ablation", ABLATIONS)
def test_mention_and_entity_parameters_are_disjoint(ablation):
    shapes = encoder_shapes(apply_ablation(small_encoder(), ablation))
    mention = {k for k in shapes if k.startswith("mention.")}
    entity = {k for k in shapes if k.startswith("entity.")}
    assert mention and entity and not mention & entity and mention | entity == set(shapes)


def test_entity_text_ablation_keeps_mention_vision():
    shapes = encoder_shapes(apply_ablation(small_encoder(), "entity-text-only"))
    assert "mention.vision_in.weight" in shapes and "entity.vision_in.weight" not in shapes


def test_batched_embeddings_match_single_record_path():
    cfg = small_encoder()
    params = _params(cfg, seed=15)
    r = np.random.default_rng(16)
    seqs = [r.standard_normal((n, 8)) for n in (1, 3, 5)]
    vis = [r.standard_normal(8) for _ in seqs]
    tape = Tape()
    w = {k: tape.watch(p, False) for k, p in params.items()}
    batch = embed_mentions(tape, w, seqs, vis, cfg).value
    for i, (s, v) in enumerate(zip(seqs, vis)):
        single = gmu_fuse(encode_mention_text(s, params, cfg), project_vision(v, params, cfg), params, cfg)
        np.testing.assert_allclose(batch[i], single, rtol=1e-12)
    texts, evis = r.standard_normal((3, 8)), r.standard_normal((3, 8))
    ent = embed_entities(tape, w, texts, evis, cfg).value
    for i in range(3):
        single = gmu_fuse(encode_entity_text(texts[i], params, cfg),
                          project_vision(evis[i], params, cfg, side="entity"), params, cfg, side="entity")
        np.testing.assert_allclose(ent[i], single, rtol=1e-12)


@pytest.mark.parametrize("ablation", ["full", "text-only", "cnn-k1"])
def test_composed_encoder_gradients(ablation):
    cfg = apply_ablation(small_encoder(d1=2, d2=3, d3=3, feature_dim_in=4), ablation)
    params = _params(cfg, seed=17)
    names = list(params)
    r = np.random.default_rng(18)
    seqs = [r.standard_normal((3, 4)), r.standard_normal((1, 4))]
    vis = [r.standard_normal(4) for _ in seqs]
    proj = r.standard_normal((2, 3))

    def f(tape, *vs):
        w = dict(zip(names, vs))
        m = embed_mentions(tape, w, seqs, vis, cfg)
        e = embed_entities(tape, w, r_texts, r_vis if cfg.entity_vision else None, cfg)
        return nm.sum_((m + e) * tape.constant(proj))

    r_texts, r_vis = r.standard_normal((2, 4)), r.standard_normal((2, 4))
    assert nm.check_gradients(f, [params[n].value for n in names]) < 1e-4
