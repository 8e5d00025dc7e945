"""
Tests for the parallel-block architecture: block identity, gradients, GQA, RoPE, loss and presets
"""

from dataclasses import replace

import numpy as np
import pytest

from model_core import (
    ROPE_BASE_FINAL, ROPE_BASE_LONG, BlockWeights, ConfigError, ModelConfig, ParallelLM, TokenRangeError,
    attention_gqa, attention_mask, get_preset, layer_norm, lm_forward, lm_loss, parallel_block, rope_apply,
    rope_tables, sequential_block,
)
from tensor_core import ShapeError, Tensor, grad_check


def small_config(n_kv=2, n_heads=4, head_dim=4, d_model=16, seq=8):
    return ModelConfig(n_layers=1, d_model=d_model, n_heads=n_heads, head_dim=head_dim, n_kv=n_kv,
                       context_length=seq, rope_base=10_000.0, tied_embeddings=True, vocab_size=11)


def random_weights(cfg, rng, scale=0.5):
    d, a, kv, h = cfg.d_model, cfg.attention_width, cfg.kv_width, cfg.mlp_hidden

    def normal(*shape):
        return Tensor(rng.normal(0.0, scale, size=shape), dtype=np.float64)

    return BlockWeights(ln_gain=Tensor(1.0 + 0.1 * rng.normal(size=d)), ln_bias=Tensor(0.1 * rng.normal(size=d)),
                        wq=normal(d, a), wk=normal(d, kv), wv=normal(d, kv), wo=normal(a, d),
                        mlp_up=normal(d, h), mlp_down=normal(h, d))


def expand_kv(w, n_kv, group, head_dim):
    """Replicate each kv head's columns for every query head in its group"""
    d = w.shape[0]
    return Tensor(np.repeat(w.data.reshape(d, n_kv, head_dim), group, axis=1).reshape(d, n_kv * group * head_dim))


def reference_attention(x, w, cfg, mask):
    """Per-head loop over plain numpy, query head h reading kv head h // group"""
    seq, hd = x.shape[0], cfg.head_dim
    q = (x @ w.wq.data).reshape(seq, cfg.n_heads, hd)
    k = (x @ w.wk.data).reshape(seq, cfg.n_kv, hd)
    v = (x @ w.wv.data).reshape(seq, cfg.n_kv, hd)
    cos, sin = rope_tables(np.arange(seq), hd, cfg.rope_base, np.float64)

    def rotate(t):
        return t * cos + np.concatenate([-t[..., hd // 2:], t[..., :hd // 2]], axis=-1) * sin

    q, k = rotate(q), rotate(k)
    out = np.zeros((seq, cfg.n_heads, hd))
    for h in range(cfg.n_heads):
        kv = h // cfg.group_size
        scores = q[:, h] @ k[:, kv].T / np.sqrt(hd)
        scores = np.where(mask, scores, -np.inf)
        probs = np.exp(scores - scores.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        out[:, h] = probs @ v[:, kv]
    return out.reshape(seq, -1) @ w.wo.data


def reference_forward(model, tokens):
    """Whole-model logits in plain numpy: embed, parallel blocks, final norm, head"""
    cfg = model.config

    def norm(x, gain, bias):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        out = (x - mu) / np.sqrt(var + cfg.ln_eps) * gain.data
        return out + bias.data if bias is not None else out

    def gelu(a):
        return 0.5 * a * (1 + np.tanh(np.sqrt(2 / np.pi) * (a + 0.044715 * a ** 3)))

    h = model.head.embedding.data[tokens]
    mask = attention_mask(len(tokens))
    for w in model.blocks:
        x = norm(h, w.ln_gain, w.ln_bias)
        h = h + gelu(x @ w.mlp_up.data) @ w.mlp_down.data + reference_attention(x, w, cfg, mask)
    h = norm(h, model.final_ln_gain, model.final_ln_bias)
    return h @ model.head.projection.data.T


# --- layer norm --- #

def test_layer_norm_of_constant_input_is_zero():
    d = 8
    out = layer_norm(Tensor(np.full((3, d), 2.5)), Tensor(np.ones(d)), Tensor(np.zeros(d)))
    np.testing.assert_allclose(out.data, np.zeros((3, d)), atol=1e-12)


def test_layer_norm_of_opposite_pair():
    out = layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
    np.testing.assert_allclose(out.data, np.array([1.0, -1.0]) / np.sqrt(1.0 + 1e-5), rtol=1e-12)


def test_layer_norm_with_zero_gain_returns_bias(rng):
    bias = rng.normal(size=6)
    out = layer_norm(Tensor(rng.normal(size=(4, 6))), Tensor(np.zeros(6)), Tensor(bias))
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (4, 6)))


# --- parallel block --- #

def test_parallel_block_is_identity_with_zero_output_projections(rng):
    cfg = small_config()
    w = random_weights(cfg, rng)
    w = replace(w, wo=Tensor(np.zeros_like(w.wo.data)), mlp_down=Tensor(np.zeros_like(w.mlp_down.data)))
    x = rng.normal(size=(6, cfg.d_model))
    np.testing.assert_array_equal(parallel_block(Tensor(x), w, cfg).data, x)


def test_parallel_and_sequential_forms_differ(rng):
    cfg = small_config()
    w = random_weights(cfg, rng)
    x = Tensor(rng.normal(size=(6, cfg.d_model)))
    diff = np.abs(parallel_block(x, w, cfg).data - sequential_block(x, w, cfg).data).max()
    assert diff > 1e-3


def test_branch_order_does_not_change_parallel_output(rng):
    cfg = small_config()
    w = random_weights(cfg, rng)
    x = Tensor(rng.normal(size=(5, cfg.d_model)))
    a = parallel_block(x, w, cfg, branch_order=("mlp", "attn")).data
    b = parallel_block(x, w, cfg, branch_order=("attn", "mlp")).data
    np.testing.assert_array_equal(a, b)


def test_sequential_block_with_zero_projections_is_double_layer_norm(rng):
    cfg = small_config()
    w = random_weights(cfg, rng)
    w = replace(w, wo=Tensor(np.zeros_like(w.wo.data)), mlp_down=Tensor(np.zeros_like(w.mlp_down.data)))
    x = Tensor(rng.normal(size=(6, cfg.d_model)))
    once = layer_norm(x, w.ln_gain, w.ln_bias, cfg.ln_eps)
    twice = layer_norm(once, w.ln_gain, w.ln_bias, cfg.ln_eps)
    np.testing.assert_array_equal(sequential_block(x, w, cfg).data, twice.data)


# --- gradients --- #

@pytest.mark.parametrize("name", [
    "embed", "blocks.0.attn.wq", "blocks.0.attn.wk", "blocks.1.attn.wv", "blocks.1.attn.wo",
    "blocks.0.mlp.up", "blocks.1.mlp.down", "blocks.0.ln.gain", "blocks.1.ln.bias", "final_ln.gain",
])
def test_toy_model_gradients_match_finite_differences(toy_model, rng, name):
    tokens = rng.integers(0, toy_model.config.vocab_size, size=12)
    inputs, targets = tokens[:-1], tokens[1:]
    mask = np.ones(targets.size, dtype=np.int8)
    mask[:2] = 0

    def loss_of(w):
        model = toy_model.replace_parameters({name: w})
        return lm_loss(lm_forward(inputs, model), targets, mask).total

    param = toy_model.parameters()[name]
    trial = Tensor(param.data.copy(), requires_grad=True)
    loss_of(trial).backward()
    largest = np.argsort(-np.abs(trial.grad).reshape(-1))[:12]
    assert grad_check(loss_of, param, eps=1e-5, indices=largest) < 1e-4


# --- grouped-query attention --- #

def test_gqa_matches_reference_and_expanded_mha(rng):
    for case in range(100):
        n_kv = (1, 2, 4)[case % 3]
        cfg = small_config(n_kv=n_kv)
        w = random_weights(cfg, rng)
        seq = int(rng.integers(1, cfg.context_length + 1))
        x = rng.normal(size=(seq, cfg.d_model))
        mask = attention_mask(seq)
        out = attention_gqa(Tensor(x), w, mask, cfg).data

        np.testing.assert_allclose(out, reference_attention(x, w, cfg, mask), atol=1e-6)

        mha = cfg.replace(n_kv=cfg.n_heads)
        w_mha = replace(w, wk=expand_kv(w.wk, n_kv, cfg.group_size, cfg.head_dim),
                        wv=expand_kv(w.wv, n_kv, cfg.group_size, cfg.head_dim))
        np.testing.assert_allclose(out, attention_gqa(Tensor(x), w_mha, mask, mha).data, atol=1e-6)


def test_gqa_batched_input_matches_per_row(rng):
    cfg = small_config()
    w = random_weights(cfg, rng)
    x = rng.normal(size=(3, 5, cfg.d_model))
    mask = attention_mask(5)
    batched = attention_gqa(Tensor(x), w, mask, cfg).data
    for row in range(3):
        np.testing.assert_allclose(batched[row], attention_gqa(Tensor(x[row]), w, mask, cfg).data, atol=1e-12)


def test_attention_rejects_sequence_longer_than_context(rng):
    cfg = small_config(seq=4)
    w = random_weights(cfg, rng)
    with pytest.raises(ShapeError):
        attention_gqa(Tensor(rng.normal(size=(5, cfg.d_model))), w, attention_mask(5), cfg)


def test_segment_mask_is_block_diagonal_and_causal():
    mask = attention_mask(5, np.array([0, 0, 1, 1, -1]))
    expected = np.array([
        [1, 0, 0, 0, 0],
        [1, 1, 0, 0, 0],
        [0, 0, 1, 0, 0],
        [0, 0, 1, 1, 0],
        [0, 0, 0, 0, 1],
    ], dtype=bool)
    np.testing.assert_array_equal(mask, expected)


def test_packed_document_matches_running_it_alone(toy_model, rng):
    first = rng.integers(0, 97, size=5)
    second = rng.integers(0, 97, size=7)
    packed = np.concatenate([first, second])
    segments = np.array([0] * 5 + [1] * 7)
    together = lm_forward(packed, toy_model, segments).data
    alone = lm_forward(second, toy_model).data
    np.testing.assert_allclose(together[5:], alone, atol=1e-9)


# --- rotary embeddings --- #

def test_rope_position_zero_is_identity(rng):
    x = Tensor(rng.normal(size=(1, 3, 16)))
    np.testing.assert_array_equal(rope_apply(x, [0], ROPE_BASE_LONG).data, x.data)


@pytest.mark.parametrize("base", [10_000.0, ROPE_BASE_LONG, ROPE_BASE_FINAL])
def test_rope_scores_depend_only_on_relative_position(rng, base):
    q = Tensor(rng.normal(size=(1, 1, 16)))
    k = Tensor(rng.normal(size=(1, 1, 16)))

    def score(m, n):
        return float((rope_apply(q, [m], base).data * rope_apply(k, [n], base).data).sum())

    assert score(3, 1) == pytest.approx(score(10, 8), abs=1e-5)
    assert score(7, 7) == pytest.approx(score(0, 0), abs=1e-5)


def test_rope_preserves_norm(rng):
    x = Tensor(rng.normal(size=(9, 2, 16)))
    out = rope_apply(x, np.arange(9), ROPE_BASE_LONG).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x.data, axis=-1), atol=1e-6)


def test_rope_rejects_odd_head_dim(rng):
    with pytest.raises(ShapeError):
        rope_apply(Tensor(rng.normal(size=(2, 1, 5))), [0, 1], 10_000.0)


def test_presets_carry_rope_bases_and_tying():
    for stage in (1, 2, 3):
        assert get_preset(f"11b-stage{stage}").rope_base == 5_000_042
        assert get_preset(f"11b-stage{stage}").tied_embeddings
    assert get_preset("11b-stage4").rope_base == 500_042
    assert not get_preset("11b-stage4").tied_embeddings
    assert [get_preset(f"11b-stage{s}").context_length for s in (1, 2, 3, 4)] == [2048, 4096, 8192, 8192]
    assert [get_preset(f"desk-stage{s}").context_length for s in (1, 2, 3, 4)] == [128, 256, 512, 512]


# --- forward --- #

@pytest.mark.parametrize("cut", [1, 5, 15])
def test_logits_ignore_later_tokens(toy_model, rng, cut):
    tokens = rng.integers(0, toy_model.config.vocab_size, size=16)
    changed = tokens.copy()
    changed[cut:] = (tokens[cut:] + 1 + rng.integers(0, 90, size=16 - cut)) % toy_model.config.vocab_size
    before = lm_forward(tokens, toy_model).data
    after = lm_forward(changed, toy_model).data
    np.testing.assert_array_equal(before[:cut], after[:cut])
    assert not np.array_equal(before[cut:], after[cut:])


def test_toy_logits_match_numpy_reference(toy_model, rng):
    tokens = rng.integers(0, toy_model.config.vocab_size, size=20)
    logits = lm_forward(tokens, toy_model).data
    assert logits.shape == (20, 97)
    np.testing.assert_allclose(logits, reference_forward(toy_model, tokens), rtol=1e-9, atol=1e-10)


def test_toy_logits_are_fixed_by_seed(toy_config):
    tokens = np.arange(0, 97, 5)
    first = lm_forward(tokens, ParallelLM.init(toy_config, seed=7, dtype=np.float64)).data
    again = lm_forward(tokens, ParallelLM.init(toy_config, seed=7, dtype=np.float64)).data
    other = lm_forward(tokens, ParallelLM.init(toy_config, seed=8, dtype=np.float64)).data
    np.testing.assert_array_equal(first, again)
    assert not np.allclose(first, other)


# --- loss --- #

def test_uniform_logits_give_log_vocab_loss():
    vocab = 13
    terms = lm_loss(Tensor(np.zeros((4, vocab))), np.arange(4), np.ones(4), z_loss_coef=1e-4)
    assert terms.ce.item() == pytest.approx(np.log(vocab), rel=1e-9)
    assert terms.z.item() == pytest.approx(1e-4 * np.log(vocab) ** 2, rel=1e-9)
    assert terms.total.item() == pytest.approx(terms.ce.item() + terms.z.item(), rel=1e-12)


def test_shifted_logits_keep_ce_and_raise_z(rng):
    logits = rng.normal(size=(5, 11))
    targets = rng.integers(0, 11, size=5)
    mask = np.ones(5)
    base = lm_loss(Tensor(logits), targets, mask)
    shifted = lm_loss(Tensor(logits + 10.0), targets, mask)
    assert shifted.ce.item() == pytest.approx(base.ce.item(), rel=1e-12)
    assert shifted.z.item() > base.z.item() > 0


def test_loss_ignores_masked_targets_and_respects_normalizer(rng):
    logits = Tensor(rng.normal(size=(4, 6)))
    targets = np.array([1, 2, 99, 3])
    mask = np.array([1, 1, 0, 1])
    own = lm_loss(logits, targets, mask).ce.item()
    halved = lm_loss(logits, targets, mask, normalizer=6.0).ce.item()
    assert halved == pytest.approx(own / 2, rel=1e-12)


def test_loss_rejects_fully_masked_and_non_binary_masks(rng):
    logits = Tensor(rng.normal(size=(3, 5)))
    with pytest.raises(ValueError):
        lm_loss(logits, np.zeros(3, dtype=int), np.zeros(3))
    with pytest.raises(ValueError):
        lm_loss(logits, np.zeros(3, dtype=int), np.array([1, 2, 0]))


def test_forward_rejects_out_of_vocabulary_and_float_tokens(toy_model):
    with pytest.raises(TokenRangeError):
        lm_forward(np.array([0, 97]), toy_model)
    with pytest.raises(TokenRangeError):
        lm_forward(np.array([0.0, 1.0]), toy_model)


def test_forward_rejects_sequence_longer_than_context(toy_model):
    with pytest.raises(ShapeError):
        lm_forward(np.zeros(toy_model.config.context_length + 1, dtype=np.int64), toy_model)


# --- model and configs --- #

def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(n_kv=3)
    with pytest.raises(ConfigError):
        small_config(head_dim=5)
    with pytest.raises(ConfigError):
        get_preset("no-such-preset")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(dict(get_preset("toy").to_dict(), extra=1))


def test_analytic_parameter_count_matches_model():
    for name in ("desk-stage1", "desk-stage4", "toy"):
        config = get_preset(name)
        assert ParallelLM.init(config).parameter_count() == config.parameter_count()


def test_full_scale_parameter_count_and_untie_delta():
    tied = get_preset("11b-stage1").parameter_count()
    untied = get_preset("11b-stage4").parameter_count()
    assert 10.7e9 < tied < 10.95e9
    assert untied - tied == 65024 * 4096


def test_untie_copies_embedding_into_separate_head(toy_model):
    count = toy_model.parameter_count()
    toy_model.untie()
    head = toy_model.head
    assert head.output is not head.embedding
    np.testing.assert_array_equal(head.output.data, head.embedding.data)
    head.output.data = head.output.data + 1.0
    assert not np.array_equal(head.output.data, head.embedding.data)
    assert not toy_model.config.tied_embeddings
    assert toy_model.parameter_count() == count + 97 * 64
    assert "lm_head" in toy_model.parameters()


def test_untie_keeps_logits_identical(toy_model, rng):
    tokens = rng.integers(0, toy_model.config.vocab_size, size=24)
    before = lm_forward(tokens, toy_model).data
    toy_model.untie()
    np.testing.assert_array_equal(lm_forward(tokens, toy_model).data, before)


def test_with_config_shares_weights_and_detached_drops_grad(toy_model):
    longer = toy_model.with_config(context_length=64, rope_base=ROPE_BASE_FINAL)
    assert longer.blocks is toy_model.blocks
    assert longer.head is toy_model.head
    assert longer.config.context_length == 64
    frozen = toy_model.detached()
    for name, tensor in frozen.parameters().items():
        assert not tensor.requires_grad
        np.testing.assert_array_equal(tensor.data, toy_model.parameters()[name].data)
