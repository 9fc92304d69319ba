import math

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from twembed.encoder import (EncoderConfig, EncoderState, Vocabulary, attention, attention_weights, encode,
                             encode_backward, encode_forward, layer_norm, load_checkpoint, multi_head,
                             positional_encoding, save_checkpoint)
from twembed.errors import ConfigError, FormatError, VocabularyError


def small_state(seed=0, d=8, heads=2, layers=1, vocab=10, max_seq=6):
    return EncoderState.initialize(EncoderConfig(vocab_size=vocab, d=d, heads=heads, layers=layers,
                                                 max_seq=max_seq), seed)


def test_positional_encoding_at_zero():
    pe = positional_encoding(0, 4)
    assert pe.tolist() == [0.0, 1.0, 0.0, 1.0]


def test_positional_encoding_second_pair_frequency():
    pe = positional_encoding(1, 4)
    assert pe[0] == pytest.approx(math.sin(1.0))
    assert pe[1] == pytest.approx(math.cos(1.0))
    assert pe[2] == pytest.approx(math.sin(0.01), abs=1e-15)
    assert pe[3] == pytest.approx(math.cos(0.01), abs=1e-15)


def test_positional_encoding_is_bounded_and_distinct():
    pe = positional_encoding(np.arange(21), 252)
    assert pe.shape == (21, 252)
    assert np.all(np.abs(pe) <= 1.0)
    assert len({row.tobytes() for row in pe}) == 21


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    Q, K, V = rng.normal(size=(3, 5, 4))
    _, w = attention(Q, K, V, return_weights=True)
    assert np.allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.all(w >= 0)


def test_identical_keys_give_mean_of_values():
    rng = np.random.default_rng(1)
    Q = rng.normal(size=(4, 3))
    K = np.tile(rng.normal(size=(1, 3)), (4, 1))
    V = rng.normal(size=(4, 3))
    out = attention(Q, K, V)
    assert np.allclose(out, V.mean(0), atol=1e-12)


def test_padded_keys_get_zero_weight():
    rng = np.random.default_rng(2)
    Q, K, V = rng.normal(size=(3, 5, 4))
    mask = np.array([True, True, True, False, False])
    out, w = attention(Q, K, V, mask, return_weights=True)
    assert np.all(w[:, 3:] == 0.0)
    ref = attention(Q, K[:3], V[:3])
    assert np.allclose(out, ref, atol=1e-12)


def test_single_head_equals_plain_attention_projected():
    st = small_state(d=4, heads=1)
    lp = st.layer(0)
    X = np.random.default_rng(3).normal(size=(5, 4))
    expected = attention(X @ lp["Wq"], X @ lp["Wk"], X @ lp["Wv"]) @ lp["Wo"]
    assert np.allclose(multi_head(X, st, 0), expected, atol=1e-12)


def test_multi_head_uses_column_blocks_per_head():
    st = small_state(d=8, heads=2)
    lp = st.layer(0)
    X = np.random.default_rng(4).normal(size=(5, 8))
    cols = [slice(0, 4), slice(4, 8)]
    heads = [attention(X @ lp["Wq"][:, c], X @ lp["Wk"][:, c], X @ lp["Wv"][:, c]) for c in cols]
    expected = np.concatenate(heads, axis=1) @ lp["Wo"]
    assert np.allclose(multi_head(X, st, 0), expected, atol=1e-12)


def test_multi_head_rejects_wrong_width():
    st = small_state(d=8, heads=2)
    with pytest.raises(ConfigError):
        multi_head(np.zeros((3, 6)), st, 0)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError, match="divisible"):
        EncoderConfig(vocab_size=10, d=10, heads=4)


def test_default_config_dimensions():
    cfg = EncoderConfig(vocab_size=119)
    assert (cfg.d, cfg.heads, cfg.layers, cfg.d_ff, cfg.max_seq, cfg.d_k) == (252, 4, 6, 1008, 21, 63)


def test_layer_norm_output_statistics():
    z = np.random.default_rng(5).normal(3.0, 4.0, size=(7, 16))
    y, _ = layer_norm(z, np.ones(16), np.zeros(16), 1e-5)
    assert np.allclose(y.mean(-1), 0.0, atol=1e-12)
    assert np.allclose(y.var(-1), 1.0, atol=1e-4)


def test_unknown_token_rejected():
    st = small_state(vocab=10)
    with pytest.raises(VocabularyError, match="unknown token id 10"):
        encode([1, 2, 10], st)
    with pytest.raises(VocabularyError):
        encode([1, -1], st)


def test_overlong_sequence_rejected():
    st = small_state(max_seq=4)
    with pytest.raises(VocabularyError, match="max_seq"):
        encode([1, 2, 3, 4, 5], st)


def test_encode_single_and_batch_agree():
    st = small_state(layers=2)
    toks = np.array([[7, 1, 2, 3], [7, 4, 5, 6]])
    H, cls = encode(toks, st)
    h0, c0 = encode(toks[0], st)
    assert np.allclose(H[0], h0, atol=1e-12)
    assert np.array_equal(cls, H[:, 0])
    assert np.array_equal(c0, h0[0])


def test_permutation_changes_output():
    st = small_state(layers=2)
    a, _ = encode([7, 1, 2, 3], st)
    b, _ = encode([7, 3, 2, 1], st)
    assert not np.allclose(a, b)


def test_padding_does_not_change_real_positions():
    st = small_state(layers=2, max_seq=8)
    real = [7, 1, 2, 3]
    padded = real + [9, 9, 9]
    mask = [True] * 4 + [False] * 3
    a, _ = encode(real, st)
    b, _ = encode(padded, st, key_mask=mask)
    assert np.allclose(a, b[:4], atol=1e-12)


def test_attention_weights_per_layer():
    st = small_state(layers=3)
    ws = attention_weights(np.array([[7, 1, 2]]), st)
    assert len(ws) == 3
    assert ws[0].shape == (1, 2, 3, 3)
    assert np.allclose(ws[2].sum(-1), 1.0)


def test_initialization_is_seeded_and_shaped():
    a = small_state(seed=3)
    b = small_state(seed=3)
    c = small_state(seed=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["tok_emb"], c.params["tok_emb"])
    assert a.params["L0.Wq"].shape == (8, 8)
    assert np.all(a.params["L0.b1"] == 0) and np.all(a.params["L0.ln1_g"] == 1)


def _loss_fn(state, tokens, key_mask, weights):
    H, _ = encode_forward(tokens, state, key_mask)
    return float((H * weights).sum())


@pytest.mark.parametrize("layers", [1, 2])
def test_backward_matches_finite_differences(layers):
    st = small_state(seed=1, layers=layers)
    rng = np.random.default_rng(6)
    tokens = np.array([[7, 1, 2, 3, 9], [7, 4, 4, 9, 9], [7, 5, 6, 1, 2]])
    key_mask = tokens != 9
    weights = rng.normal(size=(3, 5, 8))
    H, cache = encode_forward(tokens, st, key_mask)
    grads = encode_backward(weights, st, cache)
    worst = 0.0
    for name, p in st.params.items():
        num = numeric_grad(lambda: _loss_fn(st, tokens, key_mask, weights), p)
        worst = max(worst, float(rel_error(grads[name], num).max()))
    assert worst < 1e-4


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    st = small_state(seed=2, layers=2)
    extra = {"W_GS": np.random.default_rng(0).normal(size=(8, 3))}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, st, extra, {"graph_ids": ["a", "b", "c"]})
    back, ex, meta = load_checkpoint(p1)
    assert back.config == st.config
    assert set(back.params) == set(st.params)
    for k in st.params:
        assert np.array_equal(back.params[k], st.params[k])
    assert np.array_equal(ex["W_GS"], extra["W_GS"])
    assert meta == {"graph_ids": ["a", "b", "c"]}
    save_checkpoint(p2, back, ex, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_corrupt_checkpoint_detected(tmp_path):
    st = small_state()
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, st)
    raw = bytearray(p.read_bytes())
    raw[-40] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        load_checkpoint(p)
    p.write_bytes(b"hello")
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_vocabulary_layout():
    v = Vocabulary(116)
    assert (v.cls, v.mask, v.pad, v.size) == (116, 117, 118, 119)
