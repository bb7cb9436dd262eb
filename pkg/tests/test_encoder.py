import math

import numpy as np
import pytest

from denoise_lm import encoder as E
from denoise_lm import rng as R
from denoise_lm import tensor as T
from denoise_lm.errors import ConfigError, ShapeError
from denoise_lm.gradcheck import check, numerical_grad, relative_error


def small(**kw):
    base = dict(vocab_size=12, hidden_size=8, ffn_width=16, depth_main=2, depth_aux=1,
                attention_heads=2, relpos_bins=8, relpos_max_distance=16, max_seq_len=8)
    base.update(kw)
    return E.ModelConfig(**base)


@pytest.mark.parametrize("kw,key", [
    (dict(hidden_size=10, attention_heads=4), "model.attention_heads"),
    (dict(depth_main=2, depth_aux=3), "model.depth_aux"),
    (dict(dropout_main=1.0), "model.dropout_main"),
    (dict(dropout_aux=-0.1), "model.dropout_aux"),
    (dict(layernorm_placement="middle"), "model.layernorm_placement"),
])
def test_config_validation_names_the_key(kw, key):
    with pytest.raises(ConfigError) as e:
        small(**kw)
    assert e.value.key == key


def test_residual_init_std_arithmetic():
    cfg = E.ModelConfig(hidden_size=64, ffn_width=64, depth_main=8, depth_aux=2, attention_heads=4)
    assert E.residual_init_std(cfg, 7) == 0.02 / math.sqrt(16) == 0.005
    flat = E.ModelConfig(hidden_size=64, ffn_width=64, depth_main=8, depth_aux=2, attention_heads=4, scaled_init=False)
    assert all(E.residual_init_std(flat, l) == 0.02 for l in range(8))


def test_scaled_layer3_512x512_within_5pct():
    cfg = E.ModelConfig(vocab_size=16, hidden_size=512, ffn_width=512, depth_main=4, depth_aux=1,
                        attention_heads=8, max_seq_len=4)
    w = E.init_weights(cfg, 0)
    target = 0.02 / math.sqrt(8)
    for name in ("layer3.attn.wo", "layer3.ffn.w2"):
        assert abs(w[name].data.std() / target - 1) < 0.05


def test_unscaled_layers_have_base_std():
    cfg = E.ModelConfig(vocab_size=16, hidden_size=128, ffn_width=128, depth_main=4, depth_aux=1,
                        attention_heads=4, max_seq_len=4, scaled_init=False)
    w = E.init_weights(cfg, 0)
    for l in range(4):
        assert abs(w[f"layer{l}.attn.wo"].data.std() / 0.02 - 1) < 0.05


def t5_reference(delta, bins, max_distance):
    """Vectorized bidirectional bucketing, written independently of the library."""
    delta = np.asarray(delta)
    half = bins // 2
    out = np.where(delta > 0, half, 0)
    n = np.abs(delta)
    exact = half // 2
    with np.errstate(divide="ignore"):
        big = exact + (np.log(np.maximum(n, 1) / exact) / np.log(max_distance / exact) * (half - exact)).astype(np.int64)
    big = np.minimum(big, half - 1)
    return out + np.where(n < exact, n, big)


def test_relpos_bucket_examples():
    assert E.relpos_bucket(5, 5, 32, 128) == 0
    assert E.relpos_bucket(0, 128, 32, 128) == E.relpos_bucket(0, 1280, 32, 128)
    assert E.relpos_bucket(1280, 0, 32, 128) == E.relpos_bucket(128, 0, 32, 128)


def test_relpos_bucket_matches_reference_table():
    deltas = np.arange(-200, 201)
    got = np.array([E.relpos_bucket(0, int(d), 32, 128) for d in deltas])
    assert np.array_equal(got, t5_reference(deltas, 32, 128))
    q, k = 300, 300 + deltas
    assert np.array_equal([E.relpos_bucket(q, int(kk), 32, 128) for kk in k], got)


def test_bucket_table_is_toeplitz():
    tab = E.bucket_table(20, 32, 128)
    assert np.array_equal(tab[1:, 1:], tab[:-1, :-1])


def test_attention_bias_translation_invariant_without_cls_reset():
    cfg = small(tupe_reset_cls=False)
    b = E.attention_bias(cfg, E.init_weights(cfg, 0), 8).data
    assert np.array_equal(b[:, 1:, 1:], b[:, :-1, :-1])


def test_attention_bias_cls_row_and_column_constant():
    cfg = small()
    w = E.init_weights(cfg, 0)
    b = E.attention_bias(cfg, w, 8).data
    for h in range(cfg.attention_heads):
        assert np.all(b[h, 0, :] == w["cls.as_query"].data[h])
        assert np.all(b[h, 1:, 0] == w["cls.as_key"].data[h])


def test_attention_bias_gradient_reaches_table_and_cls_scalars():
    cfg = small()
    w = E.init_weights(cfg, 0, dtype=np.float64)

    def fn(table, as_key):
        w["relpos.table"], w["cls.as_key"] = table, as_key
        return T.softmax(E.attention_bias(cfg, w, 6), axis=-1)

    rng = np.random.default_rng(0)
    assert check(fn, [rng.standard_normal((2, 8)), rng.standard_normal(2)]) < 1e-6


def test_forward_shapes():
    cfg = small()
    w = E.init_weights(cfg, 0)
    ids = np.array([[1, 5, 6, 7, 2, 0], [1, 8, 9, 4, 10, 2]])
    out = E.forward(cfg, w, ids)
    assert out.hidden.shape == (2, 6, 8)
    assert out.mlm_logits.shape == (2, 6, 12)
    assert out.rtd_logits.shape == (2, 6)
    pos = np.array([2, 9])
    assert E.forward(cfg, w, ids, mlm_positions=pos).mlm_logits.shape == (2, 12)


def test_forward_rejects_bad_input():
    cfg = small()
    w = E.init_weights(cfg, 0)
    with pytest.raises(ShapeError):
        E.forward(cfg, w, np.ones((2, 9), dtype=np.int64))
    with pytest.raises(ShapeError):
        E.forward(cfg, w, np.full((1, 4), 12))


def test_zero_dropout_aux_is_deterministic_in_train_mode():
    cfg = small()
    w = E.init_weights(cfg, 0, role="aux")
    ids = np.array([[1, 5, 6, 7, 2, 0]])
    a = E.forward(cfg, w, ids, train_mode=True).hidden.data
    b = E.forward(cfg, w, ids, train_mode=True).hidden.data
    assert np.array_equal(a, b)


def test_main_dropout_uses_stream():
    cfg = small()
    w = E.init_weights(cfg, 0)
    ids = np.array([[1, 5, 6, 7, 2, 0]])
    with pytest.raises(ValueError):
        E.forward(cfg, w, ids, train_mode=True)
    a = E.forward(cfg, w, ids, train_mode=True, dropout_stream=R.DropoutStream(0, 1)).hidden.data
    b = E.forward(cfg, w, ids, train_mode=True, dropout_stream=R.DropoutStream(0, 1)).hidden.data
    c = E.forward(cfg, w, ids, train_mode=True, dropout_stream=R.DropoutStream(0, 2)).hidden.data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def full_model_grad_error(cfg):
    w = E.init_weights(cfg, 0, dtype=np.float64)
    for t in w.params.values():
        t.data = t.data * 10  # larger weights make the check less trivial
    ids = np.array([[1, 5, 6, 7, 2, 0], [1, 8, 9, 4, 10, 2]])
    proj = T.Tensor(np.random.default_rng(1).standard_normal((2, 6, cfg.vocab_size)))

    def loss():
        out = E.forward(cfg, w, ids)
        return T.add(T.reduce_sum(T.mul(out.mlm_logits, proj)), T.reduce_sum(out.rtd_logits))

    for t in w.params.values():
        t.grad = None
    loss().backward()
    # one error over all parameters: cls.as_query has an exactly-zero true
    # gradient (a constant softmax row), so per-tensor ratios are meaningless
    analytic, numeric = [], []
    for t in w.params.values():
        analytic.append(t.grad.ravel())
        numeric.append(numerical_grad(lambda: float(loss().data), t.data).ravel())
    return w, relative_error(np.concatenate(analytic), np.concatenate(numeric))


def test_post_and_pre_ln_differ_and_both_pass_gradcheck():
    ids = np.array([[1, 5, 6, 7, 2, 0]])
    post, pre = small(depth_main=1), small(depth_main=1, layernorm_placement="pre")
    wp, err_post = full_model_grad_error(post)
    assert err_post < 1e-6
    _, err_pre = full_model_grad_error(pre)
    assert err_pre < 1e-6
    wq = E.init_weights(pre, 0, dtype=np.float64)
    for name, t in wq.items():
        if name in wp.params:
            t.data = wp[name].data.copy()
    assert not np.allclose(E.forward(post, wp, ids).hidden.data, E.forward(pre, wq, ids).hidden.data)


def test_padding_does_not_change_real_positions():
    cfg = small(max_seq_len=10)
    w = E.init_weights(cfg, 0)
    short = np.array([[1, 5, 6, 7, 2]])
    padded = np.array([[1, 5, 6, 7, 2, 0, 0, 0, 0, 0]])
    a = E.forward(cfg, w, short).hidden.data
    b = E.forward(cfg, w, padded).hidden.data[:, :5]
    assert np.allclose(a, b, atol=1e-6)
    # ids hidden under the pad mask do not leak either
    junk = padded.copy()
    junk[0, 5:] = 9
    c = E.forward(cfg, w, junk, pad_mask=padded == 0).hidden.data[:, :5]
    assert np.allclose(b, c, atol=1e-6)


def test_model_pair_sharing():
    cfg = small()
    pair = E.ModelPair.init(cfg, 0)
    assert pair.aux["embed.word"] is pair.main["embed.word"]
    assert pair.aux["embed.position"] is not pair.main["embed.position"]
    assert pair.aux["lm_head.bias"] is not pair.main["lm_head.bias"]
    names = [n for n, _ in pair.named_parameters()]
    assert len(names) == len(set(names))
    ids = [id(t) for _, t in pair.named_parameters()]
    assert len(ids) == len(set(ids))
    counts = pair.parameter_counts()
    assert counts["shared"] == 12 * 8
    assert counts["total"] == counts["aux"] + counts["main"] + counts["shared"]
    assert "rtd_head.weight" not in pair.aux and "rtd_head.weight" in pair.main
    assert pair.aux.depth == 1 and pair.main.depth == 2


def test_tied_lm_head_uses_word_embeddings():
    cfg = small()
    w = E.init_weights(cfg, 0)
    ids = np.array([[1, 5, 6, 2]])
    out = E.forward(cfg, w, ids)
    want = out.hidden.data @ w["embed.word"].data.T + w["lm_head.bias"].data
    assert np.allclose(out.mlm_logits.data, want, atol=1e-6)
