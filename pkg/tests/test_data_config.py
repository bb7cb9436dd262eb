import json

import numpy as np
import pytest

from denoise_lm.config import load_run_config, parse_run_config
from denoise_lm.data import (
    Batcher,
    ByteTokenizer,
    MarkovChain,
    generate_corpus,
    pack_document,
    read_corpus,
    write_corpus,
)
from denoise_lm.encoder import CLS_ID, PAD_ID, SEP_ID
from denoise_lm.errors import ConfigError, DataError


def minimal(**over):
    doc = {
        "model": {"hidden_size": 16, "ffn_width": 32, "depth_main": 2, "depth_aux": 1, "attention_heads": 2},
        "schedule": {"peak_lr": 1e-3, "warmup_steps": 2, "max_steps": 10},
        "data": {"corpus": "c.txt", "seq_len": 32},
    }
    doc.update(over)
    return doc


def test_corpus_is_deterministic_per_seed(tmp_path):
    write_corpus(generate_corpus(30, (10, 50), seed=4), tmp_path / "a.txt")
    write_corpus(generate_corpus(30, (10, 50), seed=4), tmp_path / "b.txt")
    write_corpus(generate_corpus(30, (10, 50), seed=5), tmp_path / "c.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert (tmp_path / "a.txt").read_bytes() != (tmp_path / "c.txt").read_bytes()


def test_hundred_documents_round_trip(tmp_path):
    docs = generate_corpus(100, (5, 20), seed=0)
    write_corpus(docs, tmp_path / "c.txt")
    back = read_corpus(tmp_path / "c.txt")
    assert len(back) == 100 and back == docs
    assert all(5 <= len(d) <= 20 for d in docs)


def test_unigram_matches_stationary_law_within_3_sigma():
    seed, lo, hi = 11, 100, 300
    chain = MarkovChain.from_seed(seed)
    pi = chain.stationary_unigram()
    docs = generate_corpus(5000, (lo, hi), seed=seed)  # about 10^6 tokens
    idx = {c: i for i, c in enumerate(chain.alphabet)}
    counts = np.array([np.bincount([idx[c] for c in d], minlength=chain.k) for d in docs], dtype=np.float64)
    lengths = counts.sum(axis=1)
    n = lengths.sum()
    assert n > 9e5
    freq = counts.sum(axis=0) / n
    # tokens within a document are correlated, so the spread comes from
    # independent documents (ratio estimator variance)
    resid = counts - lengths[:, None] * pi
    sigma = np.sqrt((resid**2).sum(axis=0)) / n
    assert np.all(np.abs(freq - pi) < 3 * sigma), (freq, pi, sigma)


def test_chain_rows_are_distributions():
    c = MarkovChain.from_seed(0, alphabet_size=6, n_clusters=3)
    assert np.allclose(c.next_probs.sum(axis=2), 1)
    assert np.all(c.next_probs > 0)
    pi = c.stationary_pairs()
    assert np.allclose(pi @ c.pair_transition(), pi)


@pytest.mark.parametrize("kw", [dict(alphabet_size=1), dict(alphabet_size=27), dict(n_clusters=5),
                                dict(switch_prob=1.5)])
def test_chain_rejects_bad_parameters(kw):
    with pytest.raises(DataError):
        MarkovChain.from_seed(0, **kw)


def test_generate_rejects_bad_arguments():
    with pytest.raises(DataError):
        generate_corpus(0, (5, 10), 0)
    with pytest.raises(DataError):
        generate_corpus(3, (10, 5), 0)


def test_read_corpus_blank_line_separation(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("one\nline two\n\n\n\nthree\n")
    assert read_corpus(p) == ["one\nline two", "three"]
    p.write_text("\n\n")
    with pytest.raises(DataError):
        read_corpus(p)


def test_byte_tokenizer_and_vocab_map(tmp_path):
    t = ByteTokenizer()
    assert t.vocab_size == 260
    ids = t.encode("ab")
    assert ids.tolist() == [ord("a") + 4, ord("b") + 4]
    assert t.decode(ids) == "ab"
    (tmp_path / "v.json").write_text(json.dumps({"vocab_size": 8, "map": {"a": 4, "b": 5}}))
    m = ByteTokenizer.from_file(tmp_path / "v.json")
    assert m.vocab_size == 8 and m.encode("ba").tolist() == [5, 4]
    with pytest.raises(DataError):
        m.encode("c")
    with pytest.raises(DataError):
        ByteTokenizer({"a": 2})


def test_pack_document_respects_boundaries():
    row = pack_document(np.arange(10, 20), 8)
    assert row.tolist() == [CLS_ID, 10, 11, 12, 13, 14, 15, SEP_ID]
    row = pack_document(np.array([10, 11]), 6)
    assert row.tolist() == [CLS_ID, 10, 11, SEP_ID, PAD_ID, PAD_ID]


def test_batcher_depends_only_on_seed_and_step():
    docs = [ByteTokenizer().encode(d) for d in generate_corpus(20, (5, 30), seed=1)]
    a, b = Batcher(docs, 16, 4, seed=3), Batcher(docs, 16, 4, seed=3)
    assert np.array_equal(a.batch(7), b.batch(7))
    assert not np.array_equal(a.batch(7), a.batch(8))
    with pytest.raises(DataError):
        Batcher([np.array([], dtype=np.int64)], 16, 4, 0)


def test_missing_peak_lr_names_the_key():
    doc = minimal()
    del doc["schedule"]["peak_lr"]
    with pytest.raises(ConfigError) as e:
        parse_run_config(doc)
    assert e.value.key == "schedule.peak_lr"


@pytest.mark.parametrize("mutate,key", [
    (lambda d: d["model"].update(colour=1), "model.colour"),
    (lambda d: d.update(extra={}), "extra"),
    (lambda d: d.pop("data"), "data"),
    (lambda d: d["schedule"].update(warmup_steps=10), "schedule.warmup_steps"),
    (lambda d: d["data"].update(seq_len=600), "data.seq_len"),
    (lambda d: d.update(objective={"mask_rate": 0.0}), "objective.mask_rate"),
    (lambda d: d.update(seed="x"), "seed"),
])
def test_schema_errors_name_keys(mutate, key):
    doc = minimal()
    if key == "data.seq_len":
        doc["model"]["max_seq_len"] = 128
    mutate(doc)
    with pytest.raises(ConfigError) as e:
        parse_run_config(doc)
    assert e.value.key == key


def test_effective_config_round_trips(tmp_path):
    cfg = parse_run_config(minimal(seed=9))
    eff = cfg.to_dict()
    assert eff["schedule"]["beta2"] == 0.98 and eff["objective"]["lambda"] == 50.0
    assert eff["model"]["max_seq_len"] == 32 and eff["seed"] == 9
    (tmp_path / "e.json").write_text(json.dumps(eff))
    assert load_run_config(tmp_path / "e.json").to_dict() == eff


def test_invalid_json_is_config_error(tmp_path):
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "bad.json")
