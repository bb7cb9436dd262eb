import json
import math

import numpy as np
import pytest

from denoise_lm import encoder as E
from denoise_lm import rng as R
from denoise_lm import tensor as T
from denoise_lm.errors import ConfigError, DataError
from denoise_lm.finetune import (
    FinetuneConfig,
    FineTuner,
    PdrConfig,
    TaskSpec,
    class_logits,
    finetune,
    kl_divergence,
    load_main_encoder,
    load_tasks,
    marker_task,
    pdr_loss,
    perturb,
    perturbation,
    position_task,
    seed_spread,
    task_schedule,
)
from denoise_lm.tensor import Tensor


def tiny(hidden=8, depth=1, dropout=0.1):
    return E.ModelConfig(vocab_size=260, hidden_size=hidden, ffn_width=2 * hidden, depth_main=depth, depth_aux=1,
                         attention_heads=2, relpos_bins=8, relpos_max_distance=16, max_seq_len=16,
                         dropout_main=dropout)


def head_for(cfg, n_classes, seed=0):
    g = np.random.default_rng(seed)
    return {"weight": Tensor(g.standard_normal((cfg.hidden_size, n_classes)).astype(np.float32), requires_grad=True),
            "bias": Tensor(np.zeros(n_classes, np.float32), requires_grad=True)}


def test_perturb_zero_radius_is_identity():
    x = np.random.default_rng(0).standard_normal((3, 5, 4)).astype(np.float32)
    assert np.array_equal(perturb(x, 0.0, np.random.default_rng(1)), x)


@pytest.mark.parametrize("norm", ["l2", "linf"])
def test_perturbation_stays_in_ball(norm):
    rng = np.random.default_rng(2)
    for c in (1e-3, 0.5, 3.0):
        eps = perturbation((64, 6, 4), c, rng, norm, np.float64)
        flat = eps.reshape(64, -1)
        size = np.linalg.norm(flat, axis=1) if norm == "l2" else np.abs(flat).max(axis=1)
        assert np.all(size <= c * (1 + 1e-12))


def test_perturbation_mean_is_zero_within_3_sigma():
    eps = perturbation((10_000, 3, 2), 1.0, np.random.default_rng(3), dtype=np.float64).reshape(10_000, -1)
    se = eps.std(axis=0, ddof=1) / math.sqrt(10_000)
    assert np.all(np.abs(eps.mean(axis=0)) < 3 * se)


def test_perturbation_rejects_negative_radius():
    with pytest.raises(ValueError):
        perturbation((2, 2), -1.0, np.random.default_rng(0))


def test_pdr_config_validation():
    for kw, key in ((dict(alpha=-1), "pdr.alpha"), (dict(c=-1), "pdr.c"),
                    (dict(divergence="js"), "pdr.divergence"), (dict(perturbations_per_step=0), "pdr.perturbations_per_step")):
        with pytest.raises(ConfigError) as e:
            PdrConfig(**kw)
        assert e.value.key == key


def batch(cfg, rng, n=4, length=12):
    ids = np.full((n, length), 0)
    ids[:, 0] = 1
    ids[:, 1:-1] = rng.integers(4, cfg.vocab_size, (n, length - 2))
    ids[:, -1] = 2
    return ids, rng.integers(0, 3, n)


@pytest.mark.parametrize("pdr", [PdrConfig(c=0.0), PdrConfig(alpha=0.0, c=0.5)])
def test_pdr_reduces_to_vanilla_exactly(pdr):
    cfg = tiny()
    w = E.init_weights(cfg, 0)
    head = head_for(cfg, 3)
    ids, labels = batch(cfg, np.random.default_rng(4))
    for train_mode in (False, True):
        seed = (0, 1, 2)
        res = pdr_loss(cfg, w, head, ids, labels, pdr, np.random.default_rng(0), train_mode, seed)
        vanilla = T.cross_entropy(class_logits(cfg, w, head, ids, train_mode=train_mode,
                                               dropout_stream=R.DropoutStream(*seed) if train_mode else None), labels)
        assert float(res.total.data) == float(vanilla.data)


def test_regularizer_is_non_negative_over_1000_batches():
    cfg = tiny(dropout=0.0)
    rng = np.random.default_rng(5)
    worst = math.inf
    with T.no_grad():
        for i in range(1000):
            if i % 100 == 0:
                w = E.init_weights(cfg, i)
                for t in w.params.values():
                    t.data = t.data * 20
                head = head_for(cfg, 3, i)
            ids, labels = batch(cfg, rng)
            pdr = PdrConfig(c=float(rng.uniform(0.01, 2.0)), divergence=("forward_kl", "symmetric_kl")[i % 2])
            res = pdr_loss(cfg, w, head, ids, labels, pdr, rng)
            worst = min(worst, float(res.reg.data))
    assert worst >= 0.0


def test_kl_examples():
    p = Tensor(np.log(np.array([[0.5, 0.5]])))
    q = Tensor(np.log(np.array([[0.9, 0.1]])))
    want = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert abs(float(kl_divergence(p, q).data) - want) < 1e-15
    assert float(kl_divergence(p, p).data) == 0.0


def test_pdr_gradient_flows_through_both_passes():
    cfg = tiny(dropout=0.0)
    w = E.init_weights(cfg, 0, dtype=np.float64)
    head = head_for(cfg, 3)
    head = {k: Tensor(v.data.astype(np.float64), requires_grad=True) for k, v in head.items()}
    ids, labels = batch(cfg, np.random.default_rng(6))
    pdr = PdrConfig(c=0.5)
    reg = pdr_loss(cfg, w, head, ids, labels, pdr, np.random.default_rng(7)).reg
    reg.backward()
    assert np.abs(head["weight"].grad).sum() > 0 and np.abs(w["embed.word"].grad).sum() > 0


def test_task_schedule_proportional_round_robin():
    order = task_schedule([300, 100], 40)
    assert np.bincount(order).tolist() == [30, 10]
    assert order[:4] == [0, 0, 1, 0]
    assert task_schedule([5], 3) == [0, 0, 0]


def test_task_spec_rejects_bad_labels():
    ids = np.ones((3, 4), dtype=np.int64)
    with pytest.raises(DataError):
        TaskSpec("t", 2, ids, np.array([0, 1, 2]), ids, np.array([0, 1, 1]))
    with pytest.raises(DataError):
        TaskSpec("t", 2, ids, np.array([0, 1]), ids, np.array([0, 1, 1]))
    with pytest.raises(DataError):
        TaskSpec("t", 1, ids, np.zeros(3), ids, np.zeros(3))


def test_multi_task_heads_are_isolated_and_encoder_is_shared():
    cfg = tiny(hidden=16)
    w = E.init_weights(cfg, 0)
    tasks = [marker_task("a", 32, 16, seq_len=16), position_task("b", 32, 16, seq_len=16)]
    ft = FineTuner(cfg, w, tasks, FinetuneConfig(steps=4, warmup_steps=1), seed=0)
    assert ft.order == [0, 1, 0, 1]
    enc = w["layer0.ffn.w1"]
    for expected in ("a", "b"):
        before = {n: {k: t.data.copy() for k, t in h.items()} for n, h in ft.heads.items()}
        enc_before = enc.data.copy()
        info = ft.train_step()
        assert info["task"] == expected
        other = "b" if expected == "a" else "a"
        assert not np.array_equal(ft.heads[expected]["weight"].data, before[expected]["weight"])
        assert np.array_equal(ft.heads[other]["weight"].data, before[other]["weight"])
        assert np.array_equal(ft.heads[other]["bias"].data, before[other]["bias"])
        assert np.abs(enc.grad).sum() > 0 and not np.array_equal(enc.data, enc_before)


def test_finetune_rejects_out_of_range_tokens_and_duplicate_names():
    cfg = tiny()
    task = marker_task("m", 8, 8, seq_len=32)
    with pytest.raises(DataError):
        FineTuner(cfg, E.init_weights(cfg, 0), [task], FinetuneConfig(steps=2, warmup_steps=1), 0)
    task = marker_task("m", 8, 8, seq_len=16)
    with pytest.raises(DataError):
        FineTuner(cfg, E.init_weights(cfg, 0), [task, task], FinetuneConfig(steps=2, warmup_steps=1), 0)


def test_toy_marker_task_reaches_95_percent():
    cfg = E.ModelConfig(vocab_size=260, hidden_size=32, ffn_width=64, depth_main=2, depth_aux=1, attention_heads=4,
                        relpos_bins=16, relpos_max_distance=32, max_seq_len=32)
    out = finetune(lambda: (cfg, E.init_weights(cfg, 0)), [marker_task()],
                   FinetuneConfig(pdr=PdrConfig(alpha=0.0)), seeds=[0])
    assert out["report"]["marker"]["mean_acc"] >= 0.95
    assert out["rows"] == [{"seed": 0, "task": "marker", "dev_accuracy": out["report"]["marker"]["mean_acc"]}]


def test_finetune_report_over_seeds():
    cfg = tiny(hidden=16)
    out = finetune(lambda: (cfg, E.init_weights(cfg, 0)), [marker_task("m", 32, 16, seq_len=16)],
                   FinetuneConfig(steps=4, warmup_steps=1), seeds=[0, 1, 2])
    r = out["report"]["m"]
    assert len(r["per_seed"]) == 3 and r["std_acc"] == pytest.approx(np.std(r["per_seed"], ddof=1))
    assert seed_spread(out["report"]) == r["std_acc"]
    assert math.isnan(seed_spread({"m": {"std_acc": 0.0, "per_seed": [1.0]}}))


def test_load_tasks_both_forms(tmp_path):
    p = tmp_path / "tasks.json"
    p.write_text(json.dumps({"tasks": [
        {"name": "m", "kind": "marker", "n_train": 8, "n_dev": 4, "seq_len": 12, "seed": 1},
        {"name": "e", "n_classes": 2, "seq_len": 8,
         "train": [{"text": "ab", "label": 0}, {"text": "ba", "label": 1}], "dev": [{"text": "aa", "label": 1}]},
    ]}))
    m, e = load_tasks(p)
    assert m.train_ids.shape == (8, 12) and e.dev_ids.shape == (1, 8)
    p.write_text(json.dumps({"tasks": [{"name": "e", "n_classes": 2, "train": [{"text": "a", "label": 5}],
                                        "dev": [{"text": "a", "label": 0}]}]}))
    with pytest.raises(DataError):
        load_tasks(p)
    p.write_text(json.dumps({"tasks": [{"name": "x", "kind": "parity"}]}))
    with pytest.raises(DataError):
        load_tasks(p)


def test_load_main_encoder_from_pretraining_checkpoint(tmp_path):
    from denoise_lm.config import parse_run_config
    from denoise_lm.data import generate_corpus
    from denoise_lm.trainer import Trainer

    cfg = parse_run_config({
        "model": {"hidden_size": 16, "ffn_width": 32, "depth_main": 2, "depth_aux": 1, "attention_heads": 2,
                  "relpos_bins": 8, "relpos_max_distance": 32},
        "schedule": {"peak_lr": 1e-3, "warmup_steps": 1, "max_steps": 2},
        "data": {"corpus": "unused", "seq_len": 16, "batch_size": 2},
        "train": {"output_dir": str(tmp_path)},
    })
    tr = Trainer(cfg, generate_corpus(10, (5, 20), seed=0))
    tr.run()
    config, weights = load_main_encoder(tmp_path / "checkpoints" / "final.ckpt")
    assert config.depth_main == 2
    assert np.array_equal(weights["embed.word"].data, tr.pair.main["embed.word"].data)
    assert np.array_equal(weights["layer1.attn.wo"].data, tr.pair.main["layer1.attn.wo"].data)
