"""Classification fine-tuning of a pretrained main encoder.

A linear head per task reads the final [CLS] state. The training loss can add
a posterior-differential penalty: the KL divergence between the class
posterior on the clean input embeddings and on embeddings nudged by a small
random vector inside a norm ball. Tasks are trained jointly, sharing the
encoder, with batches interleaved in proportion to dataset size.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import rng as rngmod
from . import tensor as T
from .data import ByteTokenizer, pack_document
from .encoder import EncoderWeights, ModelConfig, forward, init_weights
from .errors import ConfigError, DataError
from .tensor import Tensor
from .trainer import AdamState, adam_step, clip_gradients, no_decay_names

log = logging.getLogger(__name__)

DIVERGENCES = ("forward_kl", "symmetric_kl")
NORMS = ("l2", "linf")


@dataclass
class PdrConfig:
    alpha: float = 1.0
    c: float = 1e-3
    perturbations_per_step: int = 1
    divergence: str = "forward_kl"
    norm: str = "l2"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0", "pdr.alpha")
        if self.c < 0:
            raise ConfigError("c must be >= 0", "pdr.c")
        if self.perturbations_per_step < 1:
            raise ConfigError("perturbations_per_step must be >= 1", "pdr.perturbations_per_step")
        if self.divergence not in DIVERGENCES:
            raise ConfigError(f"divergence must be one of {DIVERGENCES}", "pdr.divergence")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}", "pdr.norm")


@dataclass
class TaskSpec:
    """One classification task: packed [N x L] ids and integer labels."""

    name: str
    n_classes: int
    train_ids: np.ndarray
    train_labels: np.ndarray
    dev_ids: np.ndarray
    dev_labels: np.ndarray

    def __post_init__(self):
        if self.n_classes < 2:
            raise DataError(f"task {self.name}: need at least 2 classes")
        for split in ("train", "dev"):
            ids = np.asarray(getattr(self, f"{split}_ids"), dtype=np.int64)
            labels = np.asarray(getattr(self, f"{split}_labels"), dtype=np.int64)
            if ids.ndim != 2 or labels.shape != (ids.shape[0],):
                raise DataError(f"task {self.name}: {split} ids must be [N x L] with N labels")
            if ids.shape[0] == 0:
                raise DataError(f"task {self.name}: empty {split} split")
            if labels.min() < 0 or labels.max() >= self.n_classes:
                raise DataError(f"task {self.name}: {split} label out of range [0, {self.n_classes})")
            setattr(self, f"{split}_ids", ids)
            setattr(self, f"{split}_labels", labels)


@dataclass
class FinetuneConfig:
    steps: int = 300
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_steps: int = 30
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    eval_batch_size: int = 64
    pdr: PdrConfig = field(default_factory=PdrConfig)

    def lr_at(self, step: int) -> float:
        if step <= self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        return self.peak_lr * max(self.steps - step, 0) / max(self.steps - self.warmup_steps, 1)


# perturbation and loss ------------------------------------------------------------------------


def perturbation(shape, c: float, rng: np.random.Generator, norm: str = "l2", dtype=np.float32) -> np.ndarray:
    """Random vector per sequence (leading axis) on the surface of the radius-``c`` ball."""
    if c < 0:
        raise ValueError("c must be >= 0")
    if c == 0:
        return np.zeros(shape, dtype)
    g = rng.standard_normal(shape)
    flat = g.reshape(shape[0], -1)
    if norm == "l2":
        size = np.linalg.norm(flat, axis=1)
    elif norm == "linf":
        size = np.abs(flat).max(axis=1)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    scale = c / np.maximum(size, 1e-30)
    return (g * scale.reshape((-1,) + (1,) * (len(shape) - 1))).astype(dtype)


def perturb(embeddings, c: float, rng: np.random.Generator, norm: str = "l2") -> np.ndarray:
    e = np.asarray(embeddings)
    return e + perturbation(e.shape, c, rng, norm, e.dtype)


def class_logits(config: ModelConfig, weights: EncoderWeights, head: dict[str, Tensor], ids, **kw) -> Tensor:
    out = forward(config, weights, ids, heads=(), **kw)
    cls = T.take(out.hidden, 0, axis=1)
    return T.add(T.matmul(cls, head["weight"]), head["bias"])


def kl_divergence(logp: Tensor, logq: Tensor) -> Tensor:
    """Mean over rows of KL(p || q) given log-probabilities.

    Rows are clamped at zero: when p and q nearly agree, float32 rounding can
    leave a row a few ulps below zero, where the exact value and gradient are ~0.
    """
    p = T.exp(logp)
    return T.reduce_mean(T.relu(T.reduce_sum(T.mul(p, T.sub(logp, logq)), axis=-1)))


@dataclass
class PdrLoss:
    total: Tensor
    ce: Tensor
    reg: Tensor | None
    logits: Tensor


def pdr_loss(
    config: ModelConfig,
    weights: EncoderWeights,
    head: dict[str, Tensor],
    ids,
    labels,
    pdr: PdrConfig,
    rng: np.random.Generator | None = None,
    train_mode: bool = False,
    dropout_seed: tuple[int, int, int] | None = None,
) -> PdrLoss:
    """Cross-entropy plus ``alpha`` times the clean-vs-perturbed posterior divergence.

    Both passes see the same dropout masks (``dropout_seed`` is
    ``(seed, step, salt)``), so the perturbation is the only difference
    between them. The perturbation is a constant: no gradient flows into it.
    """
    ids = np.asarray(ids)
    labels = np.asarray(labels, dtype=np.int64)

    def stream():
        return rngmod.DropoutStream(*dropout_seed) if dropout_seed is not None else None

    clean = class_logits(config, weights, head, ids, train_mode=train_mode, dropout_stream=stream())
    ce = T.cross_entropy(clean, labels)
    if pdr.alpha == 0:
        return PdrLoss(ce, ce, None, clean)
    if rng is None:
        raise ValueError("pdr_loss with alpha > 0 needs a perturbation rng")
    logp = T.log_softmax(clean, axis=-1)
    d = config.hidden_size
    reg = None
    for _ in range(pdr.perturbations_per_step):
        eps = perturbation((ids.shape[0], ids.shape[1], d), pdr.c, rng, pdr.norm, clean.dtype)
        noisy = class_logits(config, weights, head, ids, train_mode=train_mode, dropout_stream=stream(), embed_delta=eps)
        logq = T.log_softmax(noisy, axis=-1)
        r = kl_divergence(logp, logq)
        if pdr.divergence == "symmetric_kl":
            r = T.add(r, kl_divergence(logq, logp))
        reg = r if reg is None else T.add(reg, r)
    if pdr.perturbations_per_step > 1:
        reg = T.mul(reg, 1.0 / pdr.perturbations_per_step)
    return PdrLoss(T.add(ce, T.mul(reg, pdr.alpha)), ce, reg, clean)


# model loading ----------------------------------------------------------------------------------

_UNUSED = ("lm_head.bias", "rtd_head.weight", "rtd_head.bias")


def load_main_encoder(path) -> tuple[ModelConfig, EncoderWeights]:
    """Main encoder from a pretraining checkpoint (shared tensors included)."""
    meta, arrays = ckpt.load(path)
    cfg_doc = dict(meta["config"]["model"])
    config = ModelConfig(**cfg_doc)
    weights = init_weights(config, 0, "main")
    for name, t in weights.items():
        for key in (f"main.{name}", f"shared.{name}"):
            if key in arrays:
                if arrays[key].shape != t.shape:
                    raise DataError(f"{key}: checkpoint shape {arrays[key].shape} != {t.shape}")
                t.data = arrays[key].astype(t.dtype, copy=True)
                break
        else:
            raise DataError(f"checkpoint {path} has no main-encoder tensor {name}")
    return config, weights


def new_head(config: ModelConfig, task: TaskSpec, seed: int) -> dict[str, Tensor]:
    g = rngmod.generator(seed, "init", rngmod.stream_id(f"head/{task.name}"))
    w = (g.standard_normal((config.hidden_size, task.n_classes)) * config.init_std).astype(np.float32)
    return {
        "weight": Tensor(w, requires_grad=True, name=f"head.{task.name}.weight"),
        "bias": Tensor(np.zeros(task.n_classes, np.float32), requires_grad=True, name=f"head.{task.name}.bias"),
    }


def task_schedule(sizes: list[int], steps: int) -> list[int]:
    """Deterministic interleaving where task ``i`` gets ``sizes[i] / sum`` of the steps.

    Smooth weighted round-robin: every step each task earns its size in
    credit, the richest task is picked and pays the total back.
    """
    total = sum(sizes)
    credit = [0] * len(sizes)
    order = []
    for _ in range(steps):
        for i, s in enumerate(sizes):
            credit[i] += s
        pick = max(range(len(sizes)), key=lambda i: credit[i])
        credit[pick] -= total
        order.append(pick)
    return order


# training ---------------------------------------------------------------------------------------


class FineTuner:
    """Shared encoder + one head per task for one seed."""

    def __init__(self, config: ModelConfig, weights: EncoderWeights, tasks: list[TaskSpec], ft: FinetuneConfig, seed: int):
        if not tasks:
            raise DataError("no tasks given")
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            raise DataError("task names must be unique")
        for t in tasks:
            if t.train_ids.shape[1] > config.max_seq_len:
                raise DataError(f"task {t.name}: sequence length exceeds max_seq_len {config.max_seq_len}")
            if t.train_ids.max() >= config.vocab_size or t.dev_ids.max() >= config.vocab_size:
                raise DataError(f"task {t.name}: token id outside vocab")
        self.config = config
        self.weights = weights
        self.tasks = tasks
        self.ft = ft
        self.seed = seed
        self.heads = {t.name: new_head(config, t, seed) for t in tasks}
        self.encoder_named = [(f"encoder.{n}", p) for n, p in weights.items() if n not in _UNUSED]
        self.no_decay = no_decay_names(self.encoder_named)
        self.opt_encoder = AdamState(weight_decay=ft.weight_decay)
        self.opt_heads = {t.name: AdamState(weight_decay=ft.weight_decay) for t in tasks}
        self.order = task_schedule([t.train_ids.shape[0] for t in tasks], ft.steps)
        self.step_done = 0

    def train_step(self) -> dict:
        step = self.step_done + 1
        ti = self.order[step - 1]
        task = self.tasks[ti]
        head = self.heads[task.name]
        g = rngmod.generator(self.seed, "task", ti, step)
        idx = g.integers(0, task.train_ids.shape[0], size=self.ft.batch_size)
        ids, labels = task.train_ids[idx], task.train_labels[idx]
        res = pdr_loss(
            self.config, self.weights, head, ids, labels, self.ft.pdr,
            rng=rngmod.generator(self.seed, "perturb", step), train_mode=True,
            dropout_seed=(self.seed, step, 2),
        )
        head_named = [(f"head.{task.name}.{k}", p) for k, p in head.items()]
        params = [p for _, p in self.encoder_named] + [p for _, p in head_named]
        for p in params:
            p.grad = None
        res.total.backward()
        clip_gradients(params, self.ft.clip_norm)
        lr = self.ft.lr_at(step)
        adam_step(self.encoder_named, self.opt_encoder, lr, self.no_decay)
        adam_step(head_named, self.opt_heads[task.name], lr, frozenset({head_named[1][0]}))
        self.step_done = step
        return {
            "step": step, "task": task.name, "loss": float(res.total.data), "ce": float(res.ce.data),
            "reg": float(res.reg.data) if res.reg is not None else 0.0,
        }

    def accuracy(self, task: TaskSpec) -> float:
        head = self.heads[task.name]
        correct = 0
        bs = self.ft.eval_batch_size
        with T.no_grad():
            for i in range(0, task.dev_ids.shape[0], bs):
                logits = class_logits(self.config, self.weights, head, task.dev_ids[i : i + bs])
                correct += int((logits.data.argmax(axis=1) == task.dev_labels[i : i + bs]).sum())
        return correct / task.dev_ids.shape[0]

    def run(self) -> dict[str, float]:
        while self.step_done < self.ft.steps:
            info = self.train_step()
            if info["step"] % 50 == 0:
                log.info("seed %d step %d %s loss %.4f", self.seed, info["step"], info["task"], info["loss"])
        return {t.name: self.accuracy(t) for t in self.tasks}


def finetune(encoder_source, tasks: list[TaskSpec], ft: FinetuneConfig, seeds=(0,), workers: int = 1) -> dict:
    """Fine-tune once per seed; returns per-task mean/std accuracy and per-seed rows.

    ``encoder_source`` is a checkpoint path or a zero-argument callable returning
    ``(ModelConfig, EncoderWeights)``; every seed starts from a fresh copy.
    """
    def load():
        if callable(encoder_source):
            return encoder_source()
        return load_main_encoder(encoder_source)

    def one(seed):
        config, weights = load()
        return seed, FineTuner(config, weights, tasks, ft, seed).run()

    seeds = list(seeds)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    rows = [{"seed": s, "task": name, "dev_accuracy": acc} for s, accs in results for name, acc in accs.items()]
    report = {}
    for t in tasks:
        accs = np.array([accs[t.name] for _, accs in results])
        report[t.name] = {
            "mean_acc": float(accs.mean()),
            "std_acc": float(accs.std(ddof=1)) if accs.size > 1 else 0.0,
            "per_seed": [float(a) for a in accs],
        }
    return {"report": report, "rows": rows}


# toy tasks and task files -----------------------------------------------------------------------

FILLER = "abcdefgh"
MARKERS = ("X", "Y")


def marker_task(name="marker", n_train=512, n_dev=256, seq_len=32, seed=0, tokenizer=None) -> TaskSpec:
    """Random filler with a single marker character; the label is which marker (X=0, Y=1)."""
    tok = tokenizer or ByteTokenizer()

    def split(n, part):
        g = rngmod.generator(seed, "task", rngmod.stream_id(name), part)
        body = seq_len - 2
        ids, labels = [], []
        for _ in range(n):
            chars = [FILLER[i] for i in g.integers(0, len(FILLER), size=body)]
            label = int(g.integers(0, 2))
            chars[int(g.integers(0, body))] = MARKERS[label]
            ids.append(pack_document(tok.encode("".join(chars)), seq_len))
            labels.append(label)
        return np.stack(ids), np.array(labels)

    tr, dv = split(n_train, 0), split(n_dev, 1)
    return TaskSpec(name, 2, tr[0], tr[1], dv[0], dv[1])


def position_task(name="position", n_train=512, n_dev=256, seq_len=32, seed=0, tokenizer=None) -> TaskSpec:
    """Random filler with one X; the label is whether X sits in the first half."""
    tok = tokenizer or ByteTokenizer()

    def split(n, part):
        g = rngmod.generator(seed, "task", rngmod.stream_id(name), part)
        body = seq_len - 2
        ids, labels = [], []
        for _ in range(n):
            chars = [FILLER[i] for i in g.integers(0, len(FILLER), size=body)]
            at = int(g.integers(0, body))
            chars[at] = "X"
            ids.append(pack_document(tok.encode("".join(chars)), seq_len))
            labels.append(int(at < body // 2))
        return np.stack(ids), np.array(labels)

    tr, dv = split(n_train, 0), split(n_dev, 1)
    return TaskSpec(name, 2, tr[0], tr[1], dv[0], dv[1])


TOY_TASKS = {"marker": marker_task, "position": position_task}


def _examples(entries, tok, seq_len, where):
    ids, labels = [], []
    for i, e in enumerate(entries):
        if "text" not in e or "label" not in e:
            raise DataError(f"{where}[{i}] needs 'text' and 'label'")
        ids.append(pack_document(tok.encode(e["text"]), seq_len))
        labels.append(int(e["label"]))
    return np.stack(ids) if ids else np.zeros((0, seq_len), np.int64), np.array(labels, dtype=np.int64)


def load_tasks(path, tokenizer=None) -> list[TaskSpec]:
    """Read a task file.

    ``{"tasks": [...]}`` where each entry is either a toy generator
    ``{"name", "kind": "marker"|"position", "n_train", "n_dev", "seq_len", "seed"}``
    or explicit data ``{"name", "n_classes", "seq_len", "train": [{"text", "label"}], "dev": [...]}``.
    """
    doc = json.loads(Path(path).read_text())
    tok = tokenizer or ByteTokenizer()
    if not isinstance(doc, dict) or not isinstance(doc.get("tasks"), list):
        raise DataError(f"{path}: expected an object with a 'tasks' list")
    tasks = []
    for i, t in enumerate(doc["tasks"]):
        if "name" not in t:
            raise DataError(f"tasks[{i}] needs a name")
        if "kind" in t:
            kind = t["kind"]
            if kind not in TOY_TASKS:
                raise DataError(f"tasks[{i}]: unknown kind {kind!r}; known: {sorted(TOY_TASKS)}")
            kw = {k: t[k] for k in ("n_train", "n_dev", "seq_len", "seed") if k in t}
            tasks.append(TOY_TASKS[kind](name=t["name"], tokenizer=tok, **kw))
        else:
            seq_len = int(t.get("seq_len", 64))
            tr = _examples(t.get("train", []), tok, seq_len, f"tasks[{i}].train")
            dv = _examples(t.get("dev", []), tok, seq_len, f"tasks[{i}].dev")
            tasks.append(TaskSpec(t["name"], int(t["n_classes"]), tr[0], tr[1], dv[0], dv[1]))
    return tasks


def seed_spread(report: dict) -> float:
    """Largest across-seed std over tasks, or NaN when nothing was repeated."""
    stds = [v["std_acc"] for v in report.values() if len(v["per_seed"]) > 1]
    return max(stds) if stds else math.nan
