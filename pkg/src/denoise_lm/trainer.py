"""Joint auxiliary + main training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import rng as rngmod
from .config import RunConfig, ScheduleConfig
from .data import Batcher, ByteTokenizer, read_corpus
from .encoder import ModelPair, forward
from .errors import NumericError
from .objectives import (
    aux_mlm_loss,
    curriculum_metrics,
    rtd_loss,
    sample_corruption,
    sclm_loss,
    select_masks,
    total_loss,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "step,lr,loss_total,loss_aux,loss_rtd,loss_sclm,replace_rate,replace_accuracy,grad_norm_preclip,clipped"
)


class TrainingAborted(NumericError):
    """Raised when a loss or gradient goes non-finite; carries the diagnostic row."""

    def __init__(self, message, row=None, checkpoint=None):
        super().__init__(message)
        self.row = row
        self.checkpoint = checkpoint


@dataclass
class MetricsRow:
    step: int
    lr: float
    loss_total: float
    loss_aux: float
    loss_rtd: float
    loss_sclm: float
    replace_rate: float
    replace_accuracy: float
    grad_norm_preclip: float
    clipped: bool

    def csv_fields(self) -> list[str]:
        out = []
        for v in astuple(self):
            if isinstance(v, bool):
                out.append("1" if v else "0")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


assert ",".join(f.name for f in fields(MetricsRow)) == METRICS_HEADER


# schedule / clipping / Adam -----------------------------------------------------------


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to 0 at ``max_steps``."""
    if not 0 <= step <= sched.max_steps:
        raise ValueError(f"step {step} outside [0, {sched.max_steps}]")
    if step <= sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    return sched.peak_lr * (sched.max_steps - step) / (sched.max_steps - sched.warmup_steps)


def global_grad_norm(params: list[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(params: list[Tensor], clip_norm: float) -> tuple[float, float]:
    """Scale all gradients jointly so their global L2 norm is at most ``clip_norm``.

    Returns ``(scale applied, pre-clip norm)``.
    """
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm {norm}")
    if norm <= clip_norm:
        return 1.0, norm
    scale = clip_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * p.grad.dtype.type(scale)
    return scale, norm


class AdamState:
    """First/second moments per parameter name, decoupled weight decay."""

    def __init__(self, beta1=0.9, beta2=0.98, eps=1e-6, weight_decay=0.01):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(named_params, state: AdamState, lr: float, no_decay=frozenset()) -> None:
    """One Adam update in place: ``p -= lr*wd*p`` then the bias-corrected step.

    Parameters without a gradient are treated as having a zero gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in named_params:
        dt = p.data.dtype.type
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = state.v[name] = dt(b2) * state.v[name] + dt(1 - b2) * g * g
        if state.weight_decay and name not in no_decay:
            p.data = p.data - dt(lr * state.weight_decay) * p.data
        p.data = p.data - dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))


def no_decay_names(named_params) -> frozenset:
    """Biases, LayerNorm parameters, and position-bias scalars skip weight decay."""
    out = set()
    for name, p in named_params:
        leaf = name.rsplit(".", 1)[-1]
        if p.data.ndim <= 1 or leaf in ("gamma", "beta", "table"):
            out.add(name)
    return frozenset(out)


# training -----------------------------------------------------------------------------------


@dataclass
class StepResult:
    row: MetricsRow
    losses: dict


class Trainer:
    """Owns the model pair, optimizer, and data for one pretraining run."""

    def __init__(self, config: RunConfig, docs: list[str] | None = None):
        self.config = config
        cfg = config
        tok = ByteTokenizer.from_file(cfg.data.vocab_file) if cfg.data.vocab_file else ByteTokenizer()
        if tok.vocab_size > cfg.model.vocab_size:
            raise ValueError(f"tokenizer vocab {tok.vocab_size} exceeds model.vocab_size {cfg.model.vocab_size}")
        if docs is None:
            docs = read_corpus(cfg.data.corpus)
        self.batcher = Batcher([tok.encode(d) for d in docs], cfg.data.seq_len, cfg.data.batch_size, cfg.seed)
        self.pair = ModelPair.init(cfg.model, cfg.seed)
        self.named = self.pair.named_parameters()
        self.params = [p for _, p in self.named]
        self.no_decay = no_decay_names(self.named)
        s = cfg.schedule
        self.opt = AdamState(s.beta1, s.beta2, s.adam_eps, s.weight_decay)
        self.step_done = 0

    # one step -----------------------------------------------------------------------

    def compute_losses(self, step: int, train_mode: bool = True) -> dict:
        """Mask, run the auxiliary, corrupt, run the main model; returns loss tensors and the batch."""
        cfg, seed = self.config, self.config.seed
        obj = cfg.objective
        x = self.batcher.batch(step)
        pad = x == 0
        batch = select_masks(x, pad, obj.mask_rate, rngmod.generator(seed, "mask", step))
        pos = batch.flat_mask
        aux_out = forward(
            cfg.model, self.pair.aux, batch.x_mask, train_mode=train_mode, pad_mask=pad,
            dropout_stream=rngmod.DropoutStream(seed, step, 0), heads=("mlm",), mlm_positions=pos,
        )
        l_aux = aux_mlm_loss(aux_out.mlm_logits, x, pos)
        sample_corruption(aux_out.mlm_logits, batch, rngmod.generator(seed, "sample", step))
        want_lm = obj.main_objective != "rtd_only"
        main_out = forward(
            cfg.model, self.pair.main, batch.x_noise, train_mode=train_mode, pad_mask=pad,
            dropout_stream=rngmod.DropoutStream(seed, step, 1),
            heads=("rtd", "mlm") if want_lm else ("rtd",), mlm_positions=pos,
        )
        l_rtd = rtd_loss(main_out.rtd_logits, batch)
        l_sclm = sclm_loss(main_out.mlm_logits, x, pos) if want_lm else None
        total = total_loss(l_aux, l_rtd, l_sclm, obj.loss_lambda, obj.main_objective)
        return {"total": total, "aux": l_aux, "rtd": l_rtd, "sclm": l_sclm, "batch": batch,
                "rtd_logits": main_out.rtd_logits}

    def train_step(self) -> StepResult:
        step = self.step_done + 1
        sched = self.config.schedule
        lr = lr_at(step, sched)
        for p in self.params:
            p.zero_grad()
        try:
            out = self.compute_losses(step)
        except NumericError as e:
            raise TrainingAborted(f"step {step}: {e}") from None
        metrics = curriculum_metrics(out["batch"], out["rtd_logits"])
        loss_vals = {k: (float(out[k].data) if out[k] is not None else float("nan"))
                     for k in ("total", "aux", "rtd", "sclm")}
        row = MetricsRow(step, lr, loss_vals["total"], loss_vals["aux"], loss_vals["rtd"], loss_vals["sclm"],
                         metrics["replace_rate"], metrics["replace_accuracy"], float("nan"), False)
        if not math.isfinite(loss_vals["total"]):
            raise TrainingAborted(f"non-finite loss at step {step}: {loss_vals}", row)
        out["total"].backward()
        try:
            scale, norm = clip_gradients(self.params, sched.clip_norm)
        except NumericError as e:
            raise TrainingAborted(f"step {step}: {e}", row) from None
        row.grad_norm_preclip = norm
        row.clipped = scale < 1.0
        adam_step(self.named, self.opt, lr, self.no_decay)
        self.step_done = step
        return StepResult(row, out)

    # persistence ---------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.named}
        for name in self.opt.m:
            arrays[f"optim.m.{name}"] = self.opt.m[name]
            arrays[f"optim.v.{name}"] = self.opt.v[name]
        return arrays

    def save_checkpoint(self, path) -> None:
        meta = {"config": self.config.to_dict(), "step": self.step_done, "optim_t": self.opt.t,
                "parameter_counts": self.pair.parameter_counts()}
        ckpt.save(path, meta, self.state_arrays())

    def load_checkpoint(self, path) -> None:
        meta, arrays = ckpt.load(path)
        self.pair.load_arrays(arrays)
        self.opt.t = meta["optim_t"]
        self.opt.m = {k[len("optim.m."):]: a for k, a in arrays.items() if k.startswith("optim.m.")}
        self.opt.v = {k[len("optim.v."):]: a for k, a in arrays.items() if k.startswith("optim.v.")}
        self.step_done = meta["step"]

    # full run -------------------------------------------------------------------------------

    def run(self, callbacks=(), until: int | None = None, write_files: bool = True) -> list[MetricsRow]:
        """Train up to ``until`` (default ``max_steps``), writing metrics and checkpoints.

        Every callback gets ``(trainer, StepResult)`` after each step. On a
        non-finite loss the last good state is checkpointed and
        :class:`TrainingAborted` propagates.
        """
        cfg = self.config
        until = cfg.schedule.max_steps if until is None else until
        out_dir = Path(cfg.train.output_dir)
        metrics_path = out_dir / "metrics.csv"
        rows = []
        writer = fh = None
        if write_files:
            out_dir.mkdir(parents=True, exist_ok=True)
            fresh = self.step_done == 0 or not metrics_path.exists()
            fh = open(metrics_path, "w" if fresh else "a", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(METRICS_HEADER.split(","))
        try:
            while self.step_done < until:
                try:
                    res = self.train_step()
                except TrainingAborted as e:
                    if write_files:
                        path = out_dir / "checkpoints" / "last_good.ckpt"
                        self.save_checkpoint(path)
                        e.checkpoint = str(path)
                        if e.row is not None:
                            writer.writerow(e.row.csv_fields())
                    log.error("%s", e)
                    raise
                rows.append(res.row)
                for cb in callbacks:
                    cb(self, res)
                step = res.row.step
                if writer and step % cfg.train.metrics_every == 0:
                    writer.writerow(res.row.csv_fields())
                    fh.flush()
                if write_files and step % cfg.train.checkpoint_every == 0:
                    self.save_checkpoint(out_dir / "checkpoints" / f"step_{step:07d}.ckpt")
                if step % 100 == 0:
                    log.info("step %d loss %.4f replace_rate %.4f", step, res.row.loss_total, res.row.replace_rate)
            if write_files:
                self.save_checkpoint(out_dir / "checkpoints" / "final.ckpt")
        finally:
            if fh:
                fh.close()
        return rows


def train(config: RunConfig, docs: list[str] | None = None, callbacks=(), resume_from=None) -> list[MetricsRow]:
    trainer = Trainer(config, docs)
    if resume_from is not None:
        trainer.load_checkpoint(resume_from)
    return trainer.run(callbacks)
