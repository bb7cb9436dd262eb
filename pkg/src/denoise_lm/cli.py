"""Command-line entry point: ``denoise-lm <subcommand>``.

Machine-readable output (JSON, CSV) goes to stdout or files; logs go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fusedops, zero_planner
from .errors import ConfigError, DataError

log = logging.getLogger("denoise_lm")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _dump(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# subcommands ------------------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    from .data import generate_corpus, write_corpus

    docs = generate_corpus(
        args.n_docs, (args.min_len, args.max_len), args.seed, args.alphabet,
        args.concentration, args.pair_concentration, args.clusters, args.switch_prob,
    )
    write_corpus(docs, args.out)
    log.info("wrote %d documents to %s", len(docs), args.out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .config import load_run_config
    from .encoder import ModelPair
    from .trainer import Trainer, TrainingAborted

    config = load_run_config(args.config)
    if args.output_dir:
        config.train.output_dir = args.output_dir
    if args.dry_run:
        counts = ModelPair.init(config.model, config.seed).parameter_counts()
        _dump({"parameter_counts": counts, "effective_config": config.to_dict()})
        return EXIT_OK
    out = Path(config.train.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective-config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    trainer = Trainer(config)
    if args.resume:
        trainer.load_checkpoint(args.resume)
        log.info("resumed at step %d", trainer.step_done)
    try:
        rows = trainer.run()
    except TrainingAborted as e:
        log.error("training aborted: %s (last good state: %s)", e, e.checkpoint)
        return EXIT_NUMERIC
    if rows:
        log.info("done: %d steps, final loss %.4f", rows[-1].step, rows[-1].loss_total)
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .finetune import FinetuneConfig, PdrConfig, finetune, load_tasks

    pdr = PdrConfig(alpha=args.pdr_alpha, c=args.pdr_c, perturbations_per_step=args.pdr_samples,
                    divergence=args.divergence, norm=args.norm)
    ft = FinetuneConfig(steps=args.steps, batch_size=args.batch_size, peak_lr=args.lr,
                        warmup_steps=args.warmup, pdr=pdr)
    tasks = load_tasks(args.tasks)
    seeds = [args.seed + i for i in range(args.seeds)]
    result = finetune(args.checkpoint, tasks, ft, seeds, workers=args.workers)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "task", "dev_accuracy", "pdr_alpha", "pdr_c"])
            for r in result["rows"]:
                w.writerow([r["seed"], r["task"], repr(r["dev_accuracy"]), args.pdr_alpha, args.pdr_c])
    _dump({name: {"mean_acc": v["mean_acc"], "std_acc": v["std_acc"]} for name, v in result["report"].items()})
    return EXIT_OK


def cmd_plan_memory(args) -> int:
    if args.params is not None:
        total = args.params
    elif args.preset is not None:
        total = zero_planner.preset_params(args.preset)
    else:
        raise ConfigError("give --preset or --params", "params")
    bytes_cfg = zero_planner.BytesConfig(args.param_bytes, args.grad_bytes, args.opt_bytes)
    p = zero_planner.plan(int(total), args.gpus, args.stage, bytes_cfg)
    _dump(p.to_dict(binary=args.gib))
    return EXIT_OK


def cmd_bench_fused(args) -> int:
    _dump(fusedops.bench(args.op, args.n, reps=args.reps, width=args.width, seed=args.seed))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import run_suite

    worst = run_suite(instances=args.instances, seed=args.seed)
    ok = all(e < args.tol for e in worst.values())
    _dump({"tolerance": args.tol, "instances": args.instances, "max_relative_error": worst, "passed": ok})
    return EXIT_OK if ok else EXIT_FAIL


# verify -----------------------------------------------------------------------------------------


def _verify_checks(quick: bool):
    """Yield ``(name, passed, detail)`` for every release check."""
    from .gradcheck import run_suite
    from .objectives import total_loss

    for op, err in sorted(run_suite(instances=5 if quick else 20, seed=0).items()):
        yield f"grad:{op}", err < 1e-6, f"max rel err {err:.2e}"

    got = total_loss(2.0, 0.1, 3.0, 50.0, "rtd_plus_sclm")
    yield "loss:total rtd+sclm", got == 10.0, f"{got!r} == 10.0"
    got = total_loss(2.0, 0.1, None, 50.0, "rtd_only")
    yield "loss:total rtd only", got == 7.0, f"{got!r} == 7.0"
    got = total_loss(2.0, 0.1, 3.0, 0.0, "rtd_plus_sclm")
    yield "loss:lambda zero", got == 5.0, f"{got!r} == 5.0"

    total = zero_planner.preset_params("XXL")
    for stage, expected in sorted(zero_planner.REFERENCE_XXL_256.items()):
        p = zero_planner.plan(total, 256, stage)
        computed = (p.params_bytes, p.grads_bytes, p.optimizer_bytes, p.total_bytes)
        ok = all(abs(c - e) <= 0.10 * e for c, e in zip(computed, expected))
        detail = " ".join(
            f"{k}={zero_planner.format_bytes(c)}/{zero_planner.format_bytes(e)}"
            for k, c, e in zip(("params", "grads", "optim", "total"), computed, expected)
        )
        yield f"planner:XXL/256 stage {stage}", ok, detail + " (computed/expected)"

    g = np.random.default_rng(0)
    bits = g.integers(0, 1 << 16, size=1 << 14, dtype=np.uint16)
    ref = bits.view(np.float16).astype(np.float32)
    got = fusedops.half_to_f32(bits)
    same = (got.view(np.uint32) == ref.view(np.uint32)) | (np.isnan(got) & np.isnan(ref))
    ok = bool(same.all())
    yield "half:decode", ok, "vs numpy float16"
    x = g.standard_normal(1 << 14).astype(np.float32) * np.float32(1e3)
    ok = np.array_equal(fusedops.f32_to_half(x), x.astype(np.float16).view(np.uint16))
    yield "half:encode", ok, "vs numpy float16"

    n, width = 1 << 14, 128
    x = fusedops.random_half_input(n, g, with_specials=True)
    for op in fusedops.OPS:
        spec = fusedops.OpSpec(op, width=width, key=fusedops.dropout_key(0))
        cu, cf = fusedops.AllocCounter(), fusedops.AllocCounter()
        yu, _ = fusedops.unfused_stable_op(x, spec, cu)
        yf, _ = fusedops.fused_stable_op(x, spec, cf)
        diff = fusedops.max_bit_diff(yu, yf)
        ok = diff == 0 and cf.n_buffers == 0 and cu.n_buffers >= 2
        yield f"fused:{op}", ok, f"bit diff {diff}, buffers fused={cf.n_buffers} unfused={cu.n_buffers}"


def cmd_verify(args) -> int:
    failed = 0
    for name, ok, detail in _verify_checks(args.quick):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", flush=True)
        failed += not ok
    print(f"{'all checks passed' if not failed else f'{failed} check(s) failed'}")
    return EXIT_OK if not failed else EXIT_FAIL


# parser -----------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denoise-lm", description="Model-generated denoising pretraining toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic order-2 Markov corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-docs", type=int, default=2000)
    p.add_argument("--min-len", type=int, default=64)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--alphabet", type=int, default=8, help="alphabet size (<= 26)")
    p.add_argument("--concentration", type=float, default=0.3, help="Dirichlet weight on the last character")
    p.add_argument("--pair-concentration", type=float, default=0.5, help="Dirichlet weight on the one before")
    p.add_argument("--clusters", type=int, default=2, help="letter clusters the chain tends to stay in")
    p.add_argument("--switch-prob", type=float, default=0.02, help="chance of jumping to another cluster")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="joint auxiliary + main pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", help="override train.output_dir")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--dry-run", action="store_true", help="print parameter counts and the effective config")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="classification fine-tuning with optional PDR")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--pdr-alpha", type=float, default=1.0)
    p.add_argument("--pdr-c", type=float, default=1e-3)
    p.add_argument("--pdr-samples", type=int, default=1, help="perturbations per step")
    p.add_argument("--divergence", choices=("forward_kl", "symmetric_kl"), default="forward_kl")
    p.add_argument("--norm", choices=("l2", "linf"), default="l2")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=30)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--csv", help="per-seed accuracy CSV")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("plan-memory", help="per-GPU model-state memory under ZeRO")
    p.add_argument("--preset", choices=sorted(zero_planner.PRESETS))
    p.add_argument("--params", type=float, help="total parameter count (overrides --preset)")
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--stage", type=int, choices=(0, 1, 2, 3), required=True)
    p.add_argument("--param-bytes", type=float, default=2.0)
    p.add_argument("--grad-bytes", type=float, default=2.0)
    p.add_argument("--opt-bytes", type=float, default=16.0)
    p.add_argument("--gib", action="store_true", help="binary units")
    p.set_defaults(fn=cmd_plan_memory)

    p = sub.add_parser("bench-fused", help="fused vs unfused half-precision stable ops")
    p.add_argument("--op", choices=fusedops.OPS, required=True)
    p.add_argument("--n", type=int, default=1 << 20)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench_fused)

    p = sub.add_parser("grad-check", help="finite-difference check of every autodiff op")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("verify", help="release checks, one line each")
    p.add_argument("--quick", action="store_true", help="fewer gradient-check instances")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        log.error("config error at %s: %s", e.key, e)
        return EXIT_CONFIG
    except (DataError, KeyError, ValueError, OSError) as e:
        log.error("%s", e)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
