"""Command-line entry point.

    mambadesk train     [CONFIG] [--config PATH] [--out DIR] [--seed N] [--threads N]
    mambadesk gradcheck [CONFIG] ...
    mambadesk bench     [CONFIG] ...
    mambadesk eval CHECKPOINT [CONFIG] ...

Each run writes into a fresh timestamped directory below ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod

log = logging.getLogger("mambadesk")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="config_flag", metavar="PATH", help="run configuration file")
    common.add_argument("--out", default="runs", metavar="DIR", help="parent directory for run outputs")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--threads", type=int, help="overrides run.threads")

    p = argparse.ArgumentParser(prog="mambadesk", description="Selective SSM training, gradient checks and scaling benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("train", "train a model on a synthetic task"),
        ("gradcheck", "finite-difference check of every parameter gradient"),
        ("bench", "time/memory scaling of the SSM scan vs attention"),
    ):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("config", nargs="?", help="run configuration file")
    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the configured task")
    sp.add_argument("checkpoint")
    sp.add_argument("config", nargs="?")
    return p


def fresh_dir(parent: str, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(parent) / f"{command}-{stamp}"
    path, n = base, 1
    while path.exists():
        path = Path(f"{base}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def _set_threads(n: int) -> None:
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def cmd_train(cfg: cfgmod.Config, out: Path) -> int:
    from .blocks import save_model
    from .report import plot_metrics
    from .training import TrainRun, train

    run = TrainRun(task=cfg.task, model=cfg.model, optim=cfg.optim, loop=cfg.loop, seed=cfg.run.seed)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "split", "loss", "accuracy"])

        def on_eval(row):
            w.writerow([row["step"], row["split"], f"{row['loss']:.6f}", f"{row['accuracy']:.6f}"])
            fh.flush()

        train(run, on_eval=on_eval)
    save_model(out / "model.ckpt", run.trained)
    plot_metrics(run.history, out / "metrics.png")
    final = run.final("eval")
    print(f"steps {run.steps_done}  eval loss {final['loss']:.4f}  eval accuracy {final['accuracy']:.4f}")
    print(f"outputs in {out}")
    return 0


def cmd_gradcheck(cfg: cfgmod.Config, out: Path) -> int:
    from .blocks import TokenModel
    from .training import grad_check, make_batch
    from .training.tasks import TaskSpec

    gc = cfg.gradcheck
    model_cfg = cfg.model
    model_cfg.dropout_p = 0.0
    task = cfg.task
    kind = "seq_reverse" if model_cfg.arch == "seq2seq" else ("induction_heads" if task.kind.startswith("seq") else task.kind)
    spec = TaskSpec(kind=kind, seq_len=gc.seq_len, vocab_size=model_cfg.vocab_size, n_memorize=min(task.n_memorize, gc.seq_len - 1))
    model = TokenModel(model_cfg, seed=cfg.run.seed)
    batch = make_batch(spec, np.random.default_rng(cfg.run.seed), gc.batch_size)
    res = grad_check(model, batch, eps=gc.eps, max_elements=gc.max_elements or None, seed=cfg.run.seed, objective=gc.objective, order=gc.order)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "rel_err"])
        for name, err in res.per_param.items():
            w.writerow([name, f"{err:.3e}"])
    print(f"max rel err {res.max_rel_err:.3e}  worst parameter {res.worst_param}")
    return 0 if res.max_rel_err < gc.threshold else 1


def cmd_bench(cfg: cfgmod.Config, out: Path) -> int:
    from .bench import bench_scaling, fit_loglog_slope, write_csv
    from .report import plot_bench

    b = cfg.bench
    rows = bench_scaling(
        b.lengths,
        d_model=b.d_model,
        trials=b.trials,
        n_state=b.n_state,
        chunk=b.chunk,
        warmup=b.warmup,
        attention_cap_bytes=b.attention_cap_bytes,
        seed=cfg.run.seed,
    )
    write_csv(out / "bench.csv", rows)
    plot_bench(rows, out / "bench.png")
    lines = []
    for field in ("wall_time_ns", "peak_bytes"):
        try:
            for kernel, s in sorted(fit_loglog_slope(rows, field).items()):
                lines.append(f"{field} slope {kernel}: {s:.3f}")
        except ValueError as exc:
            lines.append(f"{field}: {exc}")
    lines += [f"flagged {r.kernel} L={r.seq_len}: {r.status}" for r in rows if r.status != "ok"]
    (out / "bench_summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"outputs in {out}")
    return 0


def cmd_eval(cfg: cfgmod.Config, out: Path, checkpoint: str) -> int:
    from .blocks import load_model
    from .training import evaluate, make_batch

    model = load_model(checkpoint)
    batch = make_batch(cfg.task, np.random.default_rng(cfg.loop.eval_seed), cfg.loop.eval_size)
    loss, acc = evaluate(model, batch)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "loss", "accuracy"])
        w.writerow([checkpoint, f"{loss:.6f}", f"{acc:.6f}"])
    print(f"eval loss {loss:.4f}  eval accuracy {acc:.4f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    path = args.config_flag or args.config
    try:
        cfg = cfgmod.load(path) if path else cfgmod.Config()
    except (cfgmod.ConfigError, OSError) as exc:
        print(f"mambadesk: bad config: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        print("accepted keys:\n" + cfgmod.schema(), file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.threads is not None:
        cfg.run.threads = args.threads
    _set_threads(cfg.run.threads)
    out = fresh_dir(args.out, args.command)
    (out / "run.cfg").write_text(cfgmod.dump(cfg))
    try:
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out)
        if args.command == "bench":
            return cmd_bench(cfg, out)
        return cmd_eval(cfg, out, args.checkpoint)
    except Exception as exc:  # noqa: BLE001
        log.error("mambadesk %s failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
