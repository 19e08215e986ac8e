"""Command-line surface: data generation, training, evaluation, sweeps,
gradient checks, speed benchmarks and reporting.

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
All artifacts are written atomically (temp file + rename) under --outdir.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from snislm.config import ConfigError, Settings, load_settings, write_resolved
from snislm.corpus import (
    generate_synthetic_task,
    load_task,
    read_corpus_text,
    sample_corpus,
    save_task,
    write_corpus_text,
)
from snislm.evaluation import MetricsRow, read_metrics_csv, write_metrics_csv
from snislm.gradcheck import check_criterion
from snislm.model import load_checkpoint, save_checkpoint
from snislm.plotting import render_report_figures
from snislm.training import bench_speed, evaluate, sweep_k, train

GRAD_TOLERANCE = 1e-5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snislm",
        description="Sampling-based training criteria for small language models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (repeatable, applied after the file)",
        )
        p.add_argument("--outdir", default="out", help="directory for all outputs")
        p.add_argument("--seed", type=int, default=None, help="override the seed key")

    add_common(sub.add_parser("gen-data", help="generate a synthetic task and corpus"))
    add_common(sub.add_parser("train", help="train one criterion on a corpus"))
    add_common(sub.add_parser("eval", help="evaluate a checkpoint"))
    add_common(sub.add_parser("sweep-k", help="train once per K in the Ks list"))
    add_common(sub.add_parser("grad-check", help="finite-difference gradient verification"))
    add_common(sub.add_parser("bench", help="measure seconds per training batch"))
    report = sub.add_parser("report", help="summarize a metrics CSV")
    report.add_argument("csv", help="metrics CSV produced by train or sweep-k")
    add_common(report)
    return parser


def _input_path(settings: Settings, key: str) -> Path:
    value = getattr(settings, key)
    if not value:
        raise ConfigError(f"key {key!r} is required for this command")
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"key {key!r}: file not found: {path}")
    return path


def _load_corpus_and_task(settings: Settings):
    task = None
    if settings.task:
        task = load_task(_input_path(settings, "task"))
    vocab_size = task.vocab_size if task is not None else settings.C
    corpus = read_corpus_text(_input_path(settings, "corpus"), vocab_size)
    return corpus, task


def cmd_gen_data(settings: Settings, outdir: Path) -> int:
    task = generate_synthetic_task(
        settings.C, settings.order, settings.concentration, settings.seed, settings.state_cap
    )
    corpus = sample_corpus(task, settings.tokens, settings.seed)
    outdir.mkdir(parents=True, exist_ok=True)
    save_task(task, outdir / "task.bin")
    write_corpus_text(corpus, outdir / "corpus.txt")
    write_resolved(settings, outdir)
    print(f"task: {outdir / 'task.bin'} ({task.num_states} states, C={task.vocab_size})")
    print(f"corpus: {outdir / 'corpus.txt'} ({len(corpus)} tokens)")
    return 0


def cmd_train(settings: Settings, outdir: Path) -> int:
    corpus, task = _load_corpus_and_task(settings)
    config = settings.to_train_config()
    result = train(config, corpus, task)
    outdir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result.metrics, outdir / "metrics.csv")
    save_checkpoint(result.params, outdir / "model.bin", result.adam_state)
    write_resolved(settings, outdir)
    if result.metrics:
        last = result.metrics[-1]
        print(
            f"{last.criterion} K={last.k}: ppl={last.eval_ppl:.4f} "
            f"deficit={last.norm_deficit:.4f} loss={last.train_loss:.4f}"
        )
    print(f"metrics: {outdir / 'metrics.csv'}")
    print(f"checkpoint: {outdir / 'model.bin'}")
    return 0


def cmd_eval(settings: Settings, outdir: Path) -> int:
    params = load_checkpoint(_input_path(settings, "model"))
    task = load_task(_input_path(settings, "task")) if settings.task else None
    corpus = read_corpus_text(_input_path(settings, "corpus"), params.vocab_size)
    config = settings.to_train_config()
    row = evaluate(config, params, corpus, task)
    outdir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv([row], outdir / "eval.csv")
    write_resolved(settings, outdir)
    tv = "" if row.posterior_tv is None else f" tv={row.posterior_tv:.4f}"
    print(f"{row.criterion}: ppl={row.eval_ppl:.4f} deficit={row.norm_deficit:.4f}{tv}")
    return 0


def cmd_sweep_k(settings: Settings, outdir: Path) -> int:
    corpus, task = _load_corpus_and_task(settings)
    config = settings.to_train_config()
    rows = sweep_k(config, corpus, settings.k_list(), task)
    outdir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, outdir / "sweep.csv")
    write_resolved(settings, outdir)
    _print_table(rows)
    print(f"sweep: {outdir / 'sweep.csv'}")
    return 0


def cmd_grad_check(settings: Settings, outdir: Path) -> int:
    kind = settings.resolved_criterion()
    report = check_criterion(kind, instances=50, seed=settings.seed)
    print(
        f"{kind.name}: max relative gradient error {report.max_rel_error:.3e} "
        f"over {report.entries_checked} entries in {report.instances} instances"
    )
    if report.max_rel_error > GRAD_TOLERANCE:
        print(f"FAIL: exceeds tolerance {GRAD_TOLERANCE:.0e}", file=sys.stderr)
        return 3
    print(f"OK: within tolerance {GRAD_TOLERANCE:.0e}")
    return 0


def cmd_bench(settings: Settings, outdir: Path) -> int:
    config = settings.to_train_config()
    sec = bench_speed(
        config,
        settings.C,
        warmup_batches=settings.warmup_batches,
        measure_batches=settings.bench_batches,
        threads=settings.threads,
    )
    outdir.mkdir(parents=True, exist_ok=True)
    write_resolved(settings, outdir)
    bench_path = outdir / "bench.txt"
    tmp = bench_path.with_name(bench_path.name + ".tmp")
    tmp.write_text(
        f"criterion = {config.criterion.name}\nK = {config.effective_k}\n"
        f"sec_per_batch = {sec!r}\n",
        encoding="utf-8",
    )
    tmp.replace(bench_path)
    print(f"{config.criterion.name} K={config.effective_k}: {sec:.6f} s/batch")
    return 0


def _final_rows(rows: list[MetricsRow]) -> list[MetricsRow]:
    """Last epoch per (criterion, K), sorted by (criterion, K)."""
    chosen: dict[tuple[str, int], MetricsRow] = {}
    for row in rows:
        key = (row.criterion, row.k)
        if key not in chosen or row.epoch >= chosen[key].epoch:
            chosen[key] = row
    return [chosen[key] for key in sorted(chosen)]


def _print_table(rows: list[MetricsRow]) -> None:
    print(f"{'criterion':<10} {'K':>6} {'PPL':>12} {'deficit':>10} {'sec/batch':>11}")
    for row in rows:
        print(
            f"{row.criterion:<10} {row.k:>6d} {row.eval_ppl:>12.4f} "
            f"{row.norm_deficit:>10.4f} {row.sec_per_batch:>11.6f}"
        )


def cmd_report(csv_path: str, settings: Settings, outdir: Path) -> int:
    rows = read_metrics_csv(Path(csv_path))
    if not rows:
        print("no rows")
        return 0
    final = _final_rows(rows)
    _print_table(final)
    outdir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(final, outdir / "summary.csv")
    figures = render_report_figures(final, outdir)
    print(f"summary: {outdir / 'summary.csv'}")
    for fig in figures:
        print(f"figure: {fig}")
    return 0


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = load_settings(args.config, args.overrides, args.seed)
        outdir = Path(args.outdir)
        if args.command == "gen-data":
            return cmd_gen_data(settings, outdir)
        if args.command == "train":
            return cmd_train(settings, outdir)
        if args.command == "eval":
            return cmd_eval(settings, outdir)
        if args.command == "sweep-k":
            return cmd_sweep_k(settings, outdir)
        if args.command == "grad-check":
            return cmd_grad_check(settings, outdir)
        if args.command == "bench":
            return cmd_bench(settings, outdir)
        if args.command == "report":
            return cmd_report(args.csv, settings, outdir)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
