#!/usr/bin/env python3
"""
Speech SSL pre-training toolkit

Commands:
    make-toy-corpus - Generate a labeled synthetic speech corpus with matched noise
    pretrain        - Masked prediction + denoising distillation pre-training
    probe           - Frozen-encoder probing of a checkpoint
    ablate          - Pre-train and probe a grid of configurations
    replay          - Re-run a command from its manifest

Usage:
    # Build a corpus, pre-train, probe
    python -m src.main make-toy-corpus --out ~/toy --seed 7 --n-clips 64
    python -m src.main pretrain --corpus ~/toy --out ~/run --alpha 0.2 --lambda-off 1
    python -m src.main probe --checkpoint ~/run/checkpoints/last.pt --corpus ~/toy --out ~/probe

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .ablation import AblationGrid, AblationResult, parse_float_list, parse_patch_sizes, run_ablation
from .config import MANIFEST_FILE, RunManifest, load_config_file, resolve_train_config, to_flat
from .corpus import (
    DEFAULT_TASKS,
    ToyCorpusSpec,
    generate_toy_corpus,
    load_corpus,
    parse_task_list,
    write_toy_corpus,
)
from .errors import ConfigError
from .evaluation import PROBE_MODES, EvalResult, ProbeConfig, run_eval_suite
from .training import CHECKPOINT_DIR, PretrainResult, restore_model, run_pretraining

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _fail(e: Exception) -> int:
    """Print an error and map it to an exit code."""
    print(f"Error: {e}", file=sys.stderr)
    if isinstance(e, (ConfigError, FileNotFoundError, NotADirectoryError)):
        return EXIT_USAGE
    return EXIT_FAILURE


def print_corpus_summary(spec: ToyCorpusSpec, out_dir: Path) -> None:
    """Print a summary of a generated corpus."""
    print("\n" + "=" * 60)
    print("CORPUS SUMMARY")
    print("=" * 60)
    print(f"  Speech clips: {spec.n_clips} x {spec.duration_s:.2f}s")
    print(f"  Noise clips: {spec.n_noise_clips} x {spec.noise_duration_s:.2f}s")
    for task in spec.tasks:
        print(f"  Task: {task.name} ({task.n_classes} classes)")
    print(f"  Written to: {out_dir}")
    print("=" * 60)


def print_pretrain_summary(result: PretrainResult) -> None:
    """Print a summary of a pre-training run."""
    print("\n" + "=" * 60)
    print("PRE-TRAINING SUMMARY")
    print("=" * 60)
    print(f"  Steps: {result.steps}")
    print(f"  Epochs completed: {result.epochs_completed}")
    if result.records:
        first, last = result.records[0], result.records[-1]
        print(f"  l_total: {first.losses.l_total:.4f} (step {first.step}) -> "
              f"{last.losses.l_total:.4f} (step {last.step})")
    if result.stats is not None:
        print(f"  Normalization: mean={result.stats.mean:.4f} std={result.stats.std:.4f}")
    if result.final_checkpoint:
        print(f"  Final checkpoint: {result.final_checkpoint}")
    print(f"  Log: {result.log_path}")

    if result.errors:
        print(f"  Errors: {len(result.errors)}")
        for error in result.errors[:10]:
            print(f"    - {error}")

    print("=" * 60)


def print_probe_summary(result: EvalResult) -> None:
    """Print a summary of a probing run."""
    print("\n" + "=" * 60)
    print("PROBE SUMMARY")
    print("=" * 60)
    if not result.reports:
        print("  No probes were run")
    for report in result.reports:
        print(f"  {report.task:<10} {report.mode:<13} accuracy={report.accuracy:.4f} (n_test={report.n_test})")
    if result.results_path:
        print(f"  Results: {result.results_path}")

    if result.errors:
        print(f"  Errors: {len(result.errors)}")
        for error in result.errors[:10]:
            print(f"    - {error}")

    print("=" * 60)


def print_ablation_summary(result: AblationResult) -> None:
    """Print a summary of an ablation grid."""
    failed = [c for c in result.cells if c.status != "ok"]

    print("\n" + "=" * 60)
    print("ABLATION SUMMARY")
    print("=" * 60)
    print(f"  Cells: {len(result.cells)}")
    if failed:
        print(f"  Failed cells: {len(failed)}")
    for cell in result.cells:
        scores = ", ".join(f"{k}={v:.3f}" for k, v in cell.accuracies.items())
        print(f"    - {cell.cell:<16} {cell.status:<7} {scores}")
    if result.summary_path:
        print(f"  Summary: {result.summary_path}")

    if result.errors:
        print(f"  Errors: {len(result.errors)}")
        for error in result.errors[:10]:
            print(f"    - {error}")
        if len(result.errors) > 10:
            print(f"    ... and {len(result.errors) - 10} more errors")

    print("=" * 60)


def _train_overrides(args: argparse.Namespace) -> dict:
    """Flat config keys set on the command line (None means not given)."""
    return {
        "alpha": args.alpha,
        "patch_freq": args.patch_freq,
        "patch_time": args.patch_time,
        "input_duration_s": args.duration,
        "lambda_m2d": args.lambda_m2d,
        "lambda_off": args.lambda_off,
        "tau": args.tau,
        "seed": args.seed,
        "teacher": args.teacher,
        "epochs": args.epochs,
        "warmup_epochs": args.warmup_epochs,
        "batch_size": args.batch_size,
        "base_lr": args.lr,
        "preset": args.preset,
        "depth": args.depth,
        "embed_dim": args.embed_dim,
        "predictor": args.predictor,
    }


def _write_manifest(args: argparse.Namespace, out_dir: Path, config: dict, seed: int,
                    inputs: dict, pattern: str = "**/*") -> Path:
    manifest = RunManifest(
        command=args.command,
        argv=list(args.argv),
        config=config,
        seed=seed,
        inputs={k: str(v) for k, v in inputs.items() if v is not None},
        outputs={"out": str(out_dir)},
    )
    manifest.hash_outputs(out_dir, pattern)
    return manifest.save(out_dir / MANIFEST_FILE)


def cmd_make_toy_corpus(args: argparse.Namespace) -> int:
    """Handle the make-toy-corpus subcommand."""
    try:
        tasks = parse_task_list(args.tasks) if args.tasks else DEFAULT_TASKS
        spec = ToyCorpusSpec(
            n_clips=args.n_clips,
            duration_s=args.duration,
            tasks=tasks,
            n_noise_clips=args.n_noise_clips,
            noise_duration_s=args.noise_duration,
            seed=args.seed,
        )
    except ConfigError as e:
        return _fail(e)

    print("Toy Corpus Generator")
    print(f"  Output directory: {args.out}")
    print(f"  Seed: {spec.seed}")
    print()

    try:
        write_toy_corpus(generate_toy_corpus(spec), args.out)
        config = {
            "n_clips": spec.n_clips,
            "duration_s": spec.duration_s,
            "tasks": [f"{t.name}:{t.n_classes}" for t in spec.tasks],
            "n_noise_clips": spec.n_noise_clips,
            "noise_duration_s": spec.noise_duration_s,
            "sample_rate": spec.sample_rate,
        }
        _write_manifest(args, args.out, config, spec.seed, {})
        print_corpus_summary(spec, args.out)
        return EXIT_OK

    except Exception as e:
        return _fail(e)


def cmd_pretrain(args: argparse.Namespace) -> int:
    """Handle the pretrain subcommand."""
    if not args.corpus.exists():
        print(f"Error: Corpus directory not found: {args.corpus}", file=sys.stderr)
        return EXIT_USAGE
    if not args.corpus.is_dir():
        print(f"Error: Not a directory: {args.corpus}", file=sys.stderr)
        return EXIT_USAGE

    try:
        cfg = resolve_train_config(args.config, _train_overrides(args))
    except (ConfigError, FileNotFoundError) as e:
        return _fail(e)

    obj = cfg.objective
    print("Pre-training")
    print(f"  Corpus: {args.corpus}")
    print(f"  Output directory: {args.out}")
    print(f"  Encoder: {cfg.encoder.preset} (depth {cfg.encoder.depth}, d {cfg.encoder.embed_dim})")
    print(f"  Patch: {cfg.patch.patch_freq}x{cfg.patch.patch_time}, input {cfg.input_duration_s:.2f}s")
    print(f"  Losses: lambda_m2d={obj.lambda_m2d} lambda_off={obj.lambda_off} (teacher {cfg.teacher})")
    print(f"  alpha={cfg.alpha} tau={cfg.ema.tau} seed={cfg.seed}")
    if args.resume:
        print("  Mode: RESUME")
    print()

    try:
        corpus = load_corpus(
            args.corpus,
            cfg.frontend,
            noise_dir=args.noise,
            max_workers=args.workers,
            progress_callback=print if args.verbose else None,
        )
        result = run_pretraining(cfg, corpus, args.out, resume=args.resume, verbose=args.verbose)
        _write_manifest(
            args, args.out, to_flat(cfg), cfg.seed,
            {"corpus": args.corpus, "noise": args.noise, "config": args.config},
            pattern=f"{CHECKPOINT_DIR}/*.pt",
        )
        print_pretrain_summary(result)
        return EXIT_OK if not result.errors else EXIT_FAILURE

    except Exception as e:
        return _fail(e)


def cmd_probe(args: argparse.Namespace) -> int:
    """Handle the probe subcommand."""
    if not args.checkpoint.exists():
        print(f"Error: Checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return EXIT_USAGE

    modes = PROBE_MODES if args.mode == "both" else (args.mode,)
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()] if args.tasks else None
    try:
        probe_cfg = ProbeConfig(epochs=args.probe_epochs, seed=args.seed)
    except ConfigError as e:
        return _fail(e)

    print("Frozen-encoder Probing")
    print(f"  Checkpoint: {args.checkpoint}")
    print(f"  Corpus: {args.corpus}")
    print(f"  Modes: {', '.join(modes)}")
    print(f"  Tasks: {', '.join(tasks) if tasks else 'all'}")
    print()

    try:
        state, train_cfg, stats = restore_model(args.checkpoint, with_teacher=False)
        corpus = load_corpus(args.corpus, train_cfg.frontend, max_workers=args.workers)
        result = run_eval_suite(
            args.checkpoint,
            corpus,
            tasks,
            probe_cfg,
            out_dir=args.out,
            modes=modes,
            verbose=args.verbose,
            max_workers=args.workers,
            restored=(state, train_cfg, stats),
        )
        _write_manifest(
            args, args.out,
            {"modes": list(modes), "tasks": tasks, "probe_epochs": probe_cfg.epochs},
            probe_cfg.seed,
            {"checkpoint": args.checkpoint, "corpus": args.corpus},
        )
        print_probe_summary(result)
        return EXIT_OK if not result.errors else EXIT_FAILURE

    except Exception as e:
        return _fail(e)


def cmd_ablate(args: argparse.Namespace) -> int:
    """Handle the ablate subcommand."""
    if not args.corpus.exists():
        print(f"Error: Corpus directory not found: {args.corpus}", file=sys.stderr)
        return EXIT_USAGE

    try:
        grid = AblationGrid(
            alphas=parse_float_list(args.alphas) if args.alphas else (),
            patch_sizes=parse_patch_sizes(args.patch_sizes) if args.patch_sizes else (),
            durations=parse_float_list(args.durations) if args.durations else (),
            task_rows=tuple(r.strip() for r in args.task_rows.split(",") if r.strip())
            if args.task_rows else (),
        )
        base = load_config_file(args.config) if args.config else {}
        base.update({k: v for k, v in _train_overrides(args).items() if v is not None})
        base_cfg = resolve_train_config(None, base)
        probe_cfg = ProbeConfig(epochs=args.probe_epochs, seed=base_cfg.seed)
    except (ConfigError, FileNotFoundError) as e:
        return _fail(e)

    modes = PROBE_MODES if args.mode == "both" else (args.mode,)
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()] if args.tasks else None
    cells = grid.cells()
    print("Ablation Grid")
    print(f"  Corpus: {args.corpus}")
    print(f"  Output directory: {args.out}")
    print(f"  Probe modes: {', '.join(modes)}")
    print(f"  Cells: {len(cells)}")
    for cell in cells:
        print(f"    - {cell.name}")
    if args.parallel:
        print(f"  Mode: PARALLEL ({args.workers} concurrent)")
    print()

    try:
        corpus = load_corpus(args.corpus, base_cfg.frontend, max_workers=args.workers)
        result = run_ablation(
            base,
            grid,
            corpus,
            args.out,
            parallel=args.parallel,
            max_workers=args.workers,
            probe_cfg=probe_cfg,
            tasks=tasks,
            modes=modes,
            verbose=args.verbose,
        )
        _write_manifest(
            args, args.out, to_flat(base_cfg), base_cfg.seed,
            {"corpus": args.corpus, "config": args.config},
            pattern="**/checkpoints/last.pt",
        )
        print_ablation_summary(result)
        return EXIT_OK

    except Exception as e:
        return _fail(e)


def cmd_replay(args: argparse.Namespace) -> int:
    """Handle the replay subcommand."""
    try:
        manifest = RunManifest.load(args.manifest)
    except (ConfigError, FileNotFoundError) as e:
        return _fail(e)
    if manifest.command == "replay" or not manifest.argv:
        return _fail(ConfigError(f"{args.manifest} does not record a replayable command"))

    print(f"Replaying: {' '.join(manifest.argv)}")
    return main(manifest.argv)


def _add_train_arguments(parser: argparse.ArgumentParser) -> None:
    """Flags shared by pretrain and ablate; unset flags keep config-file values."""
    parser.add_argument("--config", type=Path, default=None, metavar="FILE",
                        help="YAML config file (flags override its values)")
    parser.add_argument("--alpha", type=float, default=None,
                        help="Dataset noise ratio in [0, 1] (default: 0.2)")
    parser.add_argument("--patch-freq", type=int, default=None, metavar="BINS",
                        help="Patch height in mel bins (default: 80)")
    parser.add_argument("--patch-time", type=int, default=None, metavar="FRAMES",
                        help="Patch width in frames (default: 4)")
    parser.add_argument("--duration", type=float, default=None, metavar="SECONDS",
                        help="Input duration T (default: 2.08)")
    parser.add_argument("--lambda-m2d", type=float, default=None,
                        help="Weight of the masked-prediction loss (default: 1)")
    parser.add_argument("--lambda-off", type=float, default=None,
                        help="Weight of the distillation loss (default: 1)")
    parser.add_argument("--tau", type=float, default=None,
                        help="EMA decay of the target encoder (default: 0.996)")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (default: 0)")
    parser.add_argument("--teacher", type=str, default=None, metavar="SPEC",
                        help="meanpool, meanpool-K, random, archive:PATH or none (default: meanpool)")
    parser.add_argument("--epochs", type=int, default=None, help="Training epochs (default: 10)")
    parser.add_argument("--warmup-epochs", type=int, default=None,
                        help="Linear warm-up epochs (default: 3)")
    parser.add_argument("--batch-size", type=int, default=None, help="Batch size (default: 8)")
    parser.add_argument("--lr", type=float, default=None, help="Base learning rate (default: 3e-4)")
    parser.add_argument("--preset", type=str, default=None, choices=["tiny", "base"],
                        help="Encoder preset (default: tiny)")
    parser.add_argument("--depth", type=int, default=None, help="Override encoder depth")
    parser.add_argument("--embed-dim", type=int, default=None, help="Override encoder width")
    parser.add_argument("--predictor", type=str, default=None, choices=["transformer", "mlp"],
                        help="Predictor kind (default: transformer)")


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser with subcommands."""
    parser = CliParser(
        description="Speech SSL pre-training toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # make-toy-corpus subcommand
    corpus_parser = subparsers.add_parser(
        "make-toy-corpus",
        help="Generate a labeled synthetic speech corpus with matched noise",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s --out ~/toy --seed 7 --n-clips 64
  %(prog)s --out ~/toy --tasks pitch:2,timbre:3
        """,
    )
    corpus_parser.add_argument("--out", "-o", type=Path, required=True, metavar="DIR",
                               help="Output directory (created if missing)")
    corpus_parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    corpus_parser.add_argument("--n-clips", type=int, default=64, metavar="N",
                               help="Number of speech clips (default: 64)")
    corpus_parser.add_argument("--duration", type=float, default=2.5, metavar="SECONDS",
                               help="Speech clip duration (default: 2.5)")
    corpus_parser.add_argument("--n-noise-clips", type=int, default=16, metavar="N",
                               help="Number of noise clips (default: 16)")
    corpus_parser.add_argument("--noise-duration", type=float, default=4.0, metavar="SECONDS",
                               help="Noise clip duration (default: 4.0)")
    corpus_parser.add_argument("--tasks", type=str, default=None, metavar="TASKS",
                               help="Tasks and class counts, e.g. pitch:2,timbre:3,emotion:2")

    # pretrain subcommand
    pretrain_parser = subparsers.add_parser(
        "pretrain",
        help="Pre-train an encoder",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s --corpus ~/toy --out ~/run_a --lambda-off 0 --alpha 0
  %(prog)s --corpus ~/toy --out ~/run_c --lambda-m2d 0 --lambda-off 1 --alpha 0.2
  %(prog)s --corpus ~/toy --out ~/run_e --alpha 0.2 --lambda-m2d 1 --lambda-off 1
        """,
    )
    pretrain_parser.add_argument("--corpus", "-c", type=Path, required=True, metavar="DIR",
                                 help="Corpus directory with speech/ (and noise/)")
    pretrain_parser.add_argument("--noise", type=Path, default=None, metavar="DIR",
                                 help="Noise clips directory (default: CORPUS/noise)")
    pretrain_parser.add_argument("--out", "-o", type=Path, required=True, metavar="DIR",
                                 help="Output directory for logs and checkpoints")
    pretrain_parser.add_argument("--resume", action="store_true",
                                 help="Continue from OUT/checkpoints/last.pt")
    pretrain_parser.add_argument("--workers", "-w", type=int, default=4, metavar="N",
                                 help="Concurrent clip loaders (default: 4)")
    pretrain_parser.add_argument("--verbose", "-v", action="store_true",
                                 help="Show detailed progress")
    _add_train_arguments(pretrain_parser)

    # probe subcommand
    probe_parser = subparsers.add_parser(
        "probe",
        help="Probe a frozen checkpoint on the toy tasks",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s --checkpoint ~/run/checkpoints/last.pt --corpus ~/toy --out ~/probe
  %(prog)s --checkpoint ~/run/checkpoints/last.pt --corpus ~/toy --out ~/probe --mode final-layer
        """,
    )
    probe_parser.add_argument("--checkpoint", type=Path, required=True, metavar="FILE",
                              help="Checkpoint written by pretrain")
    probe_parser.add_argument("--corpus", "-c", type=Path, required=True, metavar="DIR",
                              help="Labeled corpus directory")
    probe_parser.add_argument("--out", "-o", type=Path, required=True, metavar="DIR",
                              help="Output directory for results.csv")
    probe_parser.add_argument("--mode", type=str, default="both",
                              choices=["both", *PROBE_MODES],
                              help="Probe protocol (default: both)")
    probe_parser.add_argument("--tasks", type=str, default=None, metavar="TASKS",
                              help="Comma-separated task names (default: all)")
    probe_parser.add_argument("--probe-epochs", type=int, default=300, metavar="N",
                              help="Probe training epochs (default: 300)")
    probe_parser.add_argument("--seed", type=int, default=0, help="Split/probe seed (default: 0)")
    probe_parser.add_argument("--workers", "-w", type=int, default=4, metavar="N",
                              help="Concurrent clip loaders (default: 4)")
    probe_parser.add_argument("--verbose", "-v", action="store_true",
                              help="Show detailed progress")

    # ablate subcommand
    ablate_parser = subparsers.add_parser(
        "ablate",
        help="Pre-train and probe a grid of configurations",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s --corpus ~/toy --out ~/grid --alphas 0,0.2,1.0
  %(prog)s --corpus ~/toy --out ~/grid --patch-sizes 80x2,80x4,40x4
  %(prog)s --corpus ~/toy --out ~/grid --durations 2.08,4.00 --task-rows a,b,c,d,e
  %(prog)s --corpus ~/toy --out ~/grid --alphas 0,0.2 --mode both
        """,
    )
    ablate_parser.add_argument("--corpus", "-c", type=Path, required=True, metavar="DIR",
                               help="Labeled corpus directory")
    ablate_parser.add_argument("--out", "-o", type=Path, required=True, metavar="DIR",
                               help="Output directory for cells and summary.csv")
    ablate_parser.add_argument("--alphas", type=str, default=None, metavar="LIST",
                               help="Noise ratios, e.g. 0,0.2,1.0")
    ablate_parser.add_argument("--patch-sizes", type=str, default=None, metavar="LIST",
                               help="Patch sizes, e.g. 80x2,80x4,40x4")
    ablate_parser.add_argument("--durations", type=str, default=None, metavar="LIST",
                               help="Input durations in seconds, e.g. 2.08,4.00")
    ablate_parser.add_argument("--task-rows", type=str, default=None, metavar="ROWS",
                               help="Loss/noise task rows among a,b,c,d,e")
    ablate_parser.add_argument("--tasks", type=str, default=None, metavar="TASKS",
                               help="Comma-separated probe tasks (default: all)")
    ablate_parser.add_argument("--mode", type=str, default="weighted-sum",
                               choices=["both", *PROBE_MODES],
                               help="Probe protocol per cell (default: weighted-sum)")
    ablate_parser.add_argument("--probe-epochs", type=int, default=300, metavar="N",
                               help="Probe training epochs (default: 300)")
    ablate_parser.add_argument("--parallel", action="store_true",
                               help="Run cells concurrently")
    ablate_parser.add_argument("--workers", "-w", type=int, default=2, metavar="N",
                               help="Concurrent cells / clip loaders (default: 2)")
    ablate_parser.add_argument("--verbose", "-v", action="store_true",
                               help="Show detailed progress")
    _add_train_arguments(ablate_parser)

    # replay subcommand
    replay_parser = subparsers.add_parser(
        "replay",
        help="Re-run the command recorded in a manifest",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s --manifest ~/run/manifest.json
        """,
    )
    replay_parser.add_argument("--manifest", type=Path, required=True, metavar="FILE",
                               help="manifest.json written by another command")

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Main entry point."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = create_parser()
    args = parser.parse_args(argv)
    args.argv = argv

    if args.command is None:
        parser.print_help()
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    if args.command == "make-toy-corpus":
        return cmd_make_toy_corpus(args)
    elif args.command == "pretrain":
        return cmd_pretrain(args)
    elif args.command == "probe":
        return cmd_probe(args)
    elif args.command == "ablate":
        return cmd_ablate(args)
    elif args.command == "replay":
        return cmd_replay(args)
    else:
        parser.print_help()
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
