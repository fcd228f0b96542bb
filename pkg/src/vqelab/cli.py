"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 validation or dependency error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import FormatError, save_checkpoint
from .config import ConfigFileError, load_config
from .dataset import SplitError, ValidationError, corpus_stats, load_corpus, write_stats_csv, write_summary_csv
from .metrics import COLUMNS, CIDER_SCALE, AlignmentError
from .metrics import DataError as MetricDataError
from .pipeline import (
    ADAPTER_FILE,
    CHECKPOINTS,
    VOCAB_FILE,
    CompatibilityError,
    DependencyError,
    evaluate_run,
    merge_adapter,
    new_run_dir,
    train_stage,
)
from .synthetic import generate_synthetic_corpus

log = logging.getLogger("vqelab")

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID = 0, 1, 2
USER_ERRORS = (
    ValidationError,
    ConfigFileError,
    DependencyError,
    CompatibilityError,
    AlignmentError,
    FormatError,
    SplitError,
    MetricDataError,
    FileNotFoundError,
)


def _corpus(args):
    return load_corpus(args.qa, args.transcripts)


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_synth(args) -> int:
    out = Path(args.out)
    cfg = _config(args)
    corpus = generate_synthetic_corpus(
        args.weeks, args.pages, args.qas, cfg.seed, out / "qa.jsonl", out / "transcripts.jsonl"
    )
    print(f"wrote {len(corpus.qa)} QA pairs and {len(corpus.transcripts)} transcripts to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    corpus = _corpus(args)
    print(f"ok: {len(corpus.qa)} QA pairs, {len(corpus.transcripts)} transcripts, weeks {corpus.weeks}")
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = corpus_stats(_corpus(args))
    out = Path(args.out)
    write_stats_csv(stats, out / "stats.csv")
    write_summary_csv(stats, out / "summary.csv")
    print(f"{'week':>6} {'qas':>7} {'images':>7} {'words':>8}")
    for r in stats.weeks:
        print(f"{r.week:>6} {r.qas:>7} {r.transcripts_images:>7} {r.word_count:>8}")
    print(f"{'total':>6} {stats.total_qas:>7} {stats.total_transcripts:>7} {stats.total_words:>8}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.stage > 1 and args.prev is None:
        raise DependencyError(
            f"stage {args.stage} needs --from pointing at a run containing {CHECKPOINTS[args.stage - 1]}"
        )
    if args.prev is not None:
        expected = Path(args.prev) / CHECKPOINTS[args.stage - 1]
        if not expected.is_file():
            raise DependencyError(f"stage {args.stage - 1} checkpoint not found: expected {expected}")
    corpus = _corpus(args)
    run = new_run_dir(args.out, f"stage{args.stage}")
    result = train_stage(args.stage, corpus, cfg, run, args.prev)
    if result.skipped:
        print(f"skipped {result.skipped} over-length examples")
    for i, loss in enumerate(result.epoch_losses, 1):
        print(f"epoch {i}: mean loss {loss:.6f}")
    print(f"run directory: {run}")
    return EXIT_OK


def cmd_merge(args) -> int:
    bundle = merge_adapter(args.base, args.adapter)
    run = new_run_dir(args.out, "merge")
    path = save_checkpoint(bundle, run / CHECKPOINTS[3])
    print(f"merged checkpoint: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args)
    ckpt = vocab = None
    if args.predictions is None:
        if args.prev is None:
            raise DependencyError("eval needs --from (a stage-3 run) or --predictions")
        ckpt = Path(args.prev) / CHECKPOINTS[3]
        vocab = Path(args.prev) / VOCAB_FILE
    run = new_run_dir(args.out, "eval")
    report = evaluate_run(corpus, cfg, run, ckpt, vocab, args.split, args.predictions, args.normalize_cider)
    _print_report(report.means, report.count, args.normalize_cider)
    print(f"run directory: {run}")
    return EXIT_OK


def _print_report(means: dict, count: int, normalize_cider: bool) -> None:
    names = [n for _, n in COLUMNS] + (["CIDEr/10"] if normalize_cider else [])
    vals = [means[k] for k, _ in COLUMNS] + ([means["cider"] / CIDER_SCALE] if normalize_cider else [])
    print("| " + " | ".join(names) + " |")
    print("|" + "---|" * len(names))
    print("| " + " | ".join(f"{v:.4f}" for v in vals) + " |")
    print(f"pairs: {count}")


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_op_suite
    from .modelcheck import run_model_suite

    ops = run_op_suite(args.seeds, args.h, args.tol, break_case=args.break_case)
    cases = dict(ops.per_case)
    if not args.ops_only:
        cases.update(run_model_suite(args.model_seeds, args.h, args.tol, break_case=args.break_case).per_case)
    print(f"{'case':<20} {'max rel err':>12}  worst coordinate")
    for name, rep in cases.items():
        flag = "" if rep.passed else "  FAIL"
        print(f"{name:<20} {rep.max_rel_error:12.3e}  input {rep.worst_input} index {rep.worst_index}{flag}")
    worst = max(r.max_rel_error for r in cases.values())
    print(f"worst relative error: {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if all(r.passed for r in cases.values()) else EXIT_INTERNAL


def cmd_report(args) -> int:
    path = Path(args.prev) / "report.json"
    if not path.is_file():
        raise DependencyError(f"report not found: expected {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    _print_report(data["means"], data["count"], args.normalize_cider)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--qa", default="data/qa.jsonl")
    data.add_argument("--transcripts", default="data/transcripts.jsonl")

    ap = argparse.ArgumentParser(prog="vqelab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--weeks", type=int, default=14)
    p.add_argument("--pages", type=int, default=5)
    p.add_argument("--qas", type=int, default=10)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", parents=[common, data], help="validate corpus files")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("stats", parents=[common, data], help="weekly and length statistics")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", parents=[common, data], help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--from", dest="prev", help="run directory of the previous stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", parents=[common], help="fold an adapter file into a base checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True, help=f"e.g. <stage-3 run>/{ADAPTER_FILE}")
    p.set_defaults(func=cmd_merge)

    for name, fn, text in (("eval", cmd_eval, "generate answers and score them"),
                           ("report", cmd_report, "print the metric row of an eval run")):
        p = sub.add_parser(name, parents=[common, data] if name == "eval" else [common], help=text)
        p.add_argument("--from", dest="prev", required=name == "report")
        p.add_argument("--normalize-cider", action=argparse.BooleanOptionalAction, default=True)
        if name == "eval":
            p.add_argument("--split", choices=("train", "test"), default="test")
            p.add_argument("--predictions", help="score this JSON-lines file instead of generating")
        p.set_defaults(func=fn)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--model-seeds", type=int, default=100)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--ops-only", action="store_true")
    p.add_argument("--break-case", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
