"""Command-line entry point: build, validate, stats, infer, judge, report.

Exit codes: 0 success, 1 validation found violations, 2 bad usage or
configuration, 3 data or runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .annotation import AnnotationError, PredicateVocabulary, annotation_from_dict, validate
from .answers import SchemaError, check_chain
from .config import load_config
from .cotask import CoTaskBundle
from .gateway import ConfigError, GatewayError
from .pipeline import (
    RunDirError,
    build_dataset,
    infer_run,
    judge_run,
    make_gateway,
    qtype_counts,
    read_jsonl,
    report_runs,
    stats_table,
    write_build,
)

EXIT_OK, EXIT_VIOLATIONS, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2, 3

logger = logging.getLogger("vqadecomp")


def cmd_build(args) -> int:
    cfg = load_config(args.config)
    gateway = make_gateway(cfg, ["grounder"]) if cfg.grounding == "llm" else None
    result = build_dataset(cfg, gateway)
    stats = write_build(result, args.out, cfg)
    sys.stdout.write(stats_table(stats))
    return EXIT_OK


def _bundle_violations(row: dict, vocab: PredicateVocabulary | None) -> list[tuple[str, str]]:
    try:
        b = CoTaskBundle.from_dict(row)
    except (KeyError, TypeError, ValueError, SchemaError) as exc:
        return [("SCHEMA_INVALID", str(exc))]
    problems = check_chain(
        b.a1,
        b.a2,
        b.a3,
        b.a4,
        b.num_frames,
        spatial=vocab.spatial if vocab else None,
        temporal=vocab.temporal if vocab else None,
    )
    return [(p.code, f"{p.where}: {p.message}" if p.where else p.message) for p in problems]


def _row_violations(row, vocab) -> list[tuple[str, str]]:
    if not isinstance(row, dict):
        return [("SCHEMA_INVALID", "record is not an object")]
    if "schema_version" in row:
        try:
            ann = annotation_from_dict(row)
        except (AnnotationError, KeyError, TypeError, ValueError) as exc:
            return [("SCHEMA_INVALID", str(exc))]
        return [(v.code, v.message) for v in validate(ann, vocab)]
    if "a1" in row:
        return _bundle_violations(row, vocab)
    if "task_index" in row:
        if row.get("task_index") not in (1, 2, 3, 4):
            return [("SCHEMA_INVALID", f"task_index {row.get('task_index')!r}")]
        try:
            json.loads(row["answer_json"])
        except (KeyError, TypeError, ValueError) as exc:
            return [("SCHEMA_INVALID", f"answer_json: {exc}")]
        return []
    return [("SCHEMA_INVALID", "unrecognised record")]


def _validation_targets(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(
                sorted(f for f in p.glob("*.jsonl") if f.name.startswith(("bundles.", "cotasks.", "normalized")))
            )
        else:
            out.append(p)
    return out


def cmd_validate(args) -> int:
    vocab = PredicateVocabulary.from_file(args.predicates) if args.predicates else None
    found = 0
    checked = 0
    for path in _validation_targets(args.paths):
        try:
            lines = path.read_text("utf-8").splitlines()
        except OSError as exc:
            print(f"{path}: cannot read ({exc})", file=sys.stderr)
            return EXIT_USAGE
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            checked += 1
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                problems = [("PARSE_ERROR", exc.msg)]
            else:
                problems = _row_violations(row, vocab)
            for code, message in problems:
                found += 1
                print(f"{path}:{lineno}: {code} {message}")
    print(f"{checked} record(s) checked, {found} violation(s)", file=sys.stderr)
    return EXIT_OK if found == 0 else EXIT_VIOLATIONS


def cmd_stats(args) -> int:
    run = Path(args.run)
    stats = json.loads((run / "stats.json").read_text("utf-8"))
    sys.stdout.write(stats_table(stats))
    for split in stats["splits"]:
        bundles = [CoTaskBundle.from_dict(r) for r in read_jsonl(run / f"bundles.{split}.jsonl")]
        counts = qtype_counts(bundles)
        if counts:
            print(f"{split}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    gateway = make_gateway(cfg, ["subject"])
    preds = infer_run(args.dataset, cfg, args.condition, args.out, gateway, split=args.split)
    errors = sum(p.error is not None for p in preds)
    print(f"{len(preds)} prediction(s), {errors} error(s) -> {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_judge(args) -> int:
    cfg = load_config(args.config)
    gateway = make_gateway(cfg, ["judge"])
    judge_run(args.run, cfg, args.out, gateway)
    sys.stdout.write((Path(args.out) / "report.txt").read_text("utf-8"))
    return EXIT_OK


def cmd_report(args) -> int:
    table = report_runs(args.runs, args.out)
    sys.stdout.write(table["text"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vqadecomp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build", help="parse, sample, construct and expand a corpus")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("-o", "--out", required=True, help="fresh output directory")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("validate", help="check bundles, CoTask instances or normalized annotations")
    s.add_argument("paths", nargs="+", help="jsonl files or build directories")
    s.add_argument("--predicates", help="predicate vocabulary for relation checks")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("stats", help="print dataset statistics of a build")
    s.add_argument("run")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("infer", help="run the subject model under one condition")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("-d", "--dataset", required=True, help="build directory")
    s.add_argument("--condition", required=True, help="baseline, ct12, ct34, ct14 or per_cotask(n)")
    s.add_argument("--split")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("judge", help="score an infer run with the judge model")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("run", help="infer run directory")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_judge)

    s = sub.add_parser("report", help="comparison table over judge runs")
    s.add_argument("runs", nargs="+")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, RunDirError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AnnotationError, GatewayError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
