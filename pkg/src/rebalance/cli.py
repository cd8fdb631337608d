"""Command-line entry point: ``rebalance run | resample | report``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import DataError, SplitSpec, load_csv, stratified_split, write_csv
from .learners import LEARNER_NAMES
from .pipeline import (
    DEFAULT_TREATMENTS,
    TREATMENTS,
    ConfigError,
    ExperimentConfig,
    TreatmentOptions,
    load_records,
    report,
    run_experiment,
    run_treatment,
)
from .seeding import hash64

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
_EXT = {"markdown": "md", "csv": "csv", "json": "json"}


def _names(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rebalance", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the treatment x learner experiment")
    run.add_argument("--data", required=True, help="CSV file with a header row")
    run.add_argument("--label", required=True, help="name of the binary label column")
    run.add_argument("--treatments", type=_names, default=DEFAULT_TREATMENTS,
                     help=f"comma list from {','.join(TREATMENTS)}")
    run.add_argument("--learners", type=_names, default=LEARNER_NAMES,
                     help=f"comma list from {','.join(LEARNER_NAMES)}")
    run.add_argument("--repeats", type=int, default=10)
    run.add_argument("--bo-iters", type=int, default=30, dest="bo_iters")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True, help="output directory (records.jsonl + report)")
    _report_flags(run)

    res = sub.add_parser("resample", help="export one resampled training partition")
    res.add_argument("--data", required=True)
    res.add_argument("--label", required=True)
    res.add_argument("--treatment", required=True, choices=TREATMENTS)
    res.add_argument("--seed", type=int, default=0)
    res.add_argument("--learner", default="knn", help="learner guiding smotuned/dazzle")
    res.add_argument("--bo-iters", type=int, default=30, dest="bo_iters")
    res.add_argument("--out", required=True, help="destination CSV")

    rep = sub.add_parser("report", help="render a report from a record store")
    rep.add_argument("--records", required=True, help="directory or records.jsonl path")
    _report_flags(rep)
    return parser


def _report_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", default="markdown", choices=("markdown", "md", "csv", "json"))
    p.add_argument("--runtime", default="exact", choices=("exact", "bucket", "none"),
                   help="runtime summary: minutes, '< N' buckets, or omitted")
    p.add_argument("--all-metrics", action="store_true", help="include precision and accuracy")


def _metrics(args) -> tuple[str, ...]:
    from .metrics import METRIC_NAMES
    from .pipeline import DEFAULT_REPORT_METRICS

    return METRIC_NAMES if args.all_metrics else DEFAULT_REPORT_METRICS


def _cmd_run(args) -> int:
    config = ExperimentConfig(
        data_path=args.data, label_column=args.label, treatments=args.treatments,
        learners=args.learners, repeats=args.repeats, bo_iterations=args.bo_iters,
        master_seed=args.seed, out_dir=args.out,
    )
    records = run_experiment(config)
    text = report(records, args.format, args.runtime, _metrics(args))
    fmt = {"md": "markdown"}.get(args.format, args.format)
    (Path(args.out) / f"report.{_EXT[fmt]}").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _cmd_resample(args) -> int:
    if args.bo_iters < 1:
        raise ConfigError("--bo-iters must be >= 1")
    data = load_csv(args.data, args.label)
    data.require_both_classes()
    train, validation, _ = stratified_split(data, SplitSpec(seed=hash64(args.seed, 0)))
    result = run_treatment(args.treatment, train, validation, args.learner, args.seed,
                           TreatmentOptions(bo_iterations=args.bo_iters))
    write_csv(result.data, args.out, args.label)
    sys.stdout.write(
        f"wrote {result.data.n_rows} rows ({result.data.n_minority} minority) to {args.out}\n"
    )
    return EXIT_OK


def _cmd_report(args) -> int:
    records = load_records(args.records)
    if not records:
        raise DataError(f"{args.records}: no records")
    sys.stdout.write(report(records, args.format, args.runtime, _metrics(args)))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    handlers = {"run": _cmd_run, "resample": _cmd_resample, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
