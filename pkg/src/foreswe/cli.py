"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .data import generate_synthetic, write_dataset
from .errors import ConfigError, DataError, ForeSWEError


def _sizes(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser():
    p = argparse.ArgumentParser(prog="foreswe", description="Probabilistic SWE forecasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    s.add_argument("--stations", type=int, required=True)
    s.add_argument("--years", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("train", help="run the full pipeline from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint/output directory")

    s = sub.add_parser("forecast", help="forecast every station from one origin day")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--date-index", type=int, required=True, help="day index from Dec 1")
    s.add_argument("--year", type=int, default=None, help="water year (default: last test year)")
    s.add_argument("--out", required=True, help="output CSV")

    s = sub.add_parser("eval", help="re-evaluate a checkpoint on its test years")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("bench", help="time spatial attention and sparse GP fitting")
    s.add_argument("--sizes", type=_sizes, default=[8, 16, 32])
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--out", required=True, help="output CSV")
    return p


def _summary(report):
    print("metric,value")
    print(f"median_nse,{report.median_nse():.6f}")
    for y, v in report.per_year.items():
        print(f"nll_{y},{v['nll']:.6f}")
        print(f"ece_{y},{v['ece']:.6f}")
        print(f"coverage_{y},{v['coverage']:.4f}")
    for b, c in report.nse_buckets.items():
        print(f"nse_bucket[{b}],{c}")


def _synth(args):
    if args.stations < 2 or args.years < 2:
        raise ConfigError("need at least 2 stations and 2 years")
    ds = generate_synthetic(args.stations, args.years, args.seed)
    paths = write_dataset(ds, args.out)
    print(f"wrote {len(ds.stations)} stations x {len(ds.years)} years to {args.out}")
    return paths


def _train(args):
    config = pipeline.RunConfig.load(args.config)
    report = pipeline.run_pipeline(config, args.out)
    _summary(report)


def _forecast(args):
    ckpt = pipeline.Checkpoint.load(args.checkpoint)
    table = pipeline.forecast_day(ckpt, args.date_index, args.year)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_forecast_csv(args.out, table, ckpt.dataset)
    print(f"wrote {len(table) * table.horizon} rows to {args.out}")


def _eval(args):
    ckpt = pipeline.Checkpoint.load(args.checkpoint)
    table, report = pipeline.evaluate(ckpt)
    pipeline.write_outputs(ckpt, table, report, args.out)
    _summary(report)


def _bench(args):
    rows = pipeline.benchmark(args.sizes, repeats=args.repeats)
    pipeline.write_benchmark_csv(rows, args.out)
    print(Path(args.out).read_text(encoding="utf-8"), end="")
    if len(rows) > 1:
        print(f"scaling_ok,{pipeline.scaling_ok(rows)}")


COMMANDS = {"synth": _synth, "train": _train, "forecast": _forecast, "eval": _eval, "bench": _bench}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ForeSWEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
