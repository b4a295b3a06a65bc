"""Command-line driver: fit, detect, evaluate and benchmark.

Exit codes: 0 success, 2 input error, 3 model or selection failure,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, load_dataset
from .detector import DEFAULT_K, DetectorState, advance, align_test, decide_point, detect_series
from .evaluation import (
    DEFAULT_DELAY,
    DEFAULT_THRESHOLDS,
    EvalReport,
    band_rows,
    pooled,
    run_dataset,
    score,
)
from .selection import TWO_WEEKS, FittedModel, ModelFormatError, SelectionError, select_model
from .ssm import FilterDivergenceError, FitError
from .structural import StructuralSpec

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("stsad")

EXIT_OK, EXIT_INPUT, EXIT_MODEL, EXIT_INTERNAL = 0, 2, 3, 4
REPORT_SCHEMA_VERSION = 1
REPORT_COLUMNS = ["threshold", "precision", "recall", "f1", "tp", "fp", "fn"]
POINT_COLUMNS = ["kpi_id", "timestamp", "value", "expected", "band_low", "band_high", "decision"]

_UNITS = {"s": 1, "m": 60, "h": 3600, "d": 86400, "w": 604800}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def parse_duration(text) -> int | None:
    """Seconds from ``"14d"``, ``"36h"``, ``"90m"``, ``"3600s"`` or a bare integer.

    ``"none"`` (or ``0``) disables the cap.
    """
    if text is None:
        return None
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        return int(text) or None
    s = str(text).strip().lower()
    if s in ("none", "inf", "all", "0"):
        return None
    m = re.fullmatch(r"(\d+(?:\.\d+)?)\s*([smhdw]?)", s)
    if not m:
        raise argparse.ArgumentTypeError(f"invalid duration {text!r} (e.g. 14d, 36h, 3600)")
    return int(float(m.group(1)) * _UNITS[m.group(2) or "s"])


def parse_thresholds(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [t for t in str(text).split(",") if t.strip()]
    try:
        ks = [float(t) for t in items]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid threshold list {text!r}") from None
    if not ks or any(not (k > 0 and math.isfinite(k)) for k in ks):
        raise argparse.ArgumentTypeError("thresholds must be positive numbers")
    return ks


def positive_float(text) -> float:
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def nonneg_int(text) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text!r}")
    return v


def parse_suite(text) -> list[StructuralSpec] | None:
    if not text:
        return None
    items = text if isinstance(text, list) else str(text).split(",")
    try:
        return [StructuralSpec.parse(s.strip()) for s in items if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# -- output helpers ---------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _dump_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, allow_nan=True)
        fh.write("\n")


def _safe_name(kpi_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", kpi_id) or "series"


def _report_row(r: EvalReport) -> list[str]:
    return [_fmt(float(r.threshold_k)), _fmt(r.precision), _fmt(r.recall), _fmt(r.f1),
            str(r.tp), str(r.fp), str(r.fn)]


def write_report_csv(reports, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow(_report_row(r))


def _select(dataset, kpi_id):
    if kpi_id is None:
        return dataset
    chosen = [ls for ls in dataset if ls.kpi_id == kpi_id]
    if not chosen:
        raise CliError(f"KPI ID {kpi_id!r} not found in input")
    return chosen


def _decision_line(decision, kpi_id=None) -> str:
    obj = decision.to_json()
    if kpi_id is not None:
        obj = {"kpi_id": kpi_id, **obj}
    return json.dumps(obj, allow_nan=True)


# -- commands ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    dataset = _select(load_dataset(args.input), args.kpi_id)
    if not dataset:
        raise CliError("input contains no series")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for ls in dataset:
        try:
            fitted, report = select_model(ls.series, args.max_train_window,
                                          suite=args.suite, jobs=args.jobs)
        except SelectionError as exc:
            log.error("%s: model selection failed: %s", ls.kpi_id, exc)
            failures += 1
            continue
        except DataError as exc:
            raise CliError(f"{ls.kpi_id}: {exc}") from exc
        name = _safe_name(ls.kpi_id)
        fitted.train_meta["kpi_id"] = ls.kpi_id
        fitted.save(out / f"{name}.model.json")
        _dump_json({"schema_version": REPORT_SCHEMA_VERSION, "kpi_id": ls.kpi_id,
                    "max_train_window_s": args.max_train_window, "seed": args.seed,
                    **report.to_json()}, out / f"{name}.selection.json")
        log.info("%s: %s (validation MSE %.6g)", ls.kpi_id, report.winner,
                 fitted.train_meta["selection_mse"])
    return EXIT_MODEL if failures else EXIT_OK


def _parse_stream_line(line: str, lineno: int):
    s = line.strip()
    if s.startswith("{"):
        try:
            obj = json.loads(s)
            return int(obj["timestamp"]), float(obj["value"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(f"stdin line {lineno}: {exc}") from exc
    parts = [p.strip() for p in s.split(",")]
    try:
        return int(parts[0]), float(parts[1])
    except (ValueError, IndexError):
        raise CliError(f"stdin line {lineno}: expected 'timestamp,value', got {s!r}") from None


def _follow(state: DetectorState, stream_in, stream_out, kpi_id) -> DetectorState:
    g = state.fitted.granularity
    # readline, not iteration, so each decision is written before the next read blocks
    for lineno, line in enumerate(iter(stream_in.readline, ""), 1):
        if not line.strip() or line.startswith("timestamp"):
            continue
        ts, value = _parse_stream_line(line, lineno)
        if not math.isfinite(value):
            raise CliError(f"stdin line {lineno}: non-finite value")
        gap = ts - state.timestamp
        if gap <= 0 or gap % g:
            raise CliError(f"stdin line {lineno}: timestamp {ts} is not on the model grid "
                           f"after {state.timestamp} (step {g}s)")
        for _ in range(gap // g - 1):
            state = advance(state)
        decision, state = decide_point(state, value, ts)
        stream_out.write(_decision_line(decision, kpi_id) + "\n")
        stream_out.flush()
    return state


def cmd_detect(args) -> int:
    fitted = _load_model(args.model)
    state = DetectorState.from_fitted(fitted, args.k)
    kpi_id = fitted.train_meta.get("kpi_id")
    out = sys.stdout if args.out in (None, "-") else open(args.out, "w", encoding="utf-8")
    try:
        if args.follow:
            _follow(state, sys.stdin, out, kpi_id)
            return EXIT_OK
        if args.input is None:
            raise CliError("detect needs --input or --follow")
        dataset = load_dataset(args.input)
        wanted = args.kpi_id or (kpi_id if len(dataset) > 1 else None)
        dataset = _select(dataset, wanted)
        if len(dataset) != 1:
            raise CliError("input holds several series; choose one with --kpi-id")
        test = dataset[0].series
        try:
            grid, mask = align_test(state, test)
        except (ValueError, DataError) as exc:
            raise CliError(str(exc)) from exc
        decisions, _ = detect_series(state, grid, mask)
        for d in decisions:
            out.write(_decision_line(d, kpi_id) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _load_model(path) -> FittedModel:
    try:
        return FittedModel.load(path)
    except ModelFormatError as exc:
        raise CliError(str(exc)) from exc


def read_decisions(path) -> dict:
    """``{kpi_id or None: {timestamp: 0/1}}`` from a JSON-lines decision file."""
    out: dict = {}
    try:
        fh = sys.stdin if str(path) == "-" else open(path, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ts = int(obj["timestamp"])
                flag = obj.get("is_anomaly", obj.get("prediction"))
                if flag not in (True, False, 0, 1):
                    raise ValueError("is_anomaly must be boolean")
            except (ValueError, KeyError, TypeError) as exc:
                raise CliError(f"{path}:{lineno}: {exc}") from exc
            out.setdefault(obj.get("kpi_id"), {})[ts] = int(flag)
    return out


def cmd_evaluate(args) -> int:
    dataset = _select(load_dataset(args.labels), args.kpi_id)
    decisions = read_decisions(args.predictions)
    unkeyed = decisions.pop(None, None)
    if unkeyed is not None and len(dataset) != 1:
        raise CliError("decision lines without kpi_id need a single-series label file")
    per_series = []
    total = EvalReport(0, 0, 0, 0, args.delay)
    for ls in dataset:
        table = unkeyed if unkeyed is not None else decisions.get(ls.kpi_id, {})
        pred = np.array([table.get(int(t), 0) for t in ls.series.timestamps], dtype=np.int8)
        r = score(ls.labels, pred, args.delay)
        total = total + r
        per_series.append({"kpi_id": ls.kpi_id, "n_points": len(ls),
                           "n_decisions": len(table), **r.to_json()})
    obj = {"schema_version": REPORT_SCHEMA_VERSION, "delay_k": args.delay,
           "pooled": total.to_json(), "per_series": per_series}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(obj, out / "evaluation.json")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["precision", "recall", "f1", "tp", "fp", "fn", "tn"])
    w.writerow([_fmt(total.precision), _fmt(total.recall), _fmt(total.f1),
                total.tp, total.fp, total.fn, total.tn])
    return EXIT_OK


def cmd_benchmark(args) -> int:
    dataset = load_dataset(args.input)
    if args.kpi_id:
        dataset = _select(dataset, args.kpi_id)
    if args.limit:
        dataset = dataset[: args.limit]
    if not dataset:
        raise CliError("input contains no series")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.random.seed(args.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        runs = run_dataset(dataset, args.max_train_window, jobs=args.jobs, suite=args.suite)
    for w in caught:
        log.warning("%s", w.message)
    reports = [pooled(runs, k, args.delay) for k in args.thresholds]
    if not any(r.ok for r in runs):
        raise CliError("every series failed", EXIT_MODEL)

    write_report_csv(reports, out / "report.csv")
    _dump_json({
        "schema_version": REPORT_SCHEMA_VERSION,
        "version": __version__,
        "seed": args.seed,
        "delay_k": args.delay,
        "max_train_window_s": args.max_train_window,
        "n_series": len(runs),
        "n_failed": sum(not r.ok for r in runs),
        "rows": [r.to_json() for r in reports],
    }, out / "report.json")
    per_series = []
    for r in runs:
        entry = {"kpi_id": r.kpi_id, "status": r.status}
        if r.ok:
            entry.update(spec=r.spec, selection_mse=r.selection_mse,
                         zero_proportion=r.zero_proportion, n_train=r.n_train,
                         n_test=int(r.timestamps.size),
                         reports=[r.report(k, args.delay).to_json() for k in args.thresholds])
        else:
            entry["error"] = r.error
        per_series.append(entry)
    _dump_json(per_series, out / "per_series.json")
    with open(out / "points.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POINT_COLUMNS)
        for r in runs:
            if r.ok:
                for row in band_rows(r, args.k):
                    w.writerow([r.kpi_id, *(_fmt(v) for v in row)])
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(_report_row(r))
    return EXIT_OK


# -- argument handling ------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *, train=False, out_default=None):
    p.add_argument("--config", help="TOML file with option defaults (flags win)")
    p.add_argument("--kpi-id", help="restrict to one KPI ID")
    p.add_argument("--seed", type=int, default=0, help="recorded in reports (default 0)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    if out_default is not None:
        p.add_argument("--out", default=out_default, help=f"output location (default {out_default})")
    if train:
        p.add_argument("--max-train-window", type=parse_duration, default=TWO_WEEKS,
                       help="trailing training window, e.g. 14d or none (default 14d)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
        p.add_argument("--suite", type=parse_suite, default=None,
                       help="comma-separated trend:seasonal:error[:transform] candidates")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stsad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = sub.choices

    p = sub.add_parser("fit", help="select and fit a model per KPI")
    p.add_argument("--input", required=True, help="KPI CSV or series JSON")
    _common(p, train=True, out_default="models")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("detect", help="emit one JSON decision per point")
    p.add_argument("--model", required=True, help="model JSON written by fit")
    p.add_argument("--input", help="KPI CSV or series JSON continuing after the training window")
    p.add_argument("--follow", action="store_true",
                   help="read 'timestamp,value' lines from standard input")
    p.add_argument("--k", type=positive_float, default=DEFAULT_K, help="sigma multiplier (default 4)")
    _common(p, out_default="-")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score a decision file against labels")
    p.add_argument("--labels", required=True, help="labelled KPI CSV or series JSON")
    p.add_argument("--predictions", required=True, help="JSON-lines decisions ('-' for stdin)")
    p.add_argument("--delay", type=nonneg_int, default=DEFAULT_DELAY,
                   help="permitted detection delay in points (default 7)")
    _common(p, out_default="")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="half-split protocol with a threshold sweep")
    p.add_argument("--input", required=True, help="labelled KPI CSV or series JSON")
    p.add_argument("--thresholds", type=parse_thresholds, default=list(DEFAULT_THRESHOLDS),
                   help="comma-separated sigma multipliers (default 3,4,5,6)")
    p.add_argument("--delay", type=nonneg_int, default=DEFAULT_DELAY,
                   help="permitted detection delay in points (default 7)")
    p.add_argument("--k", type=positive_float, default=DEFAULT_K,
                   help="sigma multiplier for points.csv (default 4)")
    p.add_argument("--limit", type=nonneg_int, default=0, help="use only the first N series")
    _common(p, train=True, out_default="benchmark_out")
    p.set_defaults(func=cmd_benchmark)
    return parser


_CONVERTERS = {
    "max_train_window": parse_duration,
    "thresholds": parse_thresholds,
    "suite": parse_suite,
    "k": positive_float,
}


def load_config(path, command: str) -> dict:
    """Top-level keys plus the ``[command]`` table; dashes map to underscores."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"invalid config {path}: {exc}") from exc
    merged = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    merged.update(raw.get(command, {}))
    out = {}
    for key, value in merged.items():
        dest = key.replace("-", "_")
        conv = _CONVERTERS.get(dest)
        try:
            out[dest] = conv(value) if conv else value
        except argparse.ArgumentTypeError as exc:
            raise CliError(f"config {path}: {key}: {exc}") from exc
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = load_config(args.config, args.command)
        known = vars(args)
        unknown = sorted(set(cfg) - set(known))
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        parser.commands[args.command].set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except CliError as exc:
        print(f"stsad: error: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_INPUT
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="stsad: %(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"stsad: error: {exc}", file=sys.stderr)
        return exc.code
    except (DataError, ModelFormatError) as exc:
        print(f"stsad: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SelectionError, FitError, FilterDivergenceError) as exc:
        print(f"stsad: error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except AssertionError as exc:
        print(f"stsad: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
