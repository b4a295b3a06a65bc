"""Time-series containers, KPI CSV ingestion, transforms and splits."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from collections import Counter
from dataclasses import dataclass
from functools import reduce
from typing import IO, Iterable, Sequence

import numpy as np

KPI_HEADER = ["timestamp", "value", "label", "KPI ID"]
SERIES_SCHEMA_VERSION = 1
DEFAULT_GRANULARITY = 60


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GranularityError(DataError):
    pass


class TransformDomainError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Uniformly spaced univariate observations.

    ``timestamps`` are epoch seconds; every gap must be a positive multiple
    of ``granularity`` (gaps larger than one step are missing points).
    """

    timestamps: np.ndarray
    values: np.ndarray
    granularity: int

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vs = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vs)
        if ts.ndim != 1 or vs.ndim != 1 or ts.shape != vs.shape:
            raise DataError("timestamps and values must be 1-d and equally long")
        if ts.size == 0:
            raise DataError("a time series needs at least one point")
        if int(self.granularity) <= 0:
            raise DataError("granularity must be a positive integer")
        object.__setattr__(self, "granularity", int(self.granularity))
        if not np.all(np.isfinite(vs)):
            raise DataError("values contain NaN or inf")
        gaps = np.diff(ts)
        if np.any(gaps <= 0):
            raise DataError("timestamps must be strictly increasing")
        if np.any(gaps % self.granularity):
            raise DataError("timestamp gaps must be multiples of the granularity")

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            self.granularity == other.granularity
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values)
        )

    def slice(self, start: int, stop: int | None = None) -> "TimeSeries":
        return TimeSeries(self.timestamps[start:stop], self.values[start:stop], self.granularity)


@dataclass(frozen=True, eq=False)
class LabeledSeries:
    series: TimeSeries
    labels: np.ndarray
    kpi_id: str

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int8)
        object.__setattr__(self, "labels", labels)
        if labels.shape != self.series.values.shape:
            raise DataError("labels length must equal series length")
        if np.any((labels != 0) & (labels != 1)):
            raise DataError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.series)

    def __eq__(self, other):
        if not isinstance(other, LabeledSeries):
            return NotImplemented
        return (
            self.kpi_id == other.kpi_id
            and self.series == other.series
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def n_missing(self) -> int:
        ts = self.series.timestamps
        return int((ts[-1] - ts[0]) // self.series.granularity + 1 - ts.size)

    def slice(self, start: int, stop: int | None = None) -> "LabeledSeries":
        return LabeledSeries(self.series.slice(start, stop), self.labels[start:stop], self.kpi_id)


class Transform(str, enum.Enum):
    IDENTITY = "identity"
    LOG1P = "log1p"


# -- ingestion ---------------------------------------------------------------

def infer_granularity(timestamps: Sequence[int]) -> int:
    """Return the step size (seconds) of a possibly gappy regular series.

    The step is the gcd of consecutive gaps and must coincide with the most
    frequent gap (smallest one on ties).
    """
    ts = np.asarray(timestamps, dtype=np.int64)
    if ts.size < 2:
        raise GranularityError("need at least two timestamps to infer granularity")
    gaps = np.diff(ts)
    if np.any(gaps <= 0):
        raise GranularityError("timestamps must be strictly increasing")
    step = reduce(math.gcd, (int(g) for g in gaps))
    counts = Counter(int(g) for g in gaps)
    top = max(counts.values())
    modal = min(g for g, c in counts.items() if c == top)
    if step != modal:
        raise GranularityError(
            f"ambiguous granularity: gcd of gaps is {step}s but the modal gap is {modal}s"
        )
    return step


def parse_kpi_csv(source, default_granularity: int = DEFAULT_GRANULARITY) -> list[LabeledSeries]:
    """Parse an AIOPS KPI CSV (``timestamp,value,label,KPI ID``).

    ``source`` may be a binary or text stream, raw bytes, or a path. Series
    are returned in order of first appearance of their KPI ID.
    """
    text = _read_text(source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input, header missing", 1) from None
    if [h.strip() for h in header] != KPI_HEADER:
        raise ParseError(f"expected header {','.join(KPI_HEADER)!r}, got {','.join(header)!r}", 1)

    rows: dict[str, list[tuple[int, float, int]]] = {}
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise ParseError(f"expected 4 columns, got {len(row)}", line)
        ts_s, v_s, l_s, kpi = (x.strip() for x in row)
        try:
            ts = int(ts_s)
        except ValueError:
            try:
                tf = float(ts_s)
            except ValueError:
                raise ParseError(f"bad timestamp {ts_s!r}", line) from None
            if not tf.is_integer():
                raise ParseError(f"timestamp {ts_s!r} is not whole seconds", line)
            ts = int(tf)
        try:
            v = float(v_s)
        except ValueError:
            raise ParseError(f"bad value {v_s!r}", line) from None
        if not math.isfinite(v):
            raise ParseError(f"non-finite value {v_s!r}", line)
        if l_s not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got {l_s!r}", line)
        if not kpi:
            raise ParseError("empty KPI ID", line)
        rows.setdefault(kpi, []).append((ts, v, int(l_s)))

    out = []
    for kpi, pts in rows.items():
        pts.sort(key=lambda p: p[0])
        ts = np.array([p[0] for p in pts], dtype=np.int64)
        dup = np.nonzero(np.diff(ts) == 0)[0]
        if dup.size:
            raise ParseError(f"duplicate timestamp {int(ts[dup[0]])} for KPI {kpi!r}")
        gran = infer_granularity(ts) if ts.size > 1 else default_granularity
        if ts.size > 1 and (ts[-1] - ts[0]) // gran + 1 > 50 * ts.size:
            raise GranularityError(f"KPI {kpi!r}: grid would be mostly empty")
        series = TimeSeries(ts, np.array([p[1] for p in pts]), gran)
        out.append(LabeledSeries(series, np.array([p[2] for p in pts]), kpi))
    return out


def write_kpi_csv(dataset: Iterable[LabeledSeries], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(KPI_HEADER)
    for ls in dataset:
        for t, v, lab in zip(ls.series.timestamps, ls.series.values, ls.labels):
            writer.writerow([int(t), repr(float(v)), int(lab), ls.kpi_id])


def series_to_json(ls: LabeledSeries) -> dict:
    return {
        "schema_version": SERIES_SCHEMA_VERSION,
        "kpi_id": ls.kpi_id,
        "granularity_s": ls.series.granularity,
        "points": [
            [int(t), float(v), int(lab)]
            for t, v, lab in zip(ls.series.timestamps, ls.series.values, ls.labels)
        ],
    }


def series_from_json(obj: dict) -> LabeledSeries:
    try:
        pts = obj["points"]
        ts = np.array([int(p[0]) for p in pts], dtype=np.int64)
        vs = np.array([float(p[1]) for p in pts])
        labels = np.array([int(p[2]) if len(p) > 2 else 0 for p in pts])
        series = TimeSeries(ts, vs, int(obj["granularity_s"]))
        return LabeledSeries(series, labels, str(obj["kpi_id"]))
    except (KeyError, TypeError, IndexError) as exc:
        raise DataError(f"malformed series JSON: {exc}") from exc


def load_dataset(path) -> list[LabeledSeries]:
    """Load a KPI CSV, a series JSON object, or a JSON list of series objects."""
    text = _read_text(path)
    if text.lstrip().startswith(("{", "[")):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from exc
        items = obj if isinstance(obj, list) else [obj]
        return [series_from_json(o) for o in items]
    return parse_kpi_csv(text)


def _read_text(source) -> str:
    if isinstance(source, bytes):
        data = source
    elif isinstance(source, str) and ("\n" in source or source.startswith(KPI_HEADER[0])):
        return source
    elif isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        try:
            with open(source, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read {source}: {exc.strerror}") from exc
    else:
        data = source.read()
        if isinstance(data, str):
            return data
    try:
        return data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise ParseError(f"input is not UTF-8: {exc.reason}") from exc


# -- grid handling -------------------------------------------------------------

def fill_gaps(series: TimeSeries) -> tuple[TimeSeries, np.ndarray]:
    """Place ``series`` on a complete grid.

    Returns the gridded series and a boolean mask that is True at inserted
    points. Inserted values repeat the previous observation; they are
    placeholders and must not be used as data.
    """
    ts = series.timestamps
    g = series.granularity
    idx = (ts - ts[0]) // g
    n = int(idx[-1]) + 1
    if n == ts.size:
        return series, np.zeros(n, dtype=bool)
    grid = ts[0] + g * np.arange(n, dtype=np.int64)
    mask = np.ones(n, dtype=bool)
    mask[idx] = False
    # forward fill: position of the latest observed point at or before each slot
    last = np.maximum.accumulate(np.where(mask, 0, np.arange(n)))
    values = np.empty(n)
    values[idx] = series.values
    values = values[last]
    return TimeSeries(grid, values, g), mask


def fill_labels(series: TimeSeries, labels: np.ndarray) -> np.ndarray:
    """Labels on the filled grid; inserted points are labelled 0."""
    ts = series.timestamps
    idx = (ts - ts[0]) // series.granularity
    out = np.zeros(int(idx[-1]) + 1, dtype=np.int8)
    out[idx] = labels
    return out


# -- transforms ----------------------------------------------------------------

def apply_transform(series: TimeSeries, transform: Transform | str) -> TimeSeries:
    transform = Transform(transform)
    if transform is Transform.IDENTITY:
        return series
    return TimeSeries(series.timestamps, transform_values(series.values, transform), series.granularity)


def transform_values(values, transform: Transform | str):
    transform = Transform(transform)
    v = np.asarray(values, dtype=float)
    if transform is Transform.IDENTITY:
        return v
    if np.any(v < 0):
        raise TransformDomainError("log1p transform requires nonnegative values")
    return np.log1p(v)


def inverse_values(values, transform: Transform | str):
    transform = Transform(transform)
    v = np.asarray(values, dtype=float)
    if transform is Transform.IDENTITY:
        return v
    return np.expm1(v)


def invert_transform(mean, variance, transform: Transform | str):
    """Map a predictive Gaussian back to the original scale.

    For log1p the location is the median back-transform ``expm1(mean)`` and
    the variance is that of the shifted log-normal.
    """
    transform = Transform(transform)
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if transform is Transform.IDENTITY:
        return mean, variance
    var = np.expm1(variance) * np.exp(2.0 * mean + variance)
    return np.expm1(mean), var


def band(mean, variance, k: float, transform: Transform | str = Transform.IDENTITY):
    """k-sigma band on the original scale (monotone map of the endpoints)."""
    sigma = np.sqrt(np.asarray(variance, dtype=float))
    mean = np.asarray(mean, dtype=float)
    return inverse_values(mean - k * sigma, transform), inverse_values(mean + k * sigma, transform)


# -- splits --------------------------------------------------------------------

def split_index(n: int, ratio: float = 0.8) -> int:
    if n < 5:
        raise InsufficientDataError(f"need at least 5 points to split, got {n}")
    n_train = math.ceil(ratio * n - 1e-9)
    return min(max(n_train, 1), n - 1)


def train_validation_split(series: TimeSeries, ratio: float = 0.8) -> tuple[TimeSeries, TimeSeries]:
    cut = split_index(len(series), ratio)
    return series.slice(0, cut), series.slice(cut)
