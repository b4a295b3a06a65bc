"""Delay-adjusted precision/recall/F1 and the half-split threshold sweep."""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, LabeledSeries, inverse_values
from .detector import (
    DEFAULT_K,
    DetectorState,
    align_test,
    anomalies_at,
    detect_series,
)
from .selection import TWO_WEEKS, select_model
from .ssm import FitError, FilterDivergenceError

DEFAULT_DELAY = 7
DEFAULT_THRESHOLDS = (3.0, 4.0, 5.0, 6.0)


def _binary(x, name):
    a = np.asarray(x)
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if a.size and not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must be binary")
    return a.astype(np.int8)


def anomaly_segments(labels) -> list[tuple[int, int]]:
    """Maximal runs of 1s as half-open ``(start, stop)`` index pairs."""
    lab = _binary(labels, "labels")
    edges = np.diff(np.concatenate([[0], lab, [0]]))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def adjust_predictions(labels, predictions, delay_k: int = DEFAULT_DELAY) -> np.ndarray:
    """Point-adjust ``predictions`` against labelled anomaly segments.

    A segment starting at ``s`` is credited in full when any prediction in
    ``[s, s + delay_k]`` (clipped to the segment) fires, and is zeroed
    otherwise. Predictions outside segments are left untouched.
    """
    lab = _binary(labels, "labels")
    pred = _binary(predictions, "predictions")
    if lab.shape != pred.shape:
        raise ValueError(f"length mismatch: {lab.size} labels vs {pred.size} predictions")
    if delay_k < 0:
        raise ValueError("delay_k must be nonnegative")
    out = pred.copy()
    for start, stop in anomaly_segments(lab):
        out[start:stop] = 1 if pred[start:min(start + delay_k + 1, stop)].any() else 0
    return out


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    delay_k: int = DEFAULT_DELAY
    threshold_k: float = float("nan")

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                          self.tn + other.tn, self.delay_k, self.threshold_k)

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold_k,
            "delay_k": self.delay_k,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
        }


def confusion(labels, adjusted) -> tuple[int, int, int, int]:
    lab = np.asarray(labels, dtype=bool)
    pred = np.asarray(adjusted, dtype=bool)
    return (int(np.sum(lab & pred)), int(np.sum(~lab & pred)),
            int(np.sum(lab & ~pred)), int(np.sum(~lab & ~pred)))


def score(labels, predictions, delay_k: int = DEFAULT_DELAY,
          threshold_k: float = float("nan")) -> EvalReport:
    adj = adjust_predictions(labels, predictions, delay_k)
    return EvalReport(*confusion(labels, adj), delay_k=delay_k, threshold_k=threshold_k)


# -- half-split protocol --------------------------------------------------------------

@dataclass
class SeriesRun:
    """Threshold-free detector output on the test half of one series.

    Arrays are aligned with the observed test points. ``score`` is NaN for
    points decided by the zero rule.
    """

    kpi_id: str
    status: str = "ok"
    error: str | None = None
    spec: str | None = None
    selection_mse: float | None = None
    zero_proportion: float = 0.0
    n_train: int = 0
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    score: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rule: list = field(default_factory=list)
    pred_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    transform: str = "identity"

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def predictions(self, k: float) -> np.ndarray:
        s = np.where(np.isnan(self.score), 0.0, self.score)
        return anomalies_at(s, self.rule, k, self.zero_proportion)

    def report(self, k: float, delay_k: int) -> EvalReport:
        return score(self.labels, self.predictions(k), delay_k, k)


def half_split(ls: LabeledSeries) -> tuple[LabeledSeries, LabeledSeries]:
    h = len(ls) // 2
    if h < 1 or len(ls) - h < 1:
        raise DataError(f"series {ls.kpi_id!r} too short to split")
    return ls.slice(0, h), ls.slice(h, len(ls))


def run_series(ls: LabeledSeries, max_train_window: int | None = TWO_WEEKS, *,
               suite=None, screen_iter=None) -> SeriesRun:
    """Train on the first half (window-capped), then score every test-half point."""
    try:
        train, test = half_split(ls)
        fitted, _ = select_model(train.series, max_train_window, suite=suite,
                                 screen_iter=screen_iter)
        state = DetectorState.from_fitted(fitted)
        grid, mask = align_test(state, test.series)
        decisions, _ = detect_series(state, grid, mask)
    except (DataError, FitError, FilterDivergenceError, ValueError, RuntimeError) as exc:
        return SeriesRun(ls.kpi_id, status="failed", error=f"{type(exc).__name__}: {exc}")
    if len(decisions) != len(test):
        raise AssertionError("one decision per observed test point expected")
    return SeriesRun(
        kpi_id=ls.kpi_id,
        spec=str(fitted.spec),
        selection_mse=fitted.train_meta.get("selection_mse"),
        zero_proportion=state.zero_proportion,
        n_train=int(fitted.train_meta["n_points"]),
        timestamps=test.series.timestamps.copy(),
        values=test.series.values.copy(),
        labels=test.labels.copy(),
        score=np.array([np.nan if d.score is None else d.score for d in decisions]),
        rule=[d.rule for d in decisions],
        pred_mean=np.array([d.expected_model for d in decisions]),
        sigma=np.array([d.sigma for d in decisions]),
        transform=fitted.transform.value,
    )


def _run_star(args):
    ls, window, suite, screen_iter = args
    return run_series(ls, window, suite=suite, screen_iter=screen_iter)


def run_dataset(dataset, max_train_window: int | None = TWO_WEEKS, *, jobs: int = 1,
                suite=None, screen_iter=None) -> list[SeriesRun]:
    """Per-series runs in input order; failures are warned about, never raised."""
    tasks = [(ls, max_train_window, suite, screen_iter) for ls in dataset]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_star, tasks))
    else:
        runs = [_run_star(t) for t in tasks]
    for r in runs:
        if not r.ok:
            warnings.warn(f"series {r.kpi_id} excluded: {r.error}", RuntimeWarning, stacklevel=2)
    return runs


def pooled(runs, k: float, delay_k: int) -> EvalReport:
    """Micro-averaged report over successful runs."""
    total = EvalReport(0, 0, 0, 0, delay_k, k)
    for r in runs:
        if r.ok:
            total = total + r.report(k, delay_k)
    return total


def sweep_thresholds(dataset, ks=DEFAULT_THRESHOLDS, delay_k: int = DEFAULT_DELAY,
                     max_train_window: int | None = TWO_WEEKS, *, jobs: int = 1,
                     suite=None, screen_iter=None):
    """One pooled :class:`EvalReport` per threshold, plus the per-series runs."""
    runs = run_dataset(dataset, max_train_window, jobs=jobs, suite=suite, screen_iter=screen_iter)
    return [pooled(runs, float(k), delay_k) for k in ks], runs


def band_rows(run: SeriesRun, k: float = DEFAULT_K):
    """Per-point rows ``(timestamp, value, expected, band_low, band_high, decision)``."""
    pred = run.predictions(k)
    lo = inverse_values(run.pred_mean - k * run.sigma, run.transform)
    hi = inverse_values(run.pred_mean + k * run.sigma, run.transform)
    expected = inverse_values(run.pred_mean, run.transform)
    for i in range(run.timestamps.size):
        yield (int(run.timestamps[i]), float(run.values[i]), float(expected[i]),
               float(lo[i]), float(hi[i]), int(pred[i]))


def is_monotone(reports) -> tuple[bool, bool]:
    """(precision non-decreasing, recall non-increasing) along ``reports``."""
    p = [r.precision for r in reports]
    r = [x.recall for x in reports]
    return (all(b >= a for a, b in zip(p, p[1:])), all(b <= a for a, b in zip(r, r[1:])))


__all__ = [
    "DEFAULT_DELAY",
    "DEFAULT_THRESHOLDS",
    "EvalReport",
    "SeriesRun",
    "adjust_predictions",
    "anomaly_segments",
    "band_rows",
    "confusion",
    "half_split",
    "is_monotone",
    "pooled",
    "run_dataset",
    "run_series",
    "score",
    "sweep_thresholds",
]
