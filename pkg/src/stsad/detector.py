"""Streaming anomaly decisions: k-sigma rule plus the zero-proportion rule."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .data import TimeSeries, Transform, fill_gaps, inverse_values
from .selection import ZERO_TOL, FittedModel
from .ssm import kalman_filter, predict_state, update_state

DEFAULT_K = 4.0
ZERO_PROPORTION_THRESHOLD = 0.01


class Rule(str, enum.Enum):
    CONTINUOUS = "continuous_ksigma"
    ZERO = "discrete_zero"
    ZERO_NORMAL = "discrete_zero_normal"


@dataclass(frozen=True)
class AnomalyDecision:
    timestamp: int
    value: float
    is_anomaly: bool
    rule: Rule
    expected: float             # original scale
    sigma: float                # model scale
    band_low: float
    band_high: float
    score: float | None
    component_breakdown: dict
    expected_model: float       # model scale, equals the sum of the breakdown
    transform: str

    def to_json(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "value": self.value,
            "is_anomaly": self.is_anomaly,
            "rule": self.rule.value,
            "expected": self.expected,
            "sigma": self.sigma,
            "band_low": self.band_low,
            "band_high": self.band_high,
            "score": self.score,
            "component_breakdown": self.component_breakdown,
            "expected_model_scale": self.expected_model,
            "transform": self.transform,
        }


@dataclass(frozen=True, eq=False)
class DetectorState:
    """Posterior of the continuous model after the last processed step."""

    fitted: FittedModel
    mean: np.ndarray
    cov: np.ndarray
    zero_count: int
    total_count: int
    k: float = DEFAULT_K
    timestamp: int | None = None

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("k must be positive")
        if not 0 <= self.zero_count <= self.total_count or self.total_count <= 0:
            raise ValueError("zero statistics need 0 <= zero_count <= total_count, total_count > 0")

    @classmethod
    def from_fitted(cls, fitted: FittedModel, k: float = DEFAULT_K) -> "DetectorState":
        zeros, total = fitted.zero_stats
        return cls(fitted, np.asarray(fitted.state_mean, float), np.asarray(fitted.state_cov, float),
                   zeros, total, float(k), fitted.last_timestamp)

    @property
    def zero_proportion(self) -> float:
        return self.zero_count / self.total_count

    def with_k(self, k: float) -> "DetectorState":
        return replace(self, k=float(k))


def train_zero_stats(train) -> tuple[int, int]:
    values = train.values if isinstance(train, TimeSeries) else np.asarray(train, dtype=float)
    if values.size == 0:
        raise ValueError("zero statistics need at least one value")
    return int(np.sum(np.abs(values) <= ZERO_TOL)), int(values.size)


def _to_model(values, transform: Transform):
    """Model-scale values; log1p of out-of-domain test values gives NaN or -inf."""
    v = np.asarray(values, dtype=float)
    if transform is Transform.IDENTITY:
        return v
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.log1p(v)


def _decision(state: DetectorState, ts, value, pred_mean, pred_var, pred_state, is_zero):
    fam = state.fitted.family
    tr = state.fitted.transform
    sigma = math.sqrt(pred_var)
    k = state.k
    lo, hi = inverse_values([pred_mean - k * sigma, pred_mean + k * sigma], tr)
    expected = float(inverse_values(pred_mean, tr))
    breakdown = fam.breakdown(pred_state)
    if is_zero:
        normal = state.zero_proportion > ZERO_PROPORTION_THRESHOLD
        rule = Rule.ZERO_NORMAL if normal else Rule.ZERO
        return AnomalyDecision(int(ts), float(value), not normal, rule, expected, sigma,
                               float(lo), float(hi), None, breakdown, float(pred_mean), tr.value)
    z = float(_to_model(value, tr))
    score = abs(z - pred_mean) / sigma if math.isfinite(z) else math.inf
    return AnomalyDecision(int(ts), float(value), bool(score > k), Rule.CONTINUOUS, expected,
                           sigma, float(lo), float(hi), score, breakdown, float(pred_mean), tr.value)


def advance(state: DetectorState) -> DetectorState:
    """Prediction-only step for a missing grid point."""
    a, P = predict_state(state.fitted.model, state.mean, state.cov)
    ts = None if state.timestamp is None else state.timestamp + state.fitted.granularity
    return replace(state, mean=a, cov=P, timestamp=ts)


def decide_point(state: DetectorState, observed: float,
                 timestamp: int | None = None) -> tuple[AnomalyDecision, DetectorState]:
    """Decide one point on the next grid step and advance the state.

    Zeros follow the zero-proportion rule and leave the continuous model
    unconditioned; other values are scored against the one-step predictive
    Gaussian and always update the filter.
    """
    if not math.isfinite(observed):
        raise ValueError(f"observation must be finite, got {observed!r}")
    model = state.fitted.model
    if timestamp is None:
        timestamp = (state.timestamp or 0) + state.fitted.granularity
    a_pred, P_pred = predict_state(model, state.mean, state.cov)
    mean = float(model.Z @ a_pred + model.d)
    var = float(model.Z @ P_pred @ model.Z + model.H)
    is_zero = abs(observed) <= ZERO_TOL
    decision = _decision(state, timestamp, observed, mean, var, a_pred, is_zero)
    z = float(_to_model(observed, state.fitted.transform))
    if is_zero or not math.isfinite(z):
        a, P = a_pred, P_pred
    else:
        a, P = update_state(model, a_pred, P_pred, z)
    return decision, replace(state, mean=a, cov=P, timestamp=int(timestamp))


def score_series(state: DetectorState, test: TimeSeries, mask=None):
    """Vectorised pass over ``test``: per-point predictive moments and the final state.

    Returns ``(pred_mean, pred_var, pred_state, unobserved, final_state)`` where
    ``unobserved`` marks missing and zero points (no filter update).
    """
    model = state.fitted.model
    values = test.values
    missing = np.zeros(len(test), bool) if mask is None else np.asarray(mask, bool)
    zeros = (np.abs(values) <= ZERO_TOL) & ~missing
    y = np.zeros(len(test))
    skip = missing | zeros
    z = _to_model(values, state.fitted.transform)
    bad = ~np.isfinite(z) & ~skip
    skip = skip | bad
    y[~skip] = z[~skip]
    init = predict_state(model, state.mean, state.cov)
    out = kalman_filter(model, y, skip, init=init, store_states=True, store_cov=False)
    final = replace(state, mean=out.last_state, cov=out.last_cov,
                    timestamp=int(test.timestamps[-1]) if len(test) else state.timestamp)
    return out.pred_mean, out.pred_var, out.pred_state, skip, final


def detect_series(state: DetectorState, test: TimeSeries | None, mask=None):
    """Decisions for every observed point of ``test`` (missing points are skipped).

    Equivalent to calling :func:`decide_point` on each observed point and
    :func:`advance` on each masked one.
    """
    if test is None or len(test) == 0:
        return [], state
    pm, pv, ps, _, final = score_series(state, test, mask)
    missing = np.zeros(len(test), bool) if mask is None else np.asarray(mask, bool)
    out = []
    for i in range(len(test)):
        if missing[i]:
            continue
        v = float(test.values[i])
        out.append(_decision(state, test.timestamps[i], v, float(pm[i]), float(pv[i]),
                             ps[i], abs(v) <= ZERO_TOL))
    return out, final


def align_test(state: DetectorState, test: TimeSeries) -> tuple[TimeSeries, np.ndarray]:
    """Put ``test`` on the model grid continuing from the state's timestamp.

    Leading grid slots between the last processed point and the first test
    point are inserted as missing.
    """
    g = state.fitted.granularity
    if test.granularity % g and len(test) > 1:
        raise ValueError(f"series granularity {test.granularity}s does not match model {g}s")
    grid, mask = fill_gaps(TimeSeries(test.timestamps, test.values, g))
    if state.timestamp is not None:
        gap = int(grid.timestamps[0]) - state.timestamp
        if gap <= 0 or gap % g:
            raise ValueError(
                f"first point {int(grid.timestamps[0])} is not on the model grid after {state.timestamp}"
            )
        n_lead = gap // g - 1
        if n_lead:
            lead_ts = state.timestamp + g * np.arange(1, n_lead + 1)
            grid = TimeSeries(np.concatenate([lead_ts, grid.timestamps]),
                              np.concatenate([np.full(n_lead, grid.values[0]), grid.values]), g)
            mask = np.concatenate([np.ones(n_lead, bool), mask])
    return grid, mask


def anomalies_at(scores, rules, k: float, zero_proportion: float):
    """Binary predictions for threshold ``k`` from precomputed scores."""
    scores = np.asarray(scores, dtype=float)
    out = np.zeros(scores.size, dtype=np.int8)
    cont = np.asarray([r is Rule.CONTINUOUS for r in rules])
    out[cont] = scores[cont] > k
    zero_anom = zero_proportion <= ZERO_PROPORTION_THRESHOLD
    out[~cont] = 1 if zero_anom else 0
    return out


__all__ = [
    "AnomalyDecision",
    "DetectorState",
    "Rule",
    "advance",
    "align_test",
    "anomalies_at",
    "decide_point",
    "detect_series",
    "score_series",
    "train_zero_stats",
]
