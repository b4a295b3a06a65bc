"""Candidate-suite model selection by validation prediction error."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import (
    DataError,
    InsufficientDataError,
    TimeSeries,
    Transform,
    TransformDomainError,
    fill_gaps,
    inverse_values,
    split_index,
    transform_values,
)
from .ssm import (
    FilterDivergenceError,
    FitError,
    fit_mle,
    kalman_filter,
    predict_state,
)
from .structural import ModelFamily, SpecInapplicable, StructuralSpec, build_model, enumerate_suite

TWO_WEEKS = 14 * 86400
MIN_POINTS = 50
ZERO_TOL = 1e-12
MODEL_SCHEMA_VERSION = 1


class SelectionError(RuntimeError):
    """No candidate could be fitted."""

    def __init__(self, message: str, causes: dict[str, str] | None = None):
        self.causes = causes or {}
        if self.causes:
            message += "; " + "; ".join(f"{k}: {v}" for k, v in self.causes.items())
        super().__init__(message)


class ModelFormatError(DataError):
    pass


def validation_mse(predictions, actuals) -> float:
    p = np.asarray(predictions, dtype=float)
    a = np.asarray(actuals, dtype=float)
    if p.shape != a.shape:
        raise ValueError("predictions and actuals differ in length")
    if p.size == 0:
        raise ValueError("validation set is empty")
    return float(np.mean((p - a) ** 2))


def zero_mask(values) -> np.ndarray:
    return np.abs(np.asarray(values, dtype=float)) <= ZERO_TOL


@dataclass
class Prepared:
    """A windowed series on its grid with the masks the continuous model needs."""

    series: TimeSeries
    missing: np.ndarray
    zeros: np.ndarray

    @property
    def unobserved(self) -> np.ndarray:
        return self.missing | self.zeros


def prepare(series: TimeSeries, max_train_window: int | None = TWO_WEEKS) -> Prepared:
    grid, missing = fill_gaps(series)
    if max_train_window is not None:
        n_keep = max(int(max_train_window // grid.granularity), 1)
        if len(grid) > n_keep:
            cut = len(grid) - n_keep
            grid, missing = grid.slice(cut), missing[cut:]
            # a window must start on a real observation
            first = int(np.argmax(~missing))
            grid, missing = grid.slice(first), missing[first:]
    zeros = zero_mask(grid.values) & ~missing
    return Prepared(grid, missing, zeros)


@dataclass
class FittedModel:
    spec: StructuralSpec
    granularity: int
    x: np.ndarray
    scale: float
    level0: float
    loglik: float
    state_mean: np.ndarray
    state_cov: np.ndarray
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.family = build_model(self.spec, self.granularity, self.scale, self.level0)
        self.model = self.family.model_from_x(self.x)

    @property
    def params(self) -> dict:
        return self.family.constrain(self.x)

    @property
    def transform(self) -> Transform:
        return self.spec.transform

    @property
    def zero_stats(self) -> tuple[int, int]:
        return int(self.train_meta["zero_count"]), int(self.train_meta["total_count"])

    @property
    def last_timestamp(self) -> int:
        return int(self.train_meta["window_end"])

    def to_json(self) -> dict:
        m = self.model
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "spec": str(self.spec),
            "granularity_s": self.granularity,
            "param_names": list(self.family.param_names),
            "param_vector": [float(v) for v in self.x],
            "params": self.params,
            "scale": self.scale,
            "level0": self.level0,
            "H": m.H,
            "Q_diag": [float(v) for v in np.diag(m.Q)],
            "a1": [float(v) for v in m.a1],
            "P1_diag": [float(v) for v in np.diag(m.P1)],
            "diffuse_flags": [bool(v) for v in m.diffuse],
            "loglik": self.loglik,
            "state": {
                "mean": [float(v) for v in self.state_mean],
                "cov": [[float(v) for v in row] for row in self.state_cov],
            },
            "train_meta": self.train_meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FittedModel":
        try:
            version = int(obj["schema_version"])
            if version != MODEL_SCHEMA_VERSION:
                raise ModelFormatError(f"unsupported model schema version {version}")
            fm = cls(
                StructuralSpec.parse(obj["spec"]),
                int(obj["granularity_s"]),
                np.array(obj["param_vector"], dtype=float),
                float(obj["scale"]),
                float(obj["level0"]),
                float(obj["loglik"]),
                np.array(obj["state"]["mean"], dtype=float),
                np.array(obj["state"]["cov"], dtype=float),
                dict(obj["train_meta"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"malformed model file: {exc}") from exc
        if fm.model.H != obj["H"] or [float(v) for v in np.diag(fm.model.Q)] != obj["Q_diag"]:
            raise ModelFormatError("stored variances disagree with the parameter vector")
        return fm

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FittedModel":
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ModelFormatError(f"cannot read model {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"model {path} is not valid JSON: {exc.msg}") from exc
        return cls.from_json(obj)


@dataclass
class CandidateResult:
    spec: StructuralSpec
    status: str
    n_params: int
    mse: float | None = None
    loglik: float | None = None
    error: str | None = None
    order: int = 0

    def to_json(self) -> dict:
        return {
            "spec": str(self.spec),
            "status": self.status,
            "n_params": self.n_params,
            "validation_mse": self.mse,
            "loglik": self.loglik,
            "error": self.error,
        }


@dataclass
class SelectionReport:
    candidates: list[CandidateResult]
    winner: StructuralSpec
    window_start: int
    window_end: int
    split_timestamp: int
    n_train: int
    n_validation: int
    refit: bool = True
    refit_loglik: float | None = None

    def to_json(self) -> dict:
        return {
            "winner": str(self.winner),
            "window_start": self.window_start,
            "window_end": self.window_end,
            "validation_start": self.split_timestamp,
            "n_train": self.n_train,
            "n_validation": self.n_validation,
            "refit_on_full_window": self.refit,
            "refit_loglik": self.refit_loglik,
            "candidates": [c.to_json() for c in self.candidates],
        }


def _family_for(spec: StructuralSpec, granularity: int, y, observed) -> ModelFamily:
    vals = y[observed]
    scale = float(np.var(vals)) if vals.size > 1 else 0.0
    level0 = float(vals[0]) if vals.size else 0.0
    return build_model(spec, granularity, scale if scale > 0 else 1.0, level0)


def _model_values(prep: Prepared, transform: Transform) -> np.ndarray:
    """Transformed values with unobserved slots set to 0 (never read)."""
    obs = ~prep.unobserved
    y = np.zeros(len(prep.series))
    y[obs] = transform_values(prep.series.values[obs], transform)
    return y


def evaluate_candidate(spec: StructuralSpec, prep: Prepared, cut: int, order: int = 0,
                       screen_iter: int | None = None) -> CandidateResult:
    """Fit ``spec`` on ``[:cut]`` and score one-step predictions on ``[cut:]``."""
    fam_params = 0
    try:
        y = _model_values(prep, spec.transform)
        observed = ~prep.unobserved
        fam = _family_for(spec, prep.series.granularity, y[:cut], observed[:cut])
        fam_params = fam.n_params
        kw = {} if screen_iter is None else {"screen_iter": screen_iter}
        fit = fit_mle(fam, y[:cut], ~observed[:cut], **kw)
        out = kalman_filter(fit.model, y, ~observed, store_states=False, store_cov=False)
        val = np.arange(len(y)) >= cut
        sel = val & observed
        if not sel.any():
            raise FitError("no observed validation points")
        preds = inverse_values(out.pred_mean[sel], spec.transform)
        mse = validation_mse(preds, prep.series.values[sel])
        if not math.isfinite(mse):
            raise FitError("validation error is not finite")
        return CandidateResult(spec, "ok", fam_params, mse, fit.loglik, order=order)
    except (FitError, FilterDivergenceError, SpecInapplicable, TransformDomainError,
            np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        return CandidateResult(spec, "failed", fam_params, error=f"{type(exc).__name__}: {exc}",
                               order=order)


def pick_winner(results: Iterable[CandidateResult]) -> CandidateResult | None:
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        return None
    return min(ok, key=lambda r: (r.mse, r.n_params, r.order))


def fit_final(spec: StructuralSpec, prep: Prepared, screen_iter: int | None = None) -> FittedModel:
    """Fit ``spec`` on the whole prepared window and capture the end-of-window posterior."""
    y = _model_values(prep, spec.transform)
    observed = ~prep.unobserved
    fam = _family_for(spec, prep.series.granularity, y, observed)
    kw = {} if screen_iter is None else {"screen_iter": screen_iter}
    fit = fit_mle(fam, y, ~observed, **kw)
    out = kalman_filter(fit.model, y, ~observed, store_states=False, store_cov=False)
    ts = prep.series.timestamps
    meta = {
        "window_start": int(ts[0]),
        "window_end": int(ts[-1]),
        "n_points": int(len(ts)),
        "n_missing": int(prep.missing.sum()),
        "zero_count": int(prep.zeros.sum()),
        "total_count": int((~prep.missing).sum()),
        "n_observed_continuous": int(observed.sum()),
    }
    return FittedModel(spec, prep.series.granularity, fit.x, fam.scale, fam.level0,
                       fit.loglik, out.last_state, out.last_cov, meta)


def select_model(series: TimeSeries, max_train_window: int | None = TWO_WEEKS, *,
                 suite: Sequence[StructuralSpec] | None = None, ratio: float = 0.8,
                 jobs: int = 1, refit: bool = True,
                 screen_iter: int | None = None) -> tuple[FittedModel, SelectionReport]:
    """Pick the candidate with the lowest validation MSE and refit it.

    The history is cut to the trailing ``max_train_window`` seconds and split
    80:20 in time. Each candidate is fitted on the first part; its one-step
    predictions over the second part (back-transformed to the original scale)
    are scored by mean squared error. Zeros and missing points are treated
    as unobserved by the continuous model.

    Raises
    ------
    InsufficientDataError
        Fewer than 50 grid points remain after windowing.
    SelectionError
        Every candidate failed.
    """
    prep = prepare(series, max_train_window)
    n = len(prep.series)
    if n < MIN_POINTS:
        raise InsufficientDataError(f"{n} grid points after windowing, need {MIN_POINTS}")
    cut = split_index(n, ratio)
    cont = prep.series.values[~prep.unobserved]
    if cont.size == 0:
        raise InsufficientDataError("no nonzero observations in the training window")
    if suite is None:
        suite = enumerate_suite(prep.series.granularity, cont)
    suite = list(suite)

    args = [(spec, prep, cut, i, screen_iter) for i, spec in enumerate(suite)]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_star, args))
    else:
        results = [evaluate_candidate(*a) for a in args]

    best = pick_winner(results)
    if best is None:
        raise SelectionError("all candidates failed", {str(r.spec): r.error for r in results})

    train = prep
    if not refit:
        train = Prepared(prep.series.slice(0, cut), prep.missing[:cut], prep.zeros[:cut])
    fitted = fit_final(best.spec, train, screen_iter)
    if not refit:
        # carry the posterior through the validation part so detection resumes at the window end
        y = _model_values(prep, best.spec.transform)
        out = kalman_filter(fitted.model, y[cut:], prep.unobserved[cut:],
                            init=_predicted(fitted), store_states=False, store_cov=False)
        fitted.state_mean, fitted.state_cov = out.last_state, out.last_cov
        fitted.train_meta["window_end"] = int(prep.series.timestamps[-1])
    ts = prep.series.timestamps
    report = SelectionReport(results, best.spec, int(ts[0]), int(ts[-1]), int(ts[cut]),
                             cut, n - cut, refit, fitted.loglik)
    fitted.train_meta["selection_mse"] = best.mse
    return fitted, report


def _predicted(fitted: FittedModel):
    return predict_state(fitted.model, fitted.state_mean, fitted.state_cov)


def _evaluate_star(args):
    return evaluate_candidate(*args)
