"""Structural components (trend + seasonal + error) cast in state-space form."""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import block_diag

from .data import Transform
from .ssm import (
    DIFFUSE_KAPPA,
    LOG_VAR_BOUNDS,
    PACF_BOUNDS,
    VARIANCE_FLOOR,
    StateSpaceModel,
    ar_stationary_cov,
    constrain_pacf,
    constrain_variance,
    pacf_to_ar,
    unconstrain_pacf,
    unconstrain_variance,
    ar_to_pacf,
)

MAX_DUMMY_PERIOD = 24
MAX_HARMONICS = 10


class Trend(str, enum.Enum):
    LINEAR_MODEL = "linear_model"
    LOCAL_LEVEL = "local_level"
    LOCAL_LINEAR = "local_linear"


class Seasonal(str, enum.Enum):
    NONE = "none"
    HOURLY = "hourly"
    DAILY = "daily"


class Error(str, enum.Enum):
    GAUSSIAN = "gaussian"
    AR1 = "ar1"
    AR2 = "ar2"


SEASON_SECONDS = {Seasonal.HOURLY: 3600, Seasonal.DAILY: 86400}


class SpecInapplicable(ValueError):
    """The candidate cannot be built for this granularity or data."""


class StructuralSpec(NamedTuple):
    trend: Trend
    seasonal: Seasonal
    error: Error
    transform: Transform

    @classmethod
    def parse(cls, text: str) -> "StructuralSpec":
        parts = text.strip().split(":")
        if len(parts) == 3:
            parts.append(Transform.IDENTITY.value)
        if len(parts) != 4:
            raise ValueError(f"expected trend:seasonal:error:transform, got {text!r}")
        try:
            return cls(Trend(parts[0]), Seasonal(parts[1]), Error(parts[2]), Transform(parts[3]))
        except ValueError as exc:
            raise ValueError(f"bad model spec {text!r}: {exc}") from None

    def __str__(self) -> str:
        return ":".join(p.value for p in self)


def seasonal_period(seasonal: Seasonal, granularity: int) -> int | None:
    if seasonal is Seasonal.NONE:
        return None
    secs = SEASON_SECONDS[seasonal]
    if secs % granularity:
        raise SpecInapplicable(f"{seasonal.value} period is not a whole number of {granularity}s steps")
    s = secs // granularity
    if s < 2:
        raise SpecInapplicable(f"{seasonal.value} period spans fewer than 2 steps at {granularity}s")
    return s


@dataclass(frozen=True)
class Block:
    name: str           # trend | seasonal | error
    start: int
    size: int


class ModelFamily:
    """A structural spec bound to a granularity and data scale.

    Free parameters, in order: trend variances, the seasonal variance, then
    either the observation variance ``H`` (gaussian error) or the AR partial
    autocorrelations followed by the AR innovation variance. Variances are
    parameterised relative to ``scale`` (the training variance) with a floor
    of ``VARIANCE_FLOOR * scale``.
    """

    def __init__(self, spec: StructuralSpec, granularity: int, scale: float = 1.0,
                 level0: float = 0.0):
        self.spec = spec
        self.granularity = int(granularity)
        self.scale = float(scale) if scale > 0 else 1.0
        self.level0 = float(level0)
        self.period = seasonal_period(spec.seasonal, self.granularity)

        blocks, T_blocks, Z_parts, R_cols, diffuse = [], [], [], [], []
        self.var_names: list[str] = []
        pos = 0

        def add(name, T, Z, noise, is_diffuse):
            # noise: (state offset within block, variance parameter name) per source
            nonlocal pos
            k = T.shape[0]
            blocks.append(Block(name, pos, k))
            T_blocks.append(T)
            Z_parts.append(Z)
            diffuse.extend([is_diffuse] * k)
            for offset, pname in noise:
                R_cols.append((pos + offset, pname))
            pos += k

        trend = spec.trend
        if trend is Trend.LINEAR_MODEL:
            add("trend", np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([1.0, 0.0]), [], True)
        elif trend is Trend.LOCAL_LEVEL:
            add("trend", np.eye(1), np.ones(1), [(0, "q_level")], True)
            self.var_names.append("q_level")
        else:
            add("trend", np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([1.0, 0.0]),
                [(0, "q_level"), (1, "q_slope")], True)
            self.var_names += ["q_level", "q_slope"]

        if self.period is not None:
            s = self.period
            if s <= MAX_DUMMY_PERIOD:
                k = s - 1
                T = np.zeros((k, k))
                T[0, :] = -1.0
                T[1:, :-1] = np.eye(k - 1)
                Z = np.zeros(k)
                Z[0] = 1.0
                add("seasonal", T, Z, [(0, "q_seasonal")], True)
            else:
                K = min(MAX_HARMONICS, s // 2)
                T = np.zeros((2 * K, 2 * K))
                for j in range(1, K + 1):
                    lam = 2.0 * math.pi * j / s
                    cs, sn = math.cos(lam), math.sin(lam)
                    i = 2 * (j - 1)
                    T[i:i + 2, i:i + 2] = [[cs, sn], [-sn, cs]]
                Z = np.tile([1.0, 0.0], K)
                # independent disturbances sharing one variance
                add("seasonal", T, Z, [(i, "q_seasonal") for i in range(2 * K)], True)
            self.var_names.append("q_seasonal")

        self.ar_order = {Error.GAUSSIAN: 0, Error.AR1: 1, Error.AR2: 2}[spec.error]
        if self.ar_order:
            p = self.ar_order
            T = np.zeros((p, p))
            T[1:, :-1] = np.eye(p - 1)
            Z = np.zeros(p)
            Z[0] = 1.0
            add("error", T, Z, [(0, "sigma2_ar")], False)
            self.param_names = (
                self.var_names + [f"pacf{i + 1}" for i in range(p)] + ["sigma2_ar"]
            )
        else:
            self.var_names.append("H")
            self.param_names = list(self.var_names)

        self.blocks = blocks
        self.state_dim = pos
        self._T = block_diag(*T_blocks)
        self._Z = np.concatenate(Z_parts)
        self._diffuse = np.array(diffuse, dtype=bool)
        self._R = np.zeros((pos, len(R_cols)))
        for j, (row, _) in enumerate(R_cols):
            self._R[row, j] = 1.0
        self._noise_params = [pname for _, pname in R_cols]
        self.ar_start = blocks[-1].start if self.ar_order else None

    # -- parameters ----------------------------------------------------------------
    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def bounds(self):
        b = []
        for name in self.param_names:
            b.append(PACF_BOUNDS if name.startswith("pacf") else LOG_VAR_BOUNDS)
        return b

    def constrain(self, x) -> dict:
        x = np.asarray(x, dtype=float)
        out = {}
        for name, xi in zip(self.param_names, x):
            if name.startswith("pacf"):
                out[name] = float(constrain_pacf(xi))
            else:
                out[name] = float(constrain_variance(xi, self.scale))
        return out

    def unconstrain(self, params: dict) -> np.ndarray:
        x = []
        for name in self.param_names:
            if name.startswith("pacf"):
                x.append(float(unconstrain_pacf(params[name])))
            else:
                x.append(float(unconstrain_variance(params[name], self.scale)))
        return np.array(x)

    def ar_coefficients(self, params: dict) -> np.ndarray:
        return pacf_to_ar([params[f"pacf{i + 1}"] for i in range(self.ar_order)])

    def params_from_ar(self, phi, **variances) -> dict:
        """Named parameters from AR coefficients (convenience for simulation)."""
        out = dict(variances)
        for i, r in enumerate(ar_to_pacf(phi)):
            out[f"pacf{i + 1}"] = float(r)
        return out

    # -- model construction ---------------------------------------------------------
    def model(self, params: dict) -> StateSpaceModel:
        """Bind named constrained parameters into a state-space model."""
        T = self._T.copy()
        a1 = np.zeros(self.state_dim)
        a1[0] = self.level0
        diffuse_var = DIFFUSE_KAPPA * (self.scale + 1.0)
        P1 = np.diag(np.where(self._diffuse, diffuse_var, 0.0))
        if self.ar_order:
            phi = self.ar_coefficients(params)
            i = self.ar_start
            T[i, i:i + self.ar_order] = phi
            P1[i:, i:] = ar_stationary_cov(phi, params["sigma2_ar"])
            H = VARIANCE_FLOOR * self.scale
        else:
            H = params["H"]
        Q = np.diag([params[name] for name in self._noise_params])
        return StateSpaceModel(self._Z, T, self._R, Q, H, a1, P1, self._diffuse)

    def model_from_x(self, x) -> StateSpaceModel:
        return self.model(self.constrain(x))

    def start_points(self, y, observed) -> list[np.ndarray]:
        """Three deterministic starts: moment-informed, unit, and 0.1 x unit."""
        return [self.unconstrain(p) for p in self.start_params(y, observed)]

    def start_params(self, y, observed) -> list[dict]:
        y = np.asarray(y, dtype=float)
        obs = np.asarray(observed, dtype=bool)
        vals = y[obs]
        dv = np.diff(vals) if vals.size > 1 else np.zeros(1)
        rel_dvar = float(np.var(dv)) / self.scale if dv.size > 1 else 1.0
        rel_dvar = min(max(rel_dvar, 1e-4), 10.0)
        mom = {"q_level": rel_dvar / 4, "q_slope": rel_dvar / 1000, "q_seasonal": rel_dvar / 100,
               "H": rel_dvar / 4, "sigma2_ar": rel_dvar / 4}
        if self.ar_order:
            # sample partial autocorrelations of the first differences, shrunk
            r = _sample_pacf(dv, self.ar_order)
            for i in range(self.ar_order):
                mom[f"pacf{i + 1}"] = float(np.clip(r[i], -0.9, 0.9))
        starts = []
        for rel in (mom, None, 0.1):
            p = {}
            for name in self.param_names:
                if name.startswith("pacf"):
                    p[name] = rel[name] if isinstance(rel, dict) else (0.0 if rel is None else 0.1)
                else:
                    r = rel[name] if isinstance(rel, dict) else (1.0 if rel is None else 0.1)
                    p[name] = self.scale * (VARIANCE_FLOOR + r)
            starts.append(p)
        return starts

    # -- interpretation ---------------------------------------------------------------
    def component_slices(self) -> dict[str, slice]:
        return {b.name: slice(b.start, b.start + b.size) for b in self.blocks}

    def breakdown(self, pred_state) -> dict[str, float]:
        """Contribution of each component to the predicted observation."""
        out = {"trend": 0.0, "seasonal": 0.0, "error": 0.0}
        a = np.asarray(pred_state, dtype=float)
        for name, sl in self.component_slices().items():
            out[name] = float(self._Z[sl] @ a[sl])
        return out


def _sample_pacf(x, p: int) -> np.ndarray:
    x = np.asarray(x, dtype=float) - np.mean(x)
    denom = float(x @ x)
    if denom <= 0 or x.size <= p + 1:
        return np.zeros(p)
    acf = np.array([float(x[k:] @ x[:x.size - k]) / denom for k in range(p + 1)])
    r = np.zeros(p)
    r[0] = acf[1]
    if p > 1:
        r[1] = (acf[2] - acf[1] ** 2) / max(1.0 - acf[1] ** 2, 1e-12)
    return r


def build_model(spec: StructuralSpec | str, granularity: int, scale: float = 1.0,
                level0: float = 0.0) -> ModelFamily:
    if isinstance(spec, str):
        spec = StructuralSpec.parse(spec)
    return ModelFamily(spec, granularity, scale, level0)


def enumerate_suite(granularity: int, values=None) -> list[StructuralSpec]:
    """All applicable (trend, seasonal, error, transform) combinations in declaration order."""
    allow_log = values is None or not np.any(np.asarray(values, dtype=float) < 0)
    out = []
    for trend, seas, err, tr in itertools.product(Trend, Seasonal, Error, Transform):
        if tr is Transform.LOG1P and not allow_log:
            continue
        try:
            seasonal_period(seas, granularity)
        except SpecInapplicable:
            continue
        out.append(StructuralSpec(trend, seas, err, tr))
    return out
