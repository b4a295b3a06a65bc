"""Linear Gaussian state-space models with time-invariant system matrices.

Observation and state equations::

    y_t       = Z alpha_t + d + eps_t,          eps_t ~ N(0, H)
    alpha_t+1 = T alpha_t + c + R eta_t,        eta_t ~ N(0, Q)

with ``alpha_1 ~ N(a1, P1)``. Coordinates flagged diffuse carry a large
prior variance and the first ``sum(diffuse)`` observed steps are left out
of the log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import kernels
from .data import TimeSeries

DIFFUSE_KAPPA = 1e7
VARIANCE_FLOOR = 1e-8
# 0 disables the steady-state shortcut; freezing the gain makes the
# likelihood piecewise in the parameters, which upsets finite differences
STEADY_STATE_TOL = 0.0
FD_STEP = 1e-5
# iterations each start gets before only the best one continues
SCREEN_ITER = 5
# bounds on the unconstrained parameters; keep L-BFGS-B away from overflow
LOG_VAR_BOUNDS = (-30.0, 12.0)
PACF_BOUNDS = (-30.0, 30.0)


class FilterDivergenceError(ArithmeticError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"prediction variance {value!r} is not positive at step {step}")


class FitError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    Z: np.ndarray
    T: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    H: float
    a1: np.ndarray
    P1: np.ndarray
    diffuse: np.ndarray
    d: float = 0.0
    c: np.ndarray | None = None

    def __post_init__(self):
        Z = np.ascontiguousarray(self.Z, dtype=float).reshape(-1)
        m = Z.size
        T = np.ascontiguousarray(self.T, dtype=float).reshape(m, m)
        R = np.asarray(self.R, dtype=float).reshape(m, -1)
        Q = np.asarray(self.Q, dtype=float).reshape(R.shape[1], R.shape[1])
        c = np.zeros(m) if self.c is None else np.asarray(self.c, dtype=float).reshape(m)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "c", np.ascontiguousarray(c))
        object.__setattr__(self, "a1", np.ascontiguousarray(self.a1, dtype=float).reshape(m))
        object.__setattr__(self, "P1", np.ascontiguousarray(self.P1, dtype=float).reshape(m, m))
        object.__setattr__(self, "diffuse", np.asarray(self.diffuse, dtype=bool).reshape(m))
        object.__setattr__(self, "H", float(self.H))
        object.__setattr__(self, "d", float(self.d))
        self.validate()

    @property
    def state_dim(self) -> int:
        return self.Z.size

    @property
    def n_diffuse(self) -> int:
        return int(self.diffuse.sum())

    @property
    def RQR(self) -> np.ndarray:
        M = self.R @ self.Q @ self.R.T
        return np.ascontiguousarray((M + M.T) / 2)

    def validate(self, tol: float = 1e-10) -> None:
        if not self.H >= 0:
            raise ValueError(f"observation variance must be >= 0, got {self.H}")
        if not np.allclose(self.Q, self.Q.T, atol=tol):
            raise ValueError("Q must be symmetric")
        if self.Q.size and np.linalg.eigvalsh(self.Q).min() < -tol * max(1.0, np.abs(self.Q).max()):
            raise ValueError("Q must be positive semidefinite")
        keep = ~self.diffuse
        P = self.P1[np.ix_(keep, keep)]
        if not np.allclose(P, P.T, atol=tol * max(1.0, np.abs(P).max(initial=0.0))):
            raise ValueError("P1 must be symmetric")
        if P.size and np.linalg.eigvalsh(P).min() < -tol * max(1.0, np.abs(P).max()):
            raise ValueError("P1 must be positive semidefinite on non-diffuse coordinates")


@dataclass(eq=False)
class FilterOutput:
    pred_mean: np.ndarray
    pred_var: np.ndarray
    pred_state: np.ndarray
    filtered_state: np.ndarray
    filtered_cov: np.ndarray | None
    loglik: float
    nobs: int
    last_state: np.ndarray
    last_cov: np.ndarray
    next_state: np.ndarray
    next_cov: np.ndarray


def _as_arrays(observations, mask):
    y = observations.values if isinstance(observations, TimeSeries) else observations
    y = np.ascontiguousarray(y, dtype=float).reshape(-1)
    observed = np.ones(y.size, dtype=bool) if mask is None else ~np.asarray(mask, dtype=bool)
    if observed.shape != y.shape:
        raise ValueError("mask length must equal the number of observations")
    if not np.all(np.isfinite(y[observed])):
        raise ValueError("observations must be finite")
    y = np.where(observed, y, 0.0)
    return y, np.ascontiguousarray(observed, dtype=np.uint8)


def kalman_filter(model: StateSpaceModel, observations, mask=None, *,
                  init: tuple[np.ndarray, np.ndarray] | None = None,
                  store_states: bool = True, store_cov: bool = True,
                  steady_state_tol: float = STEADY_STATE_TOL,
                  backend: Callable | None = None) -> FilterOutput:
    """Run the Kalman filter over ``observations``.

    Points where ``mask`` is True are unobserved: the step is prediction
    only and contributes nothing to the log-likelihood. ``init`` replaces
    the model's prior with a predicted state ``(a, P)`` for the first point;
    no burn-in is applied in that case.

    Raises
    ------
    FilterDivergenceError
        If a one-step prediction variance is not strictly positive.
    """
    y, observed = _as_arrays(observations, mask)
    if init is None:
        a1, P1, n_burn = model.a1, model.P1, model.n_diffuse
    else:
        a1 = np.ascontiguousarray(init[0], dtype=float)
        P1 = np.ascontiguousarray(init[1], dtype=float)
        n_burn = 0
    loop = backend or kernels.filter_loop
    res = loop(y, observed, model.Z, model.T, model.c, model.d, model.H, model.RQR,
               a1, P1, n_burn, store_states, store_cov, steady_state_tol)
    (pm, pv, ps, fs, fc, a_last, P_last, a_next, P_next, ll, nobs, fail) = res
    if fail >= 0:
        raise FilterDivergenceError(int(fail), float(pv[fail]))
    return FilterOutput(pm, pv, ps, fs, fc, float(ll), int(nobs), a_last, P_last, a_next, P_next)


def loglike(model: StateSpaceModel, observations, mask=None) -> float:
    return kalman_filter(model, observations, mask, store_states=False, store_cov=False).loglik


def predict_state(model: StateSpaceModel, state, cov):
    a = model.T @ state + model.c
    P = model.T @ cov @ model.T.T + model.RQR
    return a, (P + P.T) / 2


def forecast_one(model: StateSpaceModel, filtered_state, filtered_cov) -> tuple[float, float]:
    """One-step-ahead predictive mean and variance from a posterior state."""
    a, P = predict_state(model, np.asarray(filtered_state, float), np.asarray(filtered_cov, float))
    return float(model.Z @ a + model.d), float(model.Z @ P @ model.Z + model.H)


def update_state(model: StateSpaceModel, pred_state, pred_cov, y: float):
    """Condition a predicted state on one observation."""
    PZ = pred_cov @ model.Z
    F = float(model.Z @ PZ + model.H)
    if not F > 0:
        raise FilterDivergenceError(0, F)
    v = y - float(model.Z @ pred_state) - model.d
    a = pred_state + PZ * (v / F)
    P = pred_cov - np.outer(PZ, PZ) / F
    return a, (P + P.T) / 2


# -- parameter transforms ---------------------------------------------------------

def pacf_to_ar(r: Sequence[float]) -> np.ndarray:
    """Durbin-Levinson map from partial autocorrelations in (-1, 1) to AR coefficients."""
    phi = np.zeros(0)
    for k, rk in enumerate(r):
        phi = np.append(phi - rk * phi[::-1], rk) if k else np.array([rk], dtype=float)
    return phi


def ar_to_pacf(phi: Sequence[float]) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).copy()
    p = phi.size
    r = np.zeros(p)
    for k in range(p - 1, -1, -1):
        rk = phi[k]
        r[k] = rk
        if k:
            phi = (phi[:k] + rk * phi[:k][::-1]) / (1.0 - rk * rk)
    return r


def constrain_pacf(x):
    x = np.asarray(x, dtype=float)
    return x / np.sqrt(1.0 + x * x)


def unconstrain_pacf(r):
    r = np.asarray(r, dtype=float)
    return r / np.sqrt(1.0 - r * r)


def constrain_variance(x, scale: float, floor: float = VARIANCE_FLOOR):
    return scale * (floor + np.exp(np.asarray(x, dtype=float)))


def unconstrain_variance(v, scale: float, floor: float = VARIANCE_FLOOR):
    rel = np.asarray(v, dtype=float) / scale - floor
    if np.any(rel <= 0):
        raise ValueError("variance at or below the floor has no unconstrained preimage")
    return np.log(rel)


def ar_stationary_cov(phi, sigma2: float) -> np.ndarray:
    """Stationary covariance of the AR(p) companion-form state."""
    phi = np.asarray(phi, dtype=float)
    p = phi.size
    T = np.zeros((p, p))
    T[0] = phi
    T[1:, :-1] = np.eye(p - 1)
    RQR = np.zeros((p, p))
    RQR[0, 0] = sigma2
    # vec(P) = (I - T kron T)^-1 vec(RQR); p <= 2 so the Kronecker system is tiny
    P = np.linalg.solve(np.eye(p * p) - np.kron(T, T), RQR.reshape(-1)).reshape(p, p)
    return (P + P.T) / 2


# -- maximum likelihood ------------------------------------------------------------

@dataclass(eq=False)
class FitResult:
    model: StateSpaceModel
    x: np.ndarray
    loglik: float
    start_logliks: list[float]
    n_evals: int
    converged: bool
    message: str = ""
    extra: dict = field(default_factory=dict)


def fit_mle(family, observations, mask=None, *, starts: Sequence[np.ndarray] | None = None,
            maxiter: int = 500, ftol: float = 1e-6, screen_iter: int = SCREEN_ITER) -> FitResult:
    """Maximise the Gaussian log-likelihood over ``family``'s parameters.

    ``family`` must provide ``n_params``, ``bounds()``, ``start_points(y, observed)``
    and ``model_from_x(x)``. Every start is advanced ``screen_iter`` L-BFGS-B
    iterations (finite-difference gradients); the most promising one is then
    run to convergence. Ties keep the earliest start.
    """
    y, observed = _as_arrays(observations, mask)
    if family.n_params and observed.sum() < 3 * family.n_params:
        raise FitError(
            f"{int(observed.sum())} observations for {family.n_params} free parameters"
        )
    n_evals = 0

    def negll(x):
        nonlocal n_evals
        n_evals += 1
        try:
            model = family.model_from_x(x)
            res = kernels.filter_loop(y, observed, model.Z, model.T, model.c, model.d, model.H,
                                      model.RQR, model.a1, model.P1, model.n_diffuse,
                                      False, False, 0.0)
        except (ValueError, np.linalg.LinAlgError):
            return np.inf
        if res[-1] >= 0 or not math.isfinite(res[-3]):
            return np.inf
        return -res[-3]

    if starts is None:
        starts = family.start_points(y, observed)
    bounds = family.bounds()
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def run(x0, f0, iters):
        res = optimize.minimize(
            _finite(negll, f0), x0, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": iters, "ftol": ftol, "gtol": 1e-8, "maxls": 30, "eps": FD_STEP},
        )
        x1 = np.asarray(res.x, dtype=float)
        f1 = negll(x1)
        if f1 <= f0:
            return f1, x1, bool(res.success), str(res.message)
        return f0, x0, False, "no improvement"

    start_ll = []
    screened = []
    for x0 in starts:
        x0 = np.clip(np.asarray(x0, dtype=float), lo, hi) if family.n_params else np.zeros(0)
        f0 = negll(x0)
        start_ll.append(-f0)
        if not math.isfinite(f0):
            continue
        if family.n_params == 0:
            screened.append((f0, x0, True, "no free parameters"))
        elif screen_iter > 0 and len(starts) > 1:
            screened.append(run(x0, f0, screen_iter))
        else:
            screened.append(run(x0, f0, maxiter))
    if not screened:
        raise FitError("log-likelihood is not finite at any start")
    best = min(screened, key=lambda c: c[0])
    if family.n_params and screen_iter > 0 and len(starts) > 1 and not best[2]:
        best = run(best[1], best[0], maxiter)
    f, x, ok, msg = best
    if not math.isfinite(f):
        raise FitError("log-likelihood is not finite at any start")
    return FitResult(family.model_from_x(x), x, -f, start_ll, n_evals, ok, msg)


def _finite(fun, fallback):
    """Replace non-finite objective values with a large penalty for L-BFGS-B."""
    penalty = abs(fallback) * 10.0 + 1e6

    def wrapped(x):
        v = fun(x)
        return v if math.isfinite(v) else penalty

    return wrapped

