"""Counting-process survival kernels.

Risk intervals follow the (start, stop] convention: a subject is at risk at
event time t when start < t <= stop, and an interval's covariates are the
values in force over that window (observed at or before its start).  Builders
elsewhere open each subject's first interval just before time zero so that
day-0 events have a well-defined risk set; nothing in this module treats
time 0 specially.

Tied event times use the Breslow convention throughout, which keeps the
partial likelihood, the baseline-hazard increments and the product-integral
evaluation mutually consistent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exceptions import ConvergenceError, DataError, ModelError, RankDeficiencyError, SeparationError

__all__ = [
    "RiskInterval",
    "CumulativeHazard",
    "CovariatePath",
    "ProportionalHazardsFit",
    "nelson_aalen",
    "cox_fit",
    "breslow_baseline",
    "survivor_at",
    "density_at",
]

_SEPARATION_BOUND = 20.0  # on standardized covariates
_GRADIENT_TOL = 1e-8  # scaled score norm required at the solution


@dataclass(frozen=True)
class RiskInterval:
    """One covariate-constant at-risk span for one subject."""

    subject_id: object
    start: float
    stop: float
    covariates: tuple[float, ...]
    event: bool

    def __post_init__(self):
        if not self.stop > self.start:
            raise DataError(
                f"risk interval for subject {self.subject_id!r} has start {self.start} >= stop {self.stop}"
            )


@dataclass(frozen=True)
class CumulativeHazard:
    """Right-continuous non-decreasing step function with Lambda(0-) = 0."""

    jump_times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "jump_times", np.asarray(self.jump_times, dtype=float))
        object.__setattr__(self, "increments", np.asarray(self.increments, dtype=float))
        if np.any(self.increments <= 0):
            raise DataError("cumulative hazard increments must be positive")
        if np.any(np.diff(self.jump_times) <= 0):
            raise DataError("cumulative hazard jump times must be strictly increasing")
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(self.increments)]))

    def value(self, t):
        """Lambda(t) = sum of increments at jump times <= t."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        out = self._cum[idx]
        return float(out) if np.ndim(t) == 0 else out

    def survivor(self, t):
        return np.exp(-self.value(t))

    def increment_at(self, t, atol: float = 1e-9):
        """(jump size, exact jump time) at t, or None when t is not a jump time."""
        idx = np.searchsorted(self.jump_times, t)
        for j in (idx - 1, idx):
            if 0 <= j < len(self.jump_times) and abs(self.jump_times[j] - t) <= atol:
                return float(self.increments[j]), float(self.jump_times[j])
        return None


@dataclass(frozen=True)
class CovariatePath:
    """Piecewise-constant covariate history for one subject.

    ``values[j]`` is in force on (breaks[j], breaks[j+1]]; a query at the
    first break (time 0, the baseline atom) returns ``values[0]``.  This is
    the same predictable convention used to build risk intervals.
    """

    breaks: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "breaks", np.asarray(self.breaks, dtype=float))
        object.__setattr__(self, "values", np.atleast_2d(np.asarray(self.values, dtype=float)))
        if len(self.breaks) != len(self.values):
            raise DataError("covariate path needs one value row per break")
        if len(self.breaks) == 0:
            raise DataError("covariate path needs at least one break")
        if np.any(np.diff(self.breaks) <= 0):
            raise DataError("covariate path breaks must be strictly increasing")

    def indices_at(self, times: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.breaks, times, side="left") - 1
        return np.clip(idx, 0, len(self.breaks) - 1)

    def value_at(self, t):
        idx = self.indices_at(np.atleast_1d(np.asarray(t, dtype=float)))
        out = self.values[idx]
        return out[0] if np.ndim(t) == 0 else out


@dataclass
class ConvergenceReport:
    iterations: int
    gradient_norm: float
    converged: bool
    log_partial_likelihood: float


@dataclass
class ProportionalHazardsFit:
    """Fitted relative-risk model lambda(t | x) = lambda_0(t) * exp(coef . x)."""

    coefficients: np.ndarray
    covariate_spec: tuple[str, ...]
    baseline: CumulativeHazard
    convergence_report: ConvergenceReport | None = None
    information: np.ndarray | None = field(default=None, repr=False)

    def relative_risk(self, x):
        return np.exp(np.asarray(x, dtype=float) @ self.coefficients)

    def to_json(self) -> str:
        payload = {
            "coefficients": np.asarray(self.coefficients).tolist(),
            "covariate_spec": list(self.covariate_spec),
            "baseline": {
                "jump_times": self.baseline.jump_times.tolist(),
                "increments": self.baseline.increments.tolist(),
            },
        }
        if self.convergence_report is not None:
            payload["convergence_report"] = {
                "iterations": self.convergence_report.iterations,
                "gradient_norm": self.convergence_report.gradient_norm,
                "converged": self.convergence_report.converged,
                "log_partial_likelihood": self.convergence_report.log_partial_likelihood,
            }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ProportionalHazardsFit":
        payload = json.loads(text)
        report = None
        if "convergence_report" in payload:
            report = ConvergenceReport(**payload["convergence_report"])
        return cls(
            coefficients=np.asarray(payload["coefficients"], dtype=float),
            covariate_spec=tuple(payload["covariate_spec"]),
            baseline=CumulativeHazard(
                np.asarray(payload["baseline"]["jump_times"], dtype=float),
                np.asarray(payload["baseline"]["increments"], dtype=float),
            ),
            convergence_report=report,
        )


def _as_arrays(intervals):
    intervals = list(intervals)
    if not intervals:
        raise DataError("no risk intervals supplied")
    start = np.asarray([iv.start for iv in intervals], dtype=float)
    stop = np.asarray([iv.stop for iv in intervals], dtype=float)
    event = np.asarray([iv.event for iv in intervals], dtype=bool)
    X = np.asarray([iv.covariates for iv in intervals], dtype=float).reshape(len(intervals), -1)
    return start, stop, event, X


class CoxWorkspace:
    """Precomputed sort/segment structure for repeated partial-likelihood sweeps.

    Risk-set sums at the distinct event times are assembled as cumulative
    segment sums over two sorted orders: intervals enter the risk set of time
    t when stop >= t and leave it when start >= t.  Everything that does not
    depend on the coefficient vector is computed once here.
    """

    def __init__(self, start, stop, event, X):
        self.start, self.stop, self.event = start, stop, event
        self.X = X
        self.m, self.p = X.shape
        ev_times, ev_counts = np.unique(stop[event], return_counts=True)
        if len(ev_times) == 0:
            raise DataError("cox_fit requires at least one event")
        self.times_desc = ev_times[::-1]
        self.d = ev_counts[::-1].astype(float)
        self.sum_x_events = X[event].sum(axis=0)
        self.X_events = X[event]

        stop_sorted = np.sort(stop)
        start_sorted = np.sort(start)
        # number of intervals with stop >= t / start >= t, per event time
        self.pos_stop = self.m - np.searchsorted(stop_sorted, self.times_desc, side="left")
        self.pos_start = self.m - np.searchsorted(start_sorted, self.times_desc, side="left")
        self.order_stop = np.argsort(-stop, kind="stable")
        self.order_start = np.argsort(-start, kind="stable")

    def _cum_sums(self, w, order, positions, order2):
        """Cumulative [S0, S1, S2] over the first positions[k] rows of X[order]."""
        Xo = self.X[order]
        wo = w[order]
        c0 = np.concatenate([[0.0], np.cumsum(wo)])
        S0 = c0[positions]
        if not order2:
            return S0, None, None
        c1 = np.vstack([np.zeros(self.p), np.cumsum(wo[:, None] * Xo, axis=0)])
        S1 = c1[positions]
        T = len(positions)
        S2 = np.zeros((T, self.p, self.p))
        G = np.zeros((self.p, self.p))
        prev = 0
        for k in range(T):
            pos = positions[k]
            if pos > prev:
                Xi = Xo[prev:pos]
                G = G + (Xi * wo[prev:pos, None]).T @ Xi
                prev = pos
            S2[k] = G
        return S0, S1, S2

    def risk_sums(self, beta, order2):
        w = np.exp(self.X @ beta)
        A0, A1, A2 = self._cum_sums(w, self.order_stop, self.pos_stop, order2)
        R0, R1, R2 = self._cum_sums(w, self.order_start, self.pos_start, order2)
        if order2:
            return A0 - R0, A1 - R1, A2 - R2
        return A0 - R0, None, None

    def loglik(self, beta):
        S0, _, _ = self.risk_sums(beta, order2=False)
        if np.any(S0 <= 0):
            raise ModelError("empty or degenerate risk set at an event time")
        return float((self.X_events @ beta).sum() - np.sum(self.d * np.log(S0)))

    def score_info(self, beta):
        S0, S1, S2 = self.risk_sums(beta, order2=True)
        if np.any(S0 <= 0):
            raise ModelError("empty or degenerate risk set at an event time")
        xbar = S1 / S0[:, None]
        grad = self.sum_x_events - (self.d[:, None] * xbar).sum(axis=0)
        info = np.einsum("t,tij->ij", self.d / S0, S2) - np.einsum(
            "t,ti,tj->ij", self.d, xbar, xbar
        )
        return grad, info

    def breslow(self, beta) -> CumulativeHazard:
        S0, _, _ = self.risk_sums(beta, order2=False)
        order = np.argsort(self.times_desc)
        return CumulativeHazard(self.times_desc[order], (self.d / S0)[order])


def nelson_aalen(intervals) -> CumulativeHazard:
    """Nelson-Aalen estimator: increment (#events at t) / (#at risk at t)."""
    start, stop, event, X = _as_arrays(intervals)
    if not event.any():
        return CumulativeHazard(np.empty(0), np.empty(0))
    ws = CoxWorkspace(start, stop, event, np.zeros((len(stop), 1)))
    return ws.breslow(np.zeros(1))


def cox_fit(intervals, covariate_spec, max_iter: int = 50, tol: float = 1e-9) -> ProportionalHazardsFit:
    """Maximum partial likelihood fit of the relative-risk model.

    Newton-Raphson with step-halving on standardized covariates; Breslow tie
    handling.  Raises ``RankDeficiencyError`` naming degenerate terms and
    ``SeparationError`` when a standardized coefficient diverges.
    """
    start, stop, event, X = _as_arrays(intervals)
    return cox_fit_arrays(start, stop, event, X, covariate_spec, max_iter=max_iter, tol=tol)


def cox_fit_arrays(start, stop, event, X, covariate_spec,
                   max_iter: int = 50, tol: float = 1e-9) -> ProportionalHazardsFit:
    """Array-based variant of :func:`cox_fit` for repeated refits."""
    names = tuple(covariate_spec)
    p = X.shape[1]
    if len(names) != p:
        raise DataError(f"covariate_spec names {len(names)} terms but intervals carry {p}")
    if not event.any():
        raise DataError("cox_fit requires at least one event")

    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    degenerate = [names[j] for j in range(p) if sd[j] == 0.0]
    if degenerate:
        raise RankDeficiencyError(degenerate)
    Xs = (X - mean) / sd
    # QR with column pivoting exposes collinear terms by vanishing pivots.
    _, R, piv = scipy.linalg.qr(Xs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    bad = diag < 1e-8 * max(diag.max(), 1.0)
    if bad.any():
        raise RankDeficiencyError([names[j] for j in piv[bad]])

    ws = CoxWorkspace(start, stop, event, Xs)
    # the score is a sum over events; tolerances scale accordingly
    score_scale = float(max(1.0, ws.d.sum()))
    beta = np.zeros(p)
    ll = ws.loglik(beta)
    grad_norm = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        grad, info = ws.score_info(beta)
        grad_norm = float(np.max(np.abs(grad))) / score_scale
        if grad_norm < _GRADIENT_TOL * 0.1:
            break
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError(names, "singular information matrix")
        cand, ll_new, factor = beta, ll, 1.0
        for _ in range(30):  # step-halving keeps the partial likelihood non-decreasing
            cand = beta + factor * step
            ll_new = ws.loglik(cand)
            if ll_new >= ll - 1e-12:
                break
            factor /= 2.0
        if np.max(np.abs(cand)) > _SEPARATION_BOUND:
            raise SeparationError(
                "nonidentifiable/separation: a standardized coefficient exceeded "
                f"{_SEPARATION_BOUND}"
            )
        converged_step = np.max(np.abs(cand - beta)) <= tol * (1.0 + np.max(np.abs(beta)))
        beta, ll = cand, ll_new
        if converged_step:
            grad, _ = ws.score_info(beta)
            grad_norm = float(np.max(np.abs(grad))) / score_scale
            if grad_norm < _GRADIENT_TOL:
                break
    grad, info = ws.score_info(beta)
    grad_norm = float(np.max(np.abs(grad))) / score_scale
    if grad_norm >= _GRADIENT_TOL:
        raise ConvergenceError(
            f"cox_fit did not converge in {iterations} iterations (scaled |score| = {grad_norm:.3e})"
        )
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise ModelError("observed information is not positive definite at the solution")

    coef = beta / sd
    report = ConvergenceReport(iterations, grad_norm, True, float(ll))
    raw_ws = CoxWorkspace(start, stop, event, X)
    fit = ProportionalHazardsFit(coef, names, raw_ws.breslow(coef), report)
    fit.information = info / np.outer(sd, sd)  # original covariate scale
    return fit


def breslow_baseline(fit: ProportionalHazardsFit, intervals) -> CumulativeHazard:
    """Baseline increment at event time t: (#events at t) / sum_{at risk} exp(coef . x)."""
    start, stop, event, X = _as_arrays(intervals)
    if not event.any():
        return CumulativeHazard(np.empty(0), np.empty(0))
    ws = CoxWorkspace(start, stop, event, X)
    return ws.breslow(np.asarray(fit.coefficients, dtype=float))


def survivor_at(fit: ProportionalHazardsFit, path: CovariatePath, t: float) -> float:
    """S(t | path) = exp(-sum over baseline jumps s <= t of exp(coef . x(s)) dLambda0(s))."""
    jumps = fit.baseline.jump_times
    mask = jumps <= t
    if not mask.any():
        return 1.0
    x = path.values[path.indices_at(jumps[mask])]
    u = np.exp(x @ np.asarray(fit.coefficients, dtype=float))
    return float(np.exp(-np.sum(u * fit.baseline.increments[mask])))


def density_at(fit: ProportionalHazardsFit, path: CovariatePath, t: float) -> float:
    """Point-mass density at a baseline jump time: u(x(t)) dLambda0(t) S(t | path).

    The estimator only has mass at baseline jump times; asking anywhere else
    is an error rather than silently returning zero.
    """
    hit = fit.baseline.increment_at(t)
    if hit is None:
        raise ModelError(f"t={t} is not a baseline jump time; the fitted density is a point mass")
    inc, t_exact = hit
    u = float(np.exp(path.value_at(t_exact) @ np.asarray(fit.coefficients, dtype=float)))
    return u * inc * survivor_at(fit, path, t_exact)
