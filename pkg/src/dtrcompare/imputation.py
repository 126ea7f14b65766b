"""Joint CD4/mortality model and multiple imputation of missing outcomes.

CD4 is modeled on the square-root scale with a two-level model: a fixed
trajectory in follow-up time, treatment status and time since initiation
(plus baseline covariates), and a subject-level random intercept and random
post-initiation slope.  The mortality hazard uses the model-implied true CD4
as a time-varying covariate.  Both models are fitted to the observed data in
two steps; imputation draws use empirical-Bayes posteriors of the random
effects plus residual noise (improper multiple imputation: parameter
uncertainty in the fitted coefficients is not re-drawn, which slightly
understates between-imputation variance).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .data_model import CohortDataset, ObservedOutcome, OutcomeStatus, SubjectHistory, extract_outcome
from .exceptions import ConvergenceError, DataError, ModelError
from .splines import SplineBasis, quantile_knots
from .survival import ProportionalHazardsFit, RiskInterval, cox_fit

__all__ = [
    "Cd4ModelSpec",
    "Cd4MixedModelFit",
    "DeathModelSpec",
    "DeathModelFit",
    "ImputedCohort",
    "fit_cd4_model",
    "fit_death_model",
    "impute",
    "rubin_combine",
]

_DAYS_PER_YEAR = 365.0
_SQRT_FLOOR = 1.0  # back-transform floor on the modeling scale; X = 0 stays reserved for death


@dataclass(frozen=True)
class Cd4ModelSpec:
    """Fixed-effect layout of the CD4 trajectory model."""

    time_basis: str = "spline"  # "spline" | "linear"
    n_time_knots: int = 3
    recovery_basis: str = "spline"
    n_recovery_knots: int = 2
    include_treatment_step: bool = True
    age_basis: str = "linear"
    n_age_knots: int = 2
    include_sex: bool = True
    include_cdc: bool = True


def _term_matrix(kind: str, basis: SplineBasis | None, x: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return x[:, None]
    return basis.evaluate_matrix(x, include_constant=False)


@dataclass
class _Cd4Design:
    spec: Cd4ModelSpec
    time_knots: SplineBasis | None
    recovery_knots: SplineBasis | None
    age_knots: SplineBasis | None
    cdc_levels: tuple[str, ...]
    names: tuple[str, ...]

    def fixed_rows(self, subject: SubjectHistory, times: np.ndarray,
                   initiation: float | None) -> np.ndarray:
        t = np.asarray(times, dtype=float) / _DAYS_PER_YEAR
        a = math.inf if initiation is None else initiation / _DAYS_PER_YEAR
        treated = (t >= a).astype(float)
        since = np.clip(t - a, 0.0, None)
        since[~np.isfinite(since)] = 0.0
        cols = [np.ones((len(t), 1)), _term_matrix(self.spec.time_basis, self.time_knots, t)]
        if self.spec.include_treatment_step:
            cols.append(treated[:, None])
        cols.append(_term_matrix(self.spec.recovery_basis, self.recovery_knots, since) * treated[:, None])
        age = np.full(len(t), subject.baseline.age_at_diagnosis)
        cols.append(_term_matrix(self.spec.age_basis, self.age_knots, age))
        if self.spec.include_sex:
            cols.append(np.full((len(t), 1), 1.0 if subject.baseline.sex == "female" else 0.0))
        for level in self.cdc_levels:
            cols.append(np.full((len(t), 1), 1.0 if subject.baseline.cdc_class == level else 0.0))
        return np.hstack(cols)

    @staticmethod
    def random_rows(times: np.ndarray, initiation: float | None) -> np.ndarray:
        """Random-effect design: intercept and post-initiation slope (years)."""
        t = np.asarray(times, dtype=float) / _DAYS_PER_YEAR
        a = math.inf if initiation is None else initiation / _DAYS_PER_YEAR
        since = np.where(t >= a, t - a, 0.0)
        return np.column_stack([np.ones(len(t)), since])


def _build_cd4_design(cohort: CohortDataset, spec: Cd4ModelSpec) -> _Cd4Design:
    times, recov = [], []
    for s in cohort.subjects:
        a = s.initiation_time
        for v in s.visits:
            if v.cd4 is None:
                continue
            times.append(v.time / _DAYS_PER_YEAR)
            if a is not None and v.time >= a:
                recov.append((v.time - a) / _DAYS_PER_YEAR)
    times = np.asarray(times)
    if times.size < 2:
        raise DataError("need at least two CD4 observations to fit the trajectory model")
    tk = quantile_knots(times, spec.n_time_knots) if spec.time_basis == "spline" else None
    rk = None
    if spec.recovery_basis == "spline":
        rv = np.asarray(recov)
        rv = rv[rv > 0]
        if rv.size >= 2 and np.ptp(rv) > 0:
            rk = quantile_knots(np.concatenate([[0.0], rv]), spec.n_recovery_knots)
        else:  # not enough post-initiation spread for knots
            rk = None
    ak = None
    if spec.age_basis == "spline":
        ages = np.asarray([s.baseline.age_at_diagnosis for s in cohort.subjects], dtype=float)
        ak = quantile_knots(ages, spec.n_age_knots)
    cdc_levels: tuple[str, ...] = ()
    if spec.include_cdc:
        seen = sorted({s.baseline.cdc_class for s in cohort.subjects})
        counts = {lv: sum(1 for s in cohort.subjects if s.baseline.cdc_class == lv) for lv in seen}
        ref = max(seen, key=lambda lv: counts[lv])
        cdc_levels = tuple(lv for lv in seen if lv != ref)

    effective = spec
    if spec.recovery_basis == "spline" and rk is None:
        effective = dataclasses.replace(spec, recovery_basis="linear")

    names: list[str] = ["intercept"]
    n_time = 1 if effective.time_basis == "linear" else tk.dimension - 1
    names += [f"time_{j}" for j in range(1, n_time + 1)]
    if effective.include_treatment_step:
        names.append("on_art")
    n_rec = 1 if effective.recovery_basis == "linear" else rk.dimension - 1
    names += [f"since_init_{j}" for j in range(1, n_rec + 1)]
    n_age = 1 if effective.age_basis == "linear" else ak.dimension - 1
    names += [f"age_{j}" for j in range(1, n_age + 1)]
    if effective.include_sex:
        names.append("sex_female")
    names += [f"cdc_{lv}" for lv in cdc_levels]
    return _Cd4Design(effective, tk, rk, ak, cdc_levels, tuple(names))


@dataclass
class Cd4MixedModelFit:
    """Maximum marginal-likelihood fit of the two-level CD4 model."""

    beta: np.ndarray
    beta_names: tuple[str, ...]
    omega: np.ndarray
    sigma: float
    log_likelihood: float
    optimizer_trace: tuple[float, ...]
    design: _Cd4Design
    subject_ids: tuple[str, ...]
    eb_modes: np.ndarray
    eb_covariances: np.ndarray
    _subject_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._subject_index = {sid: i for i, sid in enumerate(self.subject_ids)}

    def predict_sqrt_mean(self, subject: SubjectHistory, times,
                          include_random: bool = True) -> np.ndarray:
        """Model-implied sqrt-CD4 trajectory m_i(t) at the given times."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        x = self.design.fixed_rows(subject, times, subject.initiation_time)
        out = x @ self.beta
        if include_random:
            i = self._subject_index[subject.subject_id]
            z = self.design.random_rows(times, subject.initiation_time)
            out = out + z @ self.eb_modes[i]
        return out

    def conditional_moments(self, subject: SubjectHistory, t: float) -> tuple[float, float]:
        """Mean and variance of sqrt-CD4 at time t given the subject's
        observed history (empirical-Bayes posterior plus residual noise)."""
        i = self._subject_index[subject.subject_id]
        x = self.design.fixed_rows(subject, np.asarray([t]), subject.initiation_time)[0]
        z = self.design.random_rows(np.asarray([t]), subject.initiation_time)[0]
        mean = float(x @ self.beta + z @ self.eb_modes[i])
        var = float(z @ self.eb_covariances[i] @ z + self.sigma**2)
        return mean, var


def _collect_lmm_stats(cohort: CohortDataset, design: _Cd4Design):
    """Per-subject compressed sufficient statistics for the marginal likelihood."""
    stats = []
    p = None
    for s in cohort.subjects:
        times = [v.time for v in s.visits if v.cd4 is not None]
        y = np.asarray([math.sqrt(v.cd4) for v in s.visits if v.cd4 is not None])
        X = design.fixed_rows(s, np.asarray(times), s.initiation_time) if times else None
        Z = design.random_rows(np.asarray(times), s.initiation_time) if times else None
        if p is None and X is not None:
            p = X.shape[1]
        stats.append((X, Z, y))
    if p is None:
        raise DataError("no CD4 observations in the cohort")
    comp = []
    for X, Z, y in stats:
        if X is None:
            comp.append(None)
            continue
        comp.append({
            "n": len(y),
            "ZtZ": Z.T @ Z, "ZtX": Z.T @ X, "Zty": Z.T @ y,
            "XtX": X.T @ X, "Xty": X.T @ y, "yty": float(y @ y),
        })
    return comp, p


def _lmm_profile(comp, p, L, sigma):
    """Profiled marginal log-likelihood: beta solved by GLS in closed form."""
    s2 = sigma * sigma
    A = np.zeros((p, p))
    b = np.zeros(p)
    logdet_sum = 0.0
    n_total = 0
    pieces = []
    for c in comp:
        if c is None:
            pieces.append(None)
            continue
        W = s2 * np.eye(2) + L.T @ c["ZtZ"] @ L
        Winv = np.linalg.inv(W)
        LZX = L.T @ c["ZtX"]
        LZy = L.T @ c["Zty"]
        A += c["XtX"] - LZX.T @ (Winv @ LZX)
        b += c["Xty"] - LZX.T @ (Winv @ LZy)
        logdet_sum += math.log(max(np.linalg.det(W), 1e-300)) - 2.0 * math.log(s2)
        n_total += c["n"]
        pieces.append((W, Winv, LZX, LZy))
    beta = np.linalg.solve(A, b)
    quad = 0.0
    for c, piece in zip(comp, pieces):
        if c is None:
            continue
        W, Winv, LZX, LZy = piece
        rr = c["yty"] - 2.0 * beta @ c["Xty"] + beta @ c["XtX"] @ beta
        LZr = LZy - LZX @ beta
        quad += rr - LZr @ (Winv @ LZr)
    ll = -0.5 * (n_total * math.log(2.0 * math.pi * s2) + logdet_sum + quad / s2)
    return ll, beta


def _theta_to_L_sigma(theta):
    L = np.array([[math.exp(theta[0]), 0.0], [theta[1], math.exp(theta[2])]])
    return L, math.exp(theta[3])


def fit_cd4_model(cohort: CohortDataset, spec: Cd4ModelSpec | None = None,
                  max_iter: int = 200) -> Cd4MixedModelFit:
    """Fit the two-level CD4 model by maximum marginal likelihood.

    The Gaussian random effects integrate in closed form, so the optimizer
    runs over (chol(Omega), sigma) with the fixed effects profiled out.
    """
    spec = spec or Cd4ModelSpec()
    design = _build_cd4_design(cohort, spec)
    comp, p = _collect_lmm_stats(cohort, design)
    n_obs = sum(c["n"] for c in comp if c is not None)
    if n_obs <= p:
        raise DataError(f"too few CD4 observations ({n_obs}) for {p} fixed effects")

    # starting values from the pooled OLS residual scale
    A0 = sum(c["XtX"] for c in comp if c is not None)
    b0 = sum(c["Xty"] for c in comp if c is not None)
    beta0 = np.linalg.lstsq(A0, b0, rcond=None)[0]
    rss = sum(
        c["yty"] - 2 * beta0 @ c["Xty"] + beta0 @ c["XtX"] @ beta0
        for c in comp if c is not None
    )
    s0 = math.sqrt(max(rss / n_obs, 1e-6))
    theta0 = np.array([math.log(s0), 0.0, math.log(max(s0 / 2.0, 1e-4)), math.log(s0)])

    trace: list[float] = []

    def objective(theta):
        if np.any(np.abs(theta) > 30):
            return 1e12
        L, sigma = _theta_to_L_sigma(theta)
        try:
            ll, _ = _lmm_profile(comp, p, L, sigma)
        except np.linalg.LinAlgError:
            return 1e12
        return -ll

    result = minimize(
        objective, theta0, method="L-BFGS-B",
        callback=lambda xk: trace.append(-objective(xk)),
        options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-9},
    )
    if not result.success and result.status != 1:  # status 1 = maxiter
        raise ConvergenceError(f"CD4 model failed to converge: {result.message}; trace={trace}")
    L, sigma = _theta_to_L_sigma(result.x)
    omega = L @ L.T
    eigs = np.linalg.eigvalsh(omega)
    if eigs[0] <= 1e-10 * max(eigs[-1], 1.0):
        raise ModelError("boundary estimate: random-effects covariance is singular")
    ll, beta = _lmm_profile(comp, p, L, sigma)

    n = len(cohort.subjects)
    modes = np.zeros((n, 2))
    covs = np.zeros((n, 2, 2))
    s2 = sigma * sigma
    for i, c in enumerate(comp):
        if c is None:  # no observations: prior
            covs[i] = omega
            continue
        W = s2 * np.eye(2) + L.T @ c["ZtZ"] @ L
        Winv = np.linalg.inv(W)
        Zr = c["Zty"] - c["ZtX"] @ beta
        modes[i] = L @ (Winv @ (L.T @ Zr))
        covs[i] = s2 * (L @ Winv @ L.T)
    return Cd4MixedModelFit(
        beta=beta,
        beta_names=design.names,
        omega=omega,
        sigma=float(sigma),
        log_likelihood=float(ll),
        optimizer_trace=tuple(trace),
        design=design,
        subject_ids=tuple(s.subject_id for s in cohort.subjects),
        eb_modes=modes,
        eb_covariances=covs,
    )


# --- death model --------------------------------------------------------------


@dataclass(frozen=True)
class DeathModelSpec:
    m_basis: str = "spline"
    n_m_knots: int = 2
    include_treatment: bool = True
    include_age: bool = True
    include_sex: bool = True


def _death_covariate_row(spec: DeathModelSpec, m_knots: SplineBasis | None,
                         subject: SubjectHistory, m_value: float, treated: bool) -> np.ndarray:
    cols = list(_term_matrix(spec.m_basis, m_knots, np.asarray([m_value]))[0])
    if spec.include_treatment:
        cols.append(1.0 if treated else 0.0)
    if spec.include_age:
        cols.append(subject.baseline.age_at_diagnosis)
    if spec.include_sex:
        cols.append(1.0 if subject.baseline.sex == "female" else 0.0)
    return np.asarray(cols)


@dataclass
class DeathModelFit:
    """Mortality hazard model with the model-implied CD4 as covariate."""

    fit: ProportionalHazardsFit
    spec: DeathModelSpec
    m_knots: SplineBasis | None
    t_star: float

    def covariate_row(self, subject: SubjectHistory, m_value: float, treated: bool) -> np.ndarray:
        return _death_covariate_row(self.spec, self.m_knots, subject, m_value, treated)

    def survivor(self, subject: SubjectHistory, cd4_fit: Cd4MixedModelFit, t: float) -> float:
        """S^T(t | history): the model-implied CD4 path is refreshed at every
        baseline jump time (it extrapolates beyond the last visit)."""
        jumps = self.fit.baseline.jump_times
        mask = jumps <= t
        if not mask.any():
            return 1.0
        jt = jumps[mask]
        m_vals = cd4_fit.predict_sqrt_mean(subject, jt)
        a = subject.initiation_time
        rows = np.asarray([
            self.covariate_row(subject, m, a is not None and a <= s)
            for m, s in zip(m_vals, jt)
        ])
        u = np.exp(rows @ self.fit.coefficients)
        return float(np.exp(-np.sum(u * self.fit.baseline.increments[mask])))


def fit_death_model(cohort: CohortDataset, cd4_fit: Cd4MixedModelFit,
                    spec: DeathModelSpec | None = None, t_star: float = 365.0) -> DeathModelFit:
    """Cox fit of mortality on the empirical-Bayes CD4 prediction, refreshed
    at visit times, over follow-up to min(T, C, t*)."""
    spec = spec or DeathModelSpec()
    m_knots = None
    if spec.m_basis == "spline":
        pool = []
        for s in cohort.subjects:
            times = [v.time for v in s.visits if v.time <= t_star]
            if times:
                pool.extend(cd4_fit.predict_sqrt_mean(s, np.asarray(times)))
        pool = np.asarray(pool)
        if pool.size < 2 or np.ptp(pool) == 0:
            raise DataError("cannot place knots for the mortality CD4 term")
        m_knots = quantile_knots(pool, spec.n_m_knots)

    intervals: list[RiskInterval] = []
    n_events = 0
    for subject in cohort.subjects:
        if not subject.visits:
            continue
        exit_time = subject.followup_end(t_star)
        event = subject.death_time is not None and subject.death_time <= exit_time
        n_events += int(event)
        if exit_time <= 0.0 and not event:
            continue
        breaks = {0.0}
        breaks.update(v.time for v in subject.visits if v.time < exit_time)
        if subject.initiation_time is not None and subject.initiation_time < exit_time:
            breaks.add(subject.initiation_time)
        bounds = [-1.0, *sorted(breaks - {0.0}), exit_time] if exit_time > 0 else [-1.0, 0.0]
        m_vals = cd4_fit.predict_sqrt_mean(subject, np.asarray([max(b, 0.0) for b in bounds[:-1]]))
        for j in range(len(bounds) - 1):
            t_state = max(bounds[j], 0.0)
            treated = subject.initiation_time is not None and subject.initiation_time <= t_state
            row = _death_covariate_row(spec, m_knots, subject, float(m_vals[j]), treated)
            intervals.append(RiskInterval(
                subject.subject_id, bounds[j], bounds[j + 1], tuple(row),
                event=event and j == len(bounds) - 2,
            ))
    if n_events == 0:
        raise DataError("no events: the cohort has no deaths inside the fitting horizon")
    names = []
    n_m = 1 if spec.m_basis == "linear" else m_knots.dimension - 1
    names += [f"m_{j}" for j in range(1, n_m + 1)]
    if spec.include_treatment:
        names.append("on_art")
    if spec.include_age:
        names.append("age")
    if spec.include_sex:
        names.append("sex_female")
    fit = cox_fit(intervals, tuple(names))
    return DeathModelFit(fit=fit, spec=spec, m_knots=m_knots, t_star=t_star)


# --- imputation ---------------------------------------------------------------


@dataclass(frozen=True)
class ImputedCohort:
    """M completed outcome sets; observed outcomes identical in every copy."""

    subject_ids: tuple[str, ...]
    statuses: tuple[OutcomeStatus, ...]
    x: np.ndarray       # (M, n)
    dead: np.ndarray    # (M, n) booleans
    m_imputations: int
    seed: int

    def x_for(self, m: int) -> np.ndarray:
        return self.x[m]

    def table_rows(self):
        rows = [["imputation", "subject_id", "status", "dead", "x"]]
        for m in range(self.m_imputations):
            for i, sid in enumerate(self.subject_ids):
                rows.append([m, sid, self.statuses[i].value,
                             int(self.dead[m, i]), self.x[m, i]])
        return rows


def impute(cohort: CohortDataset, cd4_fit: Cd4MixedModelFit, death_fit: DeathModelFit,
           t_star: float, window: tuple[float, float], m_imputations: int,
           seed: int) -> ImputedCohort:
    """Multiple imputation of the composite outcome at t*.

    Alive-with-missing-CD4 subjects draw sqrt-CD4 from the empirical-Bayes
    conditional at t*; subjects censored before the window draw death status
    from the fitted conditional survivor ratio first.  Draws are reproducible
    from (seed, imputation index).
    """
    if m_imputations < 2:
        raise DataError("multiple imputation needs M >= 2 for Rubin pooling")
    n = cohort.n
    outcomes: list[ObservedOutcome] = [extract_outcome(s, t_star, window) for s in cohort.subjects]
    x = np.zeros((m_imputations, n))
    dead = np.zeros((m_imputations, n), dtype=bool)

    cond: dict[int, tuple[float, float]] = {}
    death_prob: dict[int, float] = {}
    for i, (subject, outcome) in enumerate(zip(cohort.subjects, outcomes)):
        if outcome.status in (OutcomeStatus.ALIVE_CD4_MISSING, OutcomeStatus.CENSORED_BEFORE_WINDOW):
            cond[i] = cd4_fit.conditional_moments(subject, t_star)
        if outcome.status is OutcomeStatus.CENSORED_BEFORE_WINDOW:
            u = subject.followup_end(t_star)
            s_u = death_fit.survivor(subject, cd4_fit, u)
            s_t = death_fit.survivor(subject, cd4_fit, t_star)
            death_prob[i] = min(max(1.0 - s_t / max(s_u, 1e-300), 0.0), 1.0)

    streams = np.random.SeedSequence(seed).spawn(m_imputations)
    for m in range(m_imputations):
        rng = np.random.default_rng(streams[m])
        for i, outcome in enumerate(outcomes):
            if outcome.status is OutcomeStatus.DEAD:
                dead[m, i] = True
                x[m, i] = 0.0
            elif outcome.status is OutcomeStatus.ALIVE_WITH_CD4:
                x[m, i] = outcome.x_value
            elif outcome.status is OutcomeStatus.ALIVE_CD4_MISSING:
                mean, var = cond[i]
                x[m, i] = max(rng.normal(mean, math.sqrt(var)), _SQRT_FLOOR) ** 2
            else:  # censored before the window: death first, then CD4
                if rng.random() < death_prob[i]:
                    dead[m, i] = True
                    x[m, i] = 0.0
                else:
                    mean, var = cond[i]
                    x[m, i] = max(rng.normal(mean, math.sqrt(var)), _SQRT_FLOOR) ** 2
    return ImputedCohort(
        subject_ids=tuple(s.subject_id for s in cohort.subjects),
        statuses=tuple(o.status for o in outcomes),
        x=x,
        dead=dead,
        m_imputations=m_imputations,
        seed=seed,
    )


def rubin_combine(estimates, variances) -> tuple[float, float, float]:
    """Rubin's rules: pooled estimate, total variance, degrees of freedom."""
    q = np.asarray(estimates, dtype=float)
    w = np.asarray(variances, dtype=float)
    if q.size < 2:
        raise DataError("Rubin pooling needs at least 2 imputations")
    if q.size != w.size:
        raise DataError("estimates and variances must align")
    if np.any(w < 0):
        raise DataError("variances must be non-negative")
    m = q.size
    qbar = float(q.mean())
    b = float(q.var(ddof=1))
    wbar = float(w.mean())
    total = wbar + (1.0 + 1.0 / m) * b
    if b == 0.0:
        df = math.inf
    else:
        df = (m - 1) * (1.0 + wbar / ((1.0 + 1.0 / m) * b)) ** 2
    return qbar, total, df
