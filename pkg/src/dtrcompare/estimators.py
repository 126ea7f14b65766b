"""Per-regime targets, the regime-continuum quantile model, and bootstrap
confidence intervals.

The three per-regime targets solve weighted estimating equations with
closed-form roots: the weighted death proportion, the left-continuous
inverse of the weighted CDF, and the weighted mean among survivors.  The
continuum model minimizes the weighted check loss over pooled
(subject x regime) compliance records; the exact minimizer is computed as a
linear program.  Variances nest the subject bootstrap inside each imputed
dataset and pool across imputations with Rubin's rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
from scipy.optimize import linprog

from .data_model import CohortDataset
from .exceptions import DataError, DtrError, ModelError, RankDeficiencyError
from .imputation import ImputedCohort, rubin_combine
from .regimes import DEFAULT_CONTINUUM, RegimeKind, RegimeSpec, compliance_process
from .splines import SplineBasis, build_basis
from .survival import cox_fit_arrays
from .weights import (
    InitiationModel,
    StabilizedWeightSet,
    build_initiation_intervals,
    stabilized_weights,
    type1_quantile,
)

__all__ = [
    "weighted_mortality",
    "weighted_quantile",
    "weighted_survivor_mean",
    "estimate_mortality",
    "estimate_quantile",
    "estimate_survivor_mean",
    "MsmFit",
    "msm_basis",
    "msm_design_row",
    "msm_fit",
    "msm_curve",
    "contrast",
    "RegimeEstimate",
    "bootstrap_pipeline",
    "PipelineResult",
]

_Z95 = 1.959963984540054


# --- closed-form estimating-equation roots -------------------------------------


def weighted_mortality(x, w) -> float:
    """Root of sum_i w_i {1(x_i = 0) - theta} = 0."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    total = w.sum()
    if total <= 0:
        raise DataError("weights sum to zero")
    return float(w[x == 0.0].sum() / total)


def weighted_quantile(x, w, tau: float = 0.5) -> float:
    """Smallest observed x whose weighted CDF reaches tau (left-continuous
    inverse, the generalized root of the quantile estimating equation)."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    total = w.sum()
    if total <= 0:
        raise DataError("weights sum to zero")
    order = np.argsort(x, kind="stable")
    cum = np.cumsum(w[order])
    idx = int(np.searchsorted(cum, tau * total, side="left"))
    idx = min(idx, len(x) - 1)
    return float(x[order][idx])


def weighted_survivor_mean(x, w) -> float:
    """Weighted mean of x among survivors (x > 0)."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    alive = x > 0.0
    total = w[alive].sum()
    if total <= 0:
        raise DataError("no survivors with positive weight")
    return float((w[alive] * x[alive]).sum() / total)


def _per_imputation(imputed: ImputedCohort, weight_set: StabilizedWeightSet, fn) -> np.ndarray:
    mask = weight_set.weight > 0.0
    if not mask.any():
        raise DataError(f"no positive weights for regime {weight_set.regime.label()}")
    w = weight_set.weight[mask]
    return np.asarray([fn(imputed.x[m][mask], w) for m in range(imputed.m_imputations)])


def estimate_mortality(imputed: ImputedCohort, weight_set: StabilizedWeightSet) -> np.ndarray:
    """theta_q1 per imputation."""
    return _per_imputation(imputed, weight_set, weighted_mortality)


def estimate_quantile(imputed: ImputedCohort, weight_set: StabilizedWeightSet,
                      tau: float = 0.5) -> np.ndarray:
    """theta_q2 (tau-quantile of the composite outcome) per imputation."""
    return _per_imputation(imputed, weight_set, lambda x, w: weighted_quantile(x, w, tau))


def estimate_survivor_mean(imputed: ImputedCohort, weight_set: StabilizedWeightSet) -> np.ndarray:
    """theta_q3 per imputation (descriptive: conditions on survival)."""
    return _per_imputation(imputed, weight_set, weighted_survivor_mean)


# --- regime-continuum structural quantile model --------------------------------


def msm_basis(n_interior_knots: int = 4,
              continuum: tuple[float, float] = DEFAULT_CONTINUUM) -> SplineBasis:
    """Natural spline over the regime continuum: interior knots at equally
    spaced quantiles of [q_l, q_u], boundary knots at the endpoints."""
    lo, hi = continuum
    probs = np.arange(1, n_interior_knots + 1) / (n_interior_knots + 1)
    interior = lo + probs * (hi - lo)
    return build_basis(list(interior), boundary=(lo, hi))


def msm_design_row(regime: RegimeSpec, basis: SplineBasis | None) -> np.ndarray:
    """V(q): immediate indicator, never indicator, then the continuum block."""
    j = basis.dimension if basis is not None else 0
    row = np.zeros(2 + j)
    if regime.kind is RegimeKind.IMMEDIATE:
        row[0] = 1.0
    elif regime.kind is RegimeKind.NEVER:
        row[1] = 1.0
    else:
        if basis is None:
            raise DataError("threshold regimes require a continuum basis")
        row[2:] = basis.evaluate(regime.q)
    return row


@dataclass
class MsmFit:
    """Fitted structural quantile model over the regime continuum."""

    alpha: np.ndarray
    basis: SplineBasis | None
    tau: float
    column_names: tuple[str, ...]
    n_records: int
    check_loss: float

    def curve(self, regime: RegimeSpec) -> float:
        return float(msm_design_row(regime, self.basis) @ self.alpha)


def msm_fit(outcomes, weight_sets, tau: float = 0.5, n_interior_knots: int = 4,
            continuum: tuple[float, float] = DEFAULT_CONTINUUM,
            basis: SplineBasis | None = ...) -> MsmFit:
    """Minimize the weighted check loss over pooled compliance records.

    ``outcomes`` is one completed outcome vector (length n); every weight set
    contributes its compliant subjects as records with the regime's design
    row.  Solved exactly as a linear program (HiGHS).
    """
    weight_sets = list(weight_sets)
    if not weight_sets:
        raise DataError("msm_fit needs at least one regime weight set")
    x = np.asarray(outcomes, dtype=float)
    if basis is ...:
        has_thresholds = any(ws.regime.kind is RegimeKind.THRESHOLD for ws in weight_sets)
        basis = msm_basis(n_interior_knots, continuum) if has_thresholds else None
    rows, ys, ws_ = [], [], []
    for ws in weight_sets:
        mask = ws.weight > 0.0
        if not mask.any():
            continue
        vrow = msm_design_row(ws.regime, basis)
        rows.append(np.tile(vrow, (int(mask.sum()), 1)))
        ys.append(x[mask])
        ws_.append(ws.weight[mask])
    if not rows:
        raise DataError("no compliant records across the supplied regimes")
    V = np.vstack(rows)
    y = np.concatenate(ys)
    w = np.concatenate(ws_)
    k, p = V.shape

    names = ["immediate", "never"]
    if basis is not None:
        names += [f"dq_{j}" for j in range(1, basis.dimension + 1)]
    col_mass = np.abs(V).T @ w
    dead_cols = [names[j] for j in range(p) if col_mass[j] == 0.0]
    if dead_cols:
        raise RankDeficiencyError(dead_cols, "no compliant subjects support column(s): "
                                  + ", ".join(dead_cols))
    r = np.linalg.matrix_rank((V * np.sqrt(w)[:, None]))
    if r < p:
        raise RankDeficiencyError(tuple(names), f"design rank {r} < {p} over weighted records")

    c = np.concatenate([np.zeros(p), tau * w, (1.0 - tau) * w])
    A = scipy.sparse.hstack([
        scipy.sparse.csr_matrix(V),
        scipy.sparse.identity(k, format="csr"),
        -scipy.sparse.identity(k, format="csr"),
    ], format="csr")
    bounds = [(None, None)] * p + [(0, None)] * (2 * k)
    res = linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs")
    if not res.success:
        raise ModelError(f"check-loss LP failed: {res.message}")
    alpha = res.x[:p]
    resid = y - V @ alpha
    loss = float(np.sum(w * resid * (tau - (resid < 0))))
    return MsmFit(alpha=alpha, basis=basis, tau=tau, column_names=tuple(names),
                  n_records=k, check_loss=loss)


def msm_curve(fit: MsmFit, regime: RegimeSpec | float) -> float:
    """Model-implied tau-quantile at a regime (a float means a threshold q)."""
    if not isinstance(regime, RegimeSpec):
        regime = RegimeSpec.threshold(float(regime),
                                      continuum=(fit.basis.boundary_knots if fit.basis else DEFAULT_CONTINUUM))
    return fit.curve(regime)


def contrast(per_imputation_fits, regime: RegimeSpec,
             reference: RegimeSpec | None = None,
             per_imputation_variances=None) -> dict:
    """Reference-minus-regime contrast pooled across imputations.

    With per-imputation variances supplied (e.g. bootstrap), the CI uses
    Rubin's total variance; otherwise only the pooled point estimate is
    returned.
    """
    reference = reference or RegimeSpec.immediate()
    diffs = [f.curve(reference) - f.curve(regime) for f in per_imputation_fits]
    out = {"regime": regime.label(), "reference": reference.label(),
           "estimate": float(np.mean(diffs))}
    if per_imputation_variances is not None:
        if len(diffs) >= 2:
            est, total, df = rubin_combine(diffs, per_imputation_variances)
        else:
            est, total, df = diffs[0], float(per_imputation_variances[0]), math.inf
        se = math.sqrt(total)
        out.update(estimate=est, variance=total, df=df,
                   ci_lo=est - _Z95 * se, ci_hi=est + _Z95 * se)
    return out


# --- full pipeline with subject bootstrap ---------------------------------------


@dataclass
class _WorkTable:
    """Per-subject pieces needed to re-run weights + estimation on a resample."""

    names: tuple[str, ...]
    row_offsets: np.ndarray        # (n+1,) into the flat interval arrays
    starts: np.ndarray
    stops: np.ndarray
    rows: np.ndarray               # (R, p) design rows
    fit_rows: np.ndarray           # (R,) rows usable for fitting (zero-visit excluded)
    subj_event: np.ndarray         # initiation happened at/before U
    subj_a: np.ndarray             # initiation time (nan if none)
    subj_u: np.ndarray
    dev: dict                      # regime label -> (n,) deviation time (inf if compliant)
    regimes: list


def _build_work_table(cohort: CohortDataset, model: InitiationModel,
                      regimes, t_star: float) -> _WorkTable:
    intervals, _ = build_initiation_intervals(cohort, model.design, t_star)
    by_subject: dict[str, list] = {s.subject_id: [] for s in cohort.subjects}
    for iv in intervals:
        by_subject[iv.subject_id].append(iv)
    starts, stops, rows, fit_rows = [], [], [], []
    offsets = [0]
    subj_event = np.zeros(cohort.n, dtype=bool)
    subj_a = np.full(cohort.n, np.nan)
    subj_u = np.zeros(cohort.n)
    for i, s in enumerate(cohort.subjects):
        u = s.followup_end(t_star)
        subj_u[i] = u
        a = s.initiation_time
        ivs = by_subject[s.subject_id]
        if a is not None and a <= u:
            subj_event[i] = True
            subj_a[i] = a
        if not ivs:  # zero-visit subject: evaluable but never fitted
            starts.append(-1.0)
            stops.append(0.0)
            rows.append(model.design_path(s).values[0])
            fit_rows.append(False)
        else:
            for iv in ivs:
                starts.append(iv.start)
                stops.append(iv.stop)
                rows.append(np.asarray(iv.covariates))
                fit_rows.append(True)
        offsets.append(len(starts))
    dev = {}
    for regime in regimes:
        d = np.full(cohort.n, np.inf)
        for i, s in enumerate(cohort.subjects):
            cp = compliance_process(s, regime, t_star)
            if cp.deviation_time is not None:
                d[i] = cp.deviation_time
        dev[regime.label()] = d
    return _WorkTable(
        names=model.design.names,
        row_offsets=np.asarray(offsets),
        starts=np.asarray(starts),
        stops=np.asarray(stops),
        rows=np.asarray(rows),
        fit_rows=np.asarray(fit_rows, dtype=bool),
        subj_event=subj_event,
        subj_a=subj_a,
        subj_u=subj_u,
        dev=dev,
        regimes=list(regimes),
    )


def _resample_arrays(table: _WorkTable, idx: np.ndarray):
    counts = table.row_offsets[idx + 1] - table.row_offsets[idx]
    flat = np.concatenate([np.arange(table.row_offsets[i], table.row_offsets[i + 1]) for i in idx])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return flat, offsets


class _NelsonAalen:
    """Vectorized Nelson-Aalen on (time, event) pairs with entry just before 0."""

    def __init__(self, times: np.ndarray, events: np.ndarray):
        order = np.argsort(times, kind="stable")
        t = times[order]
        e = events[order]
        ev_times, counts = np.unique(t[e], return_counts=True)
        at_risk = len(t) - np.searchsorted(t, ev_times, side="left")
        self.jump_times = ev_times
        self.cum = np.concatenate([[0.0], np.cumsum(counts / at_risk)])

    def survivor(self, t):
        idx = np.searchsorted(self.jump_times, t, side="right")
        return np.exp(-self.cum[idx])


def _vector_denominators(table: _WorkTable, flat: np.ndarray, offsets: np.ndarray,
                         idx: np.ndarray, fit) -> np.ndarray:
    """f^A at A for initiators, S^A at U otherwise, for every resampled subject."""
    coef = np.asarray(fit.coefficients, dtype=float)
    u_rows = np.exp(table.rows[flat] @ coef) if coef.size else np.ones(len(flat))
    lam = fit.baseline
    hi = lam.value(table.stops[flat])
    lo = lam.value(np.maximum(table.starts[flat], -1.0))
    cum_contrib = u_rows * (hi - lo)
    sums = np.add.reduceat(cum_contrib, offsets[:-1])
    surv = np.exp(-sums)
    den = surv.copy()
    init = table.subj_event[idx]
    if init.any():
        last_row_ids = flat[offsets[1:][init] - 1]  # original-table index of each event row
        if coef.size:
            u_last = np.exp(table.rows[last_row_ids] @ coef)
        else:
            u_last = np.ones(int(init.sum()))
        a_vals = table.subj_a[idx][init]
        if len(lam.jump_times) == 0:
            raise ModelError("initiators present but the fitted baseline has no jumps")
        pos = np.clip(np.searchsorted(lam.jump_times, a_vals), 0, len(lam.jump_times) - 1)
        if np.any(np.abs(lam.jump_times[pos] - a_vals) > 1e-9):
            raise ModelError("an initiation time is not a baseline jump time of the refit")
        den[init] = u_last * lam.increments[pos] * surv[init]
    return den


@dataclass
class RegimeEstimate:
    """Pooled targets for one regime with Rubin-total variances and 95% CIs."""

    regime: RegimeSpec
    t_star: float
    theta1: float
    theta2: float
    theta3: float | None
    var1: float | None = None
    var2: float | None = None
    var3: float | None = None
    ci1: tuple[float, float] | None = None
    ci2: tuple[float, float] | None = None
    ci3: tuple[float, float] | None = None
    n_compliant: int = 0
    sum_weights: float = 0.0
    per_imputation: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.theta1 <= 1.0):
            raise DataError(f"theta1 {self.theta1} outside [0, 1]")


@dataclass
class PipelineResult:
    estimates: list
    failures: list
    b_replicates: int


def bootstrap_pipeline(
    cohort: CohortDataset,
    imputed: ImputedCohort,
    model: InitiationModel,
    regimes,
    t_star: float,
    truncation: tuple[float, float] = (0.05, 0.95),
    b_replicates: int = 200,
    seed: int = 0,
    tau: float = 0.5,
    max_failure_fraction: float = 0.10,
    workers: int = 1,
) -> PipelineResult:
    """Subject bootstrap of the weights-plus-estimation pipeline.

    Each replicate refits the initiation model and every regime's compliance
    survivor on the resample, recomputes truncated stabilized weights, and
    re-solves the estimating equations within each imputed dataset.  The
    per-imputation bootstrap variances pool across imputations with Rubin's
    rules.
    """
    if b_replicates < 50:
        raise DataError("bootstrap needs B >= 50")
    regimes = list(regimes)
    table = _build_work_table(cohort, model, regimes, t_star)
    n = cohort.n
    m_imp = imputed.m_imputations

    point: dict[str, np.ndarray] = {}  # label -> (3, M) point estimates on the full data
    full_weights: dict[str, StabilizedWeightSet] = {}
    for regime in regimes:
        ws = stabilized_weights(cohort, regime, model, t_star, truncation)
        full_weights[regime.label()] = ws
        t1 = estimate_mortality(imputed, ws)
        t2 = estimate_quantile(imputed, ws, tau)
        try:
            t3 = estimate_survivor_mean(imputed, ws)
        except DataError:
            t3 = np.full(m_imp, np.nan)
        point[regime.label()] = np.vstack([t1, t2, t3])

    reps: dict[str, list] = {r.label(): [] for r in regimes}
    failures: list[str] = []
    streams = np.random.SeedSequence(seed).spawn(b_replicates)
    state = {"table": table, "x": imputed.x, "truncation": truncation,
             "tau": tau, "regimes": regimes, "n": n}
    results = _map_replicates(state, streams, workers)
    for b, (rep_result, error) in enumerate(results):
        if error is not None:
            failures.append(f"replicate {b}: {error}")
            continue
        for label, triples in rep_result.items():
            reps[label].append(triples)
    if len(failures) > max_failure_fraction * b_replicates:
        raise ModelError(
            f"{len(failures)}/{b_replicates} bootstrap replicates failed:\n" + "\n".join(failures)
        )

    estimates = []
    for regime in regimes:
        label = regime.label()
        stack = np.asarray(reps[label])  # (B_ok, 3, M)
        pooled = {}
        for t_idx in range(3):
            ests = point[label][t_idx]
            if np.isnan(ests).any():
                pooled[t_idx] = (float("nan"), None, None)
                continue
            boot_vars = np.nanvar(stack[:, t_idx, :], axis=0, ddof=1)
            est, total, _ = rubin_combine(ests, boot_vars)
            half = _Z95 * math.sqrt(total)
            pooled[t_idx] = (est, total, (est - half, est + half))
        ws = full_weights[label]
        estimates.append(RegimeEstimate(
            regime=regime, t_star=t_star,
            theta1=pooled[0][0], theta2=pooled[1][0], theta3=pooled[2][0],
            var1=pooled[0][1], var2=pooled[1][1], var3=pooled[2][1],
            ci1=pooled[0][2], ci2=pooled[1][2], ci3=pooled[2][2],
            n_compliant=ws.n_compliant, sum_weights=float(ws.weight.sum()),
            per_imputation={"theta1": point[label][0].tolist(),
                            "theta2": point[label][1].tolist(),
                            "theta3": point[label][2].tolist()},
        ))
    return PipelineResult(estimates=estimates, failures=failures, b_replicates=b_replicates)


def _event_rows(table: _WorkTable, flat: np.ndarray, offsets: np.ndarray, idx: np.ndarray):
    events = np.zeros(len(flat), dtype=bool)
    last = offsets[1:] - 1
    events[last[table.subj_event[idx]]] = True
    return events


def _replicate_triples(state: dict, idx: np.ndarray) -> dict:
    """Re-run weights and estimation on one subject resample."""
    table: _WorkTable = state["table"]
    x_imp: np.ndarray = state["x"]
    truncation = state["truncation"]
    tau = state["tau"]
    flat, offsets = _resample_arrays(table, idx)
    fit_mask = table.fit_rows[flat]
    if table.names:
        fit = cox_fit_arrays(
            table.starts[flat][fit_mask], table.stops[flat][fit_mask],
            _event_rows(table, flat, offsets, idx)[fit_mask],
            table.rows[flat][fit_mask], table.names,
        )
    else:
        fit = _intercept_fit(table, flat, offsets, idx, fit_mask)
    den = _vector_denominators(table, flat, offsets, idx, fit)
    out = {}
    m_imp = x_imp.shape[0]
    for regime in state["regimes"]:
        d = table.dev[regime.label()][idx]
        u = table.subj_u[idx]
        compliant = ~np.isfinite(d)
        if not compliant.any():
            raise ModelError(f"no compliant subjects for {regime.label()} in replicate")
        na = _NelsonAalen(np.minimum(np.where(np.isfinite(d), d, u), u), np.isfinite(d))
        num = na.survivor(u)
        if np.any(den[compliant] < 1e-10):
            raise ModelError("positivity violation in replicate")
        raw = np.where(compliant, num / den, 0.0)
        pos = raw[compliant]
        lo = type1_quantile(pos, truncation[0])
        hi_q = type1_quantile(pos, truncation[1])
        w = np.where(compliant, np.clip(raw, lo, hi_q), 0.0)
        triples = np.full((3, m_imp), np.nan)
        wc = w[compliant]
        for m in range(m_imp):
            x = x_imp[m][idx][compliant]
            triples[0, m] = weighted_mortality(x, wc)
            triples[1, m] = weighted_quantile(x, wc, tau)
            if (x > 0).any():
                triples[2, m] = weighted_survivor_mean(x, wc)
        out[regime.label()] = triples
    return out


_POOL_STATE: dict = {}


def _pool_worker(args):
    b, seq = args
    rng = np.random.default_rng(seq)
    idx = rng.integers(0, _POOL_STATE["n"], size=_POOL_STATE["n"])
    try:
        return _replicate_triples(_POOL_STATE, idx), None
    except DtrError as exc:
        return None, str(exc)


def _map_replicates(state: dict, streams, workers: int):
    """Ordered replicate results; identical output for any worker count."""
    if workers <= 1:
        out = []
        for b, seq in enumerate(streams):
            rng = np.random.default_rng(seq)
            idx = rng.integers(0, state["n"], size=state["n"])
            try:
                out.append((_replicate_triples(state, idx), None))
            except DtrError as exc:
                out.append((None, str(exc)))
        return out
    import multiprocessing

    global _POOL_STATE
    _POOL_STATE = state  # inherited by forked workers
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(workers) as pool:
        results = pool.map(_pool_worker, list(enumerate(streams)))
    _POOL_STATE = {}
    return results


def _intercept_fit(table, flat, offsets, idx, fit_mask):
    from .survival import CoxWorkspace, ConvergenceReport, ProportionalHazardsFit

    events = _event_rows(table, flat, offsets, idx)[fit_mask]
    ws = CoxWorkspace(table.starts[flat][fit_mask], table.stops[flat][fit_mask],
                      events, np.zeros((int(fit_mask.sum()), 1)))
    return ProportionalHazardsFit(np.empty(0), (), ws.breslow(np.zeros(1)),
                                  ConvergenceReport(0, 0.0, True, 0.0))
