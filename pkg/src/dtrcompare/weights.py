"""Continuous-time stabilized inverse-probability-of-regime weights.

The denominator is the subject's probability of their observed initiation
path: the fitted point-mass density at the initiation time for initiators,
the fitted survivor function of the initiation process at the end of
follow-up for everyone else.  The numerator is the marginal compliance
survivor S^q evaluated at the same horizon.  Weights are computed only for
subjects compliant through t* and truncated at configurable quantiles of the
positive weights.

Risk intervals for the initiation model open at -1 so that day-0 initiations
(the "immediate" regime's compliers) are estimable as a baseline atom; the
baseline interval carries the covariates known at entry.  From then on
covariates update at visit times with the last-observation-carried-forward
value in force on the following interval, so an event at a visit is compared
against the history observed strictly before that visit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data_model import CohortDataset, SubjectHistory
from .exceptions import DataError, ModelError, PositivityError
from .regimes import ComplianceSurvivor, RegimeSpec, compliance_process, compliance_survivor
from .splines import SplineBasis, build_basis, quantile_knots
from .survival import CovariatePath, ProportionalHazardsFit, RiskInterval, cox_fit, density_at, survivor_at

__all__ = [
    "TermConfig",
    "WeightModelSpec",
    "InitiationModel",
    "StabilizedWeightSet",
    "fit_initiation_model",
    "denominator",
    "stabilized_weights",
    "discrete_time_weight",
    "weight_table_rows",
]

_ENTRY = -1.0  # first interval opens just before 0 so day-0 events have a risk set
_POSITIVITY_FLOOR = 1e-10

_TRANSFORMS = {"identity": lambda x: x, "sqrt": np.sqrt}


@dataclass(frozen=True)
class TermConfig:
    """Spline configuration for one continuous covariate."""

    n_interior_knots: int = 3
    transform: str = "identity"

    def __post_init__(self):
        if self.transform not in _TRANSFORMS:
            raise DataError(f"unknown transform {self.transform!r}")


@dataclass(frozen=True)
class WeightModelSpec:
    """Which history terms enter the initiation-hazard model."""

    cd4: TermConfig = TermConfig(transform="sqrt")
    waz: TermConfig | None = TermConfig()
    haz: TermConfig | None = TermConfig()
    age: TermConfig = TermConfig()
    include_sex: bool = True
    include_cdc: bool = True


@dataclass
class _FittedTerm:
    name: str
    basis: SplineBasis
    transform: str

    def expand(self, value: float | None) -> np.ndarray:
        """Value columns zeroed when missing; a separate indicator column
        carries the missingness."""
        k = self.basis.dimension - 1
        if value is None:
            return np.concatenate([np.zeros(k), [1.0]])
        x = _TRANSFORMS[self.transform](float(value))
        return np.concatenate([self.basis.evaluate(x)[1:], [0.0]])

    def column_names(self):
        return [f"{self.name}_s{j}" for j in range(1, self.basis.dimension)] + [f"{self.name}_missing"]


@dataclass
class _FittedBaselineTerm:
    name: str
    basis: SplineBasis
    transform: str

    def expand(self, value: float) -> np.ndarray:
        x = _TRANSFORMS[self.transform](float(value))
        return self.basis.evaluate(x)[1:]

    def column_names(self):
        return [f"{self.name}_s{j}" for j in range(1, self.basis.dimension)]


@dataclass
class WeightDesign:
    """Frozen design information: term layout and fitted knots."""

    time_varying: list[_FittedTerm]
    baseline_terms: list[_FittedBaselineTerm]
    include_sex: bool
    cdc_levels: tuple[str, ...]
    names: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        names: list[str] = []
        for term in self.time_varying:
            names.extend(term.column_names())
        for term in self.baseline_terms:
            names.extend(term.column_names())
        if self.include_sex:
            names.append("sex_female")
        names.extend(f"cdc_{level}" for level in self.cdc_levels)
        self.names = tuple(names)

    def row(self, subject: SubjectHistory, tv_values: dict[str, float | None]) -> np.ndarray:
        parts = [term.expand(tv_values.get(term.name)) for term in self.time_varying]
        for term in self.baseline_terms:
            parts.append(term.expand(subject.baseline.age_at_diagnosis))
        if self.include_sex:
            parts.append(np.asarray([1.0 if subject.baseline.sex == "female" else 0.0]))
        if self.cdc_levels:
            parts.append(np.asarray([1.0 if subject.baseline.cdc_class == lv else 0.0
                                     for lv in self.cdc_levels]))
        return np.concatenate(parts) if parts else np.empty(0)


def _design_to_dict(design: WeightDesign) -> dict:
    def basis_dict(term):
        return {"name": term.name, "transform": term.transform,
                "interior": list(term.basis.interior_knots),
                "boundary": list(term.basis.boundary_knots)}

    return {
        "time_varying": [basis_dict(t) for t in design.time_varying],
        "baseline_terms": [basis_dict(t) for t in design.baseline_terms],
        "include_sex": design.include_sex,
        "cdc_levels": list(design.cdc_levels),
    }


def _design_from_dict(payload: dict) -> WeightDesign:
    def term(cls, d):
        basis = build_basis(d["interior"], boundary=tuple(d["boundary"]))
        return cls(d["name"], basis, d["transform"])

    return WeightDesign(
        time_varying=[term(_FittedTerm, d) for d in payload["time_varying"]],
        baseline_terms=[term(_FittedBaselineTerm, d) for d in payload["baseline_terms"]],
        include_sex=payload["include_sex"],
        cdc_levels=tuple(payload["cdc_levels"]),
    )


@dataclass
class InitiationModel:
    """Fitted initiation-hazard model plus the design needed to evaluate it."""

    fit: ProportionalHazardsFit
    design: WeightDesign
    t_star: float
    n_excluded_zero_visit: int = 0

    def design_path(self, subject: SubjectHistory) -> CovariatePath:
        return _design_path(subject, self.design, self.t_star)

    def to_json(self) -> str:
        import json

        return json.dumps({
            "fit": json.loads(self.fit.to_json()),
            "design": _design_to_dict(self.design),
            "t_star": self.t_star,
            "n_excluded_zero_visit": self.n_excluded_zero_visit,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "InitiationModel":
        import json

        payload = json.loads(text)
        return cls(
            fit=ProportionalHazardsFit.from_json(json.dumps(payload["fit"])),
            design=_design_from_dict(payload["design"]),
            t_star=payload["t_star"],
            n_excluded_zero_visit=payload.get("n_excluded_zero_visit", 0),
        )


def _locf_states(subject: SubjectHistory, horizon: float):
    """(break time, {cd4, waz, haz}) states: baseline values at 0, then the
    carried-forward state after each visit at or before the horizon."""
    state: dict[str, float | None] = {"cd4": None, "waz": None, "haz": None}
    breaks: list[float] = []
    states: list[dict[str, float | None]] = []
    for v in subject.visits:
        if v.time > horizon:
            break
        for name, value in (("cd4", v.cd4), ("waz", v.waz), ("haz", v.haz)):
            if value is not None:
                state[name] = value
        if breaks and v.time == breaks[-1]:
            states[-1] = dict(state)
        else:
            breaks.append(v.time)
            states.append(dict(state))
    if not breaks or breaks[0] != 0.0:
        breaks.insert(0, 0.0)
        states.insert(0, {"cd4": None, "waz": None, "haz": None})
    return breaks, states


def _design_path(subject: SubjectHistory, design: WeightDesign, horizon: float) -> CovariatePath:
    breaks, states = _locf_states(subject, horizon)
    rows = np.asarray([design.row(subject, st) for st in states])
    return CovariatePath(np.asarray(breaks), rows)


def _collect_term_values(cohort: CohortDataset, attr: str):
    vals = [getattr(v, attr) for s in cohort.subjects for v in s.visits
            if getattr(v, attr) is not None]
    return np.asarray(vals, dtype=float)


def _fit_design(cohort: CohortDataset, spec: WeightModelSpec) -> WeightDesign:
    time_varying = []
    for name in ("cd4", "waz", "haz"):
        cfg: TermConfig | None = getattr(spec, name)
        if cfg is None:
            continue
        values = _collect_term_values(cohort, name)
        if values.size < 2 or np.ptp(_TRANSFORMS[cfg.transform](values)) == 0.0:
            raise DataError(f"cannot place knots for weight-model term {name!r}: too few distinct values")
        basis = quantile_knots(_TRANSFORMS[cfg.transform](values), cfg.n_interior_knots)
        time_varying.append(_FittedTerm(name, basis, cfg.transform))
    ages = np.asarray([s.baseline.age_at_diagnosis for s in cohort.subjects], dtype=float)
    baseline_terms = []
    if spec.age is not None:
        if np.ptp(ages) == 0.0:
            basis = build_basis([], boundary=(float(ages[0]) - 1.0, float(ages[0]) + 1.0))
        else:
            basis = quantile_knots(_TRANSFORMS[spec.age.transform](ages), spec.age.n_interior_knots)
        baseline_terms.append(_FittedBaselineTerm("age", basis, spec.age.transform))
    cdc_levels: tuple[str, ...] = ()
    if spec.include_cdc:
        seen = {s.baseline.cdc_class for s in cohort.subjects}
        # reference level is the most common one; absent levels get no column
        ordered = sorted(seen)
        counts = {lv: sum(1 for s in cohort.subjects if s.baseline.cdc_class == lv) for lv in ordered}
        ref = max(ordered, key=lambda lv: counts[lv])
        cdc_levels = tuple(lv for lv in ordered if lv != ref)
    return WeightDesign(time_varying, baseline_terms, spec.include_sex, cdc_levels)


def build_initiation_intervals(cohort: CohortDataset, design: WeightDesign, t_star: float):
    """Per-subject risk intervals for the initiation process.

    A subject exits the risk set at min(A, T, C, t*); the interval carrying
    an exit at the initiation time is the event interval.  Zero-visit
    subjects carry no information and are excluded (counted by the caller).
    """
    intervals: list[RiskInterval] = []
    excluded = 0
    for subject in cohort.subjects:
        if not subject.visits:
            excluded += 1
            continue
        exit_time = subject.followup_end(t_star)
        if subject.initiation_time is not None:
            exit_time = min(exit_time, subject.initiation_time)
        event = subject.initiation_time is not None and subject.initiation_time <= subject.followup_end(t_star)
        path = _design_path(subject, design, exit_time)
        bounds = [_ENTRY] + [b for b in path.breaks if 0.0 < b < exit_time] + [exit_time]
        for j in range(len(bounds) - 1):
            hi = bounds[j + 1]
            # value_at(hi) is the state in force on (lo, hi]: observed strictly
            # before hi, except the baseline atom which sees the day-0 state
            intervals.append(
                RiskInterval(
                    subject.subject_id, bounds[j], hi, tuple(path.value_at(hi)),
                    event=event and j == len(bounds) - 2,
                )
            )
    return intervals, excluded


def fit_initiation_model(cohort: CohortDataset, spec: WeightModelSpec | None = None,
                         t_star: float = 365.0, max_iter: int = 50, tol: float = 1e-9) -> InitiationModel:
    """Fit the proportional-hazards model for treatment initiation."""
    spec = spec or WeightModelSpec()
    design = _fit_design(cohort, spec)
    intervals, excluded = build_initiation_intervals(cohort, design, t_star)
    if not intervals or max(iv.stop for iv in intervals) <= 0.0:
        raise ModelError("no at-risk time: every subject exits follow-up at day 0")
    if not any(iv.event for iv in intervals):
        raise DataError("no initiation events in the cohort")
    if design.names:
        fit = cox_fit(intervals, design.names, max_iter=max_iter, tol=tol)
    else:
        from .survival import CoxWorkspace, _as_arrays, ConvergenceReport

        start, stop, event, _ = _as_arrays(intervals)
        ws = CoxWorkspace(start, stop, event, np.zeros((len(stop), 1)))
        baseline = ws.breslow(np.zeros(1))
        fit = ProportionalHazardsFit(np.empty(0), (), baseline,
                                     ConvergenceReport(0, 0.0, True, 0.0))
    return InitiationModel(fit=fit, design=design, t_star=t_star, n_excluded_zero_visit=excluded)


def denominator(subject: SubjectHistory, model: InitiationModel, t_star: float) -> float:
    """f^A(A | path) for initiators, S^A(U | path) for everyone else."""
    u = subject.followup_end(t_star)
    path = model.design_path(subject)
    a = subject.initiation_time
    if a is not None and a <= u:
        try:
            value = density_at(model.fit, path, a)
        except ModelError:
            raise ModelError(
                f"initiation time {a} of subject {subject.subject_id} is not a baseline jump "
                "time; cannot evaluate the point-mass density"
            )
    else:
        value = survivor_at(model.fit, path, u)
    if value < _POSITIVITY_FLOOR:
        raise PositivityError(
            f"denominator {value:.3e} below {_POSITIVITY_FLOOR:g} for subject {subject.subject_id}: "
            "positivity violation"
        )
    return float(value)


def type1_quantile(values: np.ndarray, p: float) -> float:
    """Nearest-rank (type-1) empirical quantile: x_(ceil(p*n)), 1-indexed."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise DataError("quantile of empty set")
    k = max(1, math.ceil(p * v.size))
    return float(v[k - 1])


@dataclass
class StabilizedWeightSet:
    """Per-subject stabilized weights for one regime.

    ``weight`` is zero exactly for subjects not compliant through t*;
    truncation clips the positive weights to the (p_lo, p_hi) type-1
    empirical quantiles.
    """

    regime: RegimeSpec
    subject_ids: tuple[str, ...]
    compliant: np.ndarray
    numerator: np.ndarray
    denominator: np.ndarray
    raw_weight: np.ndarray
    weight: np.ndarray
    truncated: np.ndarray
    truncation: tuple[float, float]

    @property
    def n_compliant(self) -> int:
        return int(self.compliant.sum())


def stabilized_weights(
    cohort: CohortDataset,
    regime: RegimeSpec,
    model: InitiationModel,
    t_star: float,
    truncation: tuple[float, float] = (0.05, 0.95),
    survivor: ComplianceSurvivor | None = None,
) -> StabilizedWeightSet:
    """Stabilized weights S^q(U or t*) / denominator for compliant subjects."""
    if survivor is None:
        survivor = compliance_survivor(cohort, regime, t_star)
    n = cohort.n
    compliant = np.zeros(n, dtype=bool)
    num = np.zeros(n)
    den = np.full(n, np.nan)
    raw = np.zeros(n)
    for i, subject in enumerate(cohort.subjects):
        cp = compliance_process(subject, regime, t_star)
        if cp.deviation_time is not None:
            continue
        compliant[i] = True
        u = subject.followup_end(t_star)
        num[i] = survivor.value(u if u < t_star else t_star)
        den[i] = denominator(subject, model, t_star)
        raw[i] = num[i] / den[i]
    if not compliant.any():
        raise ModelError(f"no compliant subjects for regime {regime.label()}")
    positive = raw[compliant]
    lo = type1_quantile(positive, truncation[0])
    hi = type1_quantile(positive, truncation[1])
    weight = np.where(compliant, np.clip(raw, lo, hi), 0.0)
    truncated = compliant & ((raw < lo) | (raw > hi))
    return StabilizedWeightSet(
        regime=regime,
        subject_ids=tuple(s.subject_id for s in cohort.subjects),
        compliant=compliant,
        numerator=num,
        denominator=den,
        raw_weight=raw,
        weight=weight,
        truncated=truncated,
        truncation=truncation,
    )


def discrete_time_weight(subject: SubjectHistory, model: InitiationModel,
                         grid_step: float, t_star: float) -> float:
    """Discrete-time approximation of the denominator on a regular grid.

    The probability of initiating within a grid interval is the sum of
    u(x(s)) dLambda0(s) over the baseline jumps it contains; the weight is
    the product of the per-interval Bernoulli factors.  Refining the grid
    converges to the continuous-time product-integral value.
    """
    if grid_step <= 0:
        raise DataError("grid_step must be positive")
    u_end = subject.followup_end(t_star)
    a = subject.initiation_time
    horizon = min(a, u_end) if a is not None else u_end
    path = model.design_path(subject)
    jumps = model.fit.baseline.jump_times
    mask = jumps <= horizon
    jt = jumps[mask]
    contrib = np.zeros(len(jt))
    if len(jt):
        x = path.values[path.indices_at(jt)]
        contrib = np.exp(x @ np.asarray(model.fit.coefficients, dtype=float)) * \
            model.fit.baseline.increments[mask]
    n_cells = max(1, math.ceil(horizon / grid_step - 1e-12))
    edges = np.minimum(np.arange(1, n_cells + 1) * grid_step, horizon)
    # cell k covers (edges[k-1], edges[k]]; the first covers [0, edges[0]]
    cell_of_jump = np.searchsorted(edges, jt, side="left")
    p = np.zeros(n_cells)
    np.add.at(p, cell_of_jump, contrib)
    if np.any(p > 1.0):
        raise ModelError("grid too coarse: an interval initiation probability exceeds 1")
    initiated = a is not None and a <= u_end
    if initiated:
        k_event = int(np.searchsorted(edges, a, side="left"))
        value = float(np.prod(1.0 - p[:k_event]) * p[k_event])
    else:
        value = float(np.prod(1.0 - p))
    return value


def weight_table_rows(weight_sets) -> list[list]:
    """Flat export: subject_id, regime, numerator, denominator, raw, truncated."""
    rows: list[list] = [["subject_id", "regime", "numerator", "denominator",
                         "raw_weight", "truncated_weight"]]
    for ws in weight_sets:
        for i, sid in enumerate(ws.subject_ids):
            if not ws.compliant[i]:
                continue
            rows.append([sid, ws.regime.label(), ws.numerator[i], ws.denominator[i],
                         ws.raw_weight[i], ws.weight[i]])
    return rows
