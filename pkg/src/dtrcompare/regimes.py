"""Treatment-initiation regimes and regime-compliance processes.

A regime is "never treat", "treat immediately" (at the baseline visit), or
"initiate when observed CD4 first falls below q".  Compliance at time t holds
when the subject's actual treatment status agrees with what the rule, applied
to their observed history, dictates at t.  A first deviation is absorbing:
weights only require compliance through t*, and the deviation counting
process has a single jump.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data_model import CohortDataset, SubjectHistory
from .exceptions import DataError, ModelError
from .survival import CumulativeHazard, RiskInterval, nelson_aalen

__all__ = [
    "DEFAULT_CONTINUUM",
    "RegimeKind",
    "RegimeSpec",
    "ComplianceProcess",
    "ComplianceSurvivor",
    "default_regime_grid",
    "regime_rule",
    "compliance_process",
    "compliance_survivor",
    "compliance_table",
]

DEFAULT_CONTINUUM = (200.0, 500.0)


class RegimeKind(Enum):
    NEVER = "never"
    THRESHOLD = "threshold"
    IMMEDIATE = "immediate"


@dataclass(frozen=True)
class RegimeSpec:
    kind: RegimeKind
    q: float

    @classmethod
    def never(cls) -> "RegimeSpec":
        return cls(RegimeKind.NEVER, 0.0)

    @classmethod
    def immediate(cls) -> "RegimeSpec":
        return cls(RegimeKind.IMMEDIATE, math.inf)

    @classmethod
    def threshold(cls, q: float, continuum: tuple[float, float] = DEFAULT_CONTINUUM) -> "RegimeSpec":
        if not (continuum[0] <= q <= continuum[1]):
            raise DataError(f"threshold {q} outside regime continuum [{continuum[0]}, {continuum[1]}]")
        return cls(RegimeKind.THRESHOLD, float(q))

    def label(self) -> str:
        if self.kind is RegimeKind.NEVER:
            return "never"
        if self.kind is RegimeKind.IMMEDIATE:
            return "immediate"
        return f"q{self.q:g}"


def default_regime_grid(step: float = 10.0, continuum: tuple[float, float] = DEFAULT_CONTINUUM):
    """never, thresholds lo..hi by step, immediate."""
    qs = np.arange(continuum[0], continuum[1] + 0.5 * step, step)
    return [RegimeSpec.never(), *(RegimeSpec.threshold(float(q), continuum) for q in qs),
            RegimeSpec.immediate()]


@dataclass(frozen=True)
class ComplianceProcess:
    subject_id: str
    regime: RegimeSpec
    times: tuple[float, ...]
    values: tuple[int, ...]
    deviation_time: float | None

    def value_at(self, t: float) -> int:
        out = 1
        for time, val in zip(self.times, self.values):
            if time > t:
                break
            out = val
        return out


def _rule_at(subject: SubjectHistory, regime: RegimeSpec, t: float) -> int:
    """The threshold rule evaluated at time t from observed history.

    At t=0: treat iff baseline CD4 is missing or below q.  At t>0: keep
    treating once initiated; do not treat while CD4 has never been observed;
    otherwise treat iff the lowest previously recorded CD4, or the current
    value, has fallen below q.
    """
    if regime.kind is RegimeKind.IMMEDIATE:
        return 1
    if regime.kind is RegimeKind.NEVER:
        return 0
    q = regime.q
    if t == 0.0:
        z0 = next((v.cd4 for v in subject.visits if v.time == 0.0), None)
        return 1 if (z0 is None or z0 < q) else 0
    if subject.initiation_time is not None and subject.initiation_time < t:
        return 1  # N^A(t-) = 1
    observed = [(v.time, v.cd4) for v in subject.visits if v.cd4 is not None and v.time <= t]
    if not observed:
        return 0  # R^Z(t) = 1
    z_now = observed[-1][1]
    prior = [cd4 for time, cd4 in observed if time < t]
    z_min = min(prior) if prior else math.inf
    if z_min < q:
        return 1  # the regime already called for treatment at an earlier visit
    return 1 if z_now < q else 0


def regime_rule(subject: SubjectHistory, regime: RegimeSpec, visit_index: int) -> int:
    """r_q evaluated at the subject's visit ``visit_index``."""
    if not (0 <= visit_index < len(subject.visits)):
        raise DataError(f"visit_index {visit_index} out of range for subject {subject.subject_id}")
    return _rule_at(subject, regime, subject.visits[visit_index].time)


def compliance_process(subject: SubjectHistory, regime: RegimeSpec, t_star: float) -> ComplianceProcess:
    """Evaluate the compliance indicator at t=0 and every decision-relevant
    time through U = min(T, C, t*).

    Decision-relevant times are the visit times plus the initiation time
    (treatment may start between recorded visits).  The first 0 is absorbing;
    after censoring, compliance is frozen at its last value (conditional
    constancy), which the evaluation horizon U realizes automatically.
    """
    u = subject.followup_end(t_star)
    eval_times = {0.0}
    eval_times.update(v.time for v in subject.visits if v.time <= u)
    if subject.initiation_time is not None and subject.initiation_time <= u:
        eval_times.add(subject.initiation_time)
    times = sorted(eval_times)
    values = []
    deviation = None
    for t in times:
        if deviation is not None:
            values.append(0)
            continue
        treated_now = subject.initiation_time is not None and subject.initiation_time <= t
        r = _rule_at(subject, regime, t)
        delta = r if treated_now else 1 - r
        values.append(delta)
        if delta == 0:
            deviation = t
    return ComplianceProcess(
        subject_id=subject.subject_id,
        regime=regime,
        times=tuple(times),
        values=tuple(values),
        deviation_time=deviation,
    )


@dataclass(frozen=True)
class ComplianceSurvivor:
    """S^q(t) = exp(-Lambda^q(t)) from Nelson-Aalen on regime deviations."""

    regime: RegimeSpec
    cumulative_hazard: CumulativeHazard

    def value(self, t):
        return self.cumulative_hazard.survivor(t)


def compliance_survivor(cohort: CohortDataset, regime: RegimeSpec, t_star: float) -> ComplianceSurvivor:
    """Nelson-Aalen on deviation times; at risk = still-compliant, still-followed.

    Deviations at t=0 are supported by opening each interval just before 0.
    """
    intervals = []
    any_compliant_at_zero = False
    for subject in cohort.subjects:
        u = subject.followup_end(t_star)
        cp = compliance_process(subject, regime, t_star)
        dev = cp.deviation_time
        if dev != 0.0:
            any_compliant_at_zero = True
        stop = u if dev is None else min(dev, u)
        intervals.append(
            RiskInterval(subject.subject_id, -1.0, max(stop, 0.0), (0.0,), event=dev is not None)
        )
    if not any_compliant_at_zero:
        raise ModelError(f"regime never followed: no subject compliant with {regime.label()} at t=0")
    return ComplianceSurvivor(regime, nelson_aalen(intervals))


def compliance_table(cohort: CohortDataset, regimes, t_star: float):
    """Wide export: one row per subject, one column per regime with the
    deviation time or 'compliant'."""
    regimes = list(regimes)
    header = ["subject_id", *(r.label() for r in regimes)]
    rows = [header]
    for subject in cohort.subjects:
        row = [subject.subject_id]
        for regime in regimes:
            dev = compliance_process(subject, regime, t_star).deviation_time
            row.append("compliant" if dev is None else f"{dev:g}")
        rows.append(row)
    return rows
