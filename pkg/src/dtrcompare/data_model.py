"""Cohort data representation, CSV ingestion and composite-outcome extraction.

File schemas (comma-separated, header row, empty field = missing):

* baseline file: ``subject_id, age, sex, cdc_class, clinic_site``
* visits file:   ``subject_id, time_days, cd4, waz, haz, art_status, death, censor``
  with art_status/death/censor coded 0/1.

A visit row with ``death=1`` (``censor=1``) records the death (censoring)
time; flags live on the unique row at that time.  Canonical serialization
writes rows ordered by (subject_id, time) with shortest round-trip float
formatting, so re-ingesting an emitted cohort reproduces it bit-exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

from .exceptions import DataError

__all__ = [
    "SEXES",
    "CDC_LEVELS",
    "BaselineCovariates",
    "Visit",
    "SubjectHistory",
    "CohortDataset",
    "OutcomeStatus",
    "ObservedOutcome",
    "ingest_cohort",
    "write_cohort",
    "extract_outcome",
]

SEXES = ("male", "female")
CDC_LEVELS = ("mild", "moderate", "severe", "asymptomatic", "missing")


@dataclass(frozen=True)
class BaselineCovariates:
    age_at_diagnosis: float
    sex: str
    cdc_class: str
    clinic_site: str

    def __post_init__(self):
        if not self.age_at_diagnosis > 0:
            raise DataError(f"age_at_diagnosis must be positive, got {self.age_at_diagnosis}")
        if self.sex not in SEXES:
            raise DataError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.cdc_class not in CDC_LEVELS:
            raise DataError(f"cdc_class must be one of {CDC_LEVELS}, got {self.cdc_class!r}")


@dataclass(frozen=True)
class Visit:
    time: float
    cd4: float | None = None
    waz: float | None = None
    haz: float | None = None
    art_status: bool = False

    def __post_init__(self):
        if self.time < 0:
            raise DataError(f"visit time must be >= 0, got {self.time}")
        if self.cd4 is not None and self.cd4 <= 0:
            # zero is reserved for the death point mass of the composite outcome
            raise DataError(f"cd4 must be positive when present, got {self.cd4}")


@dataclass(frozen=True)
class SubjectHistory:
    """One subject: baseline covariates plus time-stamped visit records."""

    subject_id: str
    baseline: BaselineCovariates
    visits: tuple[Visit, ...]
    initiation_time: float | None = None
    death_time: float | None = None
    censor_time: float | None = None
    baseline_cd4_missing_flag: bool = field(init=False, default=True)

    def __post_init__(self):
        times = [v.time for v in self.visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"subject {self.subject_id}: visit times must be strictly increasing")
        on_art = [v.art_status for v in self.visits]
        if any(a and not b for a, b in zip(on_art, on_art[1:])):
            raise DataError(f"subject {self.subject_id}: art_status is not monotone (treatment stopped)")
        limit = min(
            (t for t in (self.death_time, self.censor_time) if t is not None),
            default=math.inf,
        )
        if self.initiation_time is not None and self.initiation_time > limit:
            raise DataError(
                f"subject {self.subject_id}: initiation_time {self.initiation_time} exceeds "
                f"end of follow-up {limit}"
            )
        baseline_cd4 = next((v.cd4 for v in self.visits if v.time == 0.0), None)
        object.__setattr__(self, "baseline_cd4_missing_flag", baseline_cd4 is None)

    def followup_end(self, t_star: float) -> float:
        """U = min(T, C, t*); zero-visit subjects count as censored at 0."""
        if not self.visits:
            return 0.0
        candidates = [t_star]
        if self.death_time is not None:
            candidates.append(self.death_time)
        if self.censor_time is not None:
            candidates.append(self.censor_time)
        return min(candidates)


@dataclass(frozen=True)
class CohortDataset:
    """Immutable after ingestion; safe to share across parallel workers."""

    subjects: tuple[SubjectHistory, ...]
    warnings: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return len(self.subjects)

    def by_id(self, subject_id: str) -> SubjectHistory:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)


class OutcomeStatus(Enum):
    DEAD = "dead"
    ALIVE_WITH_CD4 = "alive_with_cd4"
    ALIVE_CD4_MISSING = "alive_cd4_missing"
    CENSORED_BEFORE_WINDOW = "censored_before_window"


@dataclass(frozen=True)
class ObservedOutcome:
    status: OutcomeStatus
    x_value: float | None = None
    measurement_time: float | None = None


def extract_outcome(subject: SubjectHistory, t_star: float, window: tuple[float, float]) -> ObservedOutcome:
    """Observed composite outcome at ``t_star`` with measurements taken from
    ``window = [t_a, t_b]``.

    Death at or before t* dominates everything (x = 0).  Otherwise the CD4
    measurement in the window minimizing |t_ik - t*| is used, ties broken to
    the earlier measurement.  Subjects censored before the window opens are
    flagged for death-then-CD4 imputation; everyone else alive with no
    in-window measurement gets CD4-only imputation.
    """
    t_a, t_b = float(window[0]), float(window[1])
    if t_a > t_b:
        raise DataError(f"window bounds inverted: [{t_a}, {t_b}]")
    if not (t_a <= t_star <= t_b):
        raise DataError(f"t_star {t_star} outside window [{t_a}, {t_b}]")
    if subject.death_time is not None and subject.death_time <= t_star:
        return ObservedOutcome(OutcomeStatus.DEAD, x_value=0.0)
    best = None
    for v in subject.visits:
        if v.cd4 is None or not (t_a <= v.time <= t_b):
            continue
        dist = abs(v.time - t_star)
        if best is None or dist < best[0]:  # tie keeps the earlier visit
            best = (dist, v)
    if best is not None:
        return ObservedOutcome(
            OutcomeStatus.ALIVE_WITH_CD4, x_value=best[1].cd4, measurement_time=best[1].time
        )
    if not subject.visits or (subject.censor_time is not None and subject.censor_time < t_a):
        return ObservedOutcome(OutcomeStatus.CENSORED_BEFORE_WINDOW)
    return ObservedOutcome(OutcomeStatus.ALIVE_CD4_MISSING)


# --- CSV ingestion -----------------------------------------------------------

_BASELINE_COLUMNS = ("subject_id", "age", "sex", "cdc_class", "clinic_site")
_VISIT_COLUMNS = ("subject_id", "time_days", "cd4", "waz", "haz", "art_status", "death", "censor")


def _parse_float(text: str, row_num: int, column: str, path: str) -> float | None:
    text = text.strip()
    if text == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}: row {row_num}, column {column!r}: not a number: {text!r}")


def _parse_flag(text: str, row_num: int, column: str, path: str) -> bool:
    text = text.strip()
    if text not in ("0", "1"):
        raise DataError(f"{path}: row {row_num}, column {column!r}: expected 0/1, got {text!r}")
    return text == "1"


def _read_rows(path: str, columns: tuple[str, ...]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(columns)}")
        if tuple(h.strip() for h in header) != columns:
            raise DataError(f"{path}: header must be {','.join(columns)}, got {','.join(header)}")
        for row_num, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != len(columns):
                raise DataError(f"{path}: row {row_num}: expected {len(columns)} fields, got {len(row)}")
            yield row_num, row


def ingest_cohort(baseline_path: str, visits_path: str) -> CohortDataset:
    """Read the two cohort files into one ``SubjectHistory`` per subject.

    Visits are sorted, duplicate (subject, time) rows rejected, and monotone
    ART status enforced.  Subjects with no visit rows are accepted (treated
    downstream as censored at time 0) and counted in ``warnings``.
    """
    baselines: dict[str, BaselineCovariates] = {}
    for row_num, row in _read_rows(baseline_path, _BASELINE_COLUMNS):
        sid = row[0].strip()
        if not sid:
            raise DataError(f"{baseline_path}: row {row_num}: empty subject_id")
        if sid in baselines:
            raise DataError(f"{baseline_path}: row {row_num}: duplicate subject_id {sid}")
        age = _parse_float(row[1], row_num, "age", baseline_path)
        if age is None:
            raise DataError(f"{baseline_path}: row {row_num}, column 'age': required")
        sex = row[2].strip()
        cdc = row[3].strip() or "missing"  # explicit level, never an absent value
        try:
            baselines[sid] = BaselineCovariates(age, sex, cdc, row[4].strip())
        except DataError as exc:
            raise DataError(f"{baseline_path}: row {row_num}: {exc}")

    visit_rows: dict[str, list[tuple[float, Visit, bool, bool]]] = {sid: [] for sid in baselines}
    for row_num, row in _read_rows(visits_path, _VISIT_COLUMNS):
        sid = row[0].strip()
        if sid not in baselines:
            raise DataError(f"{visits_path}: row {row_num}: unknown subject_id {sid}")
        time = _parse_float(row[1], row_num, "time_days", visits_path)
        if time is None:
            raise DataError(f"{visits_path}: row {row_num}, column 'time_days': required")
        cd4 = _parse_float(row[2], row_num, "cd4", visits_path)
        waz = _parse_float(row[3], row_num, "waz", visits_path)
        haz = _parse_float(row[4], row_num, "haz", visits_path)
        art = _parse_flag(row[5], row_num, "art_status", visits_path)
        death = _parse_flag(row[6], row_num, "death", visits_path)
        censor = _parse_flag(row[7], row_num, "censor", visits_path)
        try:
            visit = Visit(time, cd4, waz, haz, art)
        except DataError as exc:
            raise DataError(f"{visits_path}: row {row_num}: {exc}")
        visit_rows[sid].append((time, visit, death, censor))

    subjects = []
    zero_visit = 0
    for sid in sorted(baselines):
        rows = sorted(visit_rows[sid], key=lambda r: r[0])
        times = [r[0] for r in rows]
        for a, b in zip(times, times[1:]):
            if a == b:
                raise DataError(f"subject {sid}: duplicate visit at time {a}")
        death_times = [r[0] for r in rows if r[2]]
        censor_times = [r[0] for r in rows if r[3]]
        if len(death_times) > 1:
            raise DataError(f"subject {sid}: more than one death record")
        if len(censor_times) > 1:
            raise DataError(f"subject {sid}: more than one censoring record")
        visits = tuple(r[1] for r in rows)
        initiation = next((v.time for v in visits if v.art_status), None)
        if not visits:
            zero_visit += 1
        subjects.append(
            SubjectHistory(
                subject_id=sid,
                baseline=baselines[sid],
                visits=visits,
                initiation_time=initiation,
                death_time=death_times[0] if death_times else None,
                censor_time=censor_times[0] if censor_times else None,
            )
        )
    warnings = ()
    if zero_visit:
        warnings = (f"{zero_visit} subject(s) have no visit rows; treated as censored at time 0",)
    return CohortDataset(subjects=tuple(subjects), warnings=warnings)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return repr(float(value))


def write_cohort(cohort: CohortDataset, baseline_path: str, visits_path: str) -> None:
    """Canonical serialization: deterministic row order (subject_id, then time)."""
    subjects = sorted(cohort.subjects, key=lambda s: s.subject_id)
    with open(baseline_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_BASELINE_COLUMNS)
        for s in subjects:
            writer.writerow(
                [s.subject_id, _fmt(s.baseline.age_at_diagnosis), s.baseline.sex,
                 s.baseline.cdc_class, s.baseline.clinic_site]
            )
    with open(visits_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_VISIT_COLUMNS)
        for s in subjects:
            rows = {v.time: v for v in s.visits}
            extra_times = []
            for t in (s.death_time, s.censor_time):
                if t is not None and t not in rows:
                    extra_times.append(t)
            last_art: bool = False
            all_times = sorted(set(rows) | set(extra_times))
            for t in all_times:
                v = rows.get(t)
                if v is not None:
                    last_art = v.art_status
                    cd4, waz, haz, art = v.cd4, v.waz, v.haz, v.art_status
                else:  # bare event-marker row; carries the standing ART status
                    cd4 = waz = haz = None
                    art = last_art
                writer.writerow(
                    [s.subject_id, _fmt(t), _fmt(cd4), _fmt(waz), _fmt(haz),
                     "1" if art else "0",
                     "1" if s.death_time == t else "0",
                     "1" if s.censor_time == t else "0"]
                )
