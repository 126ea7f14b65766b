"""Synthetic longitudinal cohorts with known potential-outcome ground truth.

The generative model, shared by the observational world and the forced-regime
(potential outcome) world:

* latent square-root CD4 declines linearly from a random baseline and, after
  treatment initiation, recovers (exponential approach or linear slope) plus
  a subject-specific random post-initiation slope;
* visits happen at day 0 and then at Poisson times rounded to whole days;
  CD4 is measured at a visit with configurable probability, as the latent
  value plus Gaussian noise on the square-root scale;
* treatment initiation follows a continuous-time hazard, loglinear in the
  most recent CD4 observation carried forward (lab results in hand, so the
  hazard is predictable), simulated by inversion on the piecewise-constant
  segments between visits and executed on the whole day where the clock
  rings; diagnosis-day starts are an extra probability atom at day 0 driven
  by the baseline measurement.  The initiation process seen by the weight
  model is therefore exactly proportional-hazards in the carried-forward
  observation, with a day-0 atom.  Confounding strength 0 makes the hazard
  independent of CD4 (sequential randomization holds by construction);
* death follows a piecewise-constant hazard in the latent CD4, discretized
  on a fixed regular knot grid plus the initiation time -- never on visit
  times -- so the never/immediate potential outcomes do not depend on the
  visit process;
* dropout is exponential, independent of health given baseline.

Potential outcomes force initiation by applying the threshold rule to the
measured CD4 at each visit, exactly as compliance is judged observationally,
so the consistency assumption holds by construction.  Each subject's health
draws (baseline, random effects, death clock, outcome measurement noise)
come from a stream separate from the visit-process draws, and ground-truth
simulation reuses one stream per subject across regimes (common random
numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data_model import BaselineCovariates, CohortDataset, SubjectHistory, Visit
from .exceptions import ConfigError
from .regimes import RegimeKind, RegimeSpec

__all__ = ["SimConfig", "GroundTruth", "simulate_cohort", "simulate_truth"]

_DAYS = 365.0


@dataclass(frozen=True)
class SimConfig:
    n_subjects: int = 500
    seed: int = 20180612
    horizon_days: float = 730.0

    # visit process
    visit_rate_per_year: float = 4.0
    cd4_measurement_prob: float = 0.85
    baseline_cd4_measurement_prob: float = 0.95
    aux_measurement_prob: float = 0.7

    # latent CD4 (square-root scale)
    sqrt_cd4_mean: float = 19.0
    sqrt_cd4_sd: float = 3.5
    sqrt_cd4_age_slope: float = 0.0
    decline_per_year: float = 2.5
    recovery_shape: str = "exponential"  # or "linear"
    recovery_gain: float = 6.0
    recovery_rate_per_year: float = 5.0
    recovery_slope_per_year: float = 3.0
    random_intercept_sd: float = 1.8
    random_slope_sd_per_year: float = 0.8
    measurement_sd: float = 1.2

    # initiation: day-0 atom plus a continuous-time hazard in the carried-
    # forward sqrt CD4, executed on whole days
    init_prob_day0: float = 0.10
    init_rate_per_year: float = 0.6
    init_hazard_max_per_day: float = 0.25
    init_prob_max: float = 0.85
    confounding: float = 0.0  # log-hazard slope per sqrt-CD4 unit below the reference
    day0_confounding: float | None = None  # defaults to `confounding`
    sqrt_cd4_ref: float = 19.0

    # death
    death_rate_per_year: float = 0.04
    death_conf_per_sqrt: float = 0.0
    death_treatment_loghr: float = 0.0
    death_time_trend_per_year: float = 0.0  # log-hazard slope in t; absorbed by the Cox baseline
    death_m_ref: float = 19.0
    hazard_knot_days: float = 15.0

    # dropout
    dropout_rate_per_year: float = 0.0

    # baseline covariates
    age_range: tuple[float, float] = (10.0, 19.0)
    cdc_probs: tuple[float, ...] = (0.10, 0.04, 0.045, 0.10, 0.715)  # mild, moderate, severe, asymptomatic, missing
    n_sites: int = 3

    def validate(self) -> None:
        positive = {
            "n_subjects": self.n_subjects, "horizon_days": self.horizon_days,
            "visit_rate_per_year": self.visit_rate_per_year,
            "hazard_knot_days": self.hazard_knot_days,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        nonneg = {
            "decline_per_year": self.decline_per_year,
            "death_rate_per_year": self.death_rate_per_year,
            "dropout_rate_per_year": self.dropout_rate_per_year,
            "measurement_sd": self.measurement_sd,
            "random_intercept_sd": self.random_intercept_sd,
            "random_slope_sd_per_year": self.random_slope_sd_per_year,
        }
        for name, value in nonneg.items():
            if value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        for name, value in {
            "cd4_measurement_prob": self.cd4_measurement_prob,
            "baseline_cd4_measurement_prob": self.baseline_cd4_measurement_prob,
            "aux_measurement_prob": self.aux_measurement_prob,
            "init_prob_max": self.init_prob_max,
        }.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        # positivity: the initiation hazard is bounded below by a positive
        # number for every reachable history (exp factor is strictly positive)
        if self.init_rate_per_year <= 0:
            raise ConfigError("init_rate_per_year must be > 0 (positivity)")
        if self.init_prob_day0 < 0:
            raise ConfigError("init_prob_day0 must be >= 0")
        if self.init_hazard_max_per_day <= 0:
            raise ConfigError("init_hazard_max_per_day must be > 0")
        if self.recovery_shape not in ("exponential", "linear"):
            raise ConfigError(f"unknown recovery_shape {self.recovery_shape!r}")
        if abs(sum(self.cdc_probs) - 1.0) > 1e-9 or len(self.cdc_probs) != 5:
            raise ConfigError("cdc_probs must be 5 probabilities summing to 1")


@dataclass(frozen=True)
class GroundTruth:
    """Potential-outcome targets for one regime, with Monte-Carlo SEs."""

    regime: RegimeSpec
    theta1: float
    theta1_se: float
    theta2: float
    theta2_se: float
    theta3: float
    theta3_se: float
    n_mc: int


@dataclass
class _Health:
    """Visit-independent health draws for one subject."""

    age: float
    sex: str
    cdc: str
    site: str
    v0: float
    b0: float
    b1_per_year: float
    death_budget: float  # Exp(1) target for the death clock
    dropout_time: float
    outcome_noise: float  # measurement noise reserved for the t* outcome
    waz0: float
    haz0: float


def _draw_health(rng: np.random.Generator, config: SimConfig) -> _Health:
    age = rng.uniform(*config.age_range)
    sex = "female" if rng.random() < 0.5 else "male"
    cdc = ("mild", "moderate", "severe", "asymptomatic", "missing")[
        int(rng.choice(5, p=np.asarray(config.cdc_probs)))
    ]
    site = f"site{1 + int(rng.integers(config.n_sites))}"
    v0 = rng.normal(
        config.sqrt_cd4_mean + config.sqrt_cd4_age_slope * (age - 14.0), config.sqrt_cd4_sd
    )
    v0 = max(v0, 2.0)
    b0 = rng.normal(0.0, config.random_intercept_sd) if config.random_intercept_sd else 0.0
    b1 = rng.normal(0.0, config.random_slope_sd_per_year) if config.random_slope_sd_per_year else 0.0
    death_budget = rng.exponential(1.0)
    dropout = (
        rng.exponential(_DAYS / config.dropout_rate_per_year)
        if config.dropout_rate_per_year > 0 else math.inf
    )
    noise = rng.normal(0.0, config.measurement_sd) if config.measurement_sd else 0.0
    return _Health(age, sex, cdc, site, v0, b0, b1, death_budget, dropout, noise,
                   waz0=rng.normal(-2.5, 1.5), haz0=rng.normal(-2.0, 1.5))


def _latent_sqrt(health: _Health, config: SimConfig, t: float, a: float | None) -> float:
    m = health.v0 + health.b0 - config.decline_per_year * t / _DAYS
    if a is not None and t >= a:
        d_yr = (t - a) / _DAYS
        if config.recovery_shape == "exponential":
            m += config.recovery_gain * (1.0 - math.exp(-config.recovery_rate_per_year * d_yr))
        else:
            m += config.recovery_slope_per_year * d_yr
        m += health.b1_per_year * d_yr
    return m


def _death_hazard(health: _Health, config: SimConfig, t: float, a: float | None) -> float:
    m = _latent_sqrt(health, config, t, a)
    log_h = math.log(config.death_rate_per_year / _DAYS) if config.death_rate_per_year > 0 else -math.inf
    if log_h == -math.inf:
        return 0.0
    log_h += config.death_conf_per_sqrt * (config.death_m_ref - m)
    log_h += config.death_time_trend_per_year * t / _DAYS
    if a is not None and t >= a:
        log_h += config.death_treatment_loghr
    return math.exp(log_h)


def _death_cumhaz_increment(health: _Health, config: SimConfig, lo: float, hi: float,
                            a: float | None) -> float:
    """Integral of the discretized hazard over (lo, hi].

    Knots live on the fixed grid {0, k, 2k, ...} plus the initiation time, so
    the death law given the initiation time never depends on visit times.
    """
    if hi <= lo:
        return 0.0
    k = config.hazard_knot_days
    edges = {lo, hi}
    first = math.floor(lo / k) * k
    edges.update(np.arange(first, hi + k, k).tolist())
    if a is not None and lo < a < hi:
        edges.add(a)
    pts = sorted(e for e in edges if lo <= e <= hi)
    total = 0.0
    for left, right in zip(pts, pts[1:]):
        total += _death_hazard(health, config, left, a) * (right - left)
    return total


def _death_time_in(health: _Health, config: SimConfig, lo: float, hi: float,
                   a: float | None, used: float) -> tuple[float | None, float]:
    """Invert the death clock over (lo, hi] given cumulative hazard already
    spent; returns (death time or None, updated cumulative hazard)."""
    target = health.death_budget
    k = config.hazard_knot_days
    edges = {lo, hi}
    first = math.floor(lo / k) * k
    edges.update(np.arange(first, hi + k, k).tolist())
    if a is not None and lo < a < hi:
        edges.add(a)
    pts = sorted(e for e in edges if lo <= e <= hi)
    cum = used
    for left, right in zip(pts, pts[1:]):
        h = _death_hazard(health, config, left, a)
        seg = h * (right - left)
        if cum + seg >= target and h > 0:
            return left + (target - cum) / h, target
        cum += seg
    return None, cum


def _visit_days(rng: np.random.Generator, config: SimConfig) -> list[int]:
    days = {0}
    t = 0.0
    rate_per_day = config.visit_rate_per_year / _DAYS
    while True:
        t += rng.exponential(1.0 / rate_per_day)
        if t > config.horizon_days:
            break
        days.add(int(math.floor(t)))
    return sorted(days)


def _measured_cd4(health: _Health, config: SimConfig, rng: np.random.Generator,
                  t: float, a: float | None) -> float:
    noise = rng.normal(0.0, config.measurement_sd) if config.measurement_sd else 0.0
    s = max(_latent_sqrt(health, config, t, a) + noise, 1.0)
    return s * s


def _confounding_factor(slope: float, ref: float, stale_sqrt: float | None) -> float:
    if stale_sqrt is None or slope == 0.0:
        return 1.0
    return math.exp(slope * (ref - stale_sqrt))


def _day0_initiation_prob(config: SimConfig, fresh_sqrt: float | None) -> float:
    slope = config.confounding if config.day0_confounding is None else config.day0_confounding
    factor = _confounding_factor(slope, config.sqrt_cd4_ref, fresh_sqrt)
    return min(config.init_prob_day0 * factor, config.init_prob_max)


def _initiation_hazard_per_day(config: SimConfig, stale_sqrt: float | None) -> float:
    factor = _confounding_factor(config.confounding, config.sqrt_cd4_ref, stale_sqrt)
    return min((config.init_rate_per_year / _DAYS) * factor, config.init_hazard_max_per_day)


def _rule_forces_initiation(regime: RegimeSpec, day: int, fresh_cd4: float | None,
                            min_prior_cd4: float) -> bool:
    if regime.kind is RegimeKind.IMMEDIATE:
        return day == 0
    if regime.kind is RegimeKind.NEVER:
        return False
    if day == 0:
        return fresh_cd4 is None or fresh_cd4 < regime.q
    if fresh_cd4 is None:
        return False
    return min_prior_cd4 >= regime.q and fresh_cd4 < regime.q


class _SubjectWalk:
    """Joint death/initiation simulation for one subject.

    Initiation and death clocks are Exp(1) budgets spent against piecewise-
    constant hazards.  The initiation hazard is constant between visits (it
    depends only on the carried-forward CD4) and rings on a whole day:
    P(initiate on day d | untreated, history) = 1 - exp(-hazard(stale CD4)),
    exactly a proportional-hazards law in the carried-forward observation.
    """

    def __init__(self, health: _Health, config: SimConfig, visit_rng: np.random.Generator,
                 forced: RegimeSpec | None):
        self.health = health
        self.config = config
        self.rng = visit_rng
        self.forced = forced
        self.a: float | None = None
        self.death: float | None = None
        self.death_used = 0.0
        self.init_budget = visit_rng.exponential(1.0)
        self.init_used = 0.0
        self.stale_sqrt: float | None = None

    def advance(self, cur: float, target: float) -> None:
        """Run both clocks over (cur, target]; sets death/initiation times."""
        while cur < target and self.death is None:
            ring: float | None = None
            h = 0.0
            if self.a is None and self.forced is None:
                h = _initiation_hazard_per_day(self.config, self.stale_sqrt)
                if h > 0:
                    k = math.ceil((self.init_budget - self.init_used) / h - 1e-12)
                    ring = cur + max(k, 1)
            seg_end = target if ring is None or ring > target else float(ring)
            self.death, self.death_used = _death_time_in(
                self.health, self.config, cur, seg_end, self.a, self.death_used
            )
            if self.death is not None:
                return
            if ring is not None and seg_end == float(ring) and seg_end <= target:
                self.a = float(ring)
                self.init_used = self.init_budget
            else:
                self.init_used += h * (seg_end - cur)
            cur = seg_end


def _walk_subject(health: _Health, config: SimConfig, visit_rng: np.random.Generator,
                  forced: RegimeSpec | None, horizon: float):
    """Simulate one subject through ``horizon``.

    Returns (visit rows, initiation day, death time, dropout time) where the
    rows are (day, cd4 or None, waz, haz).  ``forced`` switches initiation
    from the observational hazard to the regime rule applied to measured
    values; dropout is disabled in the forced world.
    """
    days = _visit_days(visit_rng, config)
    dropout = math.inf if forced is not None else health.dropout_time
    walk = _SubjectWalk(health, config, visit_rng, forced)
    min_measured_cd4 = math.inf
    rows = []
    prev_day = 0.0
    for day in days:
        if day > horizon or day >= dropout:
            break
        walk.advance(prev_day, float(day))
        if walk.death is not None:
            break
        prev_day = float(day)
        measure = visit_rng.random() < (
            config.baseline_cd4_measurement_prob if day == 0 else config.cd4_measurement_prob
        )
        cd4 = _measured_cd4(health, config, visit_rng, float(day), walk.a) if measure else None
        if walk.a is None:
            if forced is None:
                if day == 0:
                    fresh = math.sqrt(cd4) if cd4 is not None else None
                    if visit_rng.random() < _day0_initiation_prob(config, fresh):
                        walk.a = 0.0
                        walk.init_used = walk.init_budget
            elif _rule_forces_initiation(forced, day, cd4, min_measured_cd4):
                walk.a = float(day)
        if cd4 is not None:
            walk.stale_sqrt = math.sqrt(cd4)
            min_measured_cd4 = min(min_measured_cd4, cd4)
        waz = health.waz0 + visit_rng.normal(0, 0.3) if visit_rng.random() < config.aux_measurement_prob else None
        haz = health.haz0 + visit_rng.normal(0, 0.3) if visit_rng.random() < config.aux_measurement_prob else None
        rows.append((float(day), cd4, waz, haz))
    if walk.death is None:
        walk.advance(prev_day, min(horizon, dropout))
    death = walk.death
    if death is not None and death >= dropout:
        death = None
    a = walk.a
    if a is not None and (a > horizon or a >= dropout or (death is not None and a > death)):
        a = None
    return rows, a, death, (dropout if dropout <= horizon else None)


def simulate_cohort(config: SimConfig) -> CohortDataset:
    """Generate an observational cohort conforming to the data-model schema."""
    config.validate()
    root = np.random.SeedSequence(config.seed)
    subjects = []
    for i, child in enumerate(root.spawn(config.n_subjects)):
        health_seq, visit_seq = child.spawn(2)
        health = _draw_health(np.random.default_rng(health_seq), config)
        rows, a, death, dropout = _walk_subject(
            health, config, np.random.default_rng(visit_seq), forced=None,
            horizon=config.horizon_days,
        )
        visits = [Visit(day, cd4, waz, haz, a is not None and day >= a)
                  for day, cd4, waz, haz in rows]
        if a is not None and all(v.time != a for v in visits):
            # treatment started between clinic visits: bare status-change row
            visits.append(Visit(a, None, None, None, True))
            visits.sort(key=lambda v: v.time)
        subjects.append(SubjectHistory(
            subject_id=f"s{i:06d}",
            baseline=BaselineCovariates(health.age, health.sex, health.cdc, health.site),
            visits=tuple(visits),
            initiation_time=a,
            death_time=death,
            censor_time=dropout if (death is None and dropout is not None) else None,
        ))
    return CohortDataset(subjects=tuple(subjects))


def simulate_truth(config: SimConfig, regime: RegimeSpec, n_mc: int, t_star: float,
                   seed_offset: int = 1) -> GroundTruth:
    """Monte-Carlo potential-outcome targets under a forced regime.

    The same per-subject streams are reused for every regime (common random
    numbers), and the health stream is untouched by the visit process, so
    never/immediate truths are exactly invariant to the visit configuration.
    """
    config.validate()
    if n_mc < 100:
        raise ConfigError("n_mc too small for a ground-truth run")
    root = np.random.SeedSequence((config.seed, seed_offset))
    x = np.empty(n_mc)
    dead = np.empty(n_mc, dtype=bool)
    for i, child in enumerate(root.spawn(n_mc)):
        health_seq, visit_seq = child.spawn(2)
        health = _draw_health(np.random.default_rng(health_seq), config)
        _, a, death, _ = _walk_subject(
            health, config, np.random.default_rng(visit_seq), forced=regime, horizon=t_star,
        )
        if death is not None and death <= t_star:
            dead[i] = True
            x[i] = 0.0
        else:
            dead[i] = False
            s = max(_latent_sqrt(health, config, t_star, a) + health.outcome_noise, 1.0)
            x[i] = s * s
    theta1 = float(dead.mean())
    se1 = math.sqrt(max(theta1 * (1 - theta1), 1e-12) / n_mc)
    theta2, se2 = _quantile_with_se(x, 0.5)
    alive = x[~dead]
    theta3 = float(alive.mean())
    se3 = float(alive.std(ddof=1) / math.sqrt(len(alive)))
    return GroundTruth(regime, theta1, se1, theta2, se2, theta3, se3, n_mc)


def _quantile_with_se(values: np.ndarray, tau: float) -> tuple[float, float]:
    """Sample quantile with an order-statistic (distribution-free) SE."""
    v = np.sort(values)
    n = len(v)
    est = float(v[min(int(math.ceil(tau * n)) - 1, n - 1)])
    z = 1.959963984540054
    half = z * math.sqrt(n * tau * (1 - tau))
    lo = max(int(math.floor(tau * n - half)) - 1, 0)
    hi = min(int(math.ceil(tau * n + half)) - 1, n - 1)
    se = (v[hi] - v[lo]) / (2 * z) if hi > lo else float(v.std(ddof=1) / math.sqrt(n))
    return est, se
