"""End-to-end pipeline orchestration with reproducible configs.

Subcommands: simulate, weights, impute, estimate, msm, report, all (plus
init-config, which writes a runnable demo configuration).  Every artifact is
a CSV or JSON file in the configured output directory, reproducible from
(config, seed) alone; manifest.json records the config hash, seed, package
versions and artifact checksums so reproducibility is checkable by hash.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .data_model import CohortDataset, ingest_cohort, write_cohort
from .exceptions import ConfigError, DataError, DtrError
from .imputation import Cd4ModelSpec, DeathModelSpec, ImputedCohort, fit_cd4_model, fit_death_model, impute, rubin_combine
from .estimators import bootstrap_pipeline, msm_basis, msm_design_row, msm_fit
from .regimes import DEFAULT_CONTINUUM, RegimeSpec
from .simulator import SimConfig, simulate_cohort, simulate_truth
from .weights import InitiationModel, TermConfig, WeightModelSpec, fit_initiation_model, stabilized_weights, weight_table_rows

_SUBCOMMANDS = ("simulate", "weights", "impute", "estimate", "msm", "report", "all")


def default_demo_config() -> dict:
    """A 200-subject simulated demo that runs the whole pipeline quickly."""
    return {
        "seed": 20240801,
        "output_dir": "dtr_out",
        "t_star": [365.0],
        "window_half_width": 180.0,
        "regimes": {"never": True, "immediate": True, "thresholds": [200.0, 350.0, 500.0]},
        "truncation": [0.05, 0.95],
        "m_imputations": 3,
        "bootstrap_replicates": 60,
        "msm_bootstrap_replicates": 0,
        "msm_interior_knots": 1,
        "tau": 0.5,
        "workers": 1,
        "weight_model": {
            "cd4": {"n_interior_knots": 1, "transform": "sqrt"},
            "waz": None,
            "haz": None,
            "age": {"n_interior_knots": 0, "transform": "identity"},
            "include_sex": True,
            "include_cdc": False,
        },
        "cd4_model": {"time_basis": "linear", "recovery_basis": "linear",
                      "age_basis": "linear", "include_cdc": False},
        "death_model": {"m_basis": "linear", "include_age": False},
        "simulate": {
            "n_subjects": 200,
            "visit_rate_per_year": 5.0,
            "confounding": 0.15,
            "death_rate_per_year": 0.06,
            "death_conf_per_sqrt": 0.12,
            "init_prob_day0": 0.12,
            "init_prob_per_visit": 0.12,
            "dropout_rate_per_year": 0.05,
        },
    }


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """One configured pipeline run over an output directory."""

    def __init__(self, config: dict):
        if not isinstance(config, dict):
            raise ConfigError("config root must be a JSON object")
        self.config = config
        self.seed = self._get(int, "seed", 0)
        self.outdir = self._get(str, "output_dir", "dtr_out")
        self.t_stars = [float(t) for t in config.get("t_star", [365.0, 730.0])]
        self.window = float(self._get((int, float), "window_half_width", 180.0))
        self.truncation = tuple(config.get("truncation", (0.05, 0.95)))
        self.m_imputations = self._get(int, "m_imputations", 20)
        self.b_replicates = self._get(int, "bootstrap_replicates", 200)
        self.b_msm = self._get(int, "msm_bootstrap_replicates", 0)
        self.msm_knots = self._get(int, "msm_interior_knots", 4)
        self.tau = float(self._get((int, float), "tau", 0.5))
        self.workers = self._get(int, "workers", 1)
        if not (0 <= self.truncation[0] < self.truncation[1] <= 1):
            raise ConfigError(f"truncation: quantiles must satisfy 0 <= lo < hi <= 1, got {self.truncation}")
        self.regimes = self._parse_regimes(config.get("regimes", {}))
        os.makedirs(self.outdir, exist_ok=True)

    def _get(self, types, key, default):
        value = self.config.get(key, default)
        if not isinstance(value, types if isinstance(types, tuple) else (types,)) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected {types}, got {value!r}")
        return value

    @staticmethod
    def _parse_regimes(spec: dict) -> list[RegimeSpec]:
        out: list[RegimeSpec] = []
        if spec.get("never", True):
            out.append(RegimeSpec.never())
        thresholds = spec.get("thresholds")
        if thresholds is None:
            thresholds = np.arange(DEFAULT_CONTINUUM[0], DEFAULT_CONTINUUM[1] + 5.0, 10.0).tolist()
        elif isinstance(thresholds, dict):
            thresholds = np.arange(thresholds["lo"], thresholds["hi"] + 0.5 * thresholds["step"],
                                   thresholds["step"]).tolist()
        try:
            out.extend(RegimeSpec.threshold(float(q)) for q in thresholds)
        except DataError as exc:
            raise ConfigError(f"regimes.thresholds: {exc}")
        if spec.get("immediate", True):
            out.append(RegimeSpec.immediate())
        if not out:
            raise ConfigError("regimes: empty regime set")
        return out

    # --- artifact helpers ----------------------------------------------------

    def path(self, name: str) -> str:
        return os.path.join(self.outdir, name)

    def require(self, name: str, produced_by: str) -> str:
        p = self.path(name)
        if not os.path.exists(p):
            raise DataError(f"{name} artifact missing: run the '{produced_by}' subcommand first")
        return p

    def record(self, *names: str) -> None:
        manifest_path = self.path("manifest.json")
        manifest = {"config_hash": _config_hash(self.config), "seed": self.seed,
                    "versions": {"dtrcompare": __version__, "numpy": np.__version__,
                                 "python": ".".join(map(str, sys.version_info[:3]))},
                    "artifacts": {}}
        if os.path.exists(manifest_path):
            with open(manifest_path) as fh:
                old = json.load(fh)
            if old.get("config_hash") == manifest["config_hash"]:
                manifest["artifacts"] = old.get("artifacts", {})
        for name in names:
            manifest["artifacts"][name] = _file_hash(self.path(name))
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    # --- pipeline stages -------------------------------------------------------

    def cmd_simulate(self) -> None:
        sim_spec = self.config.get("simulate")
        if sim_spec is None:
            raise ConfigError("simulate: config has no 'simulate' section")
        cfg = _sim_config(sim_spec, self.seed, self.t_stars, self.window)
        cohort = simulate_cohort(cfg)
        write_cohort(cohort, self.path("cohort_baseline.csv"), self.path("cohort_visits.csv"))
        artifacts = ["cohort_baseline.csv", "cohort_visits.csv"]
        truth_spec = self.config.get("truth")
        if truth_spec:
            rows = {}
            for t_star in self.t_stars:
                entries = []
                for regime in self.regimes:
                    g = simulate_truth(cfg, regime, int(truth_spec.get("n_mc", 10000)), t_star)
                    entries.append({
                        "regime": regime.label(), "theta1": g.theta1, "theta1_se": g.theta1_se,
                        "theta2": g.theta2, "theta2_se": g.theta2_se,
                        "theta3": g.theta3, "theta3_se": g.theta3_se, "n_mc": g.n_mc,
                    })
                rows[str(t_star)] = entries
            with open(self.path("truth.json"), "w") as fh:
                json.dump(rows, fh, indent=2, sort_keys=True)
                fh.write("\n")
            artifacts.append("truth.json")
        self.record(*artifacts)

    def load_cohort(self) -> CohortDataset:
        inputs = self.config.get("input")
        if inputs:
            return ingest_cohort(inputs["baseline"], inputs["visits"])
        self.require("cohort_baseline.csv", "simulate")
        self.require("cohort_visits.csv", "simulate")
        return ingest_cohort(self.path("cohort_baseline.csv"), self.path("cohort_visits.csv"))

    def _weight_spec(self) -> WeightModelSpec:
        raw = self.config.get("weight_model")
        if raw is None:
            return WeightModelSpec()
        kwargs = {}
        for term in ("cd4", "waz", "haz", "age"):
            if term in raw:
                kwargs[term] = None if raw[term] is None else TermConfig(**raw[term])
        for flag in ("include_sex", "include_cdc"):
            if flag in raw:
                kwargs[flag] = raw[flag]
        return WeightModelSpec(**kwargs)

    def cmd_weights(self) -> None:
        cohort = self.load_cohort()
        artifacts = []
        for t_star in self.t_stars:
            model = fit_initiation_model(cohort, self._weight_spec(), t_star)
            tag = f"t{int(t_star)}"
            with open(self.path(f"initiation_model_{tag}.json"), "w") as fh:
                fh.write(model.to_json())
                fh.write("\n")
            weight_sets = [
                stabilized_weights(cohort, regime, model, t_star, self.truncation)
                for regime in self.regimes
            ]
            _write_csv(self.path(f"weights_{tag}.csv"), weight_table_rows(weight_sets))
            artifacts += [f"initiation_model_{tag}.json", f"weights_{tag}.csv"]
        self.record(*artifacts)

    def cmd_impute(self) -> None:
        cohort = self.load_cohort()
        cd4_spec = Cd4ModelSpec(**self.config.get("cd4_model", {}))
        death_spec = DeathModelSpec(**self.config.get("death_model", {}))
        artifacts = []
        for t_star in self.t_stars:
            tag = f"t{int(t_star)}"
            cd4_fit = fit_cd4_model(cohort, cd4_spec)
            death_fit = fit_death_model(cohort, cd4_fit, death_spec, t_star)
            imputed = impute(cohort, cd4_fit, death_fit, t_star,
                             (t_star - self.window, t_star + self.window),
                             self.m_imputations, self.seed + 7)
            _write_csv(self.path(f"imputations_{tag}.csv"), imputed.table_rows())
            with open(self.path(f"imputation_models_{tag}.json"), "w") as fh:
                json.dump({
                    "cd4_beta": dict(zip(cd4_fit.beta_names, cd4_fit.beta.tolist())),
                    "cd4_omega": cd4_fit.omega.tolist(),
                    "cd4_sigma": cd4_fit.sigma,
                    "cd4_loglik": cd4_fit.log_likelihood,
                    "death_model": json.loads(death_fit.fit.to_json()),
                }, fh, indent=2, sort_keys=True)
                fh.write("\n")
            artifacts += [f"imputations_{tag}.csv", f"imputation_models_{tag}.json"]
        self.record(*artifacts)

    def _load_imputed(self, cohort: CohortDataset, tag: str) -> ImputedCohort:
        from .data_model import OutcomeStatus

        path = self.require(f"imputations_{tag}.csv", "impute")
        ids = [s.subject_id for s in cohort.subjects]
        index = {sid: i for i, sid in enumerate(ids)}
        by_m: dict[int, np.ndarray] = {}
        dead_by_m: dict[int, np.ndarray] = {}
        statuses = [None] * len(ids)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                m = int(row[0])
                i = index[row[1]]
                statuses[i] = OutcomeStatus(row[2])
                by_m.setdefault(m, np.zeros(len(ids)))[i] = float(row[4])
                dead_by_m.setdefault(m, np.zeros(len(ids), dtype=bool))[i] = row[3] == "1"
        m_count = len(by_m)
        x = np.vstack([by_m[m] for m in range(m_count)])
        dead = np.vstack([dead_by_m[m] for m in range(m_count)])
        return ImputedCohort(tuple(ids), tuple(statuses), x, dead, m_count, self.seed + 7)

    def cmd_estimate(self) -> None:
        cohort = self.load_cohort()
        artifacts = []
        rows = [["regime", "t_star", "theta1", "theta2", "theta3",
                 "var1", "var2", "var3", "ci1_lo", "ci1_hi", "ci2_lo", "ci2_hi",
                 "ci3_lo", "ci3_hi", "n_compliant", "sum_weights"]]
        for t_star in self.t_stars:
            tag = f"t{int(t_star)}"
            with open(self.require(f"initiation_model_{tag}.json", "weights")) as fh:
                model = InitiationModel.from_json(fh.read())
            imputed = self._load_imputed(cohort, tag)
            result = bootstrap_pipeline(
                cohort, imputed, model, self.regimes, t_star, self.truncation,
                b_replicates=self.b_replicates, seed=self.seed + 11, tau=self.tau,
                workers=self.workers,
            )
            for est in result.estimates:
                rows.append([
                    est.regime.label(), t_star, est.theta1, est.theta2, est.theta3,
                    est.var1, est.var2, est.var3,
                    *(est.ci1 or (None, None)), *(est.ci2 or (None, None)),
                    *(est.ci3 or (None, None)), est.n_compliant, est.sum_weights,
                ])
        _write_csv(self.path("estimates.csv"), rows)
        artifacts.append("estimates.csv")
        self.record(*artifacts)

    def cmd_msm(self) -> None:
        cohort = self.load_cohort()
        basis = msm_basis(self.msm_knots)
        rows = [["t_star", "regime", "q", "estimate", "contrast_vs_immediate",
                 "contrast_ci_lo", "contrast_ci_hi"]]
        for t_star in self.t_stars:
            tag = f"t{int(t_star)}"
            with open(self.require(f"initiation_model_{tag}.json", "weights")) as fh:
                model = InitiationModel.from_json(fh.read())
            imputed = self._load_imputed(cohort, tag)
            weight_sets = [stabilized_weights(cohort, r, model, t_star, self.truncation)
                           for r in self.regimes]
            fits = [msm_fit(imputed.x[m], weight_sets, self.tau, basis=basis)
                    for m in range(imputed.m_imputations)]
            boot_diffs = None
            if self.b_msm >= 50:
                boot_diffs = _msm_bootstrap_variances(
                    self, cohort, imputed, model, weight_sets, basis, t_star)
            for regime in self.regimes:
                curves = [f.curve(regime) for f in fits]
                est = float(np.mean(curves))
                ref = [f.curve(RegimeSpec.immediate()) for f in fits]
                diff = float(np.mean(ref)) - est
                lo = hi = None
                if boot_diffs is not None:
                    variances = boot_diffs[regime.label()]
                    d, total, _ = rubin_combine(
                        [r - c for r, c in zip(ref, curves)], variances
                    ) if imputed.m_imputations >= 2 else (diff, variances[0], math.inf)
                    diff = d
                    half = 1.959963984540054 * math.sqrt(total)
                    lo, hi = diff - half, diff + half
                rows.append([t_star, regime.label(),
                             "" if not np.isfinite(regime.q) else regime.q,
                             est, diff, lo, hi])
        _write_csv(self.path("msm_curve.csv"), rows)
        self.record("msm_curve.csv")

    def cmd_report(self) -> None:
        report = {}
        est_path = self.require("estimates.csv", "estimate")
        with open(est_path, newline="") as fh:
            report["estimates"] = list(csv.DictReader(fh))
        msm_path = self.path("msm_curve.csv")
        if os.path.exists(msm_path):
            with open(msm_path, newline="") as fh:
                report["msm_curve"] = list(csv.DictReader(fh))
        if os.path.exists(self.path("truth.json")):
            with open(self.path("truth.json")) as fh:
                report["truth"] = json.load(fh)
        with open(self.path("report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.record("report.json")
        for row in report["estimates"]:
            print(f"regime={row['regime']:<10} t*={row['t_star']:>6} "
                  f"theta1={_fmt3(row['theta1'])} theta2={_fmt3(row['theta2'])} "
                  f"theta3={_fmt3(row['theta3'])} n={row['n_compliant']}")

    def run(self, subcommand: str) -> None:
        steps = {
            "simulate": [self.cmd_simulate],
            "weights": [self.cmd_weights],
            "impute": [self.cmd_impute],
            "estimate": [self.cmd_estimate],
            "msm": [self.cmd_msm],
            "report": [self.cmd_report],
            "all": [self.cmd_simulate, self.cmd_weights, self.cmd_impute,
                    self.cmd_estimate, self.cmd_msm, self.cmd_report],
        }
        if subcommand == "all" and "simulate" not in self.config:
            steps["all"] = steps["all"][1:]
        for step in steps[subcommand]:
            step()


def _fmt3(text: str) -> str:
    try:
        return f"{float(text):.3f}"
    except (TypeError, ValueError):
        return str(text)


def _sim_config(raw: dict, seed: int, t_stars, window: float) -> SimConfig:
    horizon = max(t_stars) + window + 5.0
    kwargs = dict(raw)
    kwargs.setdefault("seed", seed)
    kwargs.setdefault("horizon_days", horizon)
    try:
        cfg = SimConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"simulate: {exc}")
    cfg.validate()
    return cfg


def _write_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def _msm_bootstrap_variances(run: Run, cohort, imputed, model, weight_sets, basis, t_star):
    """Subject bootstrap of the immediate-vs-regime contrast, per imputation."""
    from .estimators import (
        _NelsonAalen,
        _build_work_table,
        _event_rows,
        _intercept_fit,
        _resample_arrays,
        _vector_denominators,
    )
    from .survival import cox_fit_arrays as _cfa
    from .weights import type1_quantile as _q1

    n = cohort.n
    diffs: dict[str, list[list[float]]] = {r.label(): [[] for _ in range(imputed.m_imputations)]
                                           for r in run.regimes}
    streams = np.random.SeedSequence(run.seed + 13).spawn(run.b_msm)
    table_regimes = run.regimes
    table = _build_work_table(cohort, model, table_regimes, t_star)
    for seq in streams:
        rng = np.random.default_rng(seq)
        idx = rng.integers(0, n, size=n)
        try:
            flat, offsets = _resample_arrays(table, idx)
            fit_mask = table.fit_rows[flat]
            if table.names:
                fit = _cfa(table.starts[flat][fit_mask], table.stops[flat][fit_mask],
                           _event_rows(table, flat, offsets, idx)[fit_mask],
                           table.rows[flat][fit_mask], table.names)
            else:
                fit = _intercept_fit(table, flat, offsets, idx, fit_mask)
            den = _vector_denominators(table, flat, offsets, idx, fit)
            rep_sets = []
            for regime in table_regimes:
                d = table.dev[regime.label()][idx]
                u = table.subj_u[idx]
                compliant = ~np.isfinite(d)
                na = _NelsonAalen(np.minimum(np.where(np.isfinite(d), d, u), u), np.isfinite(d))
                raw = np.where(compliant, na.survivor(u) / den, 0.0)
                pos = raw[compliant]
                w = np.where(compliant, np.clip(raw, _q1(pos, run.truncation[0]),
                                                _q1(pos, run.truncation[1])), 0.0)
                rep_sets.append((regime, compliant, w))
            for m in range(imputed.m_imputations):
                x = imputed.x[m][idx]
                sets = [_FakeWeightSet(regime, w) for regime, _, w in rep_sets]
                fit_m = msm_fit(x, sets, run.tau, basis=basis)
                ref = fit_m.curve(RegimeSpec.immediate())
                for regime in table_regimes:
                    diffs[regime.label()][m].append(ref - fit_m.curve(regime))
        except DtrError:
            continue
    return {label: [float(np.var(v, ddof=1)) if len(v) >= 2 else float("nan")
                    for v in per_m]
            for label, per_m in diffs.items()}


class _FakeWeightSet:
    def __init__(self, regime, weight):
        self.regime = regime
        self.weight = weight


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dtrcompare",
        description="Causal comparison of CD4-threshold treatment-initiation regimes.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to the JSON run configuration")
        p.add_argument("--workers", type=int, default=None,
                       help="parallel workers for bootstrap replicates (default: config value)")
    p_init = sub.add_parser("init-config")
    p_init.add_argument("config", help="path to write a demo configuration to")
    args = parser.parse_args(argv)

    if args.subcommand == "init-config":
        with open(args.config, "w") as fh:
            json.dump(default_demo_config(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote demo config to {args.config}")
        return 0

    try:
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        if args.workers is not None:
            config["workers"] = args.workers
        run = Run(config)
        run.run(args.subcommand)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DtrError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
