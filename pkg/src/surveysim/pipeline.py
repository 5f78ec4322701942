"""End-to-end experiment harness: one config drives the whole pipeline.

Stages run in order (generate, sample, claims, missingness, impute,
estimate); every intermediate dataset can be persisted, estimation
failures are recorded per cell rather than aborting the grid, and a
seeded replication driver supports Monte Carlo studies of estimator bias
and coverage against the known finite-population truth.
"""

from __future__ import annotations

import concurrent.futures
import functools
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import claims as claims_mod
from .errors import ConfigError, SurveySimError
from .estimators import (
    EstimateReport,
    correlation_summary,
    efficiency_diagnostic,
    mi_mean,
    naive_mean,
    weighted_mean,
)
from .frame import Frame, GeneratorConfig, generate_frame, population_mean, write_frame
from .imputation import (
    ImputationModelSpec,
    scenario,
    two_step_impute,
    write_imputation_set,
)
from .missingness import (
    ResponseModel,
    StudyDataset,
    apply_missingness,
    calibrate_response_model,
    write_study_dataset,
)
from .sampling import DesignSpec, SampleDraw, StageSpec, draw_sample, write_sample_draw
from .util import stable_seed

METHODS = ("naive", "weighted", "mi")
SCENARIOS = ("MI1", "MI2")


@dataclass(frozen=True)
class ClaimsConfig:
    per_practice_mean: float = 8.0
    aux_outcome_corr: float = 0.5
    linkage_rate: float = 1.0
    link_npcp_slope: float = 0.0


@dataclass(frozen=True)
class ImputationConfig:
    n_burn: int = 150
    n_between: int = 20
    D: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig
    design: DesignSpec
    response: ResponseModel
    claims: ClaimsConfig = field(default_factory=ClaimsConfig)
    imputation: ImputationConfig = field(default_factory=ImputationConfig)
    scenarios: tuple = ("MI1", "MI2")
    methods: tuple = ("naive", "weighted", "mi")
    replicates: int = 1
    base_seed: int = 20170601
    output_dir: str | None = None
    workers: int = 1

    def validate(self) -> None:
        self.generator.validate()
        self.design.validate()
        if self.replicates < 1:
            raise ConfigError(f"replicates must be >= 1, got {self.replicates}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ConfigError(f"unknown scenario {s!r}")
        if "mi" in self.methods and not self.scenarios:
            raise ConfigError("mi estimation requires a non-empty scenario list")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator"]["binary_outcomes"] = {
            str(k): v for k, v in self.generator.binary_outcomes.items()
        }
        d["design"] = {
            "design": self.design.design,
            "stages": [asdict(s) for s in self.design.stages],
            "strata_by": self.design.strata_by,
        }
        d["response"] = {
            "level_targets": dict(self.response.level_targets),
            "coefficients": dict(self.response.coefficients),
        }
        d["scenarios"] = list(self.scenarios)
        d["methods"] = list(self.methods)
        return d

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a validated config from a nested plain dict (JSON shape)."""
    try:
        gen_raw = dict(raw["generator"])
        gen_raw["binary_outcomes"] = {
            int(k): float(v) for k, v in gen_raw.get("binary_outcomes", {}).items()
        }
        generator = GeneratorConfig(**gen_raw)
        design_raw = raw["design"]
        design = DesignSpec(
            design=design_raw["design"],
            stages=tuple(StageSpec(**s) for s in design_raw["stages"]),
            strata_by=design_raw.get("strata_by"),
        )
        response_raw = raw.get("response", {})
        response = ResponseModel(
            level_targets=dict(response_raw.get("level_targets", {})),
            coefficients=dict(response_raw.get("coefficients", {})),
        )
        config = ExperimentConfig(
            generator=generator,
            design=design,
            response=response,
            claims=ClaimsConfig(**raw.get("claims", {})),
            imputation=ImputationConfig(**raw.get("imputation", {})),
            scenarios=tuple(raw.get("scenarios", ("MI1", "MI2"))),
            methods=tuple(raw.get("methods", ("naive", "weighted", "mi"))),
            replicates=int(raw.get("replicates", 1)),
            base_seed=int(raw.get("base_seed", 20170601)),
            output_dir=raw.get("output_dir"),
            workers=int(raw.get("workers", 1)),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed experiment config: {exc}") from exc
    config.validate()
    return config


def default_config() -> ExperimentConfig:
    """Survey-shaped defaults: 570 systems, practice response target 46.9%.

    Sizes below the top level are kept modest so a full run stays quick;
    they are plumbing knobs, not ground truth.
    """
    return ExperimentConfig(
        generator=GeneratorConfig(
            n_parents=570,
            mean_subsidiaries_per_parent=1.2,
            mean_practices_per_subsidiary=3.5,
            n_independent_practices=800,
            outcome_count=2,
            cluster_icc=0.25,
            covariate_outcome_corr=0.15,
        ),
        design=DesignSpec(
            design="three_level",
            stages=(
                StageSpec(method="pps", sample_size=60, size_measure="n_practices"),
                StageSpec(method="srswor", sample_size=1),
                StageSpec(method="srswor", sample_size=2),
            ),
            strata_by="nach",
        ),
        response=ResponseModel(
            level_targets={"parent": 0.598, "subsidiary": 0.482, "practice": 0.469},
            coefficients={"npcp": 0.02},
        ),
        claims=ClaimsConfig(per_practice_mean=8.0, aux_outcome_corr=0.5),
        imputation=ImputationConfig(n_burn=150, n_between=20, D=10),
    )


@dataclass
class PipelineResult:
    table: pd.DataFrame
    reports: list
    errors: dict
    efficiency: dict
    correlations: dict
    frame: Frame
    draw: SampleDraw
    study: StudyDataset
    imputations: dict
    metadata: dict

    @property
    def exit_code(self) -> int:
        requested = self.metadata["n_cells"]
        failed = len(self.errors)
        if failed == 0:
            return 0
        return 3 if failed >= requested else 2


def _estimate_cells(config, frame, draw, study, imputations):
    reports: list[EstimateReport] = []
    errors: dict[str, str] = {}
    n_cells = 0
    for outcome in frame.outcome_columns:
        for method in config.methods:
            if method == "mi":
                for sc in config.scenarios:
                    n_cells += 1
                    key = f"mi:{sc}:{outcome}"
                    try:
                        reports.append(
                            mi_mean(imputations[sc], outcome, scenario=sc)
                        )
                    except (SurveySimError, KeyError) as exc:
                        errors[key] = str(exc)
            else:
                n_cells += 1
                key = f"{method}:{outcome}"
                try:
                    fn = naive_mean if method == "naive" else weighted_mean
                    args = (study, outcome) if method == "naive" else (study, draw, outcome)
                    reports.append(fn(*args))
                except SurveySimError as exc:
                    errors[key] = str(exc)
    return reports, errors, n_cells


def _comparison_table(config, outcomes, reports, errors) -> pd.DataFrame:
    columns = []
    for method in config.methods:
        if method == "mi":
            for sc in config.scenarios:
                columns.append(("mi", sc))
        else:
            columns.append((method, None))
    table = pd.DataFrame({"outcome": outcomes})
    lookup = {(r.method, r.scenario, r.outcome): r for r in reports}
    for method, sc in columns:
        label = f"{method}_{sc}" if sc else method
        means, ses = [], []
        for outcome in outcomes:
            rep = lookup.get((method, sc, outcome))
            means.append(rep.mean if rep else np.nan)
            ses.append(rep.se if rep else np.nan)
        table[f"{label}_mean"] = means
        table[f"{label}_se"] = ses
    return table


def run_pipeline(config: ExperimentConfig, out_dir=None) -> PipelineResult:
    """Execute every stage; persist artifacts when an output dir is given.

    Estimation failures are recorded per (method, scenario, outcome) cell
    and reflected in the exit code (0 clean, 2 partial, 3 total); stage
    failures before estimation raise.
    """
    config.validate()
    t0 = time.perf_counter()
    base = config.base_seed

    frame = generate_frame(config.generator, stable_seed(base, "frame"))
    draw = draw_sample(frame, config.design, stable_seed(base, "sample"))
    beneficiaries = claims_mod.generate_beneficiaries(
        frame,
        config.claims.per_practice_mean,
        config.claims.aux_outcome_corr,
        stable_seed(base, "claims"),
        linkage_rate=config.claims.linkage_rate,
        link_npcp_slope=config.claims.link_npcp_slope,
    )
    attribution = claims_mod.attribute(beneficiaries, frame)
    aggregates = claims_mod.aggregate(beneficiaries, attribution, frame)
    model = calibrate_response_model(frame, draw, config.response)
    study = apply_missingness(
        frame, draw, aggregates, model, stable_seed(base, "missingness")
    )

    imputations = {}
    imputation_errors = {}
    if "mi" in config.methods:
        spec = ImputationModelSpec(
            outcome_columns=tuple(frame.outcome_columns),
            n_burn=config.imputation.n_burn,
            n_between=config.imputation.n_between,
            D=config.imputation.D,
        )
        for sc in config.scenarios:
            frame_covs, extra_covs = scenario(sc)
            try:
                imputations[sc] = two_step_impute(
                    study, frame_covs, extra_covs, spec, stable_seed(base, "impute", sc)
                )
            except SurveySimError as exc:
                imputation_errors[sc] = str(exc)

    reports, errors, n_cells = _estimate_cells(config, frame, draw, study, imputations)
    for sc, msg in imputation_errors.items():
        for outcome in frame.outcome_columns:
            errors.setdefault(f"mi:{sc}:{outcome}", msg)

    efficiency = {}
    correlations = {}
    for sc, imp in imputations.items():
        frame_covs, extra_covs = scenario(sc)
        for outcome in frame.outcome_columns:
            try:
                efficiency[(sc, outcome)] = efficiency_diagnostic(imp, study, outcome)
                correlations[(sc, outcome)] = correlation_summary(
                    imp, study, list(frame_covs) + list(extra_covs), outcome
                )
            except SurveySimError as exc:
                errors.setdefault(f"diagnostic:{sc}:{outcome}", str(exc))

    table = _comparison_table(config, frame.outcome_columns, reports, errors)
    metadata = {
        "config_digest": config.digest(),
        "base_seed": base,
        "stage_seeds": {
            "frame": stable_seed(base, "frame"),
            "sample": stable_seed(base, "sample"),
            "claims": stable_seed(base, "claims"),
            "missingness": stable_seed(base, "missingness"),
            **{
                f"impute_{sc}": stable_seed(base, "impute", sc)
                for sc in config.scenarios
            },
        },
        "n_cells": n_cells,
        "runtime_seconds": time.perf_counter() - t0,
    }
    result = PipelineResult(
        table=table,
        reports=reports,
        errors=errors,
        efficiency=efficiency,
        correlations=correlations,
        frame=frame,
        draw=draw,
        study=study,
        imputations=imputations,
        metadata=metadata,
    )
    if out_dir is not None:
        persist_result(config, result, beneficiaries, aggregates, out_dir)
    return result


def persist_result(config, result, beneficiaries, aggregates, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_frame(result.frame, out / "frame")
    write_sample_draw(result.draw, out / "sample.csv")
    claims_mod.write_beneficiaries(beneficiaries, out / "beneficiaries.csv")
    claims_mod.write_claims_aggregates(aggregates, out / "claims_aggregates.csv")
    write_study_dataset(result.study, out / "study.csv", out / "study_mask.csv")
    for sc, imp in result.imputations.items():
        write_imputation_set(imp, out / "imputations" / sc)
    result.table.to_csv(out / "comparison_table.csv", index=False)
    for (sc, outcome), diag in result.efficiency.items():
        d = len(diag.per_imputation_ratio)
        df = pd.DataFrame(
            {f"Y_{i + 1}": [diag.per_imputation_ratio[i]] for i in range(d)},
            index=["ratio"],
        )
        means = [result.imputations[sc].datasets[i][outcome].mean() for i in range(d)]
        ses = [
            result.imputations[sc].datasets[i][outcome].std(ddof=1)
            / np.sqrt(len(result.imputations[sc].datasets[i]))
            for i in range(d)
        ]
        full = pd.DataFrame(
            [means, ses, diag.per_imputation_ratio],
            index=["mean", "se", "ratio"],
            columns=[f"Y_{i + 1}" for i in range(d)],
        )
        full.insert(0, "row", full.index)
        full.to_csv(out / f"efficiency_{sc}_{outcome}.csv", index=False)
        del df
    for (sc, outcome), corr in result.correlations.items():
        corr.to_csv(out / f"correlations_{sc}_{outcome}.csv", index=False)
    errors_block = dict(sorted(result.errors.items()))
    manifest = {
        "config": config.to_dict(),
        "metadata": result.metadata,
        "errors": errors_block,
        "exit_code": result.exit_code,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Monte Carlo replication


@functools.lru_cache(maxsize=4)
def _cached_population(config_json: str):
    """Frame and claims aggregates are population objects: fixed across
    replicates, regenerated deterministically inside worker processes."""
    config = config_from_dict(json.loads(config_json))
    base = config.base_seed
    frame = generate_frame(config.generator, stable_seed(base, "frame"))
    beneficiaries = claims_mod.generate_beneficiaries(
        frame,
        config.claims.per_practice_mean,
        config.claims.aux_outcome_corr,
        stable_seed(base, "claims"),
        linkage_rate=config.claims.linkage_rate,
        link_npcp_slope=config.claims.link_npcp_slope,
    )
    attribution = claims_mod.attribute(beneficiaries, frame)
    aggregates = claims_mod.aggregate(beneficiaries, attribution, frame)
    return config, frame, aggregates


def _replicate_records(config_json: str, replicate: int) -> list:
    config, frame, aggregates = _cached_population(config_json)
    seed_r = stable_seed(config.base_seed, "replicate", replicate)
    records = []
    try:
        draw = draw_sample(frame, config.design, stable_seed(seed_r, "sample"))
        model = calibrate_response_model(frame, draw, config.response)
        study = apply_missingness(
            frame, draw, aggregates, model, stable_seed(seed_r, "missingness")
        )
        imputations = {}
        if "mi" in config.methods:
            spec = ImputationModelSpec(
                outcome_columns=tuple(frame.outcome_columns),
                n_burn=config.imputation.n_burn,
                n_between=config.imputation.n_between,
                D=config.imputation.D,
            )
            for sc in config.scenarios:
                frame_covs, extra_covs = scenario(sc)
                imputations[sc] = two_step_impute(
                    study, frame_covs, extra_covs, spec, stable_seed(seed_r, "impute", sc)
                )
        reports, errors, _ = _estimate_cells(config, frame, draw, study, imputations)
    except SurveySimError as exc:
        return [
            {
                "replicate": replicate,
                "method": "*",
                "scenario": "",
                "outcome": "*",
                "mean": np.nan,
                "se": np.nan,
                "error": str(exc),
            }
        ]
    for rep in reports:
        records.append(
            {
                "replicate": replicate,
                "method": rep.method,
                "scenario": rep.scenario or "",
                "outcome": rep.outcome,
                "mean": rep.mean,
                "se": rep.se,
                "error": "",
            }
        )
    for key, msg in errors.items():
        parts = key.split(":")
        records.append(
            {
                "replicate": replicate,
                "method": parts[0],
                "scenario": parts[1] if len(parts) == 3 else "",
                "outcome": parts[-1],
                "mean": np.nan,
                "se": np.nan,
                "error": msg,
            }
        )
    return records


def replicate_study(config: ExperimentConfig, min_replicates: int = 30):
    """Monte Carlo study over seeded replicates of sampling + response + MI.

    The frame and claims aggregates stay fixed (they are the population);
    each replicate redraws the sample, non-response, and imputation with
    seed hash(base_seed, replicate). Returns (summary, estimates): the
    summary has one row per (method, scenario, outcome) with bias,
    empirical SE, mean estimated SE, and the |est - truth| <= 2 se
    coverage proxy. Failures are recorded and do not halt other
    replicates.
    """
    config.validate()
    if config.replicates < min_replicates:
        raise ConfigError(
            f"replicate_study needs >= {min_replicates} replicates for summaries, "
            f"got {config.replicates}"
        )
    config_json = json.dumps(config.to_dict(), sort_keys=True)
    _, frame, _ = _cached_population(config_json)

    if config.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=config.workers) as pool:
            chunks = list(
                pool.map(
                    functools.partial(_replicate_records, config_json),
                    range(config.replicates),
                )
            )
    else:
        chunks = [_replicate_records(config_json, r) for r in range(config.replicates)]
    estimates = pd.DataFrame([rec for chunk in chunks for rec in chunk])

    truths = {
        outcome: population_mean(frame, k)
        for k, outcome in enumerate(frame.outcome_columns)
    }
    rows = []
    ok = estimates[estimates["error"] == ""]
    for (method, sc, outcome), grp in ok.groupby(["method", "scenario", "outcome"]):
        truth = truths[outcome]
        est = grp["mean"].to_numpy()
        se = grp["se"].to_numpy()
        n_failed = int(
            (
                (estimates["method"] == method)
                & (estimates["scenario"] == sc)
                & (estimates["outcome"] == outcome)
                & (estimates["error"] != "")
            ).sum()
        )
        rows.append(
            {
                "method": method,
                "scenario": sc,
                "outcome": outcome,
                "truth": truth,
                "bias": float(est.mean() - truth),
                "empirical_se": float(est.std(ddof=1)) if len(est) > 1 else np.nan,
                "mean_estimated_se": float(se.mean()),
                "coverage_proxy": float((np.abs(est - truth) <= 2.0 * se).mean()),
                "n_ok": len(est),
                "n_failed": n_failed,
            }
        )
    summary = pd.DataFrame(rows).sort_values(["method", "scenario", "outcome"])
    return summary.reset_index(drop=True), estimates
