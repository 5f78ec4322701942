"""Command-line entry points for the pipeline stages.

Subcommands: generate, sample, claims, missingness, impute, estimate,
run (full pipeline), replicate. Stage commands read the artifacts earlier
stages wrote into the output directory. Exit codes: 0 success, 1 config
error, 2 partial estimation failures, 3 total failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import pandas as pd

from . import claims as claims_mod
from .errors import ConfigError, SurveySimError
from .frame import generate_frame, read_frame, write_frame
from .imputation import (
    ImputationModelSpec,
    read_imputation_set,
    scenario,
    two_step_impute,
    write_imputation_set,
)
from .missingness import (
    apply_missingness,
    calibrate_response_model,
    read_study_dataset,
    write_study_dataset,
)
from .pipeline import (
    _comparison_table,
    _estimate_cells,
    config_from_dict,
    default_config,
    replicate_study,
    run_pipeline,
)
from .sampling import draw_sample, read_sample_draw, write_sample_draw
from .util import stable_seed


def _load_config(args):
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        config = config_from_dict(raw)
    else:
        config = default_config()
    overrides = {}
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    if config.output_dir is None:
        from dataclasses import replace

        config = replace(config, output_dir="surveysim_out")
    return config


def _out(config) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(config) -> int:
    frame = generate_frame(config.generator, stable_seed(config.base_seed, "frame"))
    write_frame(frame, _out(config) / "frame")
    print(f"wrote frame with {frame.n_practices} practices to {config.output_dir}/frame")
    return 0


def cmd_sample(config) -> int:
    out = _out(config)
    frame = read_frame(out / "frame")
    draw = draw_sample(frame, config.design, stable_seed(config.base_seed, "sample"))
    write_sample_draw(draw, out / "sample.csv")
    print(f"selected {len(draw.table)} practices -> {config.output_dir}/sample.csv")
    return 0


def cmd_claims(config) -> int:
    out = _out(config)
    frame = read_frame(out / "frame")
    beneficiaries = claims_mod.generate_beneficiaries(
        frame,
        config.claims.per_practice_mean,
        config.claims.aux_outcome_corr,
        stable_seed(config.base_seed, "claims"),
        linkage_rate=config.claims.linkage_rate,
        link_npcp_slope=config.claims.link_npcp_slope,
    )
    attribution = claims_mod.attribute(beneficiaries, frame)
    aggregates = claims_mod.aggregate(beneficiaries, attribution, frame)
    claims_mod.write_beneficiaries(beneficiaries, out / "beneficiaries.csv")
    claims_mod.write_claims_aggregates(aggregates, out / "claims_aggregates.csv")
    print(f"generated {len(beneficiaries)} beneficiaries -> {config.output_dir}")
    return 0


def cmd_missingness(config) -> int:
    out = _out(config)
    frame = read_frame(out / "frame")
    draw = read_sample_draw(out / "sample.csv", frame, config.design)
    aggregates = claims_mod.read_claims_aggregates(out / "claims_aggregates.csv")
    model = calibrate_response_model(frame, draw, config.response)
    study = apply_missingness(
        frame, draw, aggregates, model, stable_seed(config.base_seed, "missingness")
    )
    write_study_dataset(study, out / "study.csv", out / "study_mask.csv")
    (out / "response_rates.json").write_text(
        json.dumps(study.level_response, indent=2, sort_keys=True)
    )
    print(f"study dataset with {study.n_rows} rows -> {config.output_dir}/study.csv")
    return 0


def cmd_impute(config) -> int:
    out = _out(config)
    frame = read_frame(out / "frame")
    study = read_study_dataset(
        out / "study.csv", out / "study_mask.csv", frame.outcome_columns
    )
    spec = ImputationModelSpec(
        outcome_columns=tuple(frame.outcome_columns),
        n_burn=config.imputation.n_burn,
        n_between=config.imputation.n_between,
        D=config.imputation.D,
    )
    for sc in config.scenarios:
        frame_covs, extra_covs = scenario(sc)
        imputations = two_step_impute(
            study, frame_covs, extra_covs, spec, stable_seed(config.base_seed, "impute", sc)
        )
        write_imputation_set(imputations, out / "imputations" / sc)
        print(f"{sc}: {len(imputations.datasets)} completed datasets")
    return 0


def cmd_estimate(config) -> int:
    out = _out(config)
    frame = read_frame(out / "frame")
    draw = read_sample_draw(out / "sample.csv", frame, config.design)
    study = read_study_dataset(
        out / "study.csv", out / "study_mask.csv", frame.outcome_columns
    )
    imputations = {}
    for sc in config.scenarios:
        path = out / "imputations" / sc
        if path.exists():
            imputations[sc] = read_imputation_set(path)
    reports, errors, n_cells = _estimate_cells(config, frame, draw, study, imputations)
    table = _comparison_table(config, frame.outcome_columns, reports, errors)
    table.to_csv(out / "comparison_table.csv", index=False)
    print(table.to_string(index=False))
    if errors:
        for key, msg in sorted(errors.items()):
            print(f"FAILED {key}: {msg}", file=sys.stderr)
        return 3 if len(errors) >= n_cells else 2
    return 0


def cmd_run(config) -> int:
    result = run_pipeline(config, out_dir=config.output_dir)
    print(result.table.to_string(index=False))
    for key, msg in sorted(result.errors.items()):
        print(f"FAILED {key}: {msg}", file=sys.stderr)
    return result.exit_code


def cmd_replicate(config) -> int:
    summary, estimates = replicate_study(config)
    out = _out(config)
    summary.to_csv(out / "mc_summary.csv", index=False)
    estimates.to_csv(out / "replicate_estimates.csv", index=False)
    with pd.option_context("display.width", 160):
        print(summary.to_string(index=False))
    n_failed = int((estimates["error"] != "").sum())
    if n_failed == 0:
        return 0
    return 3 if n_failed >= len(estimates) else 2


_COMMANDS = {
    "generate": cmd_generate,
    "sample": cmd_sample,
    "claims": cmd_claims,
    "missingness": cmd_missingness,
    "impute": cmd_impute,
    "estimate": cmd_estimate,
    "run": cmd_run,
    "replicate": cmd_replicate,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="surveysim",
        description="Survey inference pipeline on synthetic organizational frames",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to a JSON experiment config")
        p.add_argument("--seed", type=int, help="override the base seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="parallel replicate workers")
    args = parser.parse_args(argv)

    try:
        config = _load_config(args)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SurveySimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
