"""MAR survey non-response composed with non-selection.

Response is logistic in always-observed frame covariates, with per-level
intercepts calibrated by root-finding so the expected response rate among
selected units hits the target. Outcome cells are observed only for
selected responders; the six frame covariates are never missing; claims
aggregates are missing exactly for practices with no attributed
beneficiaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit

from .claims import CLAIMS_COLUMNS, REGION_CODES
from .errors import CalibrationError, ConfigError
from .frame import FRAME_COVARIATES, Frame, level_covariate
from .sampling import SampleDraw

RESPONSE_LEVELS = ("parent", "subsidiary", "practice")


@dataclass(frozen=True)
class ResponseModel:
    """Logistic response model: per-level targets plus covariate slopes.

    Slopes are log-odds per unit of the raw covariate and apply at every
    level where the covariate is defined (np/npcp exist only for
    practices; system covariates apply everywhere). Intercepts are
    calibrated, not user-set; a target of 1.0 calibrates to +inf and
    everyone responds.
    """

    level_targets: dict = field(default_factory=dict)
    coefficients: dict = field(default_factory=dict)
    intercepts: dict | None = None

    def validate(self, frame: Frame) -> None:
        for level, target in self.level_targets.items():
            if level not in RESPONSE_LEVELS:
                raise ConfigError(f"unknown response level {level!r}")
            if not 0.0 < target <= 1.0:
                raise ConfigError(f"response target for {level} must be in (0, 1], got {target}")
        for name in self.coefficients:
            if not any(_defined_at(frame, lvl, name) for lvl in RESPONSE_LEVELS):
                raise ConfigError(f"response covariate {name!r} exists at no level")


def _defined_at(frame: Frame, level: str, name: str) -> bool:
    try:
        level_covariate(frame, level, name)
        return True
    except ConfigError:
        return False


def _linear_predictor(frame: Frame, level: str, unit_ids: np.ndarray, coefficients) -> np.ndarray:
    eta = np.zeros(len(unit_ids))
    for name, slope in coefficients.items():
        if slope == 0 or not _defined_at(frame, level, name):
            continue
        eta += slope * level_covariate(frame, level, name).loc[unit_ids].to_numpy()
    return eta


def _selected_units(frame: Frame, draw: SampleDraw, level: str) -> np.ndarray:
    if level == "practice":
        return np.sort(draw.selected_practice_ids)
    if level == "subsidiary":
        return np.sort(draw.selected_subsidiaries)
    return np.sort(draw.selected_parents)


def calibrate_response_model(
    frame: Frame, draw: SampleDraw, model: ResponseModel
) -> ResponseModel:
    """Set per-level intercepts so expected response rates hit the targets.

    The expected rate mean(expit(alpha + eta)) is monotone in alpha, so a
    bracketing root-finder pins it within 1e-6. A target of exactly 1
    gets the +inf sentinel.
    """
    model.validate(frame)
    intercepts = {}
    for level, target in model.level_targets.items():
        units = _selected_units(frame, draw, level)
        if len(units) == 0:
            intercepts[level] = math.inf if target == 1.0 else 0.0
            continue
        if target == 1.0:
            intercepts[level] = math.inf
            continue
        eta = _linear_predictor(frame, level, units, model.coefficients)

        def gap(alpha: float) -> float:
            return float(expit(alpha + eta).mean() - target)

        lo, hi = -40.0 - abs(eta).max(), 40.0 + abs(eta).max()
        if gap(lo) > 0 or gap(hi) < 0:
            raise CalibrationError(
                f"target {target} unreachable at level {level} given slopes"
            )
        alpha = brentq(gap, lo, hi, xtol=1e-12)
        if abs(gap(alpha)) > 1e-6:
            raise CalibrationError(
                f"calibration residual {gap(alpha):.2e} exceeds 1e-6 at level {level}"
            )
        intercepts[level] = float(alpha)
    return replace(model, intercepts=intercepts)


@dataclass
class StudyDataset:
    """Full-frame rectangular dataset with a per-cell observation mask.

    One row per frame practice. ``values`` holds identifiers, selection
    and response flags, and all variable columns with NaN in unobserved
    cells; ``mask`` (True = observed) covers the variable columns.
    ``cluster_id`` pools independent practices into a single pseudo
    cluster (code -1) for the two-level imputation model, while
    subsidiary_id/parent_id keep the real hierarchy for level-specific
    estimands.
    """

    values: pd.DataFrame
    mask: pd.DataFrame
    outcome_columns: list
    frame_columns: list
    claims_columns: list
    level_response: dict

    @property
    def variable_columns(self) -> list:
        return self.outcome_columns + self.frame_columns + self.claims_columns

    @property
    def n_rows(self) -> int:
        return len(self.values)

    def observed(self, column: str) -> pd.Series:
        return self.values.loc[self.mask[column].to_numpy(), column]


def apply_missingness(
    frame: Frame,
    draw: SampleDraw,
    claims_aggregates: pd.DataFrame,
    model: ResponseModel,
    seed: int,
) -> StudyDataset:
    """Draw responses and compose the observation mask; pure in (inputs, seed)."""
    if model.intercepts is None:
        raise CalibrationError("response model must be calibrated before use")
    rng = np.random.default_rng(seed)

    level_response = {}
    responded_per_level = {}
    for level in RESPONSE_LEVELS:
        if level not in model.level_targets:
            continue
        units = _selected_units(frame, draw, level)
        alpha = model.intercepts[level]
        if math.isinf(alpha):
            resp = np.ones(len(units), dtype=bool)
        else:
            eta = _linear_predictor(frame, level, units, model.coefficients)
            resp = rng.uniform(size=len(units)) < expit(alpha + eta)
        responded_per_level[level] = dict(zip(units.tolist(), resp.tolist()))
        level_response[level] = {
            "n_selected": int(len(units)),
            "n_responded": int(resp.sum()),
        }

    prac = frame.practices
    n = len(prac)
    selected = np.zeros(n, dtype=np.int64)
    sel_ids = draw.selected_practice_ids
    id_to_pos = pd.Series(np.arange(n), index=prac["id"].to_numpy())
    selected[id_to_pos.loc[sel_ids].to_numpy()] = 1

    responded = np.zeros(n, dtype=np.int64)
    prac_resp = responded_per_level.get("practice", {})
    for pid, r in prac_resp.items():
        if r:
            responded[id_to_pos.loc[pid]] = 1

    values = pd.DataFrame(
        {
            "practice_id": prac["id"].to_numpy(),
            "subsidiary_id": prac["os_id"].to_numpy(),
            "parent_id": prac["parent_id"].to_numpy(),
            "cluster_id": np.where(prac["os_id"].to_numpy() >= 0, prac["os_id"].to_numpy(), -1),
            "selected": selected,
            "responded": responded,
        }
    )

    outcome_cols = frame.outcome_columns
    for col in outcome_cols:
        values[col] = prac[col].to_numpy(dtype=float)
    for name in FRAME_COVARIATES:
        values[name] = level_covariate(frame, "practice", name).loc[
            values["practice_id"]
        ].to_numpy()

    agg = claims_aggregates.set_index("practice_id").loc[values["practice_id"]]
    claims_cols = list(CLAIMS_COLUMNS)
    for name in claims_cols:
        if name == "region":
            values[name] = agg[name].map(REGION_CODES).to_numpy(dtype=float)
        else:
            values[name] = agg[name].to_numpy(dtype=float)

    mask = pd.DataFrame(index=values.index)
    outcome_observed = (selected == 1) & (responded == 1)
    for col in outcome_cols:
        mask[col] = outcome_observed
    for name in FRAME_COVARIATES:
        mask[name] = True
    claims_observed = agg["practice_size"].to_numpy() > 0
    for name in claims_cols:
        mask[name] = claims_observed

    for col in outcome_cols + claims_cols:
        values.loc[~mask[col].to_numpy(), col] = np.nan

    return StudyDataset(
        values=values,
        mask=mask,
        outcome_columns=list(outcome_cols),
        frame_columns=list(FRAME_COVARIATES),
        claims_columns=claims_cols,
        level_response=level_response,
    )


def write_study_dataset(data: StudyDataset, values_path, mask_path) -> None:
    data.values.to_csv(Path(values_path), index=False)
    out = data.mask[data.variable_columns].replace({True: "obs", False: "mis"})
    out.insert(0, "practice_id", data.values["practice_id"].to_numpy())
    out.to_csv(Path(mask_path), index=False)


def read_study_dataset(
    values_path, mask_path, outcome_columns, level_response=None
) -> StudyDataset:
    values = pd.read_csv(Path(values_path))
    raw_mask = pd.read_csv(Path(mask_path))
    mask = raw_mask.drop(columns=["practice_id"]) == "obs"
    frame_cols = [c for c in FRAME_COVARIATES if c in values.columns]
    claims_cols = [c for c in CLAIMS_COLUMNS if c in values.columns]
    return StudyDataset(
        values=values,
        mask=mask,
        outcome_columns=list(outcome_columns),
        frame_columns=frame_cols,
        claims_columns=claims_cols,
        level_response=level_response or {},
    )
