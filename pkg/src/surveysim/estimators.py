"""Naive, design-weighted, and multiple-imputation mean estimators.

The weighted estimator is the Horvitz-Thompson ratio mean with a
stratified first-stage with-replacement linearization for its variance.
MI estimates pool per-dataset full-frame means through Rubin's rules,
and the efficiency diagnostic compares per-imputation standard errors
against the pure sample-size ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import InsufficientDataError, PoolingError, VarianceUndefinedError
from .imputation import ImputationSet
from .missingness import StudyDataset

LEVEL_KEYS = {"practice": None, "subsidiary": "subsidiary_id", "parent": "parent_id"}


@dataclass(frozen=True)
class EstimateReport:
    method: str
    outcome: str
    mean: float
    se: float
    n_used: int
    level: str = "practice"
    scenario: str | None = None
    components: dict | None = None


@dataclass(frozen=True)
class EfficiencyDiagnostic:
    per_imputation_ratio: list
    size_ratio: float


def naive_mean(data: StudyDataset, outcome: str) -> EstimateReport:
    """Case-deletion mean with se = sample standard deviation / sqrt(n)."""
    obs = data.observed(outcome).to_numpy(dtype=float)
    n = len(obs)
    if n < 2:
        raise InsufficientDataError(
            f"naive mean of {outcome!r} needs >= 2 observed values, found {n}"
        )
    return EstimateReport(
        method="naive",
        outcome=outcome,
        mean=float(obs.mean()),
        se=float(obs.std(ddof=1) / math.sqrt(n)),
        n_used=n,
    )


def ht_mean_and_variance(y, w, psu, stratum) -> tuple[float, float]:
    """Weighted ratio mean and its linearized variance.

    Scores aggregate w*(y - mean)/sum(w) within responding PSUs; each
    first-stage stratum h contributes n_h/(n_h-1) * sum((z_i - zbar_h)^2)
    treating PSUs as drawn with replacement. A stratum with exactly one
    responding PSU leaves the variance undefined.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    psu = np.asarray(psu)
    stratum = np.asarray(stratum)
    total_w = w.sum()
    mean = float((w * y).sum() / total_w)

    scores = w * (y - mean) / total_w
    var = 0.0
    for h in np.unique(stratum):
        in_h = stratum == h
        z = pd.Series(scores[in_h]).groupby(psu[in_h]).sum().to_numpy()
        n_h = len(z)
        if n_h < 2:
            raise VarianceUndefinedError(
                f"stratum {h!r} has exactly {n_h} responding PSU; variance undefined"
            )
        var += n_h / (n_h - 1) * ((z - z.mean()) ** 2).sum()
    return mean, float(var)


def weighted_mean(data: StudyDataset, draw, outcome: str) -> EstimateReport:
    """Horvitz-Thompson ratio estimator over responding sampled units."""
    observed = data.mask[outcome].to_numpy()
    obs_ids = data.values.loc[observed, "practice_id"].to_numpy()
    table = draw.table.set_index("practice_id")
    missing_weights = [pid for pid in obs_ids if pid not in table.index]
    if missing_weights:
        raise InsufficientDataError(
            f"responding practices without weights: {missing_weights[:5]}"
        )
    sub = table.loc[obs_ids]
    y = data.values.loc[observed, outcome].to_numpy(dtype=float)
    if len(y) < 2:
        raise InsufficientDataError(
            f"weighted mean of {outcome!r} needs >= 2 observed values, found {len(y)}"
        )
    mean, var = ht_mean_and_variance(
        y, sub["weight"].to_numpy(), sub["psu_id"].to_numpy(), sub["stratum"].to_numpy()
    )
    return EstimateReport(
        method="weighted",
        outcome=outcome,
        mean=mean,
        se=math.sqrt(var),
        n_used=len(y),
    )


def pool_rubin(estimates) -> tuple[float, float, dict]:
    """Rubin's rules: pooled mean, pooled se, and variance components.

    ``estimates`` is a sequence of (mean_d, var_d) pairs. The total
    variance is Var_w + (1 + 1/D) Var_B with Var_w the average
    within-imputation variance and Var_B the between-imputation variance.
    """
    estimates = list(estimates)
    D = len(estimates)
    if D < 2:
        raise PoolingError(f"Rubin pooling needs D >= 2 estimates, got {D}")
    means = np.array([m for m, _ in estimates], dtype=float)
    variances = np.array([v for _, v in estimates], dtype=float)
    pooled_mean = float(means.mean())
    var_w = float(variances.mean())
    var_b = float(((means - pooled_mean) ** 2).sum() / (D - 1))
    se = math.sqrt(var_w + (1.0 + 1.0 / D) * var_b)
    return pooled_mean, se, {"var_within": var_w, "var_between": var_b, "D": D}


def _level_values(dataset: pd.DataFrame, outcome: str, level: str) -> np.ndarray:
    key = LEVEL_KEYS[level]
    if key is None:
        return dataset[outcome].to_numpy(dtype=float)
    owned = dataset[dataset[key] >= 0]
    return owned.groupby(key)[outcome].mean().to_numpy(dtype=float)


def mi_mean(
    imputations: ImputationSet,
    outcome: str,
    level: str = "practice",
    scenario: str | None = None,
    fpc: bool = False,
) -> EstimateReport:
    """Pooled full-frame mean over the D completed datasets.

    Each completed dataset contributes its mean and the squared standard
    error of that mean (simple-random-sampling formula on the completed
    frame; the finite-population correction is off by default to match
    the uncorrected convention and can be switched on).
    """
    if level not in LEVEL_KEYS:
        raise ValueError(f"level must be one of {tuple(LEVEL_KEYS)}, got {level!r}")
    per_dataset = []
    n_used = 0
    for dataset in imputations.datasets:
        vals = _level_values(dataset, outcome, level)
        n_used = len(vals)
        var_d = vals.var(ddof=1) / len(vals)
        if fpc:
            var_d *= 0.0  # completed frame is the whole population
        per_dataset.append((vals.mean(), var_d))
    pooled_mean, se, components = pool_rubin(per_dataset)
    return EstimateReport(
        method="mi",
        outcome=outcome,
        mean=pooled_mean,
        se=se,
        n_used=n_used,
        level=level,
        scenario=scenario,
        components=components,
    )


def efficiency_diagnostic(
    imputations: ImputationSet, data: StudyDataset, outcome: str
) -> EfficiencyDiagnostic:
    """Per-imputation SE ratios against the pure sample-size ratio.

    Each ratio is the completed-dataset standard error of the mean over
    the naive standard error from the original incomplete data; the size
    ratio sqrt(n_original / n_imputed) is what the ratios would equal if
    the gain came from row count alone.
    """
    base = naive_mean(data, outcome)
    ratios = []
    n_imputed = 0
    for dataset in imputations.datasets:
        vals = dataset[outcome].to_numpy(dtype=float)
        n_imputed = len(vals)
        se_d = vals.std(ddof=1) / math.sqrt(n_imputed)
        ratios.append(float(se_d / base.se))
    return EfficiencyDiagnostic(
        per_imputation_ratio=ratios,
        size_ratio=math.sqrt(base.n_used / n_imputed),
    )


def correlation_summary(
    imputations: ImputationSet, data: StudyDataset, covariates, outcome: str
) -> pd.DataFrame:
    """Covariate-outcome correlations on observed rows and across datasets.

    One row per covariate: the Pearson correlation on the original
    observed rows (column Y) and the min/mean/max/sd of the absolute
    correlations across the D completed datasets. Zero-variance
    covariates report NaN.
    """
    rows = []
    observed = data.mask[outcome].to_numpy()
    for cov in covariates:
        both = observed & data.mask[cov].to_numpy() & data.values[cov].notna().to_numpy()
        x = data.values.loc[both, cov].to_numpy(dtype=float)
        y = data.values.loc[both, outcome].to_numpy(dtype=float)
        if len(x) > 1 and x.std() > 0 and y.std() > 0:
            corr_obs = float(np.corrcoef(x, y)[0, 1])
        else:
            corr_obs = float("nan")
        abs_corrs = []
        for dataset in imputations.datasets:
            xc = dataset[cov].to_numpy(dtype=float)
            yc = dataset[outcome].to_numpy(dtype=float)
            if xc.std() > 0 and yc.std() > 0:
                abs_corrs.append(abs(float(np.corrcoef(xc, yc)[0, 1])))
        if abs_corrs:
            stats = {
                "minimum": min(abs_corrs),
                "mean": float(np.mean(abs_corrs)),
                "maximum": max(abs_corrs),
                "st_dev": float(np.std(abs_corrs, ddof=1)) if len(abs_corrs) > 1 else 0.0,
            }
        else:
            stats = {k: float("nan") for k in ("minimum", "mean", "maximum", "st_dev")}
        rows.append({"variable": cov, "Y": corr_obs, **stats})
    return pd.DataFrame(rows, columns=["variable", "Y", "minimum", "mean", "maximum", "st_dev"])
