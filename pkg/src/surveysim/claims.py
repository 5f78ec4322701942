"""Synthetic beneficiary claims, plurality attribution, and practice aggregates.

Beneficiaries are generated around practice-level latent traits so that,
after attribution and aggregation, selected claims covariates correlate
with the practice ground-truth outcome at a configurable strength. That
correlation is the experiment's key knob: it controls how much the linked
auxiliary data can sharpen imputation.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from .errors import ConfigError
from .frame import Frame

REGIONS = ("midwest", "northeast", "south", "west")
REGION_CODES = {name: i for i, name in enumerate(REGIONS)}

#: practice-level aggregates derived from claims, in canonical column order
CLAIMS_COLUMNS = (
    "practice_size",
    "region",
    "pct_rural",
    "mean_age",
    "pct_female",
    "mean_income",
    "system_size",
    "pct_white",
    "pct_black",
    "pct_hispanic",
    "pct_other",
    "pct_partial_dual",
    "pct_full_dual",
    "pct_depression",
    "pct_smi",
    "mean_hcc",
    "admissions_per_100",
)

#: the auxiliary-covariate subset used as MI2 imputation predictors
TABLE5_COVARIATES = (
    "practice_size",
    "region",
    "pct_rural",
    "mean_age",
    "pct_female",
    "mean_income",
    "system_size",
    "pct_white",
    "pct_black",
    "pct_hispanic",
    "pct_other",
)

BENEFICIARY_COLUMNS = (
    "id",
    "age",
    "female",
    "income",
    "race",
    "rural",
    "partial_dual",
    "full_dual",
    "hcc_count",
    "admissions",
    "depression",
    "smi",
    "visit_tins",
)

# cross-practice scale and within-practice variance of each driver
# attribute; used to pre-compensate aggregation attenuation
_DRIVERS = {
    "mean_age": (4.0, 81.0),
    "mean_income": (9000.0, 4.0e8),
    "pct_female": (0.15, 0.2475),
    "pct_hispanic": (0.10, 0.16),
}


def practice_region(frame: Frame) -> pd.Series:
    """Region per practice: uniform at the parent level, stable per frame.

    Derived from a hash of (frame seed, parent id) so the same frame
    always yields the same regions; independent practices hash their own
    practice id.
    """
    prac = frame.practices

    def _code(kind: str, ident: int) -> int:
        key = f"region|{frame.seed}|{kind}|{ident}".encode()
        return int.from_bytes(hashlib.sha256(key).digest()[:4], "little") % 4

    codes = [
        _code("parent", pid) if pid >= 0 else _code("practice", prid)
        for pid, prid in zip(prac["parent_id"], prac["id"])
    ]
    return pd.Series(
        [REGIONS[c] for c in codes], index=prac["id"].to_numpy(), name="region"
    )


def generate_beneficiaries(
    frame: Frame,
    per_practice_mean: float,
    aux_outcome_corr: float,
    seed: int,
    *,
    linkage_rate: float = 1.0,
    link_npcp_slope: float = 0.0,
    noise_tin_rate: float = 0.25,
    external_tin_rate: float = 0.05,
) -> pd.DataFrame:
    """Draw beneficiaries whose aggregates track practice outcomes.

    Each driver covariate (mean_age is the designated one) gets its own
    practice latent correlated with outcome 0 at ``aux_outcome_corr``;
    the latent correlation is inflated to survive within-practice
    aggregation noise at the configured beneficiary count. Every
    beneficiary's visit multiset carries the home practice's tin with the
    strictly largest count, plus optional noise tins.

    ``linkage_rate`` turns on partial claims linkage: each practice links
    with a logistic probability (calibrated to the rate, log-odds slope
    ``link_npcp_slope`` per standardized log practice size) and unlinked
    practices get zero beneficiaries; linked practices draw a
    zero-truncated count whose mean keeps the overall beneficiary volume
    at ``per_practice_mean`` per frame practice.
    """
    if per_practice_mean <= 0:
        raise ConfigError(f"per_practice_mean must be > 0, got {per_practice_mean}")
    if not -1.0 < aux_outcome_corr < 1.0:
        raise ConfigError(f"aux_outcome_corr must be in (-1, 1), got {aux_outcome_corr}")
    if not 0.0 < linkage_rate <= 1.0:
        raise ConfigError(f"linkage_rate must be in (0, 1], got {linkage_rate}")
    if frame.n_practices == 0:
        raise ConfigError("cannot generate beneficiaries for an empty frame")

    rng = np.random.default_rng(seed)
    prac = frame.practices
    n_prac = len(prac)
    y0 = prac["y0"].to_numpy(dtype=float)
    sd = y0.std()
    z0 = (y0 - y0.mean()) / sd if sd > 0 else np.zeros(n_prac)

    mean_linked = per_practice_mean / linkage_rate
    drivers = {}
    for name, (scale, within_var) in _DRIVERS.items():
        atten = scale / np.sqrt(scale**2 + within_var / mean_linked)
        r = float(np.clip(aux_outcome_corr / atten, -0.995, 0.995))
        drivers[name] = r * z0 + np.sqrt(1.0 - r**2) * rng.standard_normal(n_prac)

    # practice-level nuisance tilts for the remaining attributes
    tilt = {k: rng.standard_normal(n_prac) for k in ("rural", "dual", "hcc", "adm", "dep", "smi")}

    counts = _beneficiary_counts(
        rng, prac, per_practice_mean, linkage_rate, link_npcp_slope
    )
    total = int(counts.sum())
    pidx = np.repeat(np.arange(n_prac), counts)

    age = 72.0 + 4.0 * drivers["mean_age"][pidx] + 9.0 * rng.standard_normal(total)
    income = np.maximum(
        5_000.0,
        60_000.0 + 9_000.0 * drivers["mean_income"][pidx] + 20_000.0 * rng.standard_normal(total),
    )
    p_female = np.clip(0.55 + 0.15 * drivers["pct_female"][pidx], 0.02, 0.98)
    female = (rng.uniform(size=total) < p_female).astype(np.int64)

    race_logits = np.stack(
        [
            np.full(total, 1.7),
            np.full(total, 0.0),
            -0.2 + 0.5 * drivers["pct_hispanic"][pidx],
            np.full(total, -0.4),
        ],
        axis=1,
    )
    race_p = np.exp(race_logits)
    race_p /= race_p.sum(axis=1, keepdims=True)
    u = rng.uniform(size=total)
    race_idx = (u[:, None] > np.cumsum(race_p, axis=1)).sum(axis=1)
    race = np.array(["white", "black", "hispanic", "other"])[race_idx]

    rural = (rng.uniform(size=total) < _expit(-1.2 + 0.8 * tilt["rural"][pidx])).astype(np.int64)

    dual_logits = np.stack(
        [
            np.full(total, 1.4),
            -0.9 + 0.3 * tilt["dual"][pidx],
            0.0 + 0.3 * tilt["dual"][pidx],
        ],
        axis=1,
    )
    dual_p = np.exp(dual_logits)
    dual_p /= dual_p.sum(axis=1, keepdims=True)
    u = rng.uniform(size=total)
    dual_idx = (u[:, None] > np.cumsum(dual_p, axis=1)).sum(axis=1)
    partial_dual = (dual_idx == 1).astype(np.int64)
    full_dual = (dual_idx == 2).astype(np.int64)

    hcc = rng.poisson(2.4 * np.exp(0.15 * tilt["hcc"][pidx]))
    admissions = rng.poisson(0.8 * np.exp(0.2 * tilt["adm"][pidx]))
    depression = (
        rng.uniform(size=total) < np.clip(0.20 + 0.05 * tilt["dep"][pidx], 0.01, 0.8)
    ).astype(np.int64)
    smi = (
        rng.uniform(size=total) < np.clip(0.05 + 0.02 * tilt["smi"][pidx], 0.005, 0.4)
    ).astype(np.int64)

    tins = prac["tin"].to_numpy()
    home_counts = 2 + rng.poisson(3.0, total)
    has_noise = rng.uniform(size=total) < noise_tin_rate
    has_external = rng.uniform(size=total) < external_tin_rate
    other_idx = rng.integers(0, max(n_prac - 1, 1), total)
    # shift past the home practice so the noise tin is a different one
    other_idx = np.where(other_idx >= pidx, other_idx + 1, other_idx) if n_prac > 1 else pidx
    noise_counts = rng.integers(1, home_counts)  # strictly below the home count

    visit_strs = []
    for i in range(total):
        parts = [f"{tins[pidx[i]]}:{home_counts[i]}"]
        if has_noise[i] and n_prac > 1:
            parts.append(f"{tins[other_idx[i]]}:{noise_counts[i]}")
        if has_external[i]:
            parts.append(f"X{i % 100_000:05d}:1")
        visit_strs.append(";".join(parts))

    return pd.DataFrame(
        {
            "id": [f"B{i:07d}" for i in range(total)],
            "age": age,
            "female": female,
            "income": income,
            "race": race,
            "rural": rural,
            "partial_dual": partial_dual,
            "full_dual": full_dual,
            "hcc_count": hcc,
            "admissions": admissions,
            "depression": depression,
            "smi": smi,
            "visit_tins": visit_strs,
        }
    )


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


def _beneficiary_counts(rng, prac, per_practice_mean, linkage_rate, link_npcp_slope):
    """Per-practice beneficiary counts, optionally zero-inflated by linkage."""
    n_prac = len(prac)
    if linkage_rate >= 1.0:
        return rng.poisson(per_practice_mean, n_prac)
    z = np.log(prac["npcp"].to_numpy(dtype=float))
    z = (z - z.mean()) / z.std() if z.std() > 0 else np.zeros(n_prac)
    eta = link_npcp_slope * z
    lo, hi = -40.0 - abs(eta).max(), 40.0 + abs(eta).max()
    alpha = brentq(lambda a: _expit(a + eta).mean() - linkage_rate, lo, hi)
    linked = rng.uniform(size=n_prac) < _expit(alpha + eta)
    counts = np.zeros(n_prac, dtype=np.int64)
    mean_linked = per_practice_mean / linkage_rate
    lam = (
        brentq(lambda l: l / (1.0 - np.exp(-l)) - mean_linked, 1e-9, mean_linked)
        if mean_linked > 1 + 1e-9
        else mean_linked
    )
    draws = rng.poisson(lam, int(linked.sum()))
    while (draws == 0).any():
        zeros = draws == 0
        draws[zeros] = rng.poisson(lam, int(zeros.sum()))
    counts[linked] = draws
    return counts


def parse_visit_tins(encoded: str) -> list[tuple[str, int]]:
    return [
        (tin, int(count))
        for tin, count in (part.split(":") for part in encoded.split(";"))
    ]


def attribute(beneficiaries: pd.DataFrame, frame: Frame) -> pd.Series:
    """Assign each beneficiary to the frame practice with plurality of visits.

    Tins absent from the frame are treated as external; a beneficiary
    with no frame tin is left unattributed (dropped from the result).
    Ties go to the lexicographically smallest tin.
    """
    tin_to_practice = pd.Series(
        frame.practices["id"].to_numpy(), index=frame.practices["tin"].to_numpy()
    )
    rows = []
    for bene_id, encoded in zip(beneficiaries["id"], beneficiaries["visit_tins"]):
        for tin, count in parse_visit_tins(encoded):
            rows.append((bene_id, tin, count))
    long = pd.DataFrame(rows, columns=["bene_id", "tin", "count"])
    long = long[long["tin"].isin(tin_to_practice.index)]
    if long.empty:
        return pd.Series(dtype=np.int64, name="practice_id")
    long = long.groupby(["bene_id", "tin"], as_index=False)["count"].sum()
    long = long.sort_values(
        ["bene_id", "count", "tin"], ascending=[True, False, True], kind="mergesort"
    )
    best = long.drop_duplicates("bene_id", keep="first")
    out = pd.Series(
        best["tin"].map(tin_to_practice).to_numpy(dtype=np.int64),
        index=best["bene_id"].to_numpy(),
        name="practice_id",
    )
    return out.sort_index()


def aggregate(
    beneficiaries: pd.DataFrame, attribution: pd.Series, frame: Frame
) -> pd.DataFrame:
    """Practice-level means/proportions over attributed beneficiaries.

    Every frame practice gets a row. Practices with zero attributed
    beneficiaries keep practice_size = 0 with NaN in all
    beneficiary-derived fields; those cells enter the study dataset as
    missing. system_size is the owning parent's hospital count (0 for
    independent practices).
    """
    bene = beneficiaries.set_index("id")
    assigned = bene.loc[attribution.index].copy()
    assigned["practice_id"] = attribution.to_numpy()

    g = assigned.groupby("practice_id")
    agg = pd.DataFrame(
        {
            "practice_size": g.size(),
            "pct_rural": g["rural"].mean(),
            "mean_age": g["age"].mean(),
            "pct_female": g["female"].mean(),
            "mean_income": g["income"].mean(),
            "pct_partial_dual": g["partial_dual"].mean(),
            "pct_full_dual": g["full_dual"].mean(),
            "pct_depression": g["depression"].mean(),
            "pct_smi": g["smi"].mean(),
            "mean_hcc": g["hcc_count"].mean(),
            "admissions_per_100": 100.0 * g["admissions"].mean(),
        }
    )
    for race in ("white", "black", "hispanic", "other"):
        agg[f"pct_{race}"] = g["race"].apply(lambda s, r=race: (s == r).mean())

    prac = frame.practices
    out = pd.DataFrame({"practice_id": prac["id"].to_numpy()})
    out = out.merge(agg, left_on="practice_id", right_index=True, how="left")
    out["practice_size"] = out["practice_size"].fillna(0).astype(np.int64)
    out["region"] = practice_region(frame).loc[out["practice_id"]].to_numpy()
    nach = frame.parents.set_index("id")["nach"]
    parent_of = prac.set_index("id")["parent_id"]
    out["system_size"] = (
        parent_of.loc[out["practice_id"]].map(nach).fillna(0).astype(np.int64).to_numpy()
    )
    return out[["practice_id", *CLAIMS_COLUMNS]]


def write_beneficiaries(beneficiaries: pd.DataFrame, path) -> None:
    beneficiaries[list(BENEFICIARY_COLUMNS)].to_csv(Path(path), index=False)


def read_beneficiaries(path) -> pd.DataFrame:
    return pd.read_csv(Path(path), dtype={"id": str, "visit_tins": str})


def write_claims_aggregates(aggregates: pd.DataFrame, path) -> None:
    aggregates.to_csv(Path(path), index=False)


def read_claims_aggregates(path) -> pd.DataFrame:
    return pd.read_csv(Path(path))
