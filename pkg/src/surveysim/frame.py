"""Synthetic three-tier organizational sampling frames.

The population mimics the ownership structure of a national provider
survey: corporate parents own owner subsidiaries, which own physician
practices; independent practices sit outside any system. Practices carry
ground-truth survey outcomes (kept for oracle checks) plus six covariates
that are observed frame-wide and never subject to missingness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import ndtri

from .errors import ConfigError

#: covariates measured completely on the frame, in canonical column order
FRAME_COVARIATES = ("np", "npcp", "nach", "nmg", "nos", "pertot")

LEVELS = ("practice", "subsidiary", "parent")


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for frame generation.

    ``cluster_icc`` sets the share of outcome variance carried by the
    subsidiary random intercept; ``covariate_outcome_corr`` sets the
    target correlation between ``npcp`` and outcome 0. ``binary_outcomes``
    maps outcome indices to prevalences; those outcomes are 0/1 flags
    obtained by thresholding the latent Gaussian (so the joint linear
    imputation model stays coherent with generation). For a binary
    outcome the correlation knob applies to its latent scale.
    """

    n_parents: int
    mean_subsidiaries_per_parent: float
    mean_practices_per_subsidiary: float
    n_independent_practices: int
    outcome_count: int = 1
    cluster_icc: float = 0.2
    covariate_outcome_corr: float = 0.2
    binary_outcomes: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.n_parents < 1:
            raise ConfigError(f"n_parents must be >= 1, got {self.n_parents}")
        if self.n_independent_practices < 0:
            raise ConfigError(
                f"n_independent_practices must be >= 0, got {self.n_independent_practices}"
            )
        if self.outcome_count < 1:
            raise ConfigError(f"outcome_count must be >= 1, got {self.outcome_count}")
        if self.mean_subsidiaries_per_parent < 0:
            raise ConfigError(
                "mean_subsidiaries_per_parent must be >= 0, got "
                f"{self.mean_subsidiaries_per_parent}"
            )
        if self.mean_subsidiaries_per_parent > 0 and self.mean_practices_per_subsidiary < 1:
            raise ConfigError(
                "mean_practices_per_subsidiary must be >= 1 when subsidiaries exist, got "
                f"{self.mean_practices_per_subsidiary}"
            )
        if not 0.0 <= self.cluster_icc < 1.0:
            raise ConfigError(f"cluster_icc must be in [0, 1), got {self.cluster_icc}")
        if not -1.0 < self.covariate_outcome_corr < 1.0:
            raise ConfigError(
                f"covariate_outcome_corr must be in (-1, 1), got {self.covariate_outcome_corr}"
            )
        for idx, prev in self.binary_outcomes.items():
            if not 0 <= int(idx) < self.outcome_count:
                raise ConfigError(f"binary_outcomes index {idx} out of range")
            if not 0.0 < prev < 1.0:
                raise ConfigError(f"binary_outcomes prevalence must be in (0, 1), got {prev}")

    def outcome_columns(self) -> list[str]:
        return [f"y{k}" for k in range(self.outcome_count)]


@dataclass(frozen=True)
class Frame:
    """A fully generated population with referential integrity.

    ``parents``, ``subsidiaries`` and ``practices`` are column tables.
    Practices reference their owner subsidiary through ``os_id`` (-1 for
    independent practices) and carry ``parent_id`` for convenience.
    """

    parents: pd.DataFrame
    subsidiaries: pd.DataFrame
    practices: pd.DataFrame
    config: GeneratorConfig
    seed: int

    @property
    def outcome_columns(self) -> list[str]:
        return self.config.outcome_columns()

    @property
    def n_practices(self) -> int:
        return len(self.practices)


def _zero_truncated_poisson(rng: np.random.Generator, mean: float, size: int) -> np.ndarray:
    """Counts >= 1 whose expectation equals ``mean`` (requires mean >= 1)."""
    if mean <= 1.0 + 1e-9:
        return np.ones(size, dtype=np.int64)
    # solve lam / (1 - exp(-lam)) = mean for the underlying rate
    lam = brentq(lambda l: l / (1.0 - np.exp(-l)) - mean, 1e-9, mean)
    draws = rng.poisson(lam, size)
    while True:
        zeros = draws == 0
        if not zeros.any():
            return draws.astype(np.int64)
        draws[zeros] = rng.poisson(lam, int(zeros.sum()))


def _count_draw(rng: np.random.Generator, mean: float, size: int, lower: int) -> np.ndarray:
    if mean == 0:
        return np.zeros(size, dtype=np.int64)
    if lower == 0:
        return rng.poisson(mean, size).astype(np.int64)
    return _zero_truncated_poisson(rng, mean, size)


def _lognormal_corr_compensation(sigma: float) -> float:
    """Inflation factor so the latent correlation survives exp + rounding.

    corr(exp(sigma * Z1), Z2) = r * sigma / sqrt(exp(sigma^2) - 1) for
    latent corr r, so the latent correlation must be r * kappa with
    kappa = sqrt(exp(sigma^2) - 1) / sigma.
    """
    return float(np.sqrt(np.expm1(sigma**2)) / sigma)


def generate_frame(config: GeneratorConfig, seed: int) -> Frame:
    """Generate a population deterministically from (config, seed).

    Hierarchy sizes come from (zero-truncated) Poisson draws with the
    configured means. Outcomes follow a subsidiary random-intercept model
    whose latent is shared across outcomes: population ICC at the
    subsidiary level equals ``cluster_icc`` in expectation. ``npcp`` is a
    log-normal count, truncated at the survey eligibility floor of 3
    primary-care physicians, built on a latent correlated with outcome 0
    at ``covariate_outcome_corr``.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n_parents = config.n_parents
    icc = config.cluster_icc
    n_outcomes = config.outcome_count

    # a mean >= 1 guarantees every parent owns a subsidiary, which keeps
    # per-parent sampling stages feasible; smaller means allow zeros
    subs_lower = 1 if config.mean_subsidiaries_per_parent >= 1 else 0
    subs_per_parent = _count_draw(
        rng, config.mean_subsidiaries_per_parent, n_parents, lower=subs_lower
    )
    n_subs = int(subs_per_parent.sum())
    sub_parent = np.repeat(np.arange(n_parents), subs_per_parent)
    sub_latent = rng.standard_normal(n_subs)

    practices_per_sub = (
        _count_draw(rng, config.mean_practices_per_subsidiary, n_subs, lower=1)
        if n_subs
        else np.zeros(0, dtype=np.int64)
    )
    n_owned = int(practices_per_sub.sum())
    n_ind = config.n_independent_practices
    n_prac = n_owned + n_ind

    prac_os = np.concatenate(
        [np.repeat(np.arange(n_subs), practices_per_sub), np.full(n_ind, -1)]
    ).astype(np.int64)
    prac_parent = np.where(prac_os >= 0, sub_parent[np.clip(prac_os, 0, None)], -1)

    # cluster latent per practice: owned practices share their subsidiary's
    # draw, independent practices get their own (no shared cluster)
    cluster_latent = np.empty(n_prac)
    cluster_latent[:n_owned] = sub_latent[prac_os[:n_owned]] if n_owned else []
    cluster_latent[n_owned:] = rng.standard_normal(n_ind)

    # latent outcomes: unit marginal variance, between-subsidiary share = icc
    latents = np.sqrt(icc) * cluster_latent[:, None] + np.sqrt(1.0 - icc) * (
        rng.standard_normal((n_prac, n_outcomes)) if n_prac else np.zeros((0, n_outcomes))
    )
    outcomes = latents.copy()
    for idx, prev in config.binary_outcomes.items():
        outcomes[:, int(idx)] = (latents[:, int(idx)] > ndtri(1.0 - prev)).astype(float)

    # npcp: log-normal count correlated with the outcome-0 latent,
    # truncated at the eligibility floor of 3 PCPs
    sigma_npcp = 0.45
    kappa = _lognormal_corr_compensation(sigma_npcp)
    r_latent = float(np.clip(config.covariate_outcome_corr * kappa, -0.995, 0.995))
    z0 = latents[:, 0] if n_prac else np.zeros(0)
    cov_latent = r_latent * z0 + np.sqrt(1.0 - r_latent**2) * rng.standard_normal(n_prac)
    npcp = np.maximum(3, np.rint(np.exp(np.log(8.0) + sigma_npcp * cov_latent))).astype(
        np.int64
    )
    extra = np.rint(np.exp(np.log(4.0) + 0.6 * rng.standard_normal(n_prac))).astype(
        np.int64
    )
    n_phys = npcp + extra

    tins = np.array([f"T{v:06d}" for v in rng.permutation(n_prac)])

    # parent covariates: counts weakly tied to the parent's mean cluster
    # latent; nos must equal the realized subsidiary count
    if n_subs:
        sums = np.zeros(n_parents)
        np.add.at(sums, sub_parent, sub_latent)
        with np.errstate(invalid="ignore"):
            parent_latent = np.where(subs_per_parent > 0, sums / np.maximum(subs_per_parent, 1), 0.0)
    else:
        parent_latent = np.zeros(n_parents)
    zeta = 0.3 * parent_latent + np.sqrt(1 - 0.09) * rng.standard_normal(n_parents)
    nach = np.rint(np.exp(np.log(3.0) + 0.7 * zeta)).astype(np.int64)
    nmg = np.rint(
        np.exp(np.log(2.0) + 0.6 * rng.standard_normal(n_parents))
    ).astype(np.int64)
    pertot = rng.beta(4.0, 2.0, n_parents)

    parents = pd.DataFrame(
        {
            "id": np.arange(n_parents, dtype=np.int64),
            "nach": nach,
            "nmg": nmg,
            "nos": subs_per_parent.astype(np.int64),
            "pertot": pertot,
        }
    )
    subsidiaries = pd.DataFrame(
        {
            "id": np.arange(n_subs, dtype=np.int64),
            "parent_id": sub_parent.astype(np.int64),
            "latent_trait": sub_latent,
        }
    )
    practices = pd.DataFrame(
        {
            "id": np.arange(n_prac, dtype=np.int64),
            "os_id": prac_os,
            "parent_id": prac_parent.astype(np.int64),
            "np": n_phys,
            "npcp": npcp,
            "tin": tins,
        }
    )
    for k in range(n_outcomes):
        practices[f"y{k}"] = outcomes[:, k]

    return Frame(parents, subsidiaries, practices, config, seed)


def population_mean(frame: Frame, outcome_index: int, level: str = "practice") -> float:
    """Exact finite-population mean of an outcome at the requested level.

    At subsidiary/parent level the estimand is the mean over level units
    of the within-unit practice mean; independent practices belong to no
    subsidiary or parent and are excluded there.
    """
    if not 0 <= outcome_index < frame.config.outcome_count:
        raise IndexError(f"outcome index {outcome_index} out of range")
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    col = f"y{outcome_index}"
    prac = frame.practices
    if level == "practice":
        return float(prac[col].mean())
    key = "os_id" if level == "subsidiary" else "parent_id"
    owned = prac[prac[key] >= 0]
    return float(owned.groupby(key)[col].mean().mean())


def level_covariate(frame: Frame, level: str, name: str) -> pd.Series:
    """Resolve a covariate as a Series indexed by unit id at a level.

    Parents expose their own system covariates plus ``n_practices``.
    Subsidiaries inherit the parent's system covariates and expose
    ``n_practices``. Practices expose np/npcp, their parent's system
    covariates (0/0/0/1.0 for independent practices: no system, fully
    local) and anything joined from the frame row.
    """
    if level == "parent":
        if name == "n_practices":
            counts = frame.practices[frame.practices["parent_id"] >= 0][
                "parent_id"
            ].value_counts()
            out = pd.Series(0.0, index=frame.parents["id"])
            out.loc[counts.index] = counts.astype(float)
            return out
        if name in ("nach", "nmg", "nos", "pertot"):
            return frame.parents.set_index("id")[name].astype(float)
        raise ConfigError(f"covariate {name!r} is not defined at parent level")
    if level == "subsidiary":
        subs = frame.subsidiaries.set_index("id")
        if name == "n_practices":
            counts = frame.practices[frame.practices["os_id"] >= 0]["os_id"].value_counts()
            out = pd.Series(0.0, index=subs.index)
            out.loc[counts.index] = counts.astype(float)
            return out
        if name in ("nach", "nmg", "nos", "pertot"):
            parent_vals = frame.parents.set_index("id")[name]
            return subs["parent_id"].map(parent_vals).astype(float)
        raise ConfigError(f"covariate {name!r} is not defined at subsidiary level")
    if level == "practice":
        prac = frame.practices.set_index("id")
        if name in ("np", "npcp"):
            return prac[name].astype(float)
        if name in ("nach", "nmg", "nos"):
            parent_vals = frame.parents.set_index("id")[name]
            vals = prac["parent_id"].map(parent_vals).astype(float)
            return vals.fillna(0.0)
        if name == "pertot":
            parent_vals = frame.parents.set_index("id")["pertot"]
            vals = prac["parent_id"].map(parent_vals).astype(float)
            return vals.fillna(1.0)
        raise ConfigError(f"covariate {name!r} is not defined at practice level")
    raise ValueError(f"unknown level {level!r}")


def practice_frame_covariates(frame: Frame) -> pd.DataFrame:
    """Per-practice table of the six always-observed frame covariates."""
    out = pd.DataFrame({"practice_id": frame.practices["id"].to_numpy()})
    for name in FRAME_COVARIATES:
        out[name] = level_covariate(frame, "practice", name).to_numpy()
    return out


# ---------------------------------------------------------------------------
# serialization: three CSVs plus a manifest recording (config, seed)

_PARENT_COLS = ["id", "nach", "nmg", "nos", "pertot"]
_SUB_COLS = ["id", "parent_id", "latent_trait"]


def write_frame(frame: Frame, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame.parents[_PARENT_COLS].to_csv(out / "parents.csv", index=False)
    frame.subsidiaries[_SUB_COLS].to_csv(out / "subsidiaries.csv", index=False)
    prac_cols = ["id", "os_id", "np", "npcp", "tin"] + frame.outcome_columns
    frame.practices[prac_cols].to_csv(out / "practices.csv", index=False)
    manifest = {
        "config": {
            **{
                k: v
                for k, v in frame.config.__dict__.items()
                if k != "binary_outcomes"
            },
            "binary_outcomes": {str(k): v for k, v in frame.config.binary_outcomes.items()},
        },
        "seed": frame.seed,
    }
    (out / "frame_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_frame(in_dir) -> Frame:
    src = Path(in_dir)
    manifest = json.loads((src / "frame_manifest.json").read_text())
    raw = dict(manifest["config"])
    raw["binary_outcomes"] = {int(k): v for k, v in raw.get("binary_outcomes", {}).items()}
    config = GeneratorConfig(**raw)
    parents = pd.read_csv(src / "parents.csv")
    subsidiaries = pd.read_csv(src / "subsidiaries.csv")
    practices = pd.read_csv(src / "practices.csv", dtype={"tin": str})
    parent_of_sub = subsidiaries.set_index("id")["parent_id"]
    practices["parent_id"] = (
        practices["os_id"].map(parent_of_sub).fillna(-1).astype(np.int64)
    )
    practices = practices[
        ["id", "os_id", "parent_id", "np", "npcp", "tin"] + config.outcome_columns()
    ]
    return Frame(parents, subsidiaries, practices, config, manifest["seed"])
