"""Cluster sampling designs with per-stage selection probabilities.

Three designs are supported: three_level (parents, then subsidiaries
within selected parents, then practices within selected subsidiaries),
two_level (subsidiaries, then practices) and single_level (practices
directly). The final selection probability of a practice is the product
of its stage probabilities, and the design weight is its reciprocal.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DesignError
from .frame import Frame, level_covariate

_N_STAGES = {"three_level": 3, "two_level": 2, "single_level": 1}
_STAGE_LEVELS = {
    "three_level": ("parent", "subsidiary", "practice"),
    "two_level": ("subsidiary", "practice"),
    "single_level": ("practice",),
}
METHODS = ("srswor", "pps")


@dataclass(frozen=True)
class StageSpec:
    """One sampling stage: method plus per-pool sample size.

    ``sample_size`` applies per stratum at stage 1 and per selected
    parent/subsidiary pool at later stages. PPS needs ``size_measure``
    naming a strictly positive covariate at the stage's level.
    """

    method: str
    sample_size: int
    size_measure: str | None = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise DesignError(f"unknown stage method {self.method!r}")
        if self.sample_size < 1:
            raise DesignError(f"sample_size must be >= 1, got {self.sample_size}")
        if self.method == "pps" and not self.size_measure:
            raise DesignError("pps stages need a size_measure covariate")


@dataclass(frozen=True)
class DesignSpec:
    design: str
    stages: tuple[StageSpec, ...]
    strata_by: str | None = None

    def validate(self) -> None:
        if self.design not in _N_STAGES:
            raise DesignError(f"unknown design {self.design!r}")
        if len(self.stages) != _N_STAGES[self.design]:
            raise DesignError(
                f"{self.design} needs {_N_STAGES[self.design]} stage specs, "
                f"got {len(self.stages)}"
            )
        for stage in self.stages:
            stage.validate()

    @property
    def stage_levels(self) -> tuple[str, ...]:
        return _STAGE_LEVELS[self.design]


@dataclass(frozen=True)
class StageProbabilities:
    """Per-stage inclusion probabilities for every frame unit.

    ``stage1`` is indexed by first-stage unit id; later stages hold the
    conditional probability given the parent pool was selected. ``strata``
    labels every first-stage unit with its stratum.
    """

    design: str
    strata: pd.Series
    stage1: pd.Series
    stage2: pd.Series | None
    stage3: pd.Series | None


def _pps_probabilities(sizes: np.ndarray, n: int) -> np.ndarray:
    """min(1, n*s/sum(s)) with certainty units removed iteratively."""
    probs = np.zeros(len(sizes), dtype=float)
    active = np.ones(len(sizes), dtype=bool)
    n_left = n
    while True:
        total = sizes[active].sum()
        p = n_left * sizes[active] / total
        if (p <= 1.0 + 1e-12).all():
            probs[active] = np.minimum(p, 1.0)
            return probs
        certain = np.zeros(len(sizes), dtype=bool)
        certain[np.flatnonzero(active)[p >= 1.0]] = True
        probs[certain] = 1.0
        n_left -= int(certain.sum())
        active &= ~certain
        if n_left == 0:
            return probs


def _pool_probabilities(
    ids: np.ndarray,
    sizes: np.ndarray | None,
    stage: StageSpec,
    what: str,
    take_all_ok: bool = False,
) -> pd.Series:
    n_pool = len(ids)
    n = stage.sample_size
    if n_pool < n:
        # first-stage strata must be large enough; within-cluster pools at
        # later stages fall back to a census of the pool
        if not take_all_ok:
            raise DesignError(
                f"{what} has {n_pool} units, fewer than the requested {n}"
            )
        n = n_pool
    if stage.method == "srswor":
        return pd.Series(n / n_pool, index=ids)
    if (sizes <= 0).any():
        raise DesignError(f"pps size measure must be strictly positive in {what}")
    return pd.Series(_pps_probabilities(sizes, n), index=ids)


def _tercile_strata(values: pd.Series) -> pd.Series:
    """Three near-equal strata by (value, id); id order breaks ties."""
    order = values.sort_values(kind="mergesort").index
    # mergesort is stable, and the index was pre-sorted, so ties keep id order
    labels = pd.Series(0, index=values.index, dtype=np.int64)
    for s, chunk in enumerate(np.array_split(order.to_numpy(), 3)):
        labels.loc[chunk] = s
    return labels


def compute_stage_probabilities(frame: Frame, spec: DesignSpec) -> StageProbabilities:
    """Inclusion probabilities at every stage, for every frame unit."""
    spec.validate()
    levels = spec.stage_levels

    first_level = levels[0]
    if first_level == "parent":
        ids1 = frame.parents["id"].to_numpy()
    elif first_level == "subsidiary":
        ids1 = frame.subsidiaries["id"].to_numpy()
    else:
        ids1 = frame.practices["id"].to_numpy()
    ids1 = np.sort(ids1)

    if spec.strata_by:
        values = level_covariate(frame, first_level, spec.strata_by).loc[ids1]
        strata = _tercile_strata(values)
    else:
        strata = pd.Series(0, index=pd.Index(ids1), dtype=np.int64)

    stage1_spec = spec.stages[0]
    sizes1 = (
        level_covariate(frame, first_level, stage1_spec.size_measure).loc[ids1]
        if stage1_spec.method == "pps"
        else None
    )
    parts = []
    for label in sorted(strata.unique()):
        members = strata.index[strata == label].to_numpy()
        sz = sizes1.loc[members].to_numpy() if sizes1 is not None else None
        parts.append(
            _pool_probabilities(members, sz, stage1_spec, f"stratum {label}")
        )
    stage1 = pd.concat(parts).sort_index()

    stage2 = stage3 = None
    if spec.design == "three_level":
        stage2 = _within_pools(
            frame, spec.stages[1], frame.subsidiaries, "parent_id", "subsidiary"
        )
        stage3 = _within_pools(
            frame,
            spec.stages[2],
            frame.practices[frame.practices["os_id"] >= 0],
            "os_id",
            "practice",
        )
    elif spec.design == "two_level":
        stage2 = _within_pools(
            frame,
            spec.stages[1],
            frame.practices[frame.practices["os_id"] >= 0],
            "os_id",
            "practice",
        )
    return StageProbabilities(spec.design, strata, stage1, stage2, stage3)


def _within_pools(
    frame: Frame,
    stage: StageSpec,
    units: pd.DataFrame,
    group_col: str,
    level: str,
) -> pd.Series:
    sizes = (
        level_covariate(frame, level, stage.size_measure)
        if stage.method == "pps"
        else None
    )
    parts = []
    for group, chunk in units.groupby(group_col):
        ids = np.sort(chunk["id"].to_numpy())
        sz = sizes.loc[ids].to_numpy() if sizes is not None else None
        parts.append(
            _pool_probabilities(
                ids, sz, stage, f"{group_col}={group} pool", take_all_ok=True
            )
        )
    if not parts:
        return pd.Series(dtype=float)
    return pd.concat(parts).sort_index()


@dataclass(frozen=True)
class SampleDraw:
    """One realized sample with probabilities and design weights.

    ``table`` has one row per selected practice: practice_id, pi1, pi2,
    pi3, pi_final, weight, psu_id, stratum. Stages absent from the design
    carry pi = 1. ``weight`` is 1 / pi_final.
    """

    table: pd.DataFrame
    design: str
    selected_parents: np.ndarray
    selected_subsidiaries: np.ndarray

    @property
    def selected_practice_ids(self) -> np.ndarray:
        return self.table["practice_id"].to_numpy()


def _draw_pool(rng: np.random.Generator, probs: pd.Series, n: int) -> np.ndarray:
    """Draw n units honoring the given inclusion probabilities.

    Equal probabilities use a uniform without-replacement draw. Unequal
    (PPS) probabilities use randomized-order systematic selection, whose
    first-order inclusion probabilities match exactly.
    """
    ids = probs.index.to_numpy()
    p = probs.to_numpy()
    certain = p >= 1.0 - 1e-12
    chosen = [ids[certain]]
    n_left = min(n, len(ids)) - int(certain.sum())
    if n_left > 0:
        pool_ids = ids[~certain]
        pool_p = p[~certain]
        if np.allclose(pool_p, pool_p[0]):
            chosen.append(rng.choice(pool_ids, size=n_left, replace=False))
        else:
            order = rng.permutation(len(pool_ids))
            cum = np.cumsum(pool_p[order])
            start = rng.uniform(0.0, 1.0)
            marks = start + np.arange(n_left)
            idx = np.searchsorted(cum, marks, side="left")
            chosen.append(pool_ids[order][np.clip(idx, 0, len(pool_ids) - 1)])
    return np.sort(np.concatenate(chosen))


def draw_sample(frame: Frame, spec: DesignSpec, seed: int) -> SampleDraw:
    """Stage-by-stage draw; deterministic given (frame, spec, seed)."""
    probs = compute_stage_probabilities(frame, spec)
    rng = np.random.default_rng(seed)
    levels = spec.stage_levels

    strata = probs.strata
    stage1_sel = []
    for label in sorted(strata.unique()):
        members = strata.index[strata == label].to_numpy()
        stage1_sel.append(
            _draw_pool(rng, probs.stage1.loc[np.sort(members)], spec.stages[0].sample_size)
        )
    stage1_sel = np.sort(np.concatenate(stage1_sel))

    if spec.design == "single_level":
        prac_ids = stage1_sel
        pi1 = probs.stage1.loc[prac_ids].to_numpy()
        pi2 = np.ones_like(pi1)
        pi3 = np.ones_like(pi1)
        psu = prac_ids
        strat = strata.loc[prac_ids].to_numpy()
        sel_parents = _ancestors(frame, prac_ids, "parent_id")
        sel_subs = _ancestors(frame, prac_ids, "os_id")
    elif spec.design == "two_level":
        sel_subs = stage1_sel
        prac_ids, pools = _draw_within(
            rng, frame.practices[frame.practices["os_id"] >= 0], "os_id",
            sel_subs, probs.stage2, spec.stages[1].sample_size,
        )
        pi1 = _map_through(frame, prac_ids, "os_id", probs.stage1)
        pi2 = probs.stage2.loc[prac_ids].to_numpy()
        pi3 = np.ones_like(pi1)
        psu = frame.practices.set_index("id").loc[prac_ids, "os_id"].to_numpy()
        strat = strata.loc[psu].to_numpy()
        sel_parents = _ancestors(frame, prac_ids, "parent_id")
    else:
        sel_parents = stage1_sel
        sel_subs, _ = _draw_within(
            rng, frame.subsidiaries, "parent_id",
            sel_parents, probs.stage2, spec.stages[1].sample_size,
        )
        prac_ids, _ = _draw_within(
            rng, frame.practices[frame.practices["os_id"] >= 0], "os_id",
            sel_subs, probs.stage3, spec.stages[2].sample_size,
        )
        prac_index = frame.practices.set_index("id")
        os_of = prac_index.loc[prac_ids, "os_id"].to_numpy()
        parent_of = prac_index.loc[prac_ids, "parent_id"].to_numpy()
        pi1 = probs.stage1.loc[parent_of].to_numpy()
        pi2 = probs.stage2.loc[os_of].to_numpy()
        pi3 = probs.stage3.loc[prac_ids].to_numpy()
        psu = parent_of
        strat = strata.loc[parent_of].to_numpy()

    pi_final = pi1 * pi2 * pi3
    table = pd.DataFrame(
        {
            "practice_id": prac_ids,
            "pi1": pi1,
            "pi2": pi2,
            "pi3": pi3,
            "pi_final": pi_final,
            "weight": 1.0 / pi_final,
            "psu_id": psu,
            "stratum": strat,
        }
    )
    return SampleDraw(table, spec.design, np.asarray(sel_parents), np.asarray(sel_subs))


def _draw_within(rng, units, group_col, selected_groups, cond_probs, n):
    chosen = []
    for group in np.sort(np.asarray(selected_groups)):
        ids = np.sort(units.loc[units[group_col] == group, "id"].to_numpy())
        chosen.append(_draw_pool(rng, cond_probs.loc[ids], n))
    ids = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    return ids, None


def _map_through(frame, prac_ids, col, series):
    keys = frame.practices.set_index("id").loc[prac_ids, col].to_numpy()
    return series.loc[keys].to_numpy()


def _ancestors(frame, prac_ids, col):
    vals = frame.practices.set_index("id").loc[prac_ids, col].to_numpy()
    return np.unique(vals[vals >= 0])


def poisson_sample(frame: Frame, probabilities: pd.Series, seed: int) -> SampleDraw:
    """Sample from externally supplied per-practice probabilities.

    Escape hatch for probability maps produced outside the two built-in
    stage methods: each practice enters independently with its stated
    probability (Poisson sampling), so weights remain 1/pi. Practices act
    as their own PSUs within a single stratum.
    """
    p = probabilities.sort_index()
    if ((p <= 0) | (p > 1)).any():
        raise DesignError("external probabilities must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    keep = rng.uniform(size=len(p)) < p.to_numpy()
    ids = p.index.to_numpy()[keep]
    pi = p.to_numpy()[keep]
    table = pd.DataFrame(
        {
            "practice_id": ids,
            "pi1": pi,
            "pi2": np.ones_like(pi),
            "pi3": np.ones_like(pi),
            "pi_final": pi,
            "weight": 1.0 / pi,
            "psu_id": ids,
            "stratum": np.zeros(len(ids), dtype=np.int64),
        }
    )
    return SampleDraw(
        table,
        "single_level",
        _ancestors(frame, ids, "parent_id"),
        _ancestors(frame, ids, "os_id"),
    )


_CSV_COLS = ["practice_id", "pi1", "pi2", "pi3", "pi_final", "weight"]


def write_sample_draw(draw: SampleDraw, path) -> None:
    draw.table[_CSV_COLS].to_csv(Path(path), index=False)


def read_sample_draw(path, frame: Frame, spec: DesignSpec) -> SampleDraw:
    """Reload a draw; PSU and stratum are reconstructed from the design."""
    table = pd.read_csv(Path(path))
    probs = compute_stage_probabilities(frame, spec)
    prac_index = frame.practices.set_index("id")
    ids = table["practice_id"].to_numpy()
    if spec.design == "single_level":
        psu = ids
    elif spec.design == "two_level":
        psu = prac_index.loc[ids, "os_id"].to_numpy()
    else:
        psu = prac_index.loc[ids, "parent_id"].to_numpy()
    table["psu_id"] = psu
    table["stratum"] = probs.strata.loc[psu].to_numpy()
    return SampleDraw(
        table,
        spec.design,
        _ancestors(frame, ids, "parent_id"),
        _ancestors(frame, ids, "os_id"),
    )
