import numpy as np
import pandas as pd
import pytest

from surveysim.errors import ConfigError
from surveysim.frame import (
    FRAME_COVARIATES,
    GeneratorConfig,
    generate_frame,
    level_covariate,
    population_mean,
    read_frame,
    write_frame,
)

from conftest import toy_frame


def anova_icc_oracle(values, groups):
    """Independent one-way ANOVA ICC, written via pandas groupby."""
    df = pd.DataFrame({"y": values, "g": groups})
    k = df["g"].nunique()
    n = len(df)
    grand = df["y"].mean()
    counts = df.groupby("g")["y"].count()
    means = df.groupby("g")["y"].mean()
    msb = (counts * (means - grand) ** 2).sum() / (k - 1)
    msw = ((df["y"] - df["g"].map(means)) ** 2).sum() / (n - k)
    n0 = (n - (counts**2).sum() / n) / (k - 1)
    return (msb - msw) / (msb + (n0 - 1) * msw)


def test_degenerate_sizes():
    config = GeneratorConfig(
        n_parents=1,
        mean_subsidiaries_per_parent=0.0,
        mean_practices_per_subsidiary=1.0,
        n_independent_practices=5,
    )
    frame = generate_frame(config, seed=1)
    assert len(frame.parents) == 1
    assert len(frame.subsidiaries) == 0
    assert frame.n_practices == 5
    assert (frame.practices["os_id"] == -1).all()


def test_determinism_bit_identical(tmp_path):
    config = GeneratorConfig(
        n_parents=15,
        mean_subsidiaries_per_parent=1.5,
        mean_practices_per_subsidiary=3.0,
        n_independent_practices=10,
        outcome_count=2,
    )
    a = generate_frame(config, seed=99)
    b = generate_frame(config, seed=99)
    pd.testing.assert_frame_equal(a.parents, b.parents)
    pd.testing.assert_frame_equal(a.subsidiaries, b.subsidiaries)
    pd.testing.assert_frame_equal(a.practices, b.practices)

    write_frame(a, tmp_path / "fa")
    write_frame(b, tmp_path / "fb")
    for name in ("parents.csv", "subsidiaries.csv", "practices.csv"):
        assert (tmp_path / "fa" / name).read_bytes() == (tmp_path / "fb" / name).read_bytes()


def test_different_seed_differs():
    config = GeneratorConfig(
        n_parents=15,
        mean_subsidiaries_per_parent=1.5,
        mean_practices_per_subsidiary=3.0,
        n_independent_practices=10,
    )
    a = generate_frame(config, seed=1)
    b = generate_frame(config, seed=2)
    assert not a.practices["y0"].equals(b.practices["y0"])


def test_icc_calibration():
    config = GeneratorConfig(
        n_parents=500,
        mean_subsidiaries_per_parent=2.0,
        mean_practices_per_subsidiary=10.0,
        n_independent_practices=0,
        outcome_count=1,
        cluster_icc=0.3,
    )
    frame = generate_frame(config, seed=7)
    assert frame.n_practices >= 5000
    icc = anova_icc_oracle(frame.practices["y0"], frame.practices["os_id"])
    assert 0.25 <= icc <= 0.35


def test_covariate_correlation_calibration():
    config = GeneratorConfig(
        n_parents=300,
        mean_subsidiaries_per_parent=2.0,
        mean_practices_per_subsidiary=9.0,
        n_independent_practices=500,
        cluster_icc=0.2,
        covariate_outcome_corr=0.5,
    )
    frame = generate_frame(config, seed=13)
    assert frame.n_practices >= 5000
    corr = np.corrcoef(frame.practices["npcp"], frame.practices["y0"])[0, 1]
    assert abs(corr - 0.5) <= 0.05


def test_population_mean_constant():
    frame = toy_frame(outcomes=np.full(8, 3.25))
    assert population_mean(frame, 0) == 3.25


def test_population_mean_hand():
    frame = toy_frame(n_parents=1, subs_per_parent=1, practices_per_sub=3, outcomes=[0.0, 1.0, 2.0])
    assert population_mean(frame, 0) == 1.0


def test_population_mean_recomputation_oracle(small_generated_frame):
    frame = small_generated_frame
    total = 0.0
    count = 0
    for value in frame.practices["y1"]:
        total += value
        count += 1
    assert population_mean(frame, 1) == pytest.approx(total / count, abs=1e-12)


def test_population_mean_levels():
    # 2 parents x 2 subs x 2 practices; sub means {0.5, 2.5, 4.5, 6.5}
    frame = toy_frame(outcomes=np.arange(8, dtype=float))
    assert population_mean(frame, 0, level="subsidiary") == pytest.approx(3.5)
    assert population_mean(frame, 0, level="parent") == pytest.approx((1.5 + 5.5) / 2)
    # independents excluded at higher levels
    frame2 = toy_frame(n_independent=4, outcomes=np.concatenate([np.arange(8.0), np.full(4, 100.0)]))
    assert population_mean(frame2, 0, level="subsidiary") == pytest.approx(3.5)


def test_population_mean_index_out_of_range(small_generated_frame):
    with pytest.raises(IndexError):
        population_mean(small_generated_frame, 5)


@pytest.mark.parametrize(
    "kwargs, field",
    [
        (dict(n_parents=0), "n_parents"),
        (dict(outcome_count=0), "outcome_count"),
        (dict(cluster_icc=1.0), "cluster_icc"),
        (dict(covariate_outcome_corr=1.0), "covariate_outcome_corr"),
        (dict(mean_subsidiaries_per_parent=-1.0), "mean_subsidiaries_per_parent"),
        (dict(mean_practices_per_subsidiary=0.5), "mean_practices_per_subsidiary"),
        (dict(n_independent_practices=-1), "n_independent_practices"),
        (dict(binary_outcomes={0: 1.5}), "binary_outcomes"),
    ],
)
def test_invalid_config_names_field(kwargs, field):
    base = dict(
        n_parents=5,
        mean_subsidiaries_per_parent=2.0,
        mean_practices_per_subsidiary=3.0,
        n_independent_practices=5,
    )
    base.update(kwargs)
    with pytest.raises(ConfigError, match=field):
        GeneratorConfig(**base).validate()


@pytest.mark.parametrize("seed", [0, 5, 91])
def test_referential_integrity(seed):
    config = GeneratorConfig(
        n_parents=20,
        mean_subsidiaries_per_parent=1.8,
        mean_practices_per_subsidiary=3.0,
        n_independent_practices=15,
    )
    frame = generate_frame(config, seed)
    sub_parents = set(frame.subsidiaries["parent_id"])
    assert sub_parents <= set(frame.parents["id"])
    owned = frame.practices[frame.practices["os_id"] >= 0]
    assert set(owned["os_id"]) <= set(frame.subsidiaries["id"])
    # nos equals realized subsidiary counts
    counts = frame.subsidiaries["parent_id"].value_counts()
    for pid, nos in zip(frame.parents["id"], frame.parents["nos"]):
        assert nos == counts.get(pid, 0)
    # eligibility floor and count ordering
    assert (frame.practices["npcp"] >= 3).all()
    assert (frame.practices["np"] >= frame.practices["npcp"]).all()
    assert frame.practices["tin"].is_unique
    # Table 4 covariates defined and finite for every practice
    for name in FRAME_COVARIATES:
        vals = level_covariate(frame, "practice", name).loc[frame.practices["id"]]
        assert np.isfinite(vals.to_numpy()).all()


def test_binary_outcomes_thresholding():
    config = GeneratorConfig(
        n_parents=100,
        mean_subsidiaries_per_parent=1.0,
        mean_practices_per_subsidiary=20.0,
        n_independent_practices=0,
        outcome_count=2,
        binary_outcomes={1: 0.8},
    )
    frame = generate_frame(config, seed=3)
    vals = frame.practices["y1"].to_numpy()
    assert set(np.unique(vals)) <= {0.0, 1.0}
    assert abs(vals.mean() - 0.8) < 0.03
    # continuous outcome untouched
    assert frame.practices["y0"].nunique() > 10


def test_frame_csv_roundtrip(tmp_path, small_generated_frame):
    write_frame(small_generated_frame, tmp_path)
    loaded = read_frame(tmp_path)
    assert loaded.seed == small_generated_frame.seed
    assert loaded.config == small_generated_frame.config
    pd.testing.assert_frame_equal(
        loaded.practices, small_generated_frame.practices, check_dtype=False
    )
    # serialized columns match the declared field names
    header = (tmp_path / "parents.csv").read_text().splitlines()[0]
    assert header == "id,nach,nmg,nos,pertot"
    header = (tmp_path / "subsidiaries.csv").read_text().splitlines()[0]
    assert header == "id,parent_id,latent_trait"


def test_independent_practice_system_covariates():
    frame = toy_frame(n_independent=3)
    ids = frame.practices.loc[frame.practices["os_id"] == -1, "id"]
    assert (level_covariate(frame, "practice", "nach").loc[ids] == 0).all()
    assert (level_covariate(frame, "practice", "nos").loc[ids] == 0).all()
    assert (level_covariate(frame, "practice", "pertot").loc[ids] == 1.0).all()
