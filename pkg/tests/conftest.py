import numpy as np
import pandas as pd
import pytest

from surveysim.frame import Frame, GeneratorConfig


def toy_frame(
    n_parents=2,
    subs_per_parent=2,
    practices_per_sub=2,
    n_independent=0,
    outcomes=None,
    npcp=None,
):
    """Hand-built frame with a regular hierarchy for design tests."""
    n_subs = n_parents * subs_per_parent
    n_owned = n_subs * practices_per_sub
    n_prac = n_owned + n_independent
    parents = pd.DataFrame(
        {
            "id": np.arange(n_parents, dtype=np.int64),
            "nach": np.arange(1, n_parents + 1, dtype=np.int64),
            "nmg": np.ones(n_parents, dtype=np.int64),
            "nos": np.full(n_parents, subs_per_parent, dtype=np.int64),
            "pertot": np.full(n_parents, 0.5),
        }
    )
    subsidiaries = pd.DataFrame(
        {
            "id": np.arange(n_subs, dtype=np.int64),
            "parent_id": np.repeat(np.arange(n_parents), subs_per_parent).astype(np.int64),
            "latent_trait": np.zeros(n_subs),
        }
    )
    os_id = np.concatenate(
        [np.repeat(np.arange(n_subs), practices_per_sub), np.full(n_independent, -1)]
    ).astype(np.int64)
    parent_id = np.where(os_id >= 0, subsidiaries["parent_id"].to_numpy()[np.clip(os_id, 0, None)], -1)
    if outcomes is None:
        outcomes = np.arange(n_prac, dtype=float)
    outcomes = np.asarray(outcomes, dtype=float)
    if npcp is None:
        npcp = np.full(n_prac, 4, dtype=np.int64)
    practices = pd.DataFrame(
        {
            "id": np.arange(n_prac, dtype=np.int64),
            "os_id": os_id,
            "parent_id": parent_id.astype(np.int64),
            "np": np.asarray(npcp) + 2,
            "npcp": np.asarray(npcp, dtype=np.int64),
            "tin": [f"T{i:06d}" for i in range(n_prac)],
            "y0": outcomes,
        }
    )
    config = GeneratorConfig(
        n_parents=n_parents,
        mean_subsidiaries_per_parent=float(subs_per_parent),
        mean_practices_per_subsidiary=float(max(practices_per_sub, 1)),
        n_independent_practices=n_independent,
        outcome_count=1,
    )
    return Frame(parents, subsidiaries, practices, config, seed=0)


@pytest.fixture
def small_generated_frame():
    from surveysim.frame import generate_frame

    config = GeneratorConfig(
        n_parents=12,
        mean_subsidiaries_per_parent=2.0,
        mean_practices_per_subsidiary=4.0,
        n_independent_practices=20,
        outcome_count=2,
        cluster_icc=0.3,
        covariate_outcome_corr=0.3,
    )
    return generate_frame(config, seed=202)
