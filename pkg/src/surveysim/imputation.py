"""Joint-model multiple imputation for two-level multivariate data.

A Gibbs sampler for the multivariate random-intercept linear model

    y_i = B' x_i + u_{c(i)} + e_i,   e_i ~ N(0, Sigma_e),  u_c ~ N(0, Sigma_u)

fills missing cells row-wise from their conditional multivariate normal,
so imputations inherit the within-cluster correlation structure. The
two-step procedure first imputes incomplete predictor columns (replacing
each missing predictor cell by the average of its D imputed values) and
then imputes the survey outcomes given the completed predictors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.stats import invwishart

from .claims import TABLE5_COVARIATES
from .errors import ConfigError, DegenerateDesignError, NumericalError
from .frame import FRAME_COVARIATES
from .missingness import StudyDataset
from .util import lag1_autocorr, stable_seed


@dataclass(frozen=True)
class ImputationModelSpec:
    """Columns, chain lengths, and priors for one Gibbs run.

    Priors are inverse-Wishart; leaving them None derives the weakly
    informative default (df = dimension + 1, scale = 0.1 x empirical
    covariance of the observed outcome data). ``n_between`` is the
    thinning interval between retained completed datasets.
    """

    outcome_columns: tuple
    predictor_columns: tuple = ()
    cluster_column: str = "cluster_id"
    n_burn: int = 500
    n_between: int = 100
    D: int = 10
    prior_df_residual: float | None = None
    prior_scale_residual: np.ndarray | None = None
    prior_df_random: float | None = None
    prior_scale_random: np.ndarray | None = None

    def validate(self) -> None:
        if len(self.outcome_columns) < 1:
            raise ConfigError("at least one outcome column is required")
        if self.D < 2:
            raise ConfigError(f"D must be >= 2, got {self.D}")
        if self.n_burn < 1:
            raise ConfigError(f"n_burn must be >= 1, got {self.n_burn}")
        if self.n_between < 1:
            raise ConfigError(f"n_between must be >= 1, got {self.n_between}")
        p = len(self.outcome_columns)
        for name, df, scale in (
            ("residual", self.prior_df_residual, self.prior_scale_residual),
            ("random", self.prior_df_random, self.prior_scale_random),
        ):
            if df is not None and df < p:
                raise ConfigError(f"prior_df_{name} must be >= dimension {p}, got {df}")
            if scale is not None:
                arr = np.asarray(scale, dtype=float)
                if arr.shape != (p, p):
                    raise ConfigError(f"prior_scale_{name} must be {p}x{p}")
                if not np.allclose(arr, arr.T):
                    raise ConfigError(f"prior_scale_{name} must be symmetric")
                if np.linalg.eigvalsh(arr).min() <= 0:
                    raise ConfigError(f"prior_scale_{name} must be positive definite")


@dataclass
class ImputationSet:
    """D completed datasets plus chain diagnostics.

    Observed cells are identical across all D datasets and identical to
    the input; only originally-missing cells vary. Diagnostics summarize
    the retained trace of each tracked parameter (mean, variance, lag-1
    autocorrelation).
    """

    datasets: list
    chain_diagnostics: dict
    seed: int
    dropped_predictors: tuple = ()


def _pd_jitter(mat: np.ndarray) -> np.ndarray:
    """Symmetrize and ridge a covariance until Cholesky succeeds."""
    sym = (mat + mat.T) / 2.0
    scale = max(float(np.trace(sym)) / max(len(sym), 1), 1e-12)
    eps = 1e-10 * scale
    for _ in range(20):
        try:
            cholesky(sym + eps * np.eye(len(sym)), lower=True)
            return sym + eps * np.eye(len(sym))
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise NumericalError("could not make covariance positive definite")


def _empirical_outcome_cov(Y: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Covariance of the observed outcome data, tolerant of missingness."""
    p = Y.shape[1]
    complete = M.all(axis=1)
    if complete.sum() >= p + 2:
        cov = np.cov(Y[complete], rowvar=False, ddof=1)
    else:
        masked = np.ma.masked_array(Y, mask=~M)
        cov = np.ma.cov(masked, rowvar=False, ddof=1).filled(0.0)
    cov = np.atleast_2d(cov)
    if not np.isfinite(cov).all():
        cov = np.zeros((p, p))
    # floor tiny/zero variances so derived priors stay proper
    diag = np.diag(cov).copy()
    floor = max(diag.max(), 1.0) * 1e-8
    np.fill_diagonal(cov, np.maximum(diag, floor))
    return _pd_jitter(cov)


def _drop_collinear(X: np.ndarray, names: list) -> tuple[np.ndarray, list, list]:
    """Remove columns made redundant by exact collinearity (pivoted QR)."""
    from scipy.linalg import qr

    _, R, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps * 100
    keep_piv = sorted(piv[i] for i in range(len(diag)) if diag[i] > tol)
    dropped = [names[j] for j in range(X.shape[1]) if j not in keep_piv]
    return X[:, keep_piv], [names[j] for j in keep_piv], dropped


def _conditional_params(sigma: np.ndarray, obs: np.ndarray, mis: np.ndarray, columns):
    """Regression coefs and Cholesky of the conditional covariance.

    For a row with observed block o and missing block m under
    N(mu, sigma): m | o is normal with coefficient sigma_mo sigma_oo^-1
    and covariance sigma_mm - sigma_mo sigma_oo^-1 sigma_om.
    """
    involved = [columns[j] for j in np.concatenate([obs, mis])]
    try:
        if len(obs):
            coef = cho_solve(cho_factor(sigma[np.ix_(obs, obs)], lower=True), sigma[np.ix_(obs, mis)]).T
            cond = sigma[np.ix_(mis, mis)] - coef @ sigma[np.ix_(obs, mis)]
        else:
            coef = np.zeros((len(mis), 0))
            cond = sigma[np.ix_(mis, mis)]
        chol = cholesky(_pd_jitter(cond), lower=True)
    except (np.linalg.LinAlgError, NumericalError) as exc:
        raise NumericalError(
            f"singular conditional covariance for columns {involved}"
        ) from exc
    return coef, chol


def _build_design(data: StudyDataset, spec: ImputationModelSpec):
    values = data.values
    for col in spec.predictor_columns:
        if col not in values.columns:
            raise ConfigError(f"predictor column {col!r} not in dataset")
        if col in data.mask.columns and not data.mask[col].all():
            raise ConfigError(f"predictor column {col!r} is not fully observed")
        if values[col].isna().any():
            raise ConfigError(f"predictor column {col!r} contains NaN")
    n = len(values)
    cols = [np.ones(n)]
    names = ["(intercept)"]
    for col in spec.predictor_columns:
        raw = values[col].to_numpy(dtype=float)
        sd = raw.std()
        cols.append((raw - raw.mean()) / sd if sd > 0 else np.zeros(n))
        names.append(col)
    X = np.column_stack(cols)
    X, kept, dropped = _drop_collinear(X, names)
    return X, kept, dropped


def gibbs_impute(data: StudyDataset, spec: ImputationModelSpec, seed: int) -> ImputationSet:
    """Run the random-intercept Gibbs sampler and collect D completions.

    Each sweep (a) redraws missing outcome cells from their row-wise
    conditional normal, (b) redraws cluster intercepts, (c) redraws the
    fixed-effect matrix under a flat prior, and (d)-(e) redraws the
    residual and random-intercept covariances from their inverse-Wishart
    full conditionals. After ``n_burn`` sweeps one completed dataset is
    retained every ``n_between`` sweeps until D are collected.
    Deterministic given (data, spec, seed).
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    columns = list(spec.outcome_columns)
    p = len(columns)

    for col in columns:
        if col not in data.values.columns:
            raise ConfigError(f"outcome column {col!r} not in dataset")
        if not data.mask[col].any():
            raise ConfigError(f"outcome column {col!r} has no observed values")

    M = data.mask[columns].to_numpy(dtype=bool)
    Y = data.values[columns].to_numpy(dtype=float).copy()

    codes, _ = pd.factorize(data.values[spec.cluster_column], sort=True)
    n_clusters = int(codes.max()) + 1
    sizes = np.bincount(codes, minlength=n_clusters).astype(float)
    if sizes.max() < 2:
        raise DegenerateDesignError(
            f"cluster column {spec.cluster_column!r} has all-unique values; "
            "the random intercept is unidentifiable"
        )

    X, kept_names, dropped = _build_design(data, spec)
    n, q = X.shape

    xtx = X.T @ X
    try:
        g_chol = cho_factor(xtx, lower=True)
        g_lower = cholesky(xtx, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular design matrix for predictors {kept_names}") from exc

    # priors (derived defaults are scale-aware: 0.1 x empirical covariance)
    emp = _empirical_outcome_cov(Y, M)
    nu_e = spec.prior_df_residual if spec.prior_df_residual is not None else p + 1.0
    S_e0 = (
        np.asarray(spec.prior_scale_residual, dtype=float)
        if spec.prior_scale_residual is not None
        else _pd_jitter(0.1 * emp)
    )
    nu_u = spec.prior_df_random if spec.prior_df_random is not None else p + 1.0
    S_u0 = (
        np.asarray(spec.prior_scale_random, dtype=float)
        if spec.prior_scale_random is not None
        else _pd_jitter(0.1 * emp)
    )

    # starting values: complete-case least squares and empirical moments
    col_means = np.array([Y[M[:, j], j].mean() for j in range(p)])
    for j in range(p):
        Y[~M[:, j], j] = col_means[j]
    complete = M.all(axis=1)
    if complete.sum() >= q + p + 2:
        B, *_ = np.linalg.lstsq(X[complete], Y[complete], rcond=None)
        resid_cc = Y[complete] - X[complete] @ B
        sigma_e = _pd_jitter(np.atleast_2d(np.cov(resid_cc, rowvar=False, ddof=1)))
    else:
        B = np.zeros((q, p))
        B[0] = col_means
        sigma_e = _pd_jitter(emp.copy())
    sigma_u = _pd_jitter(0.1 * sigma_e)
    U = np.zeros((n_clusters, p))

    # rows grouped by missing pattern; patterns never change mid-chain
    patterns: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    if (~M).any():
        pattern_ids = {}
        for i in range(n):
            key = tuple(M[i])
            if not all(key):
                pattern_ids.setdefault(key, []).append(i)
        for key, rows in pattern_ids.items():
            obs = np.flatnonzero(key)
            mis = np.flatnonzero(~np.asarray(key))
            patterns.append((obs, mis, np.asarray(rows)))

    track = {}

    def _record(B, sigma_e, sigma_u):
        for a, name in enumerate(kept_names):
            for b, col in enumerate(columns):
                track.setdefault(f"beta[{name}][{col}]", []).append(B[a, b])
        for b, col in enumerate(columns):
            track.setdefault(f"sigma_e[{col}]", []).append(sigma_e[b, b])
            track.setdefault(f"sigma_u[{col}]", []).append(sigma_u[b, b])

    datasets = []
    total_sweeps = spec.n_burn + spec.D * spec.n_between
    for sweep in range(1, total_sweeps + 1):
        mu = X @ B + U[codes]

        # (a) missing cells from their row-wise conditional normal
        for obs, mis, rows in patterns:
            coef, chol = _conditional_params(sigma_e, obs, mis, columns)
            z = rng.standard_normal((len(rows), len(mis)))
            cond_mean = mu[np.ix_(rows, mis)]
            if len(obs):
                cond_mean = cond_mean + (Y[np.ix_(rows, obs)] - mu[np.ix_(rows, obs)]) @ coef.T
            Y[np.ix_(rows, mis)] = cond_mean + z @ chol.T

        # (b) cluster intercepts from their Gaussian full conditional
        resid = Y - X @ B
        cluster_sums = np.zeros((n_clusters, p))
        np.add.at(cluster_sums, codes, resid)
        try:
            sigma_e_inv = cho_solve(cho_factor(sigma_e, lower=True), np.eye(p))
            sigma_u_inv = cho_solve(cho_factor(sigma_u, lower=True), np.eye(p))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular covariance for columns {columns}") from exc
        for size in np.unique(sizes):
            group = np.flatnonzero(sizes == size)
            if size == 0:
                cov = _pd_jitter(np.linalg.inv(sigma_u_inv))
            else:
                cov = _pd_jitter(np.linalg.inv(sigma_u_inv + size * sigma_e_inv))
            gain = cov @ sigma_e_inv
            means = cluster_sums[group] @ gain.T
            chol = cholesky(cov, lower=True)
            U[group] = means + rng.standard_normal((len(group), p)) @ chol.T

        # (c) fixed effects under a flat prior (matrix-normal draw)
        target = Y - U[codes]
        B_hat = cho_solve(g_chol, X.T @ target)
        z = rng.standard_normal((q, p))
        chol_e = cholesky(_pd_jitter(sigma_e), lower=True)
        B = B_hat + solve_triangular(g_lower.T, z, lower=False) @ chol_e.T

        # (d) residual covariance
        resid = Y - X @ B - U[codes]
        S_e = S_e0 + resid.T @ resid
        sigma_e = np.atleast_2d(invwishart.rvs(df=nu_e + n, scale=_pd_jitter(S_e), random_state=rng))

        # (e) random-intercept covariance
        S_u = S_u0 + U.T @ U
        sigma_u = np.atleast_2d(
            invwishart.rvs(df=nu_u + n_clusters, scale=_pd_jitter(S_u), random_state=rng)
        )

        if sweep > spec.n_burn and (sweep - spec.n_burn) % spec.n_between == 0:
            _record(B, sigma_e, sigma_u)
            completed = data.values.copy()
            completed[columns] = Y
            datasets.append(completed)
            if len(datasets) == spec.D:
                break

    diagnostics = {
        name: {
            "mean": float(np.mean(vals)),
            "variance": float(np.var(vals, ddof=1)) if len(vals) > 1 else 0.0,
            "lag1_autocorr": lag1_autocorr(vals),
        }
        for name, vals in track.items()
    }
    return ImputationSet(datasets, diagnostics, seed, tuple(dropped))


def scenario(name: str) -> tuple[tuple, tuple]:
    """Predictor column sets for the two imputation scenarios.

    MI1 uses the six always-observed frame covariates only; MI2 adds the
    practice-level claims aggregates.
    """
    if name == "MI1":
        return tuple(FRAME_COVARIATES), ()
    if name == "MI2":
        return tuple(FRAME_COVARIATES), tuple(TABLE5_COVARIATES)
    raise ConfigError(f"unknown imputation scenario {name!r}; expected MI1 or MI2")


def two_step_impute(
    data: StudyDataset,
    frame_covariates,
    extra_covariates,
    spec: ImputationModelSpec,
    seed: int,
) -> ImputationSet:
    """Predictor-then-outcome imputation.

    Step 1 treats incomplete extra covariates as outcomes of the joint
    model with the frame covariates as predictors, then replaces each
    missing predictor cell by the average of its D imputed values. Step 2
    imputes the survey outcomes given frame plus completed extra
    covariates. If the extras are already complete, step 1 is a no-op and
    the result equals a direct ``gibbs_impute`` with the combined
    predictor set.
    """
    frame_covariates = tuple(frame_covariates)
    extra_covariates = tuple(extra_covariates)
    for col in frame_covariates:
        if not data.mask[col].all():
            raise ConfigError(f"frame covariate {col!r} must be fully observed")

    incomplete = [c for c in extra_covariates if not data.mask[c].all()]
    full_predictors = frame_covariates + extra_covariates
    if not incomplete:
        return gibbs_impute(data, replace(spec, predictor_columns=full_predictors), seed)

    step1_spec = replace(
        spec,
        outcome_columns=tuple(incomplete),
        predictor_columns=frame_covariates,
        prior_df_residual=None,
        prior_scale_residual=None,
        prior_df_random=None,
        prior_scale_random=None,
    )
    try:
        step1 = gibbs_impute(data, step1_spec, stable_seed(seed, "predictor-step"))
    except Exception as exc:
        raise type(exc)(f"step 1 (predictor imputation): {exc}") from exc

    values = data.values.copy()
    mask = data.mask.copy()
    for col in incomplete:
        missing = ~mask[col].to_numpy()
        stacked = np.stack([ds[col].to_numpy() for ds in step1.datasets])
        values.loc[missing, col] = stacked.mean(axis=0)[missing]
        mask[col] = True
    completed = StudyDataset(
        values=values,
        mask=mask,
        outcome_columns=data.outcome_columns,
        frame_columns=data.frame_columns,
        claims_columns=data.claims_columns,
        level_response=data.level_response,
    )

    try:
        return gibbs_impute(
            completed,
            replace(spec, predictor_columns=full_predictors),
            stable_seed(seed, "outcome-step"),
        )
    except Exception as exc:
        raise type(exc)(f"step 2 (outcome imputation): {exc}") from exc


def write_imputation_set(imputations: ImputationSet, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for d, dataset in enumerate(imputations.datasets, start=1):
        dataset.to_csv(out / f"imputed_{d}.csv", index=False)
    meta = {
        "seed": imputations.seed,
        "dropped_predictors": list(imputations.dropped_predictors),
        "chain_diagnostics": imputations.chain_diagnostics,
    }
    (out / "diagnostics.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_imputation_set(in_dir) -> ImputationSet:
    src = Path(in_dir)
    meta = json.loads((src / "diagnostics.json").read_text())
    datasets = []
    d = 1
    while (src / f"imputed_{d}.csv").exists():
        datasets.append(pd.read_csv(src / f"imputed_{d}.csv"))
        d += 1
    return ImputationSet(
        datasets, meta["chain_diagnostics"], meta["seed"], tuple(meta["dropped_predictors"])
    )
