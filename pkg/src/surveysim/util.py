"""Small shared helpers: stable seeding and ICC estimation."""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts) -> int:
    """Derive a reproducible 63-bit seed from arbitrary labelled parts.

    Unlike ``hash()``, this is stable across processes and sessions, so
    replicate seeds recorded in manifests can re-run a study exactly.
    """
    key = "|".join(str(p) for p in parts).encode()
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def anova_icc(values, groups) -> float:
    """One-way ANOVA estimator of the intraclass correlation.

    ``groups`` labels the cluster of each value; singleton and empty
    clusters contribute to the mean squares like any other. Returns the
    usual (MSB - MSW) / (MSB + (n0 - 1) MSW) estimate with the
    unequal-cluster-size correction for n0.
    """
    values = np.asarray(values, dtype=float)
    groups = np.asarray(groups)
    labels, counts = np.unique(groups, return_counts=True)
    n_total = values.size
    k = labels.size
    if k < 2 or n_total <= k:
        raise ValueError("ICC needs at least 2 clusters and more values than clusters")

    grand = values.mean()
    ss_between = 0.0
    ss_within = 0.0
    for lab, n_c in zip(labels, counts):
        vals = values[groups == lab]
        m = vals.mean()
        ss_between += n_c * (m - grand) ** 2
        ss_within += ((vals - m) ** 2).sum()

    msb = ss_between / (k - 1)
    msw = ss_within / (n_total - k)
    n0 = (n_total - (counts**2).sum() / n_total) / (k - 1)
    return float((msb - msw) / (msb + (n0 - 1) * msw))


def lag1_autocorr(trace) -> float:
    """Lag-1 autocorrelation of a 1-D chain trace (0 for flat traces)."""
    x = np.asarray(trace, dtype=float)
    if x.size < 3:
        return 0.0
    x = x - x.mean()
    denom = (x**2).sum()
    if denom <= 0:
        return 0.0
    return float((x[1:] * x[:-1]).sum() / denom)
