"""scikit-learn compatible wrappers.

``AuPartitioner`` is a stateless transformer from an ``(n, 24)`` density
matrix to named observations. ``ExpCotEngine`` runs the generation engine as
``fit(X, y)`` and exposes the outcomes as fitted attributes, so the engine can
sit in a grid search over ``threshold``/``max_rounds`` and be cloned like
any other estimator. ``ExpCotScorer`` wraps the CoT metric.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .au import N_AUS, AuNameTable, AuVector, default_name_table, partition
from .cot import ExpressionLabel, get_profile, normalize_label
from .gateway import Gateway
from .pipeline import ExpCotPipeline, PipelinePolicy, SampleInput
from .scoring import ComponentMeans, CotJudge, aggregate, score_pairs


def check_au_matrix(X) -> np.ndarray:
    """Validate an AU density matrix: 2-D, 24 columns, finite, within [0, 1]."""
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if X.shape[1] != N_AUS:
        raise ValueError(f"expected {N_AUS} AU columns, got {X.shape[1]}")
    if (X < 0).any() or (X > 1).any():
        raise ValueError("AU densities must lie in [0, 1]")
    return X


def check_labels(y, n_samples: int, profile) -> list[ExpressionLabel]:
    """Normalise a label vector and check it against the profile."""
    labels = [normalize_label(v) for v in np.asarray(y, dtype=object).ravel()]
    if len(labels) != n_samples:
        raise ValueError(f"y has {len(labels)} labels for {n_samples} samples")
    profile = get_profile(profile)
    outside = sorted({l.value for l in labels if l not in profile})
    if outside:
        raise ValueError(f"labels {outside} are not in profile {profile.name!r}")
    return labels


class AuPartitioner(TransformerMixin, BaseEstimator):
    def __init__(self, name_table: AuNameTable | None = None):
        self.name_table = name_table

    def fit(self, X, y=None):
        X = check_au_matrix(X)
        self.n_features_in_ = X.shape[1]
        self.table_ = (self.name_table or default_name_table()).check_total()
        return self

    def transform(self, X):
        check_is_fitted(self, "table_")
        X = check_au_matrix(X)
        return [partition(AuVector(tuple(row)), self.table_) for row in X]


class ExpCotEngine(BaseEstimator):
    """Generate verified CoTs for AU rows ``X`` with ground-truth labels ``y``.

    After ``fit``: ``outcomes_`` (one per row), ``cots_`` (CotRecord or
    None) and ``report_``.
    """

    def __init__(self, gateway: Gateway | None = None, threshold: int = 3, max_rounds: int = 6,
                 parallelism: int = 1, profile: str = "affectnet8", name_table: AuNameTable | None = None):
        self.gateway = gateway
        self.threshold = threshold
        self.max_rounds = max_rounds
        self.parallelism = parallelism
        self.profile = profile
        self.name_table = name_table

    def fit(self, X, y, sample_ids=None, dataset: str | None = None):
        if self.gateway is None:
            raise ValueError("ExpCotEngine needs a gateway")
        X = check_au_matrix(X)
        labels = check_labels(y, X.shape[0], self.profile)
        ids = list(sample_ids) if sample_ids is not None else [f"s{i:06d}" for i in range(X.shape[0])]
        if len(ids) != X.shape[0]:
            raise ValueError("sample_ids length does not match X")
        policy = PipelinePolicy(self.threshold, self.max_rounds, self.parallelism)
        pipeline = ExpCotPipeline(self.gateway, policy=policy, name_table=self.name_table,
                                  default_profile=self.profile)
        samples = [SampleInput(sid, lab, dataset or self.profile, AuVector(tuple(row)))
                   for sid, lab, row in zip(ids, labels, X)]
        self.report_ = pipeline.run_batch(samples)
        self.outcomes_ = self.report_.outcomes
        self.cots_ = [o.final_cot for o in self.outcomes_]
        self.n_features_in_ = X.shape[1]
        return self

    def fit_transform(self, X, y, **fit_params):
        return self.fit(X, y, **fit_params).cots_


class ExpCotScorer(BaseEstimator):
    """Mean CoT score of predicted records against references."""

    def __init__(self, gateway: Gateway | None = None, parallelism: int = 1):
        self.gateway = gateway
        self.parallelism = parallelism

    def fit(self, X=None, y=None):
        return self

    def score_components(self, preds, refs) -> ComponentMeans:
        if len(preds) != len(refs):
            raise ValueError("preds and refs differ in length")
        pairs = [(f"s{i:06d}", p, r) for i, (p, r) in enumerate(zip(preds, refs))]
        report = score_pairs(pairs, CotJudge(self.gateway), self.parallelism)
        if report.failures:
            raise RuntimeError(f"{len(report.failures)} pair(s) could not be judged: {report.failures}")
        self.report_ = report
        return report.means

    def score(self, preds, refs) -> float:
        return aggregate(self.score_components(preds, refs))
