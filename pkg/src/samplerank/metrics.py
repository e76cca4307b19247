"""Offline ranking metrics: pooled AUC, session NDCG, and top-k goal-feature means."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data_model import SessionDataset
from .errors import ConfigError
from .ranker import GbtModel, score

DEFAULT_K_GRID = (1, 2, 3, 4, 8, 12, 16, 20)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    # midranks are multiples of 1/2, so the U statistic is exact in float64
    ranks = rankdata(scores, method="average")
    u = float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def session_scores(model: GbtModel, ds: SessionDataset) -> np.ndarray:
    return np.atleast_1d(score(model, ds.X))


def positive_ranks(ds: SessionDataset, scores: np.ndarray) -> np.ndarray:
    """1-based rank of each session's positive after a stable score-descending sort."""
    out = np.empty(len(ds), dtype=np.int64)
    for i, s in enumerate(ds.sessions):
        lo, hi = ds.offsets[i], ds.offsets[i + 1]
        order = np.argsort(-scores[lo:hi], kind="stable")
        out[i] = int(np.flatnonzero(order == s.positive_index)[0]) + 1
    return out


def ndcg_from_ranks(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    return float(np.mean(1.0 / np.log2(1.0 + ranks)))


def ndcg(model: GbtModel, ds: SessionDataset, scores: np.ndarray | None = None) -> float:
    """Mean over sessions of 1/log2(1 + rank of the positive); the ideal DCG is 1."""
    if scores is None:
        scores = session_scores(model, ds)
    return ndcg_from_ranks(positive_ranks(ds, scores))


def topk_feature_means(
    model: GbtModel,
    ds: SessionDataset,
    features: Sequence[str],
    ks: Sequence[int] = DEFAULT_K_GRID,
    scores: np.ndarray | None = None,
) -> dict[str, dict[int, float]]:
    """Mean raw value of each named feature over each session's top-k items, averaged across sessions."""
    cols = [ds.schema.index_of(f) for f in features]
    ks = [int(k) for k in ks]
    if any(k < 1 for k in ks):
        raise ConfigError("every k must be >= 1")
    if scores is None:
        scores = session_scores(model, ds)
    sums = np.zeros((len(cols), len(ks)))
    for i in range(len(ds)):
        lo, hi = ds.offsets[i], ds.offsets[i + 1]
        order = np.argsort(-scores[lo:hi], kind="stable")
        vals = ds.X[lo:hi][order][:, cols]
        csum = np.cumsum(vals, axis=0)
        m = hi - lo
        for j, k in enumerate(ks):
            kk = min(k, m)
            sums[:, j] += csum[kk - 1] / kk
    means = sums / len(ds)
    return {f: {k: float(means[a, j]) for j, k in enumerate(ks)} for a, f in enumerate(features)}


@dataclass
class EvalReport:
    auc: float
    ndcg: float
    topk_means: dict[str, dict[int, float]] = field(default_factory=dict)
    n_sessions: int = 0
    n_examples: int = 0

    @property
    def k_grid(self) -> list[int]:
        first = next(iter(self.topk_means.values()), {})
        return list(first)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "ndcg": self.ndcg,
            "topk_means": {f: {str(k): v for k, v in row.items()} for f, row in self.topk_means.items()},
            "n_sessions": self.n_sessions,
            "n_examples": self.n_examples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        topk = {f: {int(k): float(v) for k, v in row.items()} for f, row in d["topk_means"].items()}
        return cls(float(d["auc"]), float(d["ndcg"]), topk, int(d.get("n_sessions", 0)), int(d.get("n_examples", 0)))


def evaluate(
    model: GbtModel, ds: SessionDataset, features: Sequence[str], ks: Sequence[int] = DEFAULT_K_GRID
) -> EvalReport:
    scores = session_scores(model, ds)
    return EvalReport(
        auc=auc(scores, ds.y),
        ndcg=ndcg(model, ds, scores),
        topk_means=topk_feature_means(model, ds, features, ks, scores),
        n_sessions=len(ds),
        n_examples=ds.n_examples,
    )


@dataclass
class DeltaReport:
    auc: float
    ndcg: float
    topk: dict[str, dict[int, float]]

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "ndcg": self.ndcg,
            "topk": {f: {str(k): v for k, v in row.items()} for f, row in self.topk.items()},
        }


def incremental(variant: EvalReport, baseline: EvalReport) -> DeltaReport:
    """Variant minus baseline, cell by cell."""
    if list(variant.topk_means) != list(baseline.topk_means):
        raise ConfigError("reports cover different feature lists")
    for f in variant.topk_means:
        if list(variant.topk_means[f]) != list(baseline.topk_means[f]):
            raise ConfigError(f"reports use different k grids for feature {f!r}")
    topk = {
        f: {k: variant.topk_means[f][k] - baseline.topk_means[f][k] for k in row}
        for f, row in variant.topk_means.items()
    }
    return DeltaReport(variant.auc - baseline.auc, variant.ndcg - baseline.ndcg, topk)
