"""Pointwise learning-to-rank with a gradient-boosted tree classifier.

Trees are grown depth-first with exact greedy split search over presorted
feature columns; leaves take the Newton step of the logistic loss. Split
gain ties go to the lowest feature index, then the lowest threshold, so a
fixed seed gives an identical ensemble.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data_model import Session, SessionDataset
from .errors import ConfigError, CorruptModelError, VersionMismatchError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    subsample: float = 1.0
    seed: int = 0
    l2_reg: float = 1.0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.max_depth < 1:
            raise ConfigError(f"max_depth must be >= 1, got {self.max_depth}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ConfigError("subsample must be in (0, 1]")
        if self.l2_reg < 0:
            raise ConfigError("l2_reg must be >= 0")


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat binary tree; node 0 is the root and ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[node] >= 0
        while active.any():
            r = rows[active]
            n = node[r]
            go_left = X[r, self.feature[n]] <= self.threshold[n]
            node[r] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("feature", "threshold", "left", "right", "value")
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=np.float64),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["value"], dtype=np.float64),
        )


@dataclass(frozen=True, eq=False)
class GbtModel:
    trees: tuple[Tree, ...]
    base_score: float
    learning_rate: float
    n_features: int
    schema_hash: str = ""
    loss_trace: tuple[float, ...] = field(default=(), compare=False)

    def __eq__(self, other):
        if not isinstance(other, GbtModel):
            return NotImplemented
        return (
            self.trees == other.trees
            and self.base_score == other.base_score
            and self.learning_rate == other.learning_rate
            and self.n_features == other.n_features
            and self.schema_hash == other.schema_hash
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "gbt",
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "schema_hash": self.schema_hash,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbtModel":
        if not isinstance(d, dict) or "format_version" not in d:
            raise CorruptModelError("ranker JSON lacks format_version")
        if d["format_version"] != FORMAT_VERSION:
            raise VersionMismatchError(
                f"ranker format_version {d['format_version']!r} is not supported (expected {FORMAT_VERSION})"
            )
        try:
            trees = tuple(Tree.from_dict(t) for t in d["trees"])
            model = cls(trees, float(d["base_score"]), float(d["learning_rate"]), int(d["n_features"]),
                        str(d.get("schema_hash", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptModelError(f"malformed ranker JSON: {exc}") from None
        for t in trees:
            if np.any(t.feature >= model.n_features) or not np.all(np.isfinite(t.value)):
                raise CorruptModelError("ranker tree references a bad feature or has non-finite leaves")
        return model


def log_loss(y: np.ndarray, margin: np.ndarray) -> float:
    # log(1 + exp(-m)) for y=1, log(1 + exp(m)) for y=0
    signed = np.where(y == 1, -margin, margin)
    return float(np.mean(np.logaddexp(0.0, signed)))


class _TreeBuilder:
    def __init__(self, X, cfg):
        self.X = X
        self.cols = np.ascontiguousarray(X.T)
        self.cfg = cfg
        self.order = [np.argsort(self.cols[f], kind="stable") for f in range(X.shape[1])]

    def build(self, g, h, rows_mask):
        self.g, self.h = g, h
        self.nodes = []  # [feature, threshold, left, right, value]
        sorted_lists = [o[rows_mask[o]] for o in self.order]
        self._grow(sorted_lists, depth=0)
        cols = list(zip(*self.nodes))
        return Tree(
            np.array(cols[0], dtype=np.int64),
            np.array(cols[1], dtype=np.float64),
            np.array(cols[2], dtype=np.int64),
            np.array(cols[3], dtype=np.int64),
            np.array(cols[4], dtype=np.float64),
        )

    def _best_split(self, lists):
        cfg = self.cfg
        lam = cfg.l2_reg
        min_leaf = cfg.min_samples_leaf
        rows = lists[0]
        m = rows.size
        G = float(np.sum(self.g[rows]))
        H = float(np.sum(self.h[rows]))
        parent = G * G / (H + lam)
        best = (0.0, -1, 0.0, -1)  # gain, feature, threshold, split position
        if m < 2 * min_leaf:
            return best, G, H
        for f, r in enumerate(lists):
            v = self.cols[f][r]
            lo, hi = min_leaf - 1, m - min_leaf
            valid = v[lo:hi] < v[lo + 1:hi + 1]
            if not valid.any():
                continue
            pos = np.flatnonzero(valid) + lo
            GL = np.cumsum(self.g[r])[pos]
            HL = np.cumsum(self.h[r])[pos]
            GR, HR = G - GL, H - HL
            gain = GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent
            i = int(np.argmax(gain))
            if gain[i] > best[0] + 1e-12:
                a, b = v[pos[i]], v[pos[i] + 1]
                thr = a + (b - a) / 2.0
                if not thr < b:
                    thr = a
                best = (float(gain[i]), f, float(thr), int(pos[i]))
        return best, G, H

    def _leaf(self, G, H):
        value = -G / (H + self.cfg.l2_reg) if H + self.cfg.l2_reg > 0 else 0.0
        self.nodes.append([-1, 0.0, -1, -1, value])
        return len(self.nodes) - 1

    def _grow(self, lists, depth):
        (gain, f, thr, _), G, H = (
            self._best_split(lists) if depth < self.cfg.max_depth else ((0.0, -1, 0.0, -1), None, None)
        )
        if G is None:
            rows = lists[0]
            G, H = float(np.sum(self.g[rows])), float(np.sum(self.h[rows]))
        if f < 0:
            return self._leaf(G, H)
        idx = len(self.nodes)
        self.nodes.append([f, thr, -1, -1, 0.0])
        goes_left = np.zeros(self.X.shape[0], dtype=bool)
        rows = lists[f]
        goes_left[rows] = self.cols[f][rows] <= thr
        left_lists = [r[goes_left[r]] for r in lists]
        right_lists = [r[~goes_left[r]] for r in lists]
        self.nodes[idx][2] = self._grow(left_lists, depth + 1)
        self.nodes[idx][3] = self._grow(right_lists, depth + 1)
        return idx


def train_gbt(X, y, cfg: TrainConfig = TrainConfig(), schema_hash: str = "") -> GbtModel:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y disagree on row count")
    if not np.all(np.isfinite(X)):
        raise ValueError("training features must be finite")
    rate = float(np.mean(y)) if y.size else 0.0
    if not 0.0 < rate < 1.0:
        raise ValueError("training data must contain both positive and negative labels")
    base = math.log(rate / (1.0 - rate))
    rng = np.random.default_rng(cfg.seed)
    builder = _TreeBuilder(X, cfg)
    margin = np.full(y.shape[0], base)
    trees = []
    losses = [log_loss(y, margin)]
    n = y.shape[0]
    all_rows = np.ones(n, dtype=bool)
    for _ in range(cfg.n_trees):
        p = expit(margin)
        g = p - y
        h = p * (1.0 - p)
        if cfg.subsample < 1.0:
            mask = np.zeros(n, dtype=bool)
            mask[rng.choice(n, size=max(1, int(round(cfg.subsample * n))), replace=False)] = True
        else:
            mask = all_rows
        tree = builder.build(g, h, mask)
        trees.append(tree)
        margin = margin + cfg.learning_rate * tree.predict(X)
        losses.append(log_loss(y, margin))
    return GbtModel(tuple(trees), base, float(cfg.learning_rate), X.shape[1], schema_hash, tuple(losses))


def train_pointwise(ds: SessionDataset, cfg: TrainConfig = TrainConfig()) -> GbtModel:
    """Fit the classifier on every (item, label) row of ``ds``, sessions pooled."""
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    return train_gbt(ds.X, ds.y, cfg, schema_hash=ds.schema.fingerprint())


def margin(model: GbtModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    rows = X.reshape(1, -1) if single else X
    if rows.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {rows.shape[1]}")
    out = np.full(rows.shape[0], model.base_score)
    for t in model.trees:
        out = out + model.learning_rate * t.predict(rows)
    return out


def score(model: GbtModel, x):
    """Predicted probability that an item is the one transacted."""
    s = expit(margin(model, x))
    return float(s[0]) if np.ndim(x) == 1 else s


def rank_session(model: GbtModel, session: Session) -> np.ndarray:
    """Item indices best-first; equal scores keep their original order."""
    s = score(model, session.features)
    return np.argsort(-np.atleast_1d(s), kind="stable")
