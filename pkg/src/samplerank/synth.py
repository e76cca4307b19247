"""Synthetic marketplace sessions with a known softmax choice model.

Items are drawn from a correlated Gaussian over the configured features and
clipped to plausible ranges. In each session exactly one item is ordered,
with probability proportional to ``exp(beta . x / temperature)``.

Part of each feature's variance can be shared by all items of a session
(``context_share``): restaurants reachable from one address have similar
ratings and distances, so a session is a draw of a context plus per-item
deviations. Marginal means, sds and correlations stay as configured as long
as correlated features use the same share (enforced).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import softmax

from .data_model import FeatureSchema, Session, SessionDataset
from .errors import ConfigError


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    mean: float
    sd: float
    lower: Optional[float] = None
    upper: Optional[float] = None


DEFAULT_FEATURES = (
    FeatureSpec("item_rating", 4.0, 0.4, 1.0, 5.0),
    FeatureSpec("restaurant_rating", 4.1, 0.35, 1.0, 5.0),
    FeatureSpec("LM", 3.0, 1.2, 0.2, None),
    FeatureSpec("RPO", 250.0, 90.0, 30.0, None),
    FeatureSpec("affinity", 0.0, 1.0),
    FeatureSpec("popularity", 0.0, 1.0),
    FeatureSpec("noise", 0.0, 1.0),
)

# rows/cols follow DEFAULT_FEATURES
DEFAULT_CORRELATION = (
    (1.0, 0.4, 0.0, 0.0, 0.0, 0.0, 0.0),
    (0.4, 1.0, 0.0, 0.1, 0.0, 0.0, 0.0),
    (0.0, 0.0, 1.0, 0.3, 0.0, 0.0, 0.0),
    (0.0, 0.1, 0.3, 1.0, 0.0, 0.0, 0.0),
    (0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0),
    (0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0),
    (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0),
)

DEFAULT_BETA = (1.0, 0.8, -0.4, 0.0, 1.5, 0.6, 0.0)

DEFAULT_CONTEXT_SHARE = (0.6, 0.6, 0.6, 0.6, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SynthConfig:
    n_customers: int = 1500
    sessions_per_customer: int = 4
    items_per_session: tuple[int, int] = (10, 30)
    features: tuple[FeatureSpec, ...] = DEFAULT_FEATURES
    correlation: tuple[tuple[float, ...], ...] = DEFAULT_CORRELATION
    choice_beta: tuple[float, ...] = DEFAULT_BETA
    context_share: tuple[float, ...] = DEFAULT_CONTEXT_SHARE
    temperature: float = 1.5
    seed: int = 0
    goal_features: tuple[str, ...] = ("item_rating", "restaurant_rating")

    def __post_init__(self):
        feats = tuple(f if isinstance(f, FeatureSpec) else FeatureSpec(**f) for f in self.features)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "items_per_session", tuple(int(v) for v in self.items_per_session))
        object.__setattr__(self, "correlation", tuple(tuple(float(v) for v in row) for row in self.correlation))
        object.__setattr__(self, "choice_beta", tuple(float(b) for b in self.choice_beta))
        object.__setattr__(self, "context_share", tuple(float(v) for v in self.context_share))
        object.__setattr__(self, "goal_features", tuple(self.goal_features))
        n = len(feats)
        lo, hi = self.items_per_session
        if lo < 2 or hi < lo:
            raise ConfigError(f"items_per_session must satisfy 2 <= min <= max, got {self.items_per_session}")
        if self.n_customers < 1 or self.sessions_per_customer < 1:
            raise ConfigError("need at least one customer and one session per customer")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if len(self.choice_beta) != n:
            raise ConfigError(f"choice_beta has {len(self.choice_beta)} weights for {n} features")
        if len(self.context_share) != n or any(not 0.0 <= v <= 1.0 for v in self.context_share):
            raise ConfigError(f"context_share needs {n} values in [0, 1]")
        corr = np.array(self.correlation)
        if corr.shape != (n, n):
            raise ConfigError(f"correlation must be {n}x{n}")
        if not np.allclose(corr, corr.T) or not np.allclose(np.diag(corr), 1.0):
            raise ConfigError("correlation must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(corr).min() <= 0:
            raise ConfigError("correlation matrix must be positive-definite")
        share = np.array(self.context_share)
        mixed = (corr != 0) & (share[:, None] != share[None, :])
        if mixed.any():
            i, j = np.argwhere(mixed)[0]
            raise ConfigError(
                f"correlated features {self.features[i].name!r} and {self.features[j].name!r} "
                "must use the same context_share"
            )
        if any(f.sd <= 0 for f in feats):
            raise ConfigError("feature sd must be positive")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    @property
    def schema(self) -> FeatureSchema:
        return FeatureSchema.from_names(self.feature_names, self.goal_features)

    @property
    def covariance(self) -> np.ndarray:
        sd = np.array([f.sd for f in self.features])
        return np.array(self.correlation) * np.outer(sd, sd)

    def to_dict(self) -> dict:
        return {
            "n_customers": self.n_customers,
            "sessions_per_customer": self.sessions_per_customer,
            "items_per_session": list(self.items_per_session),
            "features": [vars(f).copy() for f in self.features],
            "correlation": [list(r) for r in self.correlation],
            "choice_beta": list(self.choice_beta),
            "context_share": list(self.context_share),
            "temperature": self.temperature,
            "seed": self.seed,
            "goal_features": list(self.goal_features),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys {sorted(unknown)}")
        kw = dict(d)
        if "features" in kw:
            kw["features"] = tuple(FeatureSpec(**f) for f in kw["features"])
        return cls(**kw)


def ground_truth_utility(cfg: SynthConfig, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != len(cfg.choice_beta):
        raise ValueError(f"expected {len(cfg.choice_beta)} features, got {x.shape[-1]}")
    u = x @ np.array(cfg.choice_beta)
    return float(u) if np.ndim(u) == 0 else u


def choice_probabilities(cfg: SynthConfig, items) -> np.ndarray:
    """Softmax choice probabilities over the rows of ``items``."""
    return softmax(ground_truth_utility(cfg, np.atleast_2d(items)) / cfg.temperature)


def draw_items(cfg: SynthConfig, rng: np.random.Generator, m: int) -> np.ndarray:
    """``m`` items of one session: a shared context draw plus per-item deviations."""
    n = len(cfg.features)
    mean = np.array([f.mean for f in cfg.features])
    sd = np.array([f.sd for f in cfg.features])
    share = np.array(cfg.context_share)
    chol = np.linalg.cholesky(np.array(cfg.correlation))
    context = chol @ rng.standard_normal(n)
    own = rng.standard_normal((m, n)) @ chol.T
    x = mean + sd * (np.sqrt(share) * context + np.sqrt(1.0 - share) * own)
    lower = np.array([-np.inf if f.lower is None else f.lower for f in cfg.features])
    upper = np.array([np.inf if f.upper is None else f.upper for f in cfg.features])
    return np.clip(x, lower, upper)


def choose_positive(cfg: SynthConfig, items, rng: np.random.Generator) -> int:
    probs = choice_probabilities(cfg, items)
    return int(rng.choice(len(probs), p=probs))


def _customer_sessions(cfg: SynthConfig, c: int) -> list[Session]:
    rng = np.random.default_rng([cfg.seed, c])
    lo, hi = cfg.items_per_session
    out = []
    for s in range(cfg.sessions_per_customer):
        m = int(rng.integers(lo, hi + 1))
        items = draw_items(cfg, rng, m)
        labels = np.zeros(m, dtype=np.int64)
        labels[choose_positive(cfg, items, rng)] = 1
        out.append(Session(f"s{c:06d}-{s:03d}", f"c{c:06d}", items, labels))
    return out


def generate(cfg: SynthConfig = SynthConfig()) -> SessionDataset:
    """Generate a dataset; each customer has its own RNG stream keyed by (seed, customer)."""
    sessions = []
    for c in range(cfg.n_customers):
        sessions.extend(_customer_sessions(cfg, c))
    return SessionDataset(cfg.schema, tuple(sessions))
