"""Session-level rejection sampling toward a goal distribution.

A session is kept iff ``u < f_goal(x+) / M`` where ``x+`` is the goal-feature
projection of the session's positive item and ``M`` is the peak of the
*fitted* density (not the goal). The data density is deliberately absent
from the ratio, so points far from the goal mean are rarely kept.

Uniform draws are keyed by ``(seed, session_id)``: a session's fate does not
depend on which other sessions are present, their order, or how the work is
split across workers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .data_model import SessionDataset, goal_matrix
from .errors import ConfigError, EmptySampleError
from .stats import GaussianModel, GmmModel, log_density, mahalanobis_sq, peak_density

_TWO_POW_53 = float(2**53)


@dataclass(frozen=True)
class SamplerConfig:
    seed: int = 0
    clamp: bool = True
    session_policy: str = "positive_example"

    def __post_init__(self):
        if self.session_policy != "positive_example":
            raise ConfigError(f"unsupported session_policy {self.session_policy!r}")


@dataclass
class SampleReport:
    input_sessions: int
    accepted_sessions: int
    acceptance_rate: float
    clamped_count: int
    per_feature_mean_before: list[float] = field(default_factory=list)
    per_feature_mean_after: list[float] = field(default_factory=list)
    component_counts: list[int] | None = None

    def to_dict(self) -> dict:
        out = {
            "input_sessions": self.input_sessions,
            "accepted_sessions": self.accepted_sessions,
            "acceptance_rate": self.acceptance_rate,
            "clamped_count": self.clamped_count,
            "per_feature_mean_before": self.per_feature_mean_before,
            "per_feature_mean_after": self.per_feature_mean_after,
        }
        if self.component_counts is not None:
            out["component_counts"] = self.component_counts
        return out


def session_uniform(seed: int, session_id: str) -> float:
    """Uniform draw in [0, 1) owned by one session (53 bits of a keyed hash)."""
    digest = hashlib.blake2b(f"{int(seed)}\x1f{session_id}".encode(), digest_size=8).digest()
    return (int.from_bytes(digest, "little") >> 11) / _TWO_POW_53


def session_uniforms(seed: int, session_ids) -> np.ndarray:
    return np.array([session_uniform(seed, sid) for sid in session_ids], dtype=np.float64)


def accept_prob(goal: GaussianModel, M: float, x, clamp: bool = True):
    """``f_goal(x) / M``, optionally clamped at 1. Vectorized over rows of ``x``."""
    if not M > 0:
        raise ValueError(f"peak value M must be positive, got {M}")
    ratio = np.exp(log_density(goal, x) - np.log(M))
    if clamp:
        ratio = np.minimum(ratio, 1.0)
    return float(ratio) if np.ndim(ratio) == 0 else ratio


def _decide(ds, ratios, cfg):
    u = session_uniforms(cfg.seed, (s.session_id for s in ds.sessions))
    keep = np.flatnonzero(u < ratios)
    if keep.size == 0:
        raise EmptySampleError(
            f"no sessions accepted out of {len(ds)}; the goal is too far from the data, try a milder delta"
        )
    return keep


def _report(ds, X_pos, keep, clamped):
    return SampleReport(
        input_sessions=len(ds),
        accepted_sessions=int(keep.size),
        acceptance_rate=keep.size / len(ds),
        clamped_count=int(clamped),
        per_feature_mean_before=X_pos.mean(axis=0).tolist(),
        per_feature_mean_after=X_pos[keep].mean(axis=0).tolist(),
    )


def sample_rank(
    ds: SessionDataset, base: GaussianModel, goal: GaussianModel, cfg: SamplerConfig = SamplerConfig()
) -> tuple[SessionDataset, SampleReport]:
    """Keep or drop whole sessions by the goal density of their positive item."""
    if len(ds) == 0:
        raise EmptySampleError("input dataset has no sessions")
    if base.dim != goal.dim:
        raise ConfigError("base and goal models differ in dimension")
    X_pos = goal_matrix(ds, "positives_only")
    raw = accept_prob(goal, peak_density(base), X_pos, clamp=False)
    clamped = int(np.sum(raw > 1.0))
    ratios = np.minimum(raw, 1.0) if cfg.clamp else raw
    keep = _decide(ds, ratios, cfg)
    return ds.subset(keep), _report(ds, X_pos, keep, clamped)


def assign_components(goal: GmmModel, X) -> np.ndarray:
    """Index of the goal component nearest each row in Mahalanobis distance (ties: lowest index)."""
    t2 = np.column_stack([mahalanobis_sq(c, np.atleast_2d(X)) for c in goal.components])
    return np.argmin(t2, axis=1)


def generalized_sample_rank(
    ds: SessionDataset, base: GmmModel, goal: GmmModel, cfg: SamplerConfig = SamplerConfig()
) -> tuple[SessionDataset, SampleReport]:
    """Mixture version: route each positive to its nearest goal component, then accept
    against that component's density over the matching base component's peak."""
    if len(ds) == 0:
        raise EmptySampleError("input dataset has no sessions")
    if base.p != goal.p:
        raise ConfigError(f"base has {base.p} components but goal has {goal.p}")
    X_pos = goal_matrix(ds, "positives_only")
    k_star = assign_components(goal, X_pos)
    raw = np.empty(X_pos.shape[0])
    for k in range(goal.p):
        rows = k_star == k
        if rows.any():
            raw[rows] = accept_prob(goal.components[k], peak_density(base.components[k]), X_pos[rows], clamp=False)
    clamped = int(np.sum(raw > 1.0))
    ratios = np.minimum(raw, 1.0) if cfg.clamp else raw
    keep = _decide(ds, ratios, cfg)
    report = _report(ds, X_pos, keep, clamped)
    report.component_counts = np.bincount(k_star[keep], minlength=goal.p).tolist()
    return ds.subset(keep), report


def sample(ds, base, goal, cfg: SamplerConfig = SamplerConfig()):
    """Dispatch on model family."""
    if isinstance(base, GmmModel):
        return generalized_sample_rank(ds, base, goal, cfg)
    return sample_rank(ds, base, goal, cfg)
