"""Goal distributions: shift the fitted mean and/or shrink the fitted covariance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np

from .data_model import FeatureSchema
from .errors import ConfigError
from .stats import GaussianModel, GmmModel

MU_KINDS = ("additive", "percentage")
SIGMA_KINDS = ("shrinkage",)


@dataclass(frozen=True)
class DeltaRule:
    """How one parameter moves: ``additive`` (mu + delta),
    ``percentage`` (mu * (1 + delta)) or ``shrinkage`` (delta * sigma, 0 < delta < 1)."""

    kind: str
    delta: float

    def __post_init__(self):
        if self.kind not in MU_KINDS + SIGMA_KINDS:
            raise ConfigError(f"unknown delta kind {self.kind!r}")
        try:
            delta = float(self.delta)
        except (TypeError, ValueError):
            raise ConfigError(f"delta must be a number, got {self.delta!r}") from None
        if not math.isfinite(delta):
            raise ConfigError(f"delta must be finite, got {delta}")
        if self.kind == "shrinkage" and not 0.0 < delta < 1.0:
            raise ConfigError(f"shrinkage delta must lie in (0, 1), got {delta}")
        object.__setattr__(self, "delta", delta)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "delta": self.delta}

    @classmethod
    def from_dict(cls, d) -> "DeltaRule":
        if not isinstance(d, Mapping) or "kind" not in d or "delta" not in d:
            raise ConfigError(f"delta rule needs 'kind' and 'delta', got {d!r}")
        return cls(d["kind"], d["delta"])


@dataclass(frozen=True)
class ComponentGoal:
    mu_rules: Mapping[str, DeltaRule] = field(default_factory=dict)
    sigma_rule: Optional[DeltaRule] = None

    def __post_init__(self):
        for name, rule in self.mu_rules.items():
            if rule.kind not in MU_KINDS:
                raise ConfigError(f"rule for {name!r} must be additive or percentage, got {rule.kind!r}")
        if self.sigma_rule is not None and self.sigma_rule.kind not in SIGMA_KINDS:
            raise ConfigError(f"sigma rule must be shrinkage, got {self.sigma_rule.kind!r}")

    def to_dict(self) -> dict:
        out = {"mu": {k: r.to_dict() for k, r in self.mu_rules.items()}}
        if self.sigma_rule is not None:
            out["sigma"] = self.sigma_rule.to_dict()
        return out

    @classmethod
    def from_dict(cls, d) -> "ComponentGoal":
        d = d or {}
        mu = {str(k): DeltaRule.from_dict(v) for k, v in (d.get("mu") or {}).items()}
        sigma = DeltaRule.from_dict(d["sigma"]) if d.get("sigma") is not None else None
        return cls(mu, sigma)


@dataclass(frozen=True)
class GoalSpec(ComponentGoal):
    """Global rules plus optional per-component overrides for mixture goals.

    Config form::

        {"mu": {"LM": {"kind": "additive", "delta": -0.5}},
         "sigma": {"kind": "shrinkage", "delta": 0.9},
         "components": {"1": {"mu": {...}}}}
    """

    per_component: Mapping[int, ComponentGoal] = field(default_factory=dict)

    def rules_for(self, k: Optional[int]) -> ComponentGoal:
        if k is not None and k in self.per_component:
            return self.per_component[k]
        return ComponentGoal(self.mu_rules, self.sigma_rule)

    def to_dict(self) -> dict:
        out = super().to_dict()
        if self.per_component:
            out["components"] = {str(k): v.to_dict() for k, v in sorted(self.per_component.items())}
        return out

    @classmethod
    def from_dict(cls, d) -> "GoalSpec":
        base = ComponentGoal.from_dict(d)
        comps = {}
        for k, v in ((d or {}).get("components") or {}).items():
            try:
                idx = int(k)
            except ValueError:
                raise ConfigError(f"component key must be an integer, got {k!r}") from None
            comps[idx] = ComponentGoal.from_dict(v)
        return cls(base.mu_rules, base.sigma_rule, comps)


def _check_names(rules: ComponentGoal, schema: FeatureSchema):
    goal_names = schema.goal_feature_names
    unknown = [name for name in rules.mu_rules if name not in goal_names]
    if unknown:
        raise ConfigError(f"goal rules name unknown goal features {unknown}; goal features are {list(goal_names)}")


def apply_mu_delta(mu, spec: ComponentGoal, schema: FeatureSchema) -> np.ndarray:
    """Move each goal-feature mean by its rule; coordinates without a rule are copied."""
    _check_names(spec, schema)
    mu = np.array(mu, dtype=np.float64).reshape(-1)
    out = mu.copy()
    for j, name in enumerate(schema.goal_feature_names):
        rule = spec.mu_rules.get(name)
        if rule is None:
            continue
        if rule.kind == "additive":
            out[j] = mu[j] + rule.delta
        else:
            out[j] = mu[j] * (1.0 + rule.delta)
    return out


def apply_sigma_delta(sigma, rule: Optional[DeltaRule]) -> np.ndarray:
    sigma = np.array(sigma, dtype=np.float64, ndmin=2)
    if rule is None:
        return sigma.copy()
    if rule.kind != "shrinkage":
        raise ConfigError(f"covariance rule must be shrinkage, got {rule.kind!r}")
    if not 0.0 < rule.delta < 1.0:
        raise ConfigError(f"shrinkage delta must lie in (0, 1), got {rule.delta}")
    return rule.delta * sigma


def _goal_component(base: GaussianModel, rules: ComponentGoal, schema: FeatureSchema) -> GaussianModel:
    if base.dim != len(schema.goal_feature_indices):
        raise ConfigError(
            f"model has dimension {base.dim} but schema has {len(schema.goal_feature_indices)} goal features"
        )
    if not rules.mu_rules and rules.sigma_rule is None:
        return base
    mu = apply_mu_delta(base.mu, rules, schema)
    sigma = apply_sigma_delta(base.sigma, rules.sigma_rule)
    return GaussianModel.from_params(mu, sigma)


def build_goal(
    base: Union[GaussianModel, GmmModel], spec: GoalSpec, schema: FeatureSchema
) -> Union[GaussianModel, GmmModel]:
    """Goal model from a fitted base model; ``base`` itself is left untouched."""
    if isinstance(base, GaussianModel):
        if spec.per_component:
            raise ConfigError("per-component goal rules need a mixture base model")
        return _goal_component(base, spec.rules_for(None), schema)
    bad = [k for k in spec.per_component if not 0 <= k < base.p]
    if bad:
        raise ConfigError(f"per-component rules for nonexistent components {bad} (p={base.p})")
    comps = tuple(_goal_component(c, spec.rules_for(k), schema) for k, c in enumerate(base.components))
    return GmmModel(comps, base.weights)
