import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samplerank.data_model import FeatureSchema
from samplerank.errors import ConfigError
from samplerank.goal import ComponentGoal, DeltaRule, GoalSpec, apply_mu_delta, apply_sigma_delta, build_goal
from samplerank.stats import GaussianModel, GmmModel

RATINGS = FeatureSchema.from_names(["item_rating", "restaurant_rating", "LM"], ["item_rating", "restaurant_rating"])


def additive(**deltas):
    return GoalSpec({k: DeltaRule("additive", v) for k, v in deltas.items()})


class TestDeltaRule:
    @pytest.mark.parametrize("delta", [0.0, 1.0, 1.5, -0.2])
    def test_shrinkage_bounds(self, delta):
        with pytest.raises(ConfigError):
            DeltaRule("shrinkage", delta)

    @pytest.mark.parametrize("delta", [float("nan"), float("inf"), "abc"])
    def test_delta_must_be_finite_number(self, delta):
        with pytest.raises(ConfigError):
            DeltaRule("additive", delta)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            DeltaRule("multiply", 2.0)

    def test_covariance_rule_must_be_shrinkage(self):
        with pytest.raises(ConfigError):
            ComponentGoal(sigma_rule=DeltaRule("additive", 0.1))
        with pytest.raises(ConfigError):
            ComponentGoal({"LM": DeltaRule("shrinkage", 0.5)})


class TestApplyMu:
    def test_additive_ratings_shift(self):
        out = apply_mu_delta([4.2, 3.9], additive(item_rating=0.3, restaurant_rating=0.3), RATINGS)
        np.testing.assert_allclose(out, [4.5, 4.2], atol=1e-12)

    def test_no_rules_is_identity(self):
        np.testing.assert_array_equal(apply_mu_delta([4.2, 3.9], GoalSpec(), RATINGS), [4.2, 3.9])

    def test_percentage(self):
        schema = FeatureSchema.from_names(["RPO"], ["RPO"])
        out = apply_mu_delta([10.0], GoalSpec({"RPO": DeltaRule("percentage", 0.5)}), schema)
        np.testing.assert_allclose(out, [15.0])

    def test_rule_on_only_one_feature(self):
        out = apply_mu_delta([4.2, 3.9], additive(restaurant_rating=-0.4), RATINGS)
        np.testing.assert_allclose(out, [4.2, 3.5])

    def test_unknown_feature_name(self):
        with pytest.raises(ConfigError, match="LM"):
            apply_mu_delta([4.2, 3.9], additive(LM=-0.5), RATINGS)

    def test_input_not_mutated(self):
        mu = np.array([4.2, 3.9])
        apply_mu_delta(mu, additive(item_rating=1.0), RATINGS)
        np.testing.assert_array_equal(mu, [4.2, 3.9])

    @settings(max_examples=50, deadline=None)
    @given(
        mu=st.lists(st.floats(-100, 100), min_size=2, max_size=2),
        a=st.floats(-5, 5),
        b=st.floats(-5, 5),
    )
    def test_additive_composes(self, mu, a, b):
        once = apply_mu_delta(mu, additive(item_rating=a + b), RATINGS)
        twice = apply_mu_delta(apply_mu_delta(mu, additive(item_rating=a), RATINGS), additive(item_rating=b), RATINGS)
        np.testing.assert_allclose(twice, once, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(
        mu=st.lists(st.floats(-100, 100), min_size=2, max_size=2),
        a=st.floats(-0.9, 2),
        b=st.floats(-0.9, 2),
    )
    def test_percentage_composes_multiplicatively(self, mu, a, b):
        def pct(d):
            return GoalSpec({"restaurant_rating": DeltaRule("percentage", d)})

        once = apply_mu_delta(mu, pct((1 + a) * (1 + b) - 1), RATINGS)
        twice = apply_mu_delta(apply_mu_delta(mu, pct(a), RATINGS), pct(b), RATINGS)
        np.testing.assert_allclose(twice, once, rtol=1e-9, atol=1e-9)


class TestApplySigma:
    def test_scalar_scaling(self):
        np.testing.assert_allclose(apply_sigma_delta(2 * np.eye(2), DeltaRule("shrinkage", 0.5)), np.eye(2))

    def test_absent_rule_is_identity(self):
        sigma = np.array([[2.0, 0.3], [0.3, 1.0]])
        out = apply_sigma_delta(sigma, None)
        np.testing.assert_array_equal(out, sigma)
        assert out is not sigma

    def test_delta_above_one_rejected(self):
        with pytest.raises(ConfigError):
            apply_sigma_delta(np.eye(2), DeltaRule("shrinkage", 1.5))


class TestBuildGoal:
    @pytest.fixture
    def base(self):
        return GaussianModel.from_params([4.1, 4.0], [[0.16, 0.05], [0.05, 0.12]])

    def test_largest_ratings_goal(self, base):
        goal = build_goal(base, additive(item_rating=0.5, restaurant_rating=0.5), RATINGS)
        np.testing.assert_allclose(goal.mu, [4.6, 4.5], atol=1e-12)
        np.testing.assert_array_equal(goal.sigma, base.sigma)

    def test_empty_spec_is_bit_equal(self, base):
        goal = build_goal(base, GoalSpec(), RATINGS)
        for name in ("mu", "sigma", "chol"):
            np.testing.assert_array_equal(getattr(goal, name), getattr(base, name))
        assert goal.log_det == base.log_det

    def test_base_untouched(self, base):
        mu = base.mu.copy()
        build_goal(base, GoalSpec(sigma_rule=DeltaRule("shrinkage", 0.5), mu_rules={"item_rating": DeltaRule("additive", 1)}), RATINGS)
        np.testing.assert_array_equal(base.mu, mu)

    def test_shrinkage_scales_covariance(self, base):
        goal = build_goal(base, GoalSpec(sigma_rule=DeltaRule("shrinkage", 0.25)), RATINGS)
        np.testing.assert_allclose(goal.sigma, 0.25 * base.sigma)
        np.testing.assert_array_equal(goal.mu, base.mu)

    def test_per_component_rule_is_scoped(self, base):
        other = GaussianModel.from_params([3.0, 3.5], [[0.2, 0.0], [0.0, 0.2]])
        gmm = GmmModel((base, other), [0.6, 0.4])
        spec = GoalSpec(per_component={0: ComponentGoal({"item_rating": DeltaRule("additive", 0.2)})})
        goal = build_goal(gmm, spec, RATINGS)
        np.testing.assert_allclose(goal.components[0].mu, [4.3, 4.0])
        np.testing.assert_array_equal(goal.components[1].mu, other.mu)
        np.testing.assert_array_equal(goal.components[1].sigma, other.sigma)
        np.testing.assert_array_equal(goal.weights, gmm.weights)

    def test_global_rule_reaches_every_component(self, base):
        gmm = GmmModel((base, base), [0.5, 0.5])
        goal = build_goal(gmm, additive(restaurant_rating=0.1), RATINGS)
        for c in goal.components:
            np.testing.assert_allclose(c.mu, [4.1, 4.1])

    def test_per_component_needs_a_mixture(self, base):
        with pytest.raises(ConfigError):
            build_goal(base, GoalSpec(per_component={0: ComponentGoal()}), RATINGS)

    def test_component_out_of_range(self, base):
        with pytest.raises(ConfigError):
            build_goal(GmmModel((base,), [1.0]), GoalSpec(per_component={3: ComponentGoal()}), RATINGS)

    def test_dimension_must_match_schema(self):
        with pytest.raises(ConfigError):
            build_goal(GaussianModel.from_params([0.0], [[1.0]]), additive(item_rating=0.1), RATINGS)


class TestGoalSpecConfig:
    def test_round_trip(self):
        raw = {
            "mu": {"LM": {"kind": "additive", "delta": -0.5}, "RPO": {"kind": "percentage", "delta": 0.1}},
            "sigma": {"kind": "shrinkage", "delta": 0.9},
            "components": {"1": {"mu": {"LM": {"kind": "additive", "delta": -0.75}}}},
        }
        spec = GoalSpec.from_dict(raw)
        assert spec.rules_for(1).mu_rules["LM"].delta == -0.75
        assert spec.rules_for(0).sigma_rule == DeltaRule("shrinkage", 0.9)
        assert GoalSpec.from_dict(spec.to_dict()) == spec

    def test_malformed_rule(self):
        with pytest.raises(ConfigError):
            GoalSpec.from_dict({"mu": {"LM": {"delta": 1}}})
        with pytest.raises(ConfigError):
            GoalSpec.from_dict({"components": {"x": {}}})
