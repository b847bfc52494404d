import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from pedirl.reward_model import (
    FREE_NAMES,
    W_MASK,
    Goal,
    GoalSet,
    ModelParams,
    check_constraints,
    default_params,
    goal_reward,
    project_to_constraints,
    semantic_reward,
    total_reward,
    turn_penalty,
    wrap_angle,
)
from pedirl.semantic_map import RigidTransform, feature_vector, grid_from_strings, transform_grid, transform_point
from pedirl.synthetic import four_way_intersection

from conftest import make_theta_star, off_grid_lines


def params_with(**entries):
    """Default parameters with 1-based weight overrides given as w7=0.3 etc."""
    w = default_params().w.copy()
    other = {}
    for k, v in entries.items():
        if k.startswith("w") and k[1:].isdigit():
            w[int(k[1:]) - 1] = v
        else:
            other[k] = v
    return ModelParams(w=w, **other)


class TestSemanticReward:
    def test_obstacle(self, theta_star):
        g = grid_from_strings(["#" * 20] * 20)
        assert semantic_reward(theta_star, feature_vector(g, (5.0, 5.0))) == -2.5

    def test_sidewalk_interior_is_free(self, theta_star):
        g = grid_from_strings(["s" * 30] * 30)
        assert semantic_reward(theta_star, feature_vector(g, (7.5, 7.5))) == 0.0

    def test_road_interior(self):
        g = grid_from_strings(["r" * 30] * 30)
        p = params_with(w2=-1.0)
        psi = feature_vector(g, (7.5, 7.5))
        assert semantic_reward(p, psi) == pytest.approx(float(np.dot(p.w, psi)), abs=1e-15)
        assert semantic_reward(p, psi) == pytest.approx(-1.0, abs=1e-15)

    def test_batch(self, theta_star):
        psis = np.random.default_rng(0).random((5, 20))
        assert np.allclose(semantic_reward(theta_star, psis), psis @ theta_star.w)


class TestGoalReward:
    def test_examples(self):
        g = Goal("a", 3.0, 4.0, 2.0)
        assert goal_reward(g, (3.0, 4.0)) == 0.0
        assert goal_reward(g, (5.0, 4.0)) == 0.0
        assert goal_reward(g, (9.0, 4.0)) == pytest.approx(-1.0, abs=1e-15)

    @given(d=st.floats(0, 10), eps=st.floats(1e-12, 1e-6))
    def test_continuous_at_radius(self, d, eps):
        g = Goal("a", 0.0, 0.0, d)
        assert goal_reward(g, (d, 0.0)) == 0.0
        assert abs(goal_reward(g, (d + eps, 0.0))) <= 0.5 * math.sqrt(eps + 1e-15 * (1 + d))

    def test_rejects_negative_radius(self):
        with pytest.raises(ValueError):
            Goal("a", 0, 0, -1)


class TestTotalReward:
    def test_obstacle_at_goal(self, theta_star):
        g = grid_from_strings(["#" * 10] * 10)
        assert total_reward(theta_star, g, Goal("a", 2.0, 2.0, 1.0), (2.0, 2.0)) == -2.5

    def test_sidewalk_far_from_goal(self, theta_star):
        g = grid_from_strings(["s" * 40] * 40)
        goal = Goal("a", 10.0, 10.0, 1.0)
        assert total_reward(theta_star, g, goal, (15.0, 10.0)) == pytest.approx(-1.0, abs=1e-15)

    def test_mixed_context_oracle(self, theta_star):
        grid, goals = four_way_intersection()
        rng = np.random.default_rng(3)
        for p in rng.uniform(0, 20, (30, 2)):
            g = goals[0]
            psi = feature_vector(grid, p)
            expect = sum(theta_star.w[j] * psi[j] for j in range(20))
            dist = math.hypot(p[0] - g.x, p[1] - g.y)
            expect += -0.5 * math.sqrt(dist - g.d) if dist > g.d else 0.0
            assert total_reward(theta_star, grid, g, p) == pytest.approx(expect, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(k=st.integers(0, 3), tx=st.floats(-20, 20), ty=st.floats(-20, 20),
           x=st.floats(0.3, 19.7), y=st.floats(0.3, 19.7))
    def test_quarter_turn_invariance(self, k, tx, ty, x, y):
        grid, goals = four_way_intersection()
        assume(off_grid_lines(grid, (x, y)))
        T = RigidTransform.quarter_turns(k, tx, ty)
        g = goals[1]
        gl = transform_point(g.location, T)
        g2 = Goal(g.id, float(gl[0]), float(gl[1]), g.d)
        th = make_theta_star()
        a = total_reward(th, grid, g, (x, y))
        b = total_reward(th, transform_grid(grid, T), g2, transform_point((x, y), T))
        assert abs(a - b) <= 1e-9


class TestTurnPenalty:
    def test_zero_turn(self, theta_star):
        assert turn_penalty(theta_star, 0.0) == 0.0
        assert turn_penalty(theta_star.replace(alpha=0.0), 0.0) == 0.0

    def test_no_weight(self, theta_star):
        p = theta_star.replace(C_phi=0.0)
        assert np.all(turn_penalty(p, np.linspace(-4, 4, 17)) == 0.0)

    def test_saturation(self):
        p = default_params(C_phi=1.0, beta=100.0, alpha=1.0)
        assert turn_penalty(p, math.pi) == pytest.approx(-1.0, abs=1e-6)

    def test_huge_alpha_is_finite(self):
        d = np.array([0.5, math.pi])
        with np.errstate(all="raise"):
            assert np.array_equal(turn_penalty(default_params(C_phi=2.0, beta=0.0, alpha=1e4), d), [0.0, 0.0])
            assert np.array_equal(turn_penalty(default_params(C_phi=2.0, beta=1.0, alpha=1e4), d), [0.0, -2.0])

    def test_wraps(self, theta_star):
        assert turn_penalty(theta_star, 2 * math.pi) == pytest.approx(0.0, abs=1e-12)
        assert turn_penalty(theta_star, 3 * math.pi / 2) == pytest.approx(turn_penalty(theta_star, -math.pi / 2))

    @given(c=st.floats(0, 10), b=st.floats(0, 10), a=st.floats(1, 4), d=st.floats(-math.pi, math.pi))
    def test_even_and_bounded(self, c, b, a, d):
        p = default_params(C_phi=c, beta=b, alpha=a)
        v = turn_penalty(p, d)
        assert v == turn_penalty(p, -d)
        assert -c - 1e-12 <= v <= 0.0

    @given(c=st.floats(0, 10), b=st.floats(0, 10), a=st.floats(1, 4),
           d1=st.floats(0, math.pi), d2=st.floats(0, math.pi))
    def test_monotone(self, c, b, a, d1, d2):
        p = default_params(C_phi=c, beta=b, alpha=a)
        lo, hi = sorted((d1, d2))
        assert turn_penalty(p, hi) <= turn_penalty(p, lo)

    @given(st.floats(-100, 100))
    def test_wrap_range(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


class TestConstraints:
    def test_feasible_example(self):
        p = params_with(w2=-1.0, w7=0.3, w8=0.3, w11=0.2, w12=0.2, w13=-0.1, w14=-0.1, w17=-0.1, w18=-0.1,
                        C_phi=1.0, beta=1.0, alpha=1.0, eta=1.0)
        assert check_constraints(p) == []

    def test_defaults_feasible(self, theta_star):
        assert check_constraints(default_params()) == []
        assert check_constraints(theta_star) == []

    def test_w1(self):
        bad = check_constraints(params_with(w1=-2.0))
        assert len(bad) == 1 and bad[0].startswith("(17-1)")

    def test_c_phi_sign(self):
        bad = check_constraints(params_with(C_phi=-0.5))
        assert len(bad) == 1 and bad[0].startswith("(17-10)")

    def test_each_constraint(self):
        cases = {
            "(17-2)": dict(w2=-0.4),
            "(17-3)": dict(w7=0.3, w8=0.1),
            "(17-4)": dict(w11=-0.1, w12=-0.1),
            "(17-5)": dict(w13=0.1),
            "(17-8)": dict(w18=0.01),
            "(17-9)": dict(w2=-0.5, w7=0.5, w8=0.5, w11=0.5, w12=0.5),
            "(17-11)": dict(beta=-1.0),
            "(17-12)": dict(alpha=-1.0),
            "(17-13)": dict(eta=-0.2),
        }
        for tag, kw in cases.items():
            bad = check_constraints(params_with(**kw))
            assert any(b.startswith(tag) for b in bad), (tag, bad)

    def test_sparsity(self):
        bad = check_constraints(params_with(w3=0.1))
        assert bad == ["sparsity: w3 must be 0 (got 0.1)"]

    def test_inequality_tolerance(self):
        assert check_constraints(params_with(w13=1e-13)) == []
        assert check_constraints(params_with(w13=1e-11)) != []


def projection_oracle(p: ModelParams) -> np.ndarray:
    """Nearest feasible full weight vector by generic constrained least squares."""
    w0 = p.w
    # unknowns: w2, b (= w7 = w8), c (= w11 = w12), w13, w14, w17, w18
    target = np.array([w0[1], w0[6], w0[7], w0[10], w0[11], w0[12], w0[13], w0[16], w0[17]])

    def expand(z):
        return np.array([z[0], z[1], z[1], z[2], z[2], z[3], z[4], z[5], z[6]])

    def obj(z):
        return float(((expand(z) - target) ** 2).sum())

    cons = [{"type": "ineq", "fun": lambda z: (z[4] + z[6]) - (2 * z[0] + z[1] + z[2])}]
    bounds = [(None, -0.5), (0, None), (0, None), (None, 0), (None, 0), (None, 0), (None, 0)]
    z0 = np.array([-1.0, 0.0, 0.0, -0.1, -0.1, -0.1, -0.1])
    res = minimize(obj, z0, method="SLSQP", bounds=bounds, constraints=cons,
                   options=dict(ftol=1e-14, maxiter=500))
    return res.x


class TestProjection:
    def test_feasible_unchanged(self, theta_star):
        assert project_to_constraints(theta_star) is theta_star

    def test_tied_pair_midpoint(self):
        q = project_to_constraints(params_with(w7=0.3, w8=0.1))
        assert q.w_at(7) == q.w_at(8) == pytest.approx(0.2, abs=1e-15)
        assert check_constraints(q) == []

    def test_eta_clamp(self):
        p = params_with(eta=-0.2)
        q = project_to_constraints(p)
        assert q.eta == 0.0
        assert np.array_equal(q.w, p.w)

    def test_sparsity_restored(self):
        q = project_to_constraints(params_with(w3=1.0, w20=-2.0, w1=0.0))
        assert check_constraints(q) == []
        assert q.w_at(1) == -2.5
        assert np.all(q.w[~W_MASK] == 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=len(FREE_NAMES) + 2, max_size=len(FREE_NAMES) + 2))
    def test_feasible_idempotent_nearest(self, vals):
        w = default_params().w.copy()
        for j, i in enumerate((2, 7, 8, 11, 12, 13, 14, 17, 18)):
            w[i - 1] = vals[j]
        p = ModelParams(w=w, C_phi=vals[9], beta=vals[10], alpha=vals[11], eta=vals[12])
        q = project_to_constraints(p)
        assert check_constraints(q) == []
        assert project_to_constraints(q) is q
        z = projection_oracle(p)
        got = np.array([q.w_at(2), q.w_at(7), q.w_at(11), q.w_at(13), q.w_at(14), q.w_at(17), q.w_at(18)])
        assert np.allclose(got, z, atol=1e-6)
        assert q.C_phi == max(p.C_phi, 0.0) and q.eta == max(p.eta, 0.0)


class TestParams:
    def test_free_vector_round_trip(self, theta_star):
        assert theta_star.with_free(theta_star.free_vector()) == theta_star

    def test_dict_round_trip(self, theta_star):
        assert ModelParams.from_dict(theta_star.to_dict()) == theta_star

    def test_bad_schema(self, theta_star):
        d = theta_star.to_dict()
        d["schema_version"] = 99
        with pytest.raises(ValueError):
            ModelParams.from_dict(d)

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelParams(w=np.zeros(5))
        with pytest.raises(ValueError):
            default_params(gamma=1.0)
        with pytest.raises(ValueError):
            default_params(n_actions=1)

    def test_immutable(self, theta_star):
        with pytest.raises(ValueError):
            theta_star.w[0] = 1.0

    def test_goalset(self):
        gs = GoalSet([Goal("a", 0, 0), Goal("b", 1, 1)])
        assert gs.ids == ["a", "b"] and gs.by_id("b").x == 1
        with pytest.raises(ValueError):
            GoalSet([])
        with pytest.raises(ValueError):
            GoalSet([Goal("a", 0, 0), Goal("a", 1, 1)])
        with pytest.raises(KeyError):
            gs.by_id("zz")
