import math

import numpy as np
import pytest

from hjival import games
from hjival.errors import ConfigError, NumericalError

from oracles import central_diff, grid_control_search, random_costates, rel_err

ALL_CASES = list(games.CASES)


def spec_of(case):
    return games.make_spec(case)


def joint_with_distance(spec, s):
    """A joint state whose between-player distance is exactly s."""
    if spec.case_id == "narrow_road":
        px = (spec.mirror_shift[0] - s) / 2.0
        return np.array([px, 4.0, 0.0, 18.0, px, 4.0, 0.0, 18.0])
    if spec.case_id == "lane_change":
        return np.array([10.0, 4.0, 0.0, 18.0, 10.0 + s, 4.0, 0.0, 18.0])
    px = (spec.mirror_shift[0] - s) / 2.0
    return np.array([px, 2.5, 0.0, 2.0, 2.0, 1.0, px, 2.5, 0.0, 2.0, 2.0, 1.0])


class TestSpecConstruction:
    def test_unknown_case_rejected(self):
        with pytest.raises(ConfigError):
            games.make_spec("bicycle")

    def test_horizons(self):
        assert spec_of("narrow_road").horizon == 3.0
        assert spec_of("lane_change").horizon == 4.0
        assert spec_of("drone").horizon == 4.0
        assert spec_of("narrow_road").n_grid_nodes == 31
        assert spec_of("lane_change").n_grid_nodes == 41

    def test_override(self):
        spec = games.make_spec("narrow_road", {"penalty_scale": 0.0})
        assert spec.penalty_scale == 0.0
        with pytest.raises(ConfigError):
            games.make_spec("narrow_road", {"not_a_field": 1})

    def test_type_pair_validation(self):
        with pytest.raises(ConfigError):
            games.TypePair(0.5, 2.0)
        tp = games.TypePair(1.0, 5.0)
        assert tp.swapped().astuple() == (5.0, 1.0)


class TestDynamics:
    def test_straight_line(self):
        spec = spec_of("narrow_road")
        out = games.dynamics(spec, np.array([0.0, 0.0, 0.0, 18.0]), np.zeros(2))
        np.testing.assert_allclose(out, [18.0, 0.0, 0.0, 0.0])

    def test_hover(self):
        spec = spec_of("drone")
        x = np.array([1.0, 2.0, 3.0, 0.5, -0.5, 0.25])
        out = games.dynamics(spec, x, np.array([0.0, 0.0, games.GRAVITY]))
        np.testing.assert_allclose(out, [0.5, -0.5, 0.25, 0.0, 0.0, 0.0], atol=1e-15)

    def test_quarter_turn_substitution(self):
        spec = spec_of("narrow_road")
        x = np.array([0.0, 0.0, math.pi / 2.0, 10.0])
        u = np.array([0.5, 2.0])
        out = games.dynamics(spec, x, u)
        np.testing.assert_allclose(out, [0.0, 10.0, 0.5, 2.0], atol=1e-14)
        # cross-check against a finite difference of an integrated step
        h = 1e-3

        def rk4(x0, dt):
            k1 = games.dynamics(spec, x0, u)
            k2 = games.dynamics(spec, x0 + dt / 2 * k1, u)
            k3 = games.dynamics(spec, x0 + dt / 2 * k2, u)
            k4 = games.dynamics(spec, x0 + dt * k3, u)
            return x0 + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

        fd = (rk4(x, h) - rk4(x, -h)) / (2 * h)
        np.testing.assert_allclose(fd, out, rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("case", ALL_CASES)
    def test_jacobian_matches_fd(self, case):
        spec = spec_of(case)
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = rng.uniform(spec.x_hj[0, :, 0], spec.x_hj[0, :, 1])
            u = rng.uniform(spec.control_lo, spec.control_hi)
            jac = games.dynamics_jacobian(spec, x, u)
            for j in range(spec.state_dim):
                fd = central_diff(lambda xx: games.dynamics(spec, xx, u)[j], x)
                assert np.max(rel_err(jac[j], fd)) <= 1e-5


class TestInstantaneousLoss:
    def test_zero_control(self):
        assert games.instantaneous_loss(spec_of("narrow_road"), np.zeros(2)) == 0.0

    def test_unicycle_constants(self):
        assert games.instantaneous_loss(spec_of("narrow_road"), np.array([1.0, 2.0])) == 104.0

    def test_drone_roll_only(self):
        got = games.instantaneous_loss(spec_of("drone"), np.array([0.05, 0.0, games.GRAVITY]))
        assert got == pytest.approx(100.0 * math.tan(0.05) ** 2, rel=1e-12)


class TestDistance:
    def test_symmetric_headon_midpoint(self):
        spec = spec_of("narrow_road")
        xj = np.array([35.0, 4.0, 0, 18, 35.0, 4.0, 0, 18])
        assert games.distance(spec, xj) == 0.0

    def test_offset(self):
        spec = spec_of("narrow_road")
        xj = np.array([30.0, 4.0, 0, 18, 35.0, 4.0, 0, 18])
        assert games.distance(spec, xj) == pytest.approx(5.0)

    def test_345_triangle(self):
        spec = spec_of("lane_change")
        xj = np.array([0.0, 2.0, 0, 18, 3.0, 6.0, 0, 18])
        assert games.distance(spec, xj) == pytest.approx(5.0)

    @pytest.mark.parametrize("case", ALL_CASES)
    def test_swap_symmetry(self, case):
        spec = spec_of(case)
        rng = np.random.default_rng(3)
        d = spec.state_dim
        for _ in range(50):
            x1 = rng.uniform(spec.x_hj[0, :, 0], spec.x_hj[0, :, 1])
            x2 = rng.uniform(spec.x_hj[1, :, 0], spec.x_hj[1, :, 1])
            a = games.distance(spec, np.concatenate([x1, x2]))
            b = games.distance(spec, np.concatenate([x2, x1]))
            assert a == pytest.approx(b, rel=1e-14)


class TestThresholdAndPenalty:
    def test_threshold_values(self):
        assert games.collision_threshold(spec_of("narrow_road"), games.TypePair(1, 1)) == pytest.approx(1.5)
        assert games.collision_threshold(spec_of("lane_change"), games.TypePair(1, 1)) == pytest.approx(2.5)
        assert games.collision_threshold(spec_of("drone"), games.TypePair(5, 5)) == pytest.approx(1.75)

    def test_threshold_symmetric(self):
        rng = np.random.default_rng(11)
        for case in ALL_CASES:
            spec = spec_of(case)
            for _ in range(25):
                a, b = rng.uniform(1, 5, size=2)
                assert games.collision_threshold(spec, games.TypePair(a, b)) == pytest.approx(
                    games.collision_threshold(spec, games.TypePair(b, a)))

    @pytest.mark.parametrize("case", ALL_CASES)
    def test_penalty_midpoint_and_tails(self, case):
        spec = spec_of(case)
        tp = games.TypePair(1, 1)
        eta = games.collision_threshold(spec, tp)
        at_eta = games.state_penalty(spec, tp, joint_with_distance(spec, eta))
        assert at_eta == pytest.approx(spec.penalty_scale / 2.0, rel=1e-12)
        deep_safe = games.state_penalty(spec, tp, joint_with_distance(spec, eta + 10))
        assert deep_safe < 1e-17
        # generic sigmoid identity half a unit inside the threshold
        delta = 0.4
        near = games.state_penalty(spec, tp, joint_with_distance(spec, eta - delta))
        assert near == pytest.approx(1e4 / (1.0 + math.exp(-5.0 * delta)), rel=1e-12)

    def test_penalty_two_inside_threshold(self):
        # eta(1,1) = 2.5 for the lane-change case, so S = eta - 2 is realizable
        spec = spec_of("lane_change")
        tp = games.TypePair(1, 1)
        eta = games.collision_threshold(spec, tp)
        near = games.state_penalty(spec, tp, joint_with_distance(spec, eta - 2.0))
        assert near == pytest.approx(1e4 / (1.0 + math.exp(-10.0)), rel=1e-12)

    def test_penalty_strictly_decreasing_in_distance(self):
        spec = spec_of("narrow_road")
        tp = games.TypePair(2, 3)
        svals = np.linspace(0.0, 30.0, 400)
        c = np.array([games.state_penalty(spec, tp, joint_with_distance(spec, s)) for s in svals])
        assert np.all(np.diff(c) < 0)

    @pytest.mark.parametrize("case", ALL_CASES)
    def test_penalty_gradient_matches_fd(self, case):
        spec = spec_of(case)
        tp = games.TypePair(1.5, 4.0)
        eta = games.collision_threshold(spec, tp)
        rng = np.random.default_rng(5)
        checked = 0
        for _ in range(40):
            # bias samples toward the sigmoid transition where gradients are live
            s = rng.uniform(max(0.1, eta - 2.0), eta + 2.0)
            xj = joint_with_distance(spec, s)
            xj = xj + rng.normal(0, 0.05, size=xj.shape)
            grad = games.state_penalty_gradient(spec, tp, xj)
            fd = central_diff(lambda z: games.state_penalty(spec, tp, z), xj, h=1e-5)
            live = np.abs(grad) >= 1e-12
            if live.any():
                checked += 1
                assert np.max(np.abs(grad[live] - fd[live])
                              / np.maximum(np.abs(grad[live]), 1e-12)) <= 1e-5
        assert checked > 20


class TestConstraintIndicator:
    def test_examples(self):
        spec = spec_of("narrow_road")
        tp = games.TypePair(1, 1)
        assert games.constraint_indicator(spec, tp, joint_with_distance(spec, 0.0)) == 1
        assert games.constraint_indicator(spec, tp, joint_with_distance(spec, 10.0)) == 0
        # boundary included: S == eta counts as violation
        assert games.constraint_indicator(spec, tp, joint_with_distance(spec, 1.5)) == 1

    @pytest.mark.parametrize("case", ALL_CASES)
    def test_indicator_iff_sublevel(self, case):
        spec = spec_of(case)
        tp = games.TypePair(2, 4)
        eta = games.collision_threshold(spec, tp)
        rng = np.random.default_rng(13)
        for _ in range(100):
            s = rng.uniform(0, 3 * eta)
            ind = games.constraint_indicator(spec, tp, joint_with_distance(spec, s))
            assert bool(ind) == (s <= eta)


class TestTerminalLoss:
    def test_narrow_road_progress_only(self):
        spec = spec_of("narrow_road")
        got = games.terminal_loss(spec, np.array([70.0, 4.0, 0.123, 18.0]))
        assert got == pytest.approx(-7.0e-5, rel=1e-12)

    def test_lane_change_targets_met(self):
        spec = spec_of("lane_change")
        assert games.terminal_loss(spec, np.array([0.0, 6.0, 0.0, 18.0]), 1) == 0.0
        assert games.terminal_loss(spec, np.array([0.0, 2.0, 0.0, 18.0]), 2) == 0.0
        # wrong lane for slot 2 costs (6-2)^2
        assert games.terminal_loss(spec, np.array([0.0, 6.0, 0.0, 18.0]), 2) == pytest.approx(16.0)

    def test_drone_progress(self):
        spec = spec_of("drone")
        got = games.terminal_loss(spec, np.array([10.0, 10.0, 0, 0, 0, 0.0]))
        assert got == pytest.approx(-2.0e-5, rel=1e-12)

    def test_invalid_slot(self):
        with pytest.raises(ConfigError):
            games.terminal_loss(spec_of("narrow_road"), np.zeros(4), 3)

    @pytest.mark.parametrize("case", ALL_CASES)
    @pytest.mark.parametrize("slot", [1, 2])
    def test_gradient_matches_fd(self, case, slot):
        spec = spec_of(case)
        rng = np.random.default_rng(17)
        for _ in range(20):
            x = rng.uniform(spec.x_hj[slot - 1, :, 0], spec.x_hj[slot - 1, :, 1])
            grad = games.terminal_loss_gradient(spec, x, slot)
            fd = central_diff(lambda z: games.terminal_loss(spec, z, slot), x)
            assert np.max(rel_err(grad, fd)) <= 1e-5


class TestHamiltonianMaximizer:
    def test_zero_costate(self):
        spec = spec_of("narrow_road")
        np.testing.assert_allclose(games.hamiltonian_maximizer(spec, np.zeros(4)), [0.0, 0.0])

    def test_clipped_example(self):
        spec = spec_of("narrow_road")
        u = games.hamiltonian_maximizer(spec, np.array([0.0, 0.0, 400.0, -20.0]))
        np.testing.assert_allclose(u, [1.0, -5.0])
        # grid search over 1e4 control samples agrees
        grid_u, _ = grid_control_search(spec, np.array([[0.0, 0.0, 400.0, -20.0]]),
                                        n=100, zoom_rounds=0)
        np.testing.assert_allclose(grid_u[0], [1.0, -5.0], atol=2e-2)

    def test_hover_thrust(self):
        spec = spec_of("drone")
        u = games.hamiltonian_maximizer(spec, np.zeros(6))
        assert u[2] == pytest.approx(games.GRAVITY)

    def test_nonfinite_costate_rejected(self):
        spec = spec_of("narrow_road")
        with pytest.raises(NumericalError):
            games.hamiltonian_maximizer(spec, np.array([0.0, 0.0, np.nan, 1.0]))

    @pytest.mark.parametrize("case", ALL_CASES)
    def test_matches_grid_oracle(self, case):
        spec = spec_of(case)
        rng = np.random.default_rng(23)
        lam = random_costates(spec, 200, rng)
        u_star = games.hamiltonian_maximizer(spec, lam)
        h_star = games.hamiltonian_control_objective(spec, lam, u_star)
        _, h_grid = grid_control_search(spec, lam, n=200, zoom_rounds=2)
        gap = np.abs(h_star - h_grid) / np.maximum(1.0, np.abs(h_grid))
        assert np.max(gap) <= 1e-6
