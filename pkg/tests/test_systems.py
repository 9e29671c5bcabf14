"""Benchmark systems, dynamics stepping, and rollout costs."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npmpc.systems import (INF, LipschitzData, System, bellman_residual,
                           config_digest, exact_step, load_system,
                           make_clqr, make_min_time, make_pendulum,
                           rollout_cost, save_system, simulate, step,
                           system_config)

PEND_DT = 0.05
PEND_G = 9.82


def pendulum_hand_rollout(x0, controls, gamma):
    """Scalar re-simulation of the pendulum in pure Python floats.

    Kept deliberately free of numpy so it cannot share a code path with the
    package implementation.
    """
    th, om = float(x0[0]), float(x0[1])
    total = 0.0
    for t, u in enumerate(controls):
        u = float(u)
        total += gamma**t * (th * th + 0.1 * om * om + 0.01 * u * u)
        th, om = th + PEND_DT * om, om + PEND_DT * (u - PEND_G * math.sin(th))
    return total  # QF = 0, so the terminal adds nothing


class TestStep:
    def test_lti_first_column(self):
        got = step(make_clqr(), [1.0, 0.0], [0.0])
        assert got.tolist() == [1.0, 0.0]

    def test_pendulum_upright_fixed_point(self):
        got = step(make_pendulum(), [0.0, 0.0], [0.0])
        assert np.abs(got).max() <= 1e-12

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            step(make_clqr(), [1.0, 0.0, 0.0], [0.0])
        with pytest.raises(ValueError):
            step(make_clqr(), [1.0, 0.0], [0.0, 0.0])

    def test_batch_matches_rowwise(self):
        sys = make_pendulum()
        rng = np.random.default_rng(3)
        X = sys.X.sample(rng, size=32)
        U = sys.U.sample(rng, size=32)
        batched = step(sys, X, U)
        single = np.stack([step(sys, X[i], U[i]) for i in range(32)])
        assert np.array_equal(batched, single)

    def test_origin_is_equilibrium_for_every_benchmark(self):
        for sys in (make_clqr(), make_min_time()):
            assert step(sys, [0.0, 0.0], [0.0]).tolist() == [0.0, 0.0]
        assert np.abs(step(make_pendulum(), [0.0, 0.0], [0.0])).max() <= 1e-12


class TestExactStep:
    def test_clqr_rational(self):
        from fractions import Fraction

        sys = make_clqr()
        assert exact_step(sys, (1, 0), (0,)) == (Fraction(1), Fraction(0))
        # A (1,1)' = (1 + 1/10, 1)'
        assert exact_step(sys, (1, 1), (0,)) == (Fraction(11, 10), Fraction(1))

    def test_matches_float_step_on_representables(self):
        sys = make_min_time()
        got = exact_step(sys, (0.5, -0.25), (1.0,))
        flo = step(sys, [0.5, -0.25], [1.0])
        assert [float(v) for v in got] == pytest.approx(flo.tolist(), abs=1e-15)

    def test_pendulum_has_no_exact_dynamics(self):
        with pytest.raises(ValueError):
            exact_step(make_pendulum(), (0, 0), (0,))


class TestSimulate:
    def test_shape_and_first_row(self):
        sys = make_clqr()
        states = simulate(sys, [1.0, -1.0], np.zeros((4, 1)))
        assert states.shape == (5, 2)
        assert states[0].tolist() == [1.0, -1.0]

    def test_flat_control_vector_accepted(self):
        sys = make_clqr()
        a = simulate(sys, [0.5, 0.5], np.zeros(3))
        b = simulate(sys, [0.5, 0.5], np.zeros((3, 1)))
        assert np.array_equal(a, b)


class TestRolloutCost:
    def test_equilibrium_zero(self):
        sys = make_clqr()
        assert rollout_cost(sys, [0.0, 0.0], np.zeros((sys.T, 1))) == 0.0

    def test_start_outside_box_is_infinite(self):
        sys = make_clqr()
        assert rollout_cost(sys, [10.0, 0.0], np.zeros((sys.T, 1))) == INF

    def test_control_outside_box_is_infinite(self):
        sys = make_clqr()
        assert rollout_cost(sys, [0.0, 0.0], [[5.0]]) == INF

    def test_pendulum_three_step_hand_rollout(self):
        sys = make_pendulum(T=3)
        controls = np.zeros((3, 1))
        want = pendulum_hand_rollout([0.5, 0.0], [0.0, 0.0, 0.0], sys.gamma)
        got = rollout_cost(sys, [0.5, 0.0], controls)
        assert got == pytest.approx(want, rel=1e-12)

    def test_pendulum_discounted_hand_rollout(self):
        sys = make_pendulum(gamma=0.5, T=4)
        us = [1.0, -2.0, 0.5, 0.0]
        want = pendulum_hand_rollout([0.3, -0.2], us, 0.5)
        got = rollout_cost(sys, [0.3, -0.2], np.asarray(us).reshape(-1, 1))
        assert got == pytest.approx(want, rel=1e-12)

    def test_erosion_applies_to_interior_steps_only(self):
        sys = make_clqr()
        x0 = [2.95, 0.0]  # A keeps (x, 0) fixed, so every state is (2.95, 0)
        assert math.isfinite(rollout_cost(sys, x0, [[0.0], [0.0]], eps=0.0))
        assert rollout_cost(sys, x0, [[0.0], [0.0]], eps=0.1) == INF
        # a single control leaves no interior step to test
        assert math.isfinite(rollout_cost(sys, x0, [[0.0]], eps=0.1))

    def test_box_terminal_infinite_outside(self):
        sys = make_min_time()
        controls = np.zeros((sys.T, 1))
        assert rollout_cost(sys, [1.0, 0.0], controls) == INF

    def test_box_terminal_zero_at_origin(self):
        # stage cost is 1 + 10|u|, so resting at the origin costs T exactly
        sys = make_min_time()
        got = rollout_cost(sys, [0.0, 0.0], np.zeros((sys.T, 1)))
        assert got == float(sys.T)

    def test_undiscounted_sum_matches_reversed_accumulation(self):
        sys = make_pendulum(gamma=1.0, T=40)
        rng = np.random.default_rng(11)
        for _ in range(5):
            x0 = [rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)]
            controls = rng.uniform(-1.0, 1.0, size=(40, 1))
            got = rollout_cost(sys, x0, controls)
            if math.isinf(got):
                continue
            states = simulate(sys, x0, controls)
            terms = [float(sys.stage_cost(states[t], controls[t])) for t in range(40)]
            want = float(sys.terminal_cost(states[40]))
            for v in reversed(terms):
                want += v
            assert got == pytest.approx(want, rel=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_cost_recursion_one_step(self, seed):
        """J(x0; u_0..u_H) = c(x0, u0) + gamma * J(x1; u_1..u_H)."""
        sys = make_clqr(gamma=0.9)
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(-1.0, 1.0, size=2)
        controls = rng.uniform(-0.5, 0.5, size=(4, 1))
        whole = rollout_cost(sys, x0, controls)
        x1 = step(sys, x0, controls[0])
        rest = rollout_cost(sys, x1, controls[1:])
        head = float(sys.stage_cost(x0, controls[0]))
        if math.isinf(whole) or math.isinf(rest):
            assert math.isinf(whole) and math.isinf(rest)
        else:
            assert whole == pytest.approx(head + 0.9 * rest, rel=1e-12, abs=1e-12)


class TestBenchmarkDefinitions:
    def test_clqr_boxes(self):
        sys = make_clqr()
        assert sys.X.lo.tolist() == [-3.0, -3.0] and sys.X.hi.tolist() == [3.0, 3.0]
        assert sys.U.lo.tolist() == [-2.0] and sys.U.hi.tolist() == [2.0]
        assert sys.T == 10

    def test_clqr_matrices(self):
        sys = make_clqr()
        assert sys.A.tolist() == [[1.0, 0.1], [0.0, 1.0]]
        assert sys.B.tolist() == [[0.15], [1.0]]
        assert sys.lipschitz.L_f == 1.1

    def test_pendulum_metadata(self):
        sys = make_pendulum()
        assert sys.lipschitz.L_u > 0
        assert sys.X.hi.tolist() == [2.0, 2.0]
        assert sys.U.hi.tolist() == [5.0]
        assert sys.T == 100
        assert sys.lipschitz.L_f == pytest.approx(1.0 + 0.05 * 9.82, rel=1e-15)

    def test_min_time_stage_cost_value(self):
        got = float(make_min_time().stage_cost((0.0, 0.0), (0.5,)))
        assert got == 6.0

    def test_min_time_terminal_band(self):
        term = make_min_time().terminal_cost
        assert float(term((0.0, 0.0))) == 0.0
        assert float(term((1e-3, 0.0))) == 0.0  # closed band
        assert float(term((2e-3, 0.0))) == INF

    def test_stage_costs_nonnegative_on_samples(self):
        rng = np.random.default_rng(7)
        for sys in (make_clqr(), make_pendulum(), make_min_time()):
            X = sys.X.sample(rng, size=10_000)
            U = sys.U.sample(rng, size=10_000)
            vals = np.asarray(sys.stage_cost(X, U), dtype=float)
            assert vals.shape == (10_000,)
            assert (vals >= 0.0).all()

    @pytest.mark.parametrize("maker", [make_clqr, make_pendulum, make_min_time])
    def test_empirical_state_lipschitz(self, maker):
        sys = maker()
        rng = np.random.default_rng(13)
        X1 = sys.X.sample(rng, size=10_000)
        X2 = sys.X.sample(rng, size=10_000)
        U = sys.U.sample(rng, size=10_000)
        lhs = np.abs(step(sys, X1, U) - step(sys, X2, U)).max(axis=1)
        rhs = sys.lipschitz.L_f * np.abs(X1 - X2).max(axis=1)
        assert (lhs <= rhs * (1 + 1e-12) + 1e-15).all()

    @pytest.mark.parametrize("maker", [make_clqr, make_pendulum, make_min_time])
    def test_empirical_control_lipschitz(self, maker):
        sys = maker()
        rng = np.random.default_rng(17)
        X = sys.X.sample(rng, size=10_000)
        U1 = sys.U.sample(rng, size=10_000)
        U2 = sys.U.sample(rng, size=10_000)
        lhs = np.abs(step(sys, X, U1) - step(sys, X, U2)).max(axis=1)
        rhs = sys.lipschitz.L_u * np.abs(U1 - U2).max(axis=1)
        assert (lhs <= rhs * (1 + 1e-12) + 1e-15).all()

    def test_jacobian_matches_finite_differences(self):
        sys = make_pendulum()
        x = np.array([0.4, -0.7])
        u = np.array([1.3])
        Jx, Ju = sys.jacobian(x, u)
        h = 1e-7
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (step(sys, x + e, u) - step(sys, x - e, u)) / (2 * h)
            assert fd == pytest.approx(Jx[:, i], abs=1e-7)
        fd = (step(sys, x, u + h) - step(sys, x, u - h)) / (2 * h)
        assert fd == pytest.approx(Ju[:, 0], abs=1e-7)


class TestBellmanResidual:
    def test_zero_value_zero_cost(self):
        sys = dataclasses.replace(make_clqr(), stage_cost=lambda x, u: 0.0)
        got = bellman_residual(sys, lambda x: 0.0, lambda x: [0.0], [1.0, 1.0])
        assert got == 0.0

    def test_constant_value_undiscounted(self):
        # J = 1, c = 0, gamma = 1: residual is |1 - 0 - 1| = 0
        sys = dataclasses.replace(make_clqr(gamma=1.0), stage_cost=lambda x, u: 0.0)
        got = bellman_residual(sys, lambda x: 1.0, lambda x: [0.0], [0.5, -0.5])
        assert got == 0.0

    def test_infinite_value_propagates(self):
        sys = make_clqr()
        got = bellman_residual(sys, lambda x: INF, lambda x: [0.0], [0.0, 0.0])
        assert got == INF

    def test_hand_value(self):
        sys = make_clqr(gamma=0.5)
        x = np.array([1.0, 0.0])
        u = [1.0]
        xn = step(sys, x, u)
        J = lambda z: 2.0  # noqa: E731
        want = abs(2.0 - float(sys.stage_cost(x, np.asarray(u))) - 0.5 * 2.0)
        assert bellman_residual(sys, J, lambda z: u, x) == pytest.approx(want)


class TestValidation:
    def test_gamma_range(self):
        with pytest.raises(ValueError):
            make_clqr(gamma=0.0)
        with pytest.raises(ValueError):
            make_clqr(gamma=1.2)

    def test_horizon_positive(self):
        with pytest.raises(ValueError):
            make_clqr(T=0)

    def test_lipschitz_fields_positive(self):
        with pytest.raises(ValueError):
            LipschitzData(L_f=0.0, L_u=1.0, L_J=1.0, L=1.0)
        with pytest.raises(ValueError):
            LipschitzData(L_f=1.0, L_u=1.0, L_J=math.inf, L=1.0)


class TestConfigRoundTrip:
    def test_builtin_by_name(self):
        sys = load_system("pendulum")
        assert sys.builtin == "pendulum" and sys.T == 100

    def test_config_dict_round_trip(self):
        sys = make_pendulum(gamma=0.5, T=60)
        cfg = system_config(sys)
        assert cfg["builtin"] == "pendulum"
        back = load_system(cfg)
        assert back.gamma == 0.5 and back.T == 60
        assert config_digest(back) == config_digest(sys)

    def test_digest_distinguishes_gamma(self):
        assert config_digest(make_clqr(gamma=1.0)) != config_digest(make_clqr(gamma=0.9))

    def test_save_load_file(self, tmp_path):
        p = tmp_path / "sys.json"
        save_system(make_min_time(T=50), p)
        back = load_system(str(p))
        assert back.name == "min_time" and back.T == 50
        assert back.terminal_model is not None

    def test_builtin_field_conflict_rejected(self):
        cfg = system_config(make_clqr())
        cfg["X_hi"] = [4.0, 4.0]
        with pytest.raises(ValueError):
            load_system(cfg)

    def test_custom_lti_config(self):
        cfg = {
            "name": "double-int",
            "A": [[1.0, 0.1], [0.0, 1.0]],
            "B": [[0.0], [0.1]],
            "X_lo": [-1.0, -1.0],
            "X_hi": [1.0, 1.0],
            "U_lo": [-1.0],
            "U_hi": [1.0],
            "gamma": 0.95,
            "T": 20,
            "lipschitz": {"L_f": 1.1, "L_u": 0.1, "L_J": 10.0, "L": 1.0},
        }
        sys = load_system(cfg)
        assert sys.is_lti and sys.n == 2 and sys.m == 1
        assert step(sys, [0.0, 1.0], [0.0]).tolist() == [0.1, 1.0]
        # default quadratic cost
        assert float(sys.stage_cost(np.array([1.0, 0.0]), np.array([2.0]))) == 5.0

    def test_custom_lti_missing_fields(self):
        with pytest.raises(ValueError):
            load_system({"name": "x", "A": [[1.0]]})

    def test_unknown_builtin_rejected(self):
        with pytest.raises(ValueError):
            load_system({"builtin": "rocket"})
