"""
Functional tests for the vehicle model.
"""

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from offroad_planner.errors import DomainError
from offroad_planner.vehicle import (
    PSI,
    V,
    X,
    Y,
    ControlInput,
    ModelParams,
    VehicleState,
    batch_rollout,
    derivative,
    derivative_array,
    rollout,
    step_rk4,
    throttle_to_dt,
    wrap_angle,
)


def euler_oracle(state: VehicleState, control: ControlInput, params: ModelParams, dt: float,
                 h: float = 1e-5) -> np.ndarray:
    """High-resolution forward Euler integration of the same derivative."""
    x = state.as_array()
    u = control.as_array()
    for _ in range(int(round(dt / h))):
        x = x + h * derivative_array(x, u, params)
    return x


@pytest.mark.smoke
class TestDerivative:
    """Test suite for the continuous-time model."""

    def test_longitudinal_acceleration_reference_value(self, car_params):
        """Test V-dot at v=1, D=0.5 on flat ground."""
        d = derivative(VehicleState(0.0, 0.0, 0.0, 1.0), ControlInput(0.0, 0.5), car_params)

        assert d[V] == pytest.approx(3.9, abs=1e-12), f"Expected 3.9 m/s^2, got {d[V]}"
        assert d[X] == pytest.approx(1.0)
        assert d[Y] == pytest.approx(0.0)
        assert d[PSI] == pytest.approx(0.0)

    def test_rest_state_is_static(self, car_params):
        """Test that static friction keeps a parked car at rest."""
        d = derivative(VehicleState(0.0, 0.0, 0.0, 0.0), ControlInput(0.0, 0.0), car_params)

        assert np.all(d == 0.0), f"Expected all-zero derivative, got {d}"

    def test_yaw_rate(self, car_params):
        """Test psi-dot = v * delta * c2."""
        d = derivative(VehicleState(0.0, 0.0, 0.0, 2.0), ControlInput(0.1, 0.3), car_params)

        assert d[PSI] == pytest.approx(2 * 0.1 * 1.69, abs=1e-12)

    def test_uphill_slope_decelerates(self, car_params):
        """Test that a positive slope reduces V-dot by g*sin(phi)."""
        flat = derivative(VehicleState(0, 0, 0, 1.0, phi=0.0), ControlInput(0.0, 0.5), car_params)
        hill = derivative(VehicleState(0, 0, 0, 1.0, phi=0.1), ControlInput(0.0, 0.5), car_params)

        assert flat[V] - hill[V] == pytest.approx(9.81 * math.sin(0.1), rel=1e-12)

    def test_mirror_symmetry(self, car_params, rng):
        """Test that negating delta and y negates Y-dot and psi-dot only."""
        for _ in range(50):
            v = rng.uniform(0.1, 3.0)
            delta = rng.uniform(-0.35, 0.35)
            throttle = rng.uniform(0.0, 1.0)
            a = derivative(VehicleState(0.0, 1.0, 0.0, v), ControlInput(delta, throttle), car_params)
            b = derivative(VehicleState(0.0, -1.0, 0.0, v), ControlInput(-delta, throttle), car_params)

            assert b[X] == pytest.approx(a[X], abs=1e-12)
            assert b[Y] == pytest.approx(-a[Y], abs=1e-12)
            assert b[PSI] == pytest.approx(-a[PSI], abs=1e-12)
            assert b[V] == pytest.approx(a[V], abs=1e-12)


class TestValueTypes:
    """Test suite for state, input and parameter invariants."""

    def test_control_bounds_enforced(self):
        """Test that out-of-range steering and throttle are rejected."""
        with pytest.raises(DomainError):
            ControlInput(0.4, 0.5)
        with pytest.raises(DomainError):
            ControlInput(0.0, 1.1)
        with pytest.raises(DomainError):
            ControlInput(0.0, -0.01)

    def test_custom_delta_max(self):
        """Test that delta_max widens the steering box."""
        assert ControlInput(0.5, 0.5, delta_max=0.6).delta == 0.5

    def test_negative_speed_rejected(self):
        """Test VehicleState rejects v < 0."""
        with pytest.raises(DomainError):
            VehicleState(0.0, 0.0, 0.0, -0.1)

    def test_non_positive_params_rejected(self):
        """Test ModelParams rejects zero or negative entries."""
        with pytest.raises(DomainError):
            ModelParams(cr0=0.0)
        with pytest.raises(DomainError):
            ModelParams(c2=-1.0)

    def test_params_dict_round_trip(self, car_params):
        """Test that ModelParams maps onto the vehicle config section."""
        data = car_params.to_dict()

        assert sorted(data) == sorted(["c1", "c2", "cm1", "cm2", "cr2", "cr0", "g", "mass_scale"])
        assert ModelParams.from_dict(data) == car_params

    def test_params_from_dict_rejects_unknown(self):
        """Test that unknown parameter names are rejected."""
        with pytest.raises(DomainError):
            ModelParams.from_dict({"c1": 0.5, "drag": 1.0})

    def test_wrap_angle_range(self):
        """Test that wrap_angle maps into (-pi, pi]."""
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


class TestIntegration:
    """Test suite for RK4 stepping and rollouts."""

    def test_rest_state_unchanged(self, car_params):
        """Test that a parked car with zero throttle stays put for any dt."""
        state = VehicleState(1.0, 2.0, 0.3, 0.0)
        for dt in (0.05, 0.2, 1.0):
            assert step_rk4(state, ControlInput(0.0, 0.0), car_params, dt) == state

    def test_matches_euler_oracle(self, car_params):
        """Test one RK4 step against a fine forward-Euler integration."""
        state = VehicleState(0.0, 0.0, 0.0, 1.0)
        control = ControlInput(0.0, 0.5)
        rk4 = step_rk4(state, control, car_params, 0.2).as_array()
        oracle = euler_oracle(state, control, car_params, 0.2)

        assert np.max(np.abs(rk4 - oracle)) < 1e-4, f"RK4 deviates from oracle by {np.max(np.abs(rk4 - oracle))}"

    def test_fourth_order_convergence(self, car_params):
        """Test that halving dt cuts the error at a fixed time by roughly 16x."""
        state = VehicleState(0.0, 0.0, 0.2, 1.5)
        control = ControlInput(0.3, 0.6)
        horizon = 0.8
        reference = solve_ivp(lambda t, x: derivative_array(x, control.as_array(), car_params), (0.0, horizon),
                              state.as_array(), method="DOP853", rtol=1e-13, atol=1e-13).y[:, -1]

        def error(dt: float) -> float:
            steps = int(round(horizon / dt))
            final = rollout(state, [control] * steps, car_params, [dt] * steps)[-1].as_array()
            return float(np.max(np.abs(final[:4] - reference[:4])))

        ratio = error(0.2) / error(0.1)

        assert 12.0 <= ratio <= 20.0, f"Error ratio on halving dt was {ratio}"

    def test_speed_never_negative(self, car_params, rng):
        """Test that randomized inputs never produce negative speed."""
        states = np.zeros((10000, 6))
        states[:, V] = rng.uniform(0.0, 3.0, 10000)
        states[:, 4] = rng.uniform(-0.15, 0.15, 10000)
        inputs = np.stack([rng.uniform(-0.35, 0.35, 10000), rng.uniform(0.0, 1.0, 10000)], axis=-1)[:, None, :]
        traj = batch_rollout(states, inputs, car_params, np.full((10000, 1), 0.6))

        assert np.all(traj[..., V] >= 0.0)

    def test_dt_bounds(self, car_params):
        """Test that dt outside (0, 1] is rejected."""
        state = VehicleState(0.0, 0.0, 0.0, 1.0)
        with pytest.raises(DomainError):
            step_rk4(state, ControlInput(0.0, 0.5), car_params, 0.0)
        with pytest.raises(DomainError):
            step_rk4(state, ControlInput(0.0, 0.5), car_params, 1.5)

    def test_v_max_cap(self, car_params):
        """Test that the optional speed cap clamps after each step."""
        state = VehicleState(0.0, 0.0, 0.0, 2.9)
        capped = step_rk4(state, ControlInput(0.0, 1.0), car_params, 0.6, v_max=3.0)

        assert capped.v == pytest.approx(3.0)

    def test_empty_rollout(self, car_params):
        """Test that H=0 returns just the initial state."""
        state = VehicleState(0.0, 0.0, 0.0, 1.0)

        assert rollout(state, [], car_params, []) == [state]

    def test_straight_rollout_keeps_heading(self, car_params):
        """Test that zero steering from psi=0, y=0 keeps y and psi at 0."""
        states = rollout(VehicleState(0.0, 0.0, 0.0, 1.0), [ControlInput(0.0, 0.5)] * 10, car_params, [0.2] * 10)

        assert all(s.y == 0.0 and s.psi == 0.0 for s in states)
        assert states[-1].x > states[0].x

    def test_constant_turn_wraps(self, car_params):
        """Test that a sustained left turn increases heading and wraps through pi."""
        states = rollout(VehicleState(0.0, 0.0, 0.0, 1.0), [ControlInput(0.3, 0.2)] * 60, car_params, [0.2] * 60)
        unwrapped = np.unwrap([s.psi for s in states])

        assert np.all(np.diff(unwrapped) > 0), "Heading should increase monotonically"
        assert unwrapped[-1] > math.pi, "Heading should pass through pi"
        assert all(-math.pi < s.psi <= math.pi for s in states)

    def test_batch_rollout_matches_rollout(self, car_params, rng):
        """Test that the vectorized rollout equals per-candidate rollouts."""
        start = VehicleState(3.0, 4.0, 0.5, 1.2, phi=0.05)
        inputs = np.stack([rng.uniform(-0.35, 0.35, (4, 6)), rng.uniform(0, 1, (4, 6))], axis=-1)
        dts = throttle_to_dt(inputs[..., 1])
        traj = batch_rollout(start.as_array(), inputs, car_params, dts, v_max=3.0)

        for n in range(4):
            controls = [ControlInput(*inputs[n, t]) for t in range(6)]
            states = rollout(start, controls, car_params, dts[n], v_max=3.0)
            np.testing.assert_allclose(traj[n], np.array([s.as_array() for s in states]), rtol=0, atol=1e-12)


class TestThrottleToDt:
    """Test suite for the throttle time-dilation map."""

    @pytest.mark.parametrize("throttle,dt", [(0.0, 0.2), (0.5, 0.4), (1.0, 0.6)])
    def test_reference_levels(self, throttle, dt):
        """Test the 1X/2X/3X levels map exactly."""
        assert throttle_to_dt(throttle) == dt

    def test_vectorized(self):
        """Test array input."""
        np.testing.assert_allclose(throttle_to_dt(np.array([0.25, 0.75])), [0.3, 0.5])

    def test_out_of_range(self):
        """Test that throttle outside [0, 1] is rejected."""
        with pytest.raises(DomainError):
            throttle_to_dt(1.2)
