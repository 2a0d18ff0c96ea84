#!/usr/bin/env python3
"""
Tests for the kinematic bicycle model and its per-step linearization
"""
import math
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from dynamics import (ControlInput, DynamicsError, VehicleParams, VehicleState, constant_velocity_reference,
                      continuous_derivative, jacobians, linearize, rollout, rollout_affine,
                      slip_from_steering, step_discrete, wrap_heading)

PARAMS = VehicleParams()


class TestVehicleModel(unittest.TestCase):
    """Continuous and discrete dynamics"""

    def test_straight_line_at_constant_speed(self):
        x = VehicleState(0.0, 0.0, 0.0, 5.0)
        nxt = step_discrete(x, ControlInput(0.0, 0.0), 0.2, PARAMS)
        self.assertEqual(nxt, VehicleState(1.0, 0.0, 0.0, 5.0))

    def test_acceleration_changes_speed_only_next_step(self):
        states = rollout(np.array([0.0, 0.0, 0.0, 0.0]), [np.array([2.0, 0.0])] * 2, 0.5, PARAMS)
        np.testing.assert_allclose(states[1], [0.0, 0.0, 0.0, 1.0])
        np.testing.assert_allclose(states[2], [0.5, 0.0, 0.0, 2.0])

    def test_slip_turns_heading(self):
        d = continuous_derivative([0.0, 0.0, 0.0, 3.0], [0.0, 0.1], PARAMS)
        np.testing.assert_allclose(d, [3.0, 0.3, 3.0 / PARAMS.l_r * 0.1, 0.0])

    def test_slip_from_steering(self):
        self.assertEqual(slip_from_steering(0.0, PARAMS), 0.0)
        self.assertAlmostEqual(slip_from_steering(0.3, PARAMS), math.atan(0.5 * math.tan(0.3)))

    def test_wrap_heading(self):
        self.assertAlmostEqual(wrap_heading(3 * math.pi + 0.1), 0.1 - math.pi)
        self.assertAlmostEqual(wrap_heading(-0.5), -0.5)
        self.assertAlmostEqual(wrap_heading(math.pi), -math.pi)
        self.assertAlmostEqual(wrap_heading(-7.0), -7.0 + 2 * math.pi)

    def test_invalid_parameters(self):
        with self.assertRaises(DynamicsError):
            VehicleParams(l_r=0.0)
        with self.assertRaises(DynamicsError):
            VehicleParams(a_min=1.0, a_max=1.0)
        with self.assertRaises(DynamicsError):
            VehicleState(0.0, float('nan'), 0.0, 0.0)
        with self.assertRaises(DynamicsError):
            step_discrete([0, 0, 0, 0], [0, 0], 0.0, PARAMS)

    def test_input_box(self):
        np.testing.assert_array_equal(PARAMS.input_lower(), [-9.0, -0.2])
        np.testing.assert_array_equal(PARAMS.input_upper(), [4.0, 0.2])


class TestLinearization(unittest.TestCase):
    """Jacobians and affine models"""

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-math.pi, math.pi), st.floats(0.0, 15.0),
           st.floats(-9.0, 4.0), st.floats(-0.2, 0.2))
    def test_jacobians_match_finite_differences(self, theta, v, a, beta):
        x = np.array([1.0, -2.0, theta, v])
        u = np.array([a, beta])
        dt, h = 0.2, 1e-5
        A, B = jacobians(x, u, dt, PARAMS)
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            fd = (step_discrete(x + e, u, dt, PARAMS) - step_discrete(x - e, u, dt, PARAMS)) / (2 * h)
            np.testing.assert_allclose(A[:, j], fd, atol=1e-6)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (step_discrete(x, u + e, dt, PARAMS) - step_discrete(x, u - e, dt, PARAMS)) / (2 * h)
            np.testing.assert_allclose(B[:, j], fd, atol=1e-6)

    def test_affine_model_reproduces_reference(self):
        x0 = np.array([0.0, 0.5, 0.1, 6.0])
        inputs = [np.array([1.0, 0.05]), np.array([-2.0, -0.1]), np.array([0.0, 0.2])]
        ref = rollout(x0, inputs, 0.2, PARAMS)
        model = linearize(ref, inputs, 0.2, PARAMS)
        for got, want in zip(rollout_affine(x0, inputs, model), ref):
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_first_step_is_exact_for_any_input(self):
        x0 = np.array([0.0, 0.0, 0.3, 4.0])
        ref, zero = constant_velocity_reference(x0, 4, 0.2, PARAMS)
        step = linearize(ref, zero, 0.2, PARAMS)[0]
        # the Euler map is affine in u at a fixed state
        for u in ([3.0, 0.1], [-9.0, -0.2], [0.5, 0.0]):
            np.testing.assert_allclose(step.apply(x0, u), step_discrete(x0, u, 0.2, PARAMS), atol=1e-12)

    def test_reference_length_checked(self):
        with self.assertRaises(DynamicsError):
            linearize([np.zeros(4)], [np.zeros(2)], 0.2, PARAMS)

    def test_constant_velocity_reference(self):
        states, inputs = constant_velocity_reference(np.array([0.0, 0.0, 0.0, 2.0]), 3, 0.5, PARAMS)
        self.assertEqual(len(states), 3)
        self.assertEqual(len(inputs), 2)
        np.testing.assert_allclose(states[-1], [2.0, 0.0, 0.0, 2.0])


if __name__ == '__main__':
    unittest.main(verbosity=2)
