#!/usr/bin/env python3
"""
Kinematic bicycle model with slip angle as a direct input.

State (px, py, theta, v), input (a, beta). Forward Euler is used both for
simulation and for the per-step affine models handed to the MILP, so the
planner and the simulator agree exactly on the reference trajectory.
"""
import math
from dataclasses import dataclass

import numpy as np

STATE_NAMES = ('px', 'py', 'theta', 'v')
INPUT_NAMES = ('a', 'beta')


class DynamicsError(Exception):
    pass


@dataclass(frozen=True)
class VehicleState:
    px: float
    py: float
    theta: float
    v: float

    def __post_init__(self):
        if not all(math.isfinite(getattr(self, n)) for n in STATE_NAMES):
            raise DynamicsError(f"non-finite vehicle state {self}")

    def as_array(self):
        return np.array([self.px, self.py, self.theta, self.v], dtype=float)

    @classmethod
    def from_array(cls, arr):
        px, py, theta, v = (float(x) for x in arr)
        return cls(px, py, theta, v)


@dataclass(frozen=True)
class ControlInput:
    a: float
    beta: float

    def as_array(self):
        return np.array([self.a, self.beta], dtype=float)

    @classmethod
    def from_array(cls, arr):
        a, beta = (float(x) for x in arr)
        return cls(a, beta)


@dataclass(frozen=True)
class VehicleParams:
    # l_r, input box: published constants; l_f = l_r is our choice
    l_r: float = 1.5
    l_f: float = 1.5
    a_min: float = -9.0
    a_max: float = 4.0
    beta_min: float = -0.2
    beta_max: float = 0.2

    def __post_init__(self):
        if self.l_r <= 0 or self.l_f <= 0:
            raise DynamicsError("axle distances must be positive")
        if not self.a_min < self.a_max:
            raise DynamicsError(f"a_min {self.a_min} must be below a_max {self.a_max}")
        if not self.beta_min < self.beta_max:
            raise DynamicsError(f"beta_min {self.beta_min} must be below beta_max {self.beta_max}")

    def input_lower(self):
        return np.array([self.a_min, self.beta_min])

    def input_upper(self):
        return np.array([self.a_max, self.beta_max])


@dataclass(frozen=True)
class AffineStep:
    """x_{t+1} ~= A x_t + B u_t + c"""
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray

    def apply(self, x, u):
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.asarray(u, dtype=float) + self.c


def _state(x):
    return x.as_array() if isinstance(x, VehicleState) else np.asarray(x, dtype=float)


def _input(u):
    return u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)


def continuous_derivative(x, u, p):
    _, _, theta, v = _state(x)
    a, beta = _input(u)
    s, c = math.sin(theta), math.cos(theta)
    return np.array([
        v * c - v * s * beta,
        v * s + v * c * beta,
        v / p.l_r * beta,
        a,
    ])


def wrap_heading(theta):
    """Heading folded into [-pi, pi)."""
    return (float(theta) + math.pi) % (2.0 * math.pi) - math.pi


def slip_from_steering(steer, p):
    return math.atan(p.l_r / (p.l_f + p.l_r) * math.tan(steer))


def step_discrete(x, u, dt, p):
    if not dt > 0:
        raise DynamicsError(f"dt must be positive, got {dt}")
    nxt = _state(x) + dt * continuous_derivative(x, u, p)
    return VehicleState.from_array(nxt) if isinstance(x, VehicleState) else nxt


def jacobians(x, u, dt, p):
    """Analytic Jacobians of the Euler map with respect to state and input."""
    _, _, theta, v = _state(x)
    _, beta = _input(u)
    s, c = math.sin(theta), math.cos(theta)
    A = np.eye(4)
    A[0, 2] += dt * (-v * s - v * c * beta)
    A[0, 3] += dt * (c - s * beta)
    A[1, 2] += dt * (v * c - v * s * beta)
    A[1, 3] += dt * (s + c * beta)
    A[2, 3] += dt * beta / p.l_r
    B = np.zeros((4, 2))
    B[0, 1] = dt * (-v * s)
    B[1, 1] = dt * (v * c)
    B[2, 1] = dt * v / p.l_r
    B[3, 0] = dt
    return A, B


def linearize(ref_states, ref_inputs, dt, p):
    if len(ref_states) != len(ref_inputs) + 1:
        raise DynamicsError(
            f"need one more reference state than inputs, got {len(ref_states)} and {len(ref_inputs)}")
    steps = []
    for x_bar, u_bar in zip(ref_states, ref_inputs):
        xb, ub = _state(x_bar), _input(u_bar)
        A, B = jacobians(xb, ub, dt, p)
        c = step_discrete(xb, ub, dt, p) - A @ xb - B @ ub
        steps.append(AffineStep(A, B, c))
    return steps


def rollout(x0, inputs, dt, p):
    """Nonlinear simulation; returns the list of states including x0."""
    states = [_state(x0)]
    for u in inputs:
        states.append(step_discrete(states[-1], u, dt, p))
    return states


def rollout_affine(x0, inputs, model):
    states = [np.asarray(x0, dtype=float)]
    for step, u in zip(model, inputs):
        states.append(step.apply(states[-1], u))
    return states


def constant_velocity_reference(x0, steps, dt, p):
    """Zero-input rollout used as the first linearization reference."""
    inputs = [np.zeros(2) for _ in range(steps - 1)]
    return rollout(x0, inputs, dt, p), inputs
