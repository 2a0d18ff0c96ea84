#!/usr/bin/env python3
"""
Tests for Stage 2: dominance, the Pareto filter, epsilon grids and action
selection on problems whose fronts can be worked out by hand.
"""
import unittest

import numpy as np

from dynamics import AffineStep, VehicleParams, VehicleState, constant_velocity_reference, linearize
from milp import MilpSolution, SolverConfig, solve
from risk import AgentModel, RiskParams
from stage1 import MpcProblem, NamedFormula, SpecSet, restore_feasibility
from stage2 import (Budget, Candidate, EpsilonGrid, Objective, ObjectiveSpec, ParetoError, ParetoResult,
                    Stage2Problem, approximate_pareto, build_grids, dominates, pareto_filter, select_action,
                    solve_epsilon_subproblem)
from stl_core import TimeGrid, parse_formula, robustness

CFG = SolverConfig(lp_backend='highs')
TERMINAL = ObjectiveSpec([Objective('p', 'terminal', weights=(('p', 1.0),)),
                          Objective('q', 'terminal', weights=(('q', 1.0),))])


def named(name, text):
    return NamedFormula(name, parse_formula(text), text)


def plane(upper=2.0):
    """One step of p' = p + up, q' = q + uq from the origin, inputs in [0, upper]"""
    eye = np.eye(2)
    return MpcProblem(horizon=TimeGrid(1.0, 2), x0=[0.0, 0.0],
                      linear_model=[AffineStep(eye, eye, np.zeros(2))],
                      input_lower=[0.0, 0.0], input_upper=[upper, upper],
                      state_names=('p', 'q'), input_names=('up', 'uq'))


def make_candidate(cid, g, delta=0.0, u=(0.0,)):
    return Candidate(u=np.array([u]), delta={'s': delta}, x=None, g_true=tuple(g), g_surrogate=tuple(g),
                     origin=(0, ()), id=cid)


class TestDominance(unittest.TestCase):

    def test_dominates(self):
        self.assertTrue(dominates((1, 2), (1, 3)))
        self.assertFalse(dominates((1, 3), (1, 3)))
        self.assertFalse(dominates((0, 4), (1, 3)))
        with self.assertRaises(ParetoError):
            dominates((1, 2), (1, 2, 3))

    def test_filter_matches_quadratic_oracle(self):
        rng = np.random.default_rng(5)
        vectors = [tuple(float(v) for v in rng.integers(0, 6, 3)) for _ in range(500)]
        candidates = [make_candidate(i, g, delta=float(rng.integers(0, 3))) for i, g in enumerate(vectors)]
        front, dominated = pareto_filter(candidates)
        unique = set(vectors)
        expected = {g for g in unique if not any(dominates(h, g) for h in unique)}
        self.assertEqual({c.g_true for c in front}, expected)
        self.assertEqual(len(front), len(expected))
        self.assertEqual(len(front) + len(dominated), len(candidates))
        for c in front:
            twins = [o for o in candidates if o.g_true == c.g_true]
            self.assertIs(c, min(twins, key=lambda o: (o.delta_norm, o.control_norm, o.id)))
        self.assertEqual([c.id for c in front], sorted(c.id for c in front))

    def test_equal_vectors_keep_smallest_relaxation(self):
        a = make_candidate(0, (1.0, 1.0), delta=2.0)
        b = make_candidate(1, (1.0, 1.0), delta=0.5)
        front, dominated = pareto_filter([a, b])
        self.assertEqual(front, [b])
        self.assertEqual(dominated, [a])

    def test_select_action_prefers_smallest_deviation(self):
        near = make_candidate(0, (2.0, 1.0), u=(0.5,))
        far = make_candidate(1, (1.0, 2.0), u=(3.0,))
        result = ParetoResult([far, near], [], [])
        self.assertIs(select_action(result, [[0.0]]), near)
        self.assertIs(select_action(result, [[3.0]]), far)
        with self.assertRaises(ParetoError):
            select_action(ParetoResult([], [], []), [[0.0]])


class TestObjectives(unittest.TestCase):

    def test_validation(self):
        with self.assertRaises(ParetoError):
            Objective('r', 'agent_risk')
        with self.assertRaises(ParetoError):
            Objective('x', 'luck')
        with self.assertRaises(ParetoError):
            ObjectiveSpec([Objective('p', 'progress')])
        with self.assertRaises(ParetoError):
            ObjectiveSpec([Objective('p', 'progress'), Objective('p', 'comfort')])
        with self.assertRaises(ParetoError):
            Budget(-1.0, 0.0)
        self.assertEqual(Budget(1.5, 2.0).upper, 3.5)
        self.assertEqual(TERMINAL.names, ['p', 'q'])


class TestEpsilonConstraint(unittest.TestCase):
    """Hard p + q >= 2 makes the front the segment from (0, 2) to (2, 0)"""

    def setUp(self):
        self.specs = SpecSet(hard=[named('sum', 'G[1,1](p + q >= 2)')])

    def test_grid_spans_ideal_to_nadir(self):
        grid = build_grids(plane(), self.specs, Budget(0.0, 0.0), TERMINAL, 3, cfg=CFG)
        self.assertIsInstance(grid, EpsilonGrid)
        for axis in grid.values:
            np.testing.assert_allclose(axis, [0.0, 1.0, 2.0], atol=1e-6)
        with self.assertRaises(ParetoError):
            build_grids(plane(), self.specs, Budget(0.0, 0.0), TERMINAL, 1, cfg=CFG)

    def test_front_lies_on_the_constraint(self):
        result = approximate_pareto(plane(), self.specs, Budget(0.0, 0.0), TERMINAL, 3, cfg=CFG)
        self.assertEqual(result.solves, 6)
        self.assertEqual(result.tasks, 6)
        self.assertEqual(len(result.candidates), 6)
        for c in result.pareto_set:
            self.assertAlmostEqual(c.g_true[0] + c.g_true[1], 2.0, places=5)
        for a in result.pareto_set:
            for b in result.pareto_set:
                self.assertFalse(dominates(a.g_true, b.g_true))
        points = sorted({(round(g[0], 4), round(g[1], 4)) for g in result.front})
        self.assertEqual(points, [(0.0, 2.0), (1.0, 1.0), (2.0, 0.0)])

    def test_single_subproblem(self):
        cand = solve_epsilon_subproblem(plane(), self.specs, Budget(0.0, 0.0), TERMINAL, 0, {1: 0.5}, cfg=CFG)
        self.assertAlmostEqual(cand.g_true[0], 1.5, places=5)
        self.assertAlmostEqual(cand.g_true[1], 0.5, places=5)
        self.assertIsNone(solve_epsilon_subproblem(plane(upper=1.0), self.specs, Budget(0.0, 0.0), TERMINAL,
                                                   0, {1: -0.5}, cfg=CFG))

    def test_budget_limits_relaxation(self):
        specs = SpecSet(hard=self.specs.hard, soft=[named('cap', 'G[1,1](p <= 0.5)')])
        ctx = Stage2Problem(plane(), specs, Budget(0.0, 1.0), TERMINAL, cfg=CFG)
        self.assertIn('budget_upper', [con.name for con in ctx.enc.model.constraints])
        result = approximate_pareto(plane(), specs, Budget(0.0, 1.0), TERMINAL, 3, cfg=CFG)
        for c in result.candidates:
            self.assertLessEqual(c.delta_norm, 1.0 + 1e-6)
            self.assertLessEqual(c.g_true[0], 1.5 + 1e-6)
        np.testing.assert_allclose(result.grid[0], [0.0, 0.75, 1.5], atol=1e-6)
        chosen = select_action(result, np.zeros((1, 2)))
        self.assertAlmostEqual(chosen.g_true[0], 0.75, places=5)
        self.assertAlmostEqual(chosen.g_true[1], 1.25, places=5)

    def test_parallel_solves_match_sequential(self):
        for warm_start in (False, True):
            serial = approximate_pareto(plane(), self.specs, Budget(0.0, 0.0), TERMINAL, 3, cfg=CFG,
                                        warm_start=warm_start)
            parallel = approximate_pareto(plane(), self.specs, Budget(0.0, 0.0), TERMINAL, 3, cfg=CFG,
                                          warm_start=warm_start, max_workers=3)
            self.assertEqual([c.g_true for c in serial.candidates], [c.g_true for c in parallel.candidates])
            self.assertEqual([c.origin for c in serial.candidates], [c.origin for c in parallel.candidates])
            self.assertEqual(serial.solves, parallel.solves)

    def test_tighter_bounds_reuse_looser_optimum(self):
        # p is bounded twice, so most grid points are answered by a looser solve or a known infeasible one
        objectives = ObjectiveSpec([Objective('p', 'terminal', weights=(('p', 1.0),)),
                                    Objective('p_again', 'terminal', weights=(('p', 1.0),)),
                                    Objective('q', 'terminal', weights=(('q', 1.0),))])
        result = approximate_pareto(plane(), self.specs, Budget(0.0, 0.0), objectives, 3, cfg=CFG)
        self.assertEqual(result.tasks, 27)
        self.assertLess(result.solves, result.tasks)
        points = sorted({tuple(round(v, 4) for v in g) for g in result.front})
        self.assertEqual(points, [(0.0, 0.0, 2.0), (1.0, 1.0, 1.0), (2.0, 2.0, 0.0)])
        for c in result.candidates:
            for l, eps in c.origin[1]:
                self.assertLessEqual(c.g_surrogate[l], eps + 1e-6)

    def test_degenerate_objective_gets_single_point(self):
        objectives = [Objective('p', 'terminal', weights=(('p', 1.0),)), Objective('flat', 'terminal')]
        with self.assertLogs('stage2', level='INFO') as logs:
            result = approximate_pareto(plane(), self.specs, Budget(0.0, 0.0), objectives, 3, cfg=CFG)
        self.assertTrue(any('degenerate' in line for line in logs.output))
        self.assertEqual(result.grid[1], (0.0,))

    def test_infeasible_hard_specs(self):
        specs = SpecSet(hard=[named('sum', 'G[1,1](p + q >= 5)')])
        with self.assertRaises(ParetoError):
            approximate_pareto(plane(), specs, Budget(0.0, 0.0), TERMINAL, 2, cfg=CFG)


class TestFeasibilityAudit(unittest.TestCase):
    """Candidates are re-checked by the monitor and respect both ends of the relaxation budget"""

    def setUp(self):
        # the soft cap contradicts the hard floor, so the minimal relaxation is 1
        self.specs = SpecSet(hard=[named('sum', 'G[1,1](p + q >= 2)')],
                             soft=[named('cap', 'G[1,1](p + q <= 1)')])

    def assert_monitor_accepts(self, prob, c):
        trace = prob.plan_trace(c.x)
        for nf in self.specs.hard:
            self.assertGreaterEqual(robustness(nf.formula, trace), -1e-6)
        for nf in self.specs.soft:
            self.assertGreaterEqual(robustness(nf.formula, trace), -c.delta[nf.name] - 1e-6)

    def test_candidates_stay_inside_the_budget(self):
        relax = restore_feasibility(plane(), self.specs, CFG)
        self.assertAlmostEqual(relax.delta_min, 1.0, places=6)
        result = approximate_pareto(plane(), self.specs, Budget(relax.delta_min, 1.0), TERMINAL, 3, cfg=CFG)
        self.assertGreater(len(result.candidates), 0)
        for c in result.candidates:
            self.assertGreaterEqual(c.delta_norm, relax.delta_min - 1e-6)
            self.assertLessEqual(c.delta_norm, relax.delta_min + 1.0 + 1e-6)
            # the reported relaxation is the one the plan needs
            self.assertAlmostEqual(c.delta['cap'], c.x[1].sum() - 1.0, places=5)
            self.assert_monitor_accepts(plane(), c)

    def test_lower_budget_bound_is_enforced(self):
        result = approximate_pareto(plane(), self.specs, Budget(1.5, 1.0), TERMINAL, 3, cfg=CFG)
        for c in result.candidates:
            self.assertGreaterEqual(c.delta_norm, 1.5 - 1e-6)
            self.assertLessEqual(c.delta_norm, 2.5 + 1e-6)
            self.assert_monitor_accepts(plane(), c)

    def test_monitor_rejects_broken_plan(self):
        ctx = Stage2Problem(plane(), self.specs, Budget(1.0, 1.0), TERMINAL, cfg=CFG)
        sol = solve(ctx.subproblem(0, {}), ctx.cfg)
        self.assertTrue(sol.ok)
        self.assertIsNotNone(ctx.candidate(sol, (0, ())))
        self.assertEqual(ctx.audit(ctx.enc.states(sol), ctx.enc.deltas(sol)), [])

        broken = MilpSolution(sol.status, dict(sol.values), sol.objective_value)
        broken.values[ctx.enc.state_var('p', 1)] = 0.0
        broken.values[ctx.enc.state_var('q', 1)] = 1.0
        with self.assertLogs('stage2', level='WARNING') as logs:
            self.assertIsNone(ctx.candidate(broken, (0, ())))
        self.assertTrue(any('sum' in line for line in logs.output))

        # a soft spec may fall short only by its own relaxation
        short = MilpSolution(sol.status, dict(sol.values), sol.objective_value)
        short.values[ctx.enc.state_var('p', 1)] = 3.0
        short.values[ctx.enc.state_var('q', 1)] = 0.0
        short.values[ctx.enc.delta['cap']] = 1.0
        names = [name for name, _, _ in ctx.audit(ctx.enc.states(short), ctx.enc.deltas(short))]
        self.assertEqual(names, ['cap'])


class TestAgentRisk(unittest.TestCase):
    """Clearance surrogate and Monte-Carlo scoring on a short vehicle problem"""

    def test_candidates_carry_risk(self):
        params = VehicleParams()
        grid = TimeGrid(0.5, 3)
        x0 = VehicleState(0.0, 0.0, 0.0, 5.0)
        ref, zero = constant_velocity_reference(x0.as_array(), grid.steps, grid.dt, params)
        ped = AgentModel.constant_velocity('ped', 'pedestrian', 6.0, 0.0, 0.0, 0.0, grid)
        prob = MpcProblem.vehicle(grid, x0, params, linearize(ref, zero, grid.dt, params),
                                  exogenous={'ped': ped.nominal})
        objectives = [Objective('risk_ped', 'agent_risk', agent='ped'), Objective('progress', 'progress')]
        result = approximate_pareto(prob, SpecSet(), Budget(0.0, 0.0), objectives, 2, agents=[ped],
                                    risk_params=RiskParams(n_samples=20), cfg=CFG)
        self.assertGreater(len(result.pareto_set), 0)
        for c in result.candidates:
            self.assertIn('ped', c.risk)
            self.assertTrue(0.0 <= c.g_true[0] <= 1.0)
            self.assertEqual(c.x_sim.shape, (3, 4))
            self.assertEqual(c.g_true[0], c.risk['ped'].R)


if __name__ == '__main__':
    unittest.main(verbosity=2)
