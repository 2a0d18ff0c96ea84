#!/usr/bin/env python3
"""
Tests for the command-line entry point: output, exit codes and run directories
"""
import io
import json
import logging
import os
import shutil
import tempfile
import unittest
from unittest import mock

import cli
from config import CONFIG_DEFAULTS, load_config, save_config
from log_buffer import LogBuffer, LogBufferHandler
from sim_log import STREAMS, read_manifest
from test_scenario_sim import road


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        patcher = mock.patch('config.CONFIG_FILE', os.path.join(self.tmpdir, 'absent_config.json'))
        patcher.start()
        self.addCleanup(patcher.stop)
        self.scenario = self.write_json('road.json', road())

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def write_json(self, name, data):
        path = os.path.join(self.tmpdir, name)
        with open(path, 'w') as f:
            json.dump(data, f, indent=2)
        return path

    def run_cli(self, *argv):
        """(exit code, stdout, stderr)"""
        with mock.patch('sys.stdout', new_callable=io.StringIO) as out, \
                mock.patch('sys.stderr', new_callable=io.StringIO) as err:
            code = cli.main(list(argv))
        return code, out.getvalue(), err.getvalue()


class TestMonitor(CliTestCase):

    def setUp(self):
        super().setUp()
        self.trace = os.path.join(self.tmpdir, 'trace.csv')
        with open(self.trace, 'w') as f:
            f.write('t,v\n0,1\n1,2\n2,3\n')

    def test_satisfied(self):
        code, out, _ = self.run_cli('monitor', 'G[0,2](v >= 0)', self.trace)
        self.assertEqual(code, cli.EXIT_OK)
        self.assertEqual(out.splitlines(), ['robustness 1.0', 'SAT'])

    def test_violated(self):
        code, out, _ = self.run_cli('monitor', 'G[0,2](v >= 2)', self.trace)
        self.assertEqual(code, cli.EXIT_OK)
        self.assertEqual(out.splitlines(), ['robustness -1.0', 'UNSAT'])

    def test_later_sample(self):
        code, out, _ = self.run_cli('monitor', 'v >= 2.5', self.trace, '--t-index', '2')
        self.assertEqual(code, cli.EXIT_OK)
        self.assertEqual(out.splitlines(), ['robustness 0.5', 'SAT'])

    def test_input_errors(self):
        code, _, err = self.run_cli('monitor', 'G[0,2](v >=', self.trace)
        self.assertEqual(code, cli.EXIT_INPUT)
        self.assertIn('error', err)
        code, _, _ = self.run_cli('monitor', 'v >= 0', os.path.join(self.tmpdir, 'missing.csv'))
        self.assertEqual(code, cli.EXIT_INPUT)
        # the window starts after the last sample
        code, _, _ = self.run_cli('monitor', 'F[5,6](v >= 0)', self.trace)
        self.assertEqual(code, cli.EXIT_INPUT)

    def test_usage_errors(self):
        self.assertEqual(self.run_cli('monitor')[0], cli.EXIT_USAGE)
        self.assertEqual(self.run_cli()[0], cli.EXIT_USAGE)
        self.assertEqual(self.run_cli('launch', 'exp1')[0], cli.EXIT_USAGE)


class TestLogBuffer(unittest.TestCase):

    def test_ring_keeps_newest_entries(self):
        buffer = LogBuffer(max_size=3)
        for i in range(5):
            buffer.add_log('INFO', f"message {i}")
        self.assertEqual([e['message'] for e in buffer.get_logs(limit=None)],
                         ['message 2', 'message 3', 'message 4'])
        self.assertEqual(len(buffer.get_logs(limit=2)), 2)

    def test_handler_mirrors_records_and_dumps(self):
        buffer = LogBuffer()
        logger = logging.getLogger('test_cli.buffer')
        handler = LogBufferHandler(buffer)
        handler.setFormatter(logging.Formatter('%(levelname)s: %(message)s'))
        logger.addHandler(handler)
        self.addCleanup(logger.removeHandler, handler)
        logger.warning('clamped severity')
        tmpdir = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, tmpdir)
        path = os.path.join(tmpdir, 'diagnostics.log')
        self.assertEqual(buffer.dump(path), 1)
        with open(path) as f:
            self.assertEqual(f.read(), 'WARNING: clamped severity\n')
        buffer.clear()
        self.assertEqual(buffer.get_logs(), [])


class TestConfig(CliTestCase):

    def test_round_trip(self):
        path = os.path.join(self.tmpdir, 'config.json')
        save_config(dict(CONFIG_DEFAULTS, grid_size=6), path)
        self.assertEqual(load_config(path)['grid_size'], 6)

    def test_environment_overrides_out_dir(self):
        with mock.patch.dict(os.environ, {'STLMPC_OUT_DIR': self.tmpdir}):
            self.assertEqual(load_config()['out_dir'], self.tmpdir)

    def test_bad_config_files(self):
        bad = self.write_json('bad.json', {'colour': 'red'})
        code, _, err = self.run_cli('--config', bad, 'solve', self.scenario)
        self.assertEqual(code, cli.EXIT_INPUT)
        self.assertIn('colour', err)
        code, _, _ = self.run_cli('--config', os.path.join(self.tmpdir, 'nope.json'), 'solve', self.scenario)
        self.assertEqual(code, cli.EXIT_INPUT)

    def test_config_fills_scenario_defaults(self):
        data = road()
        del data['budget_alpha']
        scenario = self.write_json('no_alpha.json', data)
        config = self.write_json('config.json', {'alpha': 0.0})
        out = os.path.join(self.tmpdir, 'run')
        code, _, _ = self.run_cli('--config', config, 'simulate', scenario, '--cycles', '1', '--out', out)
        self.assertEqual(code, cli.EXIT_OK)
        with open(os.path.join(out, 'scenario.json')) as f:
            self.assertEqual(json.load(f)['budget_alpha'], 0.0)


class TestSolve(CliTestCase):

    def test_stage1(self):
        code, out, _ = self.run_cli('solve', self.scenario)
        self.assertEqual(code, cli.EXIT_OK)
        lines = out.splitlines()
        self.assertEqual(lines[0], 'nominal: feasible')
        self.assertEqual(lines[1], 'stage1: feasible_strict')
        self.assertEqual(lines[2], 'delta_min 0.0')
        self.assertTrue(lines[-1].startswith('first control a='))

    def test_full(self):
        code, out, _ = self.run_cli('solve', self.scenario, '--mode', 'full')
        self.assertEqual(code, cli.EXIT_OK)
        self.assertIn('stage2: 4 candidates', out)
        self.assertIn('  progress ', out)

    def test_hard_infeasible(self):
        scenario = self.write_json('fast.json', road(hard_specs=[{'name': 'fast', 'formula': 'G[0,1](v >= 20)'}]))
        code, out, _ = self.run_cli('solve', scenario)
        self.assertEqual(code, cli.EXIT_INFEASIBLE)
        self.assertIn('stage1: hard_infeasible', out)

    def test_schema_error(self):
        data = road()
        del data['grid']['dt']
        code, _, err = self.run_cli('solve', self.write_json('broken.json', data))
        self.assertEqual(code, cli.EXIT_INPUT)
        self.assertIn('grid.dt', err)


class TestRunDirectories(CliTestCase):

    def test_simulate_writes_streams_and_manifest(self):
        out = os.path.join(self.tmpdir, 'run')
        code, stdout, _ = self.run_cli('simulate', self.scenario, '--mode', 'stage1', '--cycles', '2', '--out', out)
        self.assertEqual(code, cli.EXIT_OK)
        self.assertIn('2 cycles written', stdout)
        for name in STREAMS:
            self.assertTrue(os.path.exists(os.path.join(out, f"{name}.csv")), name)
        for name in ('scenario.json', 'diagnostics.log'):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)
        manifest = read_manifest(out)
        self.assertEqual(manifest['mode'], 'stage1_only')
        self.assertEqual(manifest['status'], 'ok')
        self.assertEqual(manifest['cycles_run'], 2)
        self.assertEqual(manifest['seed'], 0)
        self.assertEqual(manifest['config']['lp_backend'], 'highs')
        self.assertEqual(sorted(manifest['outputs']), sorted(f"{s}.csv" for s in STREAMS))

    def test_default_out_dir_follows_environment(self):
        with mock.patch.dict(os.environ, {'STLMPC_OUT_DIR': self.tmpdir}):
            code, _, _ = self.run_cli('simulate', self.scenario, '--mode', 'stage1', '--cycles', '1')
        self.assertEqual(code, cli.EXIT_OK)
        self.assertTrue(os.path.exists(os.path.join(self.tmpdir, 'road', 'manifest.json')))

    def test_cycles_must_be_positive(self):
        out = os.path.join(self.tmpdir, 'run')
        for value in ('0', '-2'):
            code, _, err = self.run_cli('simulate', self.scenario, '--cycles', value, '--out', out)
            self.assertEqual(code, cli.EXIT_USAGE)
            self.assertIn('at least 1', err)
        self.assertFalse(os.path.exists(out))

    def test_hard_infeasible_run_keeps_its_manifest(self):
        scenario = self.write_json('fast.json', road(hard_specs=[{'name': 'fast', 'formula': 'G[0,1](v >= 20)'}]))
        out = os.path.join(self.tmpdir, 'run')
        code, _, err = self.run_cli('simulate', scenario, '--out', out)
        self.assertEqual(code, cli.EXIT_INFEASIBLE)
        self.assertIn('infeasible', err)
        manifest = read_manifest(out)
        self.assertEqual(manifest['status'], 'hard_infeasible at cycle 0')
        self.assertEqual(manifest['cycles_run'], 0)

    def test_pareto_csv(self):
        out = os.path.join(self.tmpdir, 'run')
        code, stdout, _ = self.run_cli('pareto', self.scenario, '--out', out)
        self.assertEqual(code, cli.EXIT_OK)
        lines = stdout.splitlines()
        self.assertEqual(lines[0], 'candidate,pareto,selected,delta_total,progress,comfort')
        self.assertEqual(len(lines), 5)
        self.assertEqual(sum(int(line.split(',')[2]) for line in lines[1:]), 1)

    def test_plot_front_is_deterministic(self):
        out = os.path.join(self.tmpdir, 'run')
        self.assertEqual(self.run_cli('simulate', self.scenario, '--cycles', '1', '--out', out)[0], cli.EXIT_OK)
        code, stdout, _ = self.run_cli('plot', out, 'front')
        self.assertEqual(code, cli.EXIT_OK)
        path = stdout.strip()
        self.assertEqual(path, os.path.join(out, 'front.svg'))
        with open(path) as f:
            first = f.read()
        second_path = os.path.join(self.tmpdir, 'again.svg')
        self.assertEqual(self.run_cli('plot', out, 'front', '--out', second_path)[0], cli.EXIT_OK)
        with open(second_path) as f:
            self.assertEqual(f.read(), first)
        with open(os.path.join(out, 'fronts.csv')) as f:
            candidates = len(f.read().splitlines()) - 1
        self.assertEqual(first.count('<circle class="candidate'), candidates)
        self.assertEqual(first.count('<circle class="candidate pareto selected"'), 1)

    def test_plot_errors(self):
        out = os.path.join(self.tmpdir, 'run')
        self.run_cli('simulate', self.scenario, '--mode', 'stage1', '--cycles', '1', '--out', out)
        # stage1-only runs explore no candidates
        self.assertEqual(self.run_cli('plot', out, 'front')[0], cli.EXIT_INPUT)
        self.assertEqual(self.run_cli('plot', os.path.join(self.tmpdir, 'none'), 'deltas')[0], cli.EXIT_INPUT)
        self.assertEqual(self.run_cli('plot', out, 'trajectory')[0], cli.EXIT_OK)

    def test_compare(self):
        out = os.path.join(self.tmpdir, 'cmp')
        code, stdout, _ = self.run_cli('compare', self.scenario, '--cycles', '1', '--out', out)
        self.assertEqual(code, cli.EXIT_OK)
        lines = stdout.splitlines()
        self.assertEqual(lines[0], 'cycle,delta_min,stage1_total,full_total')
        self.assertEqual(len(lines), 2)
        for label in ('stage1', 'full'):
            self.assertTrue(os.path.exists(os.path.join(out, label, 'manifest.json')))


if __name__ == '__main__':
    unittest.main(verbosity=2)
