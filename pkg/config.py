#!/usr/bin/env python3
"""
Run configuration: built-in defaults, an optional JSON file, and the
STLMPC_OUT_DIR environment override. Command-line flags win over all three.
"""
import json
import logging
import os

from milp import SolverConfig

logger = logging.getLogger(__name__)

CONFIG_FILE = os.path.join(os.path.dirname(os.path.realpath(__file__)), 'stlmpc_config.json')
OUT_DIR_ENV = 'STLMPC_OUT_DIR'

CONFIG_DEFAULTS = {
    'feas_tol': 1e-6,
    'int_tol': 1e-6,
    'gap_tol': 1e-6,
    'node_limit': 200000,
    'big_M': 1e4,
    'lp_backend': 'simplex',
    'tighten_big_m': True,
    'polish': True,
    'dive': True,
    'stage2_gap_tol': 1e-3,
    'stage2_node_limit': 5000,
    'samples': 200,
    'sigma': 0.3,
    'grid_size': 4,
    'alpha': 4.0,
    'max_workers': 1,
    'warm_start': True,
    'out_dir': 'runs',
    'log_level': 'INFO',
}


class ConfigError(Exception):
    pass


def load_config(path=None):
    """Load configuration from JSON file merged over the defaults"""
    config = dict(CONFIG_DEFAULTS)
    path = path or CONFIG_FILE
    if os.path.exists(path):
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        unknown = sorted(set(data) - set(CONFIG_DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
        config.update(data)
        logger.debug(f"loaded config from {path}")
    if os.environ.get(OUT_DIR_ENV):
        config['out_dir'] = os.environ[OUT_DIR_ENV]
    return config


def save_config(config, path=None):
    """Save configuration to JSON file"""
    unknown = sorted(set(config) - set(CONFIG_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    path = path or CONFIG_FILE
    with open(path, 'w') as f:
        json.dump(config, f, indent=2, sort_keys=True)
    return path


def solver_config(config):
    try:
        return SolverConfig(feas_tol=config['feas_tol'], int_tol=config['int_tol'], gap_tol=config['gap_tol'],
                            node_limit=config['node_limit'], big_M=config['big_M'],
                            lp_backend=config['lp_backend'], tighten_big_m=config['tighten_big_m'],
                            polish=config['polish'], dive=config['dive'],
                            stage2_gap_tol=config['stage2_gap_tol'],
                            stage2_node_limit=config['stage2_node_limit'])
    except Exception as e:
        raise ConfigError(f"invalid solver settings: {e}") from e
