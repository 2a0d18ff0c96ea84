#!/usr/bin/env python3
"""
Run directory layout: one CSV per stream plus manifest.json.

    states.csv      cycle,t,px,py,theta,v          (one row per cycle plus the final state)
    controls.csv    cycle,t,a,beta
    deltas.csv      cycle,t,status,delta_min,<soft specs...>,total
    risks.csv       cycle,t,agent,P,S,V,R
    fronts.csv      cycle,candidate,pareto,selected,delta_total,<objectives...>
    candidates.csv  cycle,candidate,k,px,py        (predicted trajectories of every candidate)
    plans.csv       cycle,k,px,py,theta,v          (executed plan of every cycle)

Floats are written with repr() so every file reads back to the same values.
"""
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from importlib import metadata

import psutil

logger = logging.getLogger(__name__)

STREAMS = ('states', 'controls', 'deltas', 'risks', 'fronts', 'candidates', 'plans')
STATE_COLUMNS = ('px', 'py', 'theta', 'v')
TEXT_COLUMNS = {'status', 'agent'}
MANIFEST_FILE = 'manifest.json'
TRACKED_PACKAGES = ('numpy', 'scipy', 'Jinja2', 'psutil')


class LogFormatError(Exception):
    pass


def _f(value):
    return repr(float(value))


def _write(path, header, rows):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)


def stream_rows(log):
    """Header and rows of every stream, in file order."""
    dt = log.dt
    streams = {}

    rows = []
    for c in log.cycles:
        rows.append([c.cycle, _f(c.time)] + [_f(v) for v in c.state])
    if log.final_state is not None:
        n = len(log.cycles)
        rows.append([n, _f(n * dt)] + [_f(v) for v in log.final_state])
    streams['states'] = (['cycle', 't', *STATE_COLUMNS], rows)

    streams['controls'] = (['cycle', 't', 'a', 'beta'],
                           [[c.cycle, _f(c.time), _f(c.control[0]), _f(c.control[1])] for c in log.cycles])

    rows = []
    for c in log.cycles:
        values = [c.deltas.get(name, 0.0) for name in log.soft_names]
        rows.append([c.cycle, _f(c.time), c.status, _f(c.delta_min)] + [_f(v) for v in values]
                    + [_f(sum(values))])
    streams['deltas'] = (['cycle', 't', 'status', 'delta_min', *log.soft_names, 'total'], rows)

    rows = []
    for c in log.cycles:
        for e in c.risk:
            rows.append([c.cycle, _f(c.time), e.name, _f(e.P), _f(e.S), _f(e.V), _f(e.R)])
    streams['risks'] = (['cycle', 't', 'agent', 'P', 'S', 'V', 'R'], rows)

    rows, traj = [], []
    for c in log.cycles:
        for cand in c.candidates:
            rows.append([c.cycle, cand.id, int(cand.pareto), int(cand.selected), _f(cand.delta_total)]
                        + [_f(v) for v in cand.g_true])
            for k, x in enumerate(cand.x_sim):
                traj.append([c.cycle, cand.id, k, _f(x[0]), _f(x[1])])
    streams['fronts'] = (['cycle', 'candidate', 'pareto', 'selected', 'delta_total', *log.objective_names], rows)
    streams['candidates'] = (['cycle', 'candidate', 'k', 'px', 'py'], traj)

    rows = []
    for c in log.cycles:
        for k, x in enumerate(c.plan):
            rows.append([c.cycle, k] + [_f(v) for v in x[:len(STATE_COLUMNS)]])
    streams['plans'] = (['cycle', 'k', *STATE_COLUMNS], rows)
    return streams


def write_log(log, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, (header, rows) in stream_rows(log).items():
        path = os.path.join(out_dir, f"{name}.csv")
        _write(path, header, rows)
        paths[name] = path
    logger.info(f"wrote {len(paths)} streams for {len(log.cycles)} cycles to {out_dir}")
    return paths


def _cell(column, text):
    if column in TEXT_COLUMNS:
        return text
    if column in ('cycle', 'candidate', 'k', 'pareto', 'selected'):
        return int(text)
    return float(text)


def read_stream(path):
    """(header, rows) with numeric cells converted; rows are dicts keyed by column."""
    try:
        with open(path, newline='') as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header:
                raise LogFormatError(f"{path}: missing header")
            rows = []
            for n, raw in enumerate(reader, start=2):
                if len(raw) != len(header):
                    raise LogFormatError(f"{path}: line {n} has {len(raw)} cells, expected {len(header)}")
                rows.append({col: _cell(col, cell) for col, cell in zip(header, raw)})
    except OSError as e:
        raise LogFormatError(f"cannot read {path}: {e}") from e
    except ValueError as e:
        raise LogFormatError(f"{path}: {e}") from e
    return header, rows


def read_log(out_dir, streams=STREAMS):
    result = {}
    for name in streams:
        path = os.path.join(out_dir, f"{name}.csv")
        if not os.path.exists(path):
            raise LogFormatError(f"{out_dir}: missing {name}.csv")
        result[name] = read_stream(path)
    return result


def package_versions():
    versions = {'python': platform.python_version()}
    for pkg in TRACKED_PACKAGES:
        try:
            versions[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            versions[pkg] = None
    return versions


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(65536), b''):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, scenario_name, scenario_hash, seed, mode, cycles_run, config, status='ok'):
    """Run metadata; the only file in a run directory that is not byte-reproducible."""
    process = psutil.Process()
    mem = process.memory_info()
    peak = getattr(mem, 'peak_wset', None) or getattr(mem, 'rss', 0)
    outputs = {}
    for name in STREAMS:
        path = os.path.join(out_dir, f"{name}.csv")
        if os.path.exists(path):
            outputs[f"{name}.csv"] = file_sha256(path)
    manifest = {
        'scenario': scenario_name,
        'scenario_sha256': scenario_hash,
        'seed': seed,
        'mode': mode,
        'status': status,
        'cycles_run': cycles_run,
        'config': config,
        'versions': package_versions(),
        'platform': sys.platform,
        'peak_memory_mb': round(peak / (1024 * 1024), 1),
        'outputs': outputs,
    }
    path = os.path.join(out_dir, MANIFEST_FILE)
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def read_manifest(out_dir):
    path = os.path.join(out_dir, MANIFEST_FILE)
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise LogFormatError(f"cannot read {path}: {e}") from e
