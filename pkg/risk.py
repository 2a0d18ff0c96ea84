#!/usr/bin/env python3
"""
Monte-Carlo consequence evaluation for a planned ego trajectory.

For each agent: collision probability from velocity-perturbed samples of its
predicted path, severity at first contact scaled by the reduced mass, and a
vulnerability factor from the agent's protection index. Risk is their
product.

Samples come from a counter-based generator (Philox) keyed by
(seed, agent, sample), so results do not depend on evaluation order.
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from stl_core import Trace

logger = logging.getLogger(__name__)

AGENT_KINDS = ('pedestrian', 'vehicle', 'ambulance', 'cyclist', 'rear_vehicle')
AGENT_DIMS = ('x', 'y', 'vx', 'vy')

# Published masses (kg) and protection indices; cyclist values are our defaults
DEFAULT_MASS = {'pedestrian': 70.0, 'vehicle': 1500.0, 'ambulance': 5000.0,
                'cyclist': 80.0, 'rear_vehicle': 1500.0}
DEFAULT_KAPPA = {'pedestrian': 0.1, 'vehicle': 1.5, 'ambulance': 2.3,
                 'cyclist': 0.2, 'rear_vehicle': 1.5}


class RiskError(Exception):
    pass


@dataclass(frozen=True, eq=False)
class AgentModel:
    name: str
    kind: str
    mass: float
    kappa: float
    nominal: Trace
    noise_sigma: float = 0.3

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise RiskError(f"agent {self.name}: unknown kind '{self.kind}'")
        if not self.mass > 0:
            raise RiskError(f"agent {self.name}: mass must be positive")
        if self.kappa < 0:
            raise RiskError(f"agent {self.name}: negative protection index {self.kappa}")
        if self.noise_sigma < 0:
            raise RiskError(f"agent {self.name}: negative noise sigma")
        missing = [d for d in AGENT_DIMS if not self.nominal.has(d)]
        if missing:
            raise RiskError(f"agent {self.name}: nominal trace lacks {', '.join(missing)}")

    def __eq__(self, other):
        return (isinstance(other, AgentModel) and self.name == other.name and self.kind == other.kind
                and self.mass == other.mass and self.kappa == other.kappa
                and self.noise_sigma == other.noise_sigma and self.nominal == other.nominal)

    @classmethod
    def constant_velocity(cls, name, kind, x, y, vx, vy, grid, mass=None, kappa=None, noise_sigma=0.3):
        t = np.arange(grid.steps) * grid.dt
        nominal = Trace.from_columns(grid, {
            'x': x + vx * t, 'y': y + vy * t,
            'vx': np.full(grid.steps, float(vx)), 'vy': np.full(grid.steps, float(vy)),
        })
        return cls(name, kind,
                   DEFAULT_MASS[kind] if mass is None else mass,
                   DEFAULT_KAPPA[kind] if kappa is None else kappa,
                   nominal, noise_sigma)

    def state_at(self, k):
        return tuple(self.nominal.value(d, k) for d in AGENT_DIMS)


@dataclass(frozen=True)
class RiskParams:
    n_samples: int = 200
    d_safe: float = 2.0
    s_max: float = 1500.0 * 5000.0 / 6500.0 * 30.0
    seed: int = 0
    ego_mass: float = 1500.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise RiskError("n_samples must be at least 1")
        if not self.d_safe > 0:
            raise RiskError("d_safe must be positive")
        if not self.s_max > 0:
            raise RiskError("s_max must be positive")
        if self.seed < 0:
            raise RiskError("seed must be non-negative")
        if not self.ego_mass > 0:
            raise RiskError("ego_mass must be positive")


def reduced_mass(m_ego, m_agent):
    return m_ego * m_agent / (m_ego + m_agent)


def default_s_max(ego_mass, masses, speed=30.0):
    """Largest reduced mass in the scene times a reference impact speed."""
    masses = list(masses)
    if not masses:
        return reduced_mass(ego_mass, ego_mass) * speed
    return max(reduced_mass(ego_mass, m) for m in masses) * speed


def vulnerability(kappa):
    if kappa < 0:
        raise RiskError(f"negative protection index {kappa}")
    return 1.0 / (1.0 + kappa)


def agent_key(name):
    return int.from_bytes(hashlib.sha256(name.encode('utf-8')).digest()[:8], 'little')


def sample_agent_trajectories(agent, n, seed):
    """n velocity-perturbed copies of the agent's nominal trace (dims x, y, vx, vy)."""
    if n < 1:
        raise RiskError("need at least one sample")
    grid = agent.nominal.grid
    base_pos = np.column_stack([agent.nominal.column('x'), agent.nominal.column('y')])
    base_vel = np.column_stack([agent.nominal.column('vx'), agent.nominal.column('vy')])
    key = agent_key(agent.name)
    samples = []
    for s in range(n):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, key, s])))
        eps = rng.standard_normal((grid.steps, 2)) * agent.noise_sigma
        drift = np.zeros((grid.steps, 2))
        drift[1:] = grid.dt * np.cumsum(eps[:-1], axis=0)
        pos = base_pos + drift
        vel = base_vel + eps
        samples.append(Trace(grid, AGENT_DIMS, np.column_stack([pos, vel])))
    return samples


def _check_grid(ego, sample):
    if ego.grid != sample.grid:
        raise RiskError(f"grid mismatch: ego {ego.grid} vs agent {sample.grid}")


def linf_gaps(ego, sample):
    _check_grid(ego, sample)
    dx = np.abs(ego.column('px') - sample.column('x'))
    dy = np.abs(ego.column('py') - sample.column('y'))
    return np.maximum(dx, dy)


def collision_probability(ego, samples, d_safe):
    if not samples:
        return 0.0, []
    colliding = [i for i, s in enumerate(samples) if np.any(linf_gaps(ego, s) <= d_safe)]
    return len(colliding) / len(samples), colliding


def first_contact_time(ego, sample, d_safe):
    hits = np.flatnonzero(linf_gaps(ego, sample) <= d_safe)
    if hits.size == 0:
        raise RiskError("sample never comes within d_safe of the ego")
    return int(hits[0])


def ego_trace(grid, state_names, states, inputs=None, input_names=('a', 'beta')):
    """Ego trace for risk scoring; state k carries input k and the last state repeats the last input."""
    states = np.asarray(states, dtype=float)
    columns = {name: states[:, i] for i, name in enumerate(state_names)}
    if inputs is not None and len(inputs):
        u = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
        u = np.vstack([u, np.repeat(u[-1:], max(0, grid.steps - len(u)), axis=0)])[:grid.steps]
        for j, name in enumerate(input_names):
            columns[name] = u[:, j]
    return Trace.from_columns(grid, columns)


def ego_velocity(ego, k):
    """v (cos(theta + beta), sin(theta + beta)); beta is 0 when the trace carries no inputs."""
    theta, v = ego.value('theta', k), ego.value('v', k)
    beta = ego.value('beta', k) if ego.has('beta') else 0.0
    return np.array([v * math.cos(theta + beta), v * math.sin(theta + beta)])


def severity(ego, agent, samples, contact_times, params):
    """(S_raw, S): mean reduced-mass momentum change at first contact, and its normalized value."""
    if not samples:
        return 0.0, 0.0
    mu = reduced_mass(params.ego_mass, agent.mass)
    impacts = []
    for sample, k in zip(samples, contact_times):
        v_agent = np.array([sample.value('vx', k), sample.value('vy', k)])
        impacts.append(mu * float(np.linalg.norm(ego_velocity(ego, k) - v_agent)))
    s_raw = math.fsum(impacts) / len(impacts)
    s = s_raw / params.s_max
    if s > 1.0:
        logger.warning(f"severity for {agent.name} clamped: {s_raw:.1f} exceeds s_max {params.s_max:.1f}")
        s = 1.0
    return s_raw, s


@dataclass
class AgentRisk:
    name: str
    P: float
    S: float
    V: float
    R: float
    colliding_sample_count: int
    first_contact_times: list = field(default_factory=list)
    S_raw: float = 0.0
    n_samples: int = 0


class RiskReport:
    """Per-agent risk entries in agent order."""

    def __init__(self, entries=()):
        self.entries = {e.name: e for e in entries}

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries.values())

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, RiskReport) and self.entries == other.entries

    def total(self):
        return math.fsum(e.R for e in self)


def evaluate_risk(ego, agents, params):
    entries = []
    for agent in agents:
        _check_grid(ego, agent.nominal)
        samples = sample_agent_trajectories(agent, params.n_samples, params.seed)
        p, colliding = collision_probability(ego, samples, params.d_safe)
        hits = [samples[i] for i in colliding]
        times = [first_contact_time(ego, s, params.d_safe) for s in hits]
        s_raw, s = severity(ego, agent, hits, times, params)
        v = vulnerability(agent.kappa)
        entries.append(AgentRisk(agent.name, p, s, v, p * s * v, len(colliding), times, s_raw, params.n_samples))
    return RiskReport(entries)
