#!/usr/bin/env python3
"""
Deterministic SVG plots of a run directory.

Geometry is computed here and laid out by templates/chart.svg.j2. Every
coordinate is printed with two decimals and nothing time-dependent is
emitted, so the same log always renders to the same bytes.
"""
import logging
import os

from jinja2 import Environment, FileSystemLoader, StrictUndefined

logger = logging.getLogger(__name__)

TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.realpath(__file__)), 'templates')
PLOT_KINDS = ('trajectory', 'controls', 'deltas', 'front', 'candidates')

WIDTH = 720
PANEL_H = 300
LEFT = 60
PLOT_W = 520
TOP = 40
GAP = 60

PALETTE = ('#1f77b4', '#d62728', '#2ca02c', '#9467bd', '#ff7f0e', '#8c564b', '#17becf')
REGION_FILL = {'drivable': '#bbbbbb', 'goal': '#2ca02c', 'emergency_lane': '#ff7f0e', 'obstacle': '#444444'}

_env = Environment(loader=FileSystemLoader(TEMPLATE_DIR), autoescape=True,
                   trim_blocks=True, lstrip_blocks=True, undefined=StrictUndefined)


class RenderError(Exception):
    pass


def _fmt(v):
    return f"{v:.2f}"


class Panel:
    """One plot area with its own data-to-pixel mapping."""

    def __init__(self, xs, ys, xlabel, ylabel, equal_aspect=False):
        xs, ys = list(xs), list(ys)
        if not xs:
            raise RenderError("nothing to plot")
        self.x0, self.x1 = self._span(min(xs), max(xs))
        self.y0, self.y1 = self._span(min(ys), max(ys))
        if equal_aspect:
            scale = max((self.x1 - self.x0) / PLOT_W, (self.y1 - self.y0) / PANEL_H)
            cx, cy = (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2
            self.x0, self.x1 = cx - scale * PLOT_W / 2, cx + scale * PLOT_W / 2
            self.y0, self.y1 = cy - scale * PANEL_H / 2, cy + scale * PANEL_H / 2
        self.xlabel, self.ylabel = xlabel, ylabel
        self.series, self.points, self.rects, self.legend = [], [], [], []

    @staticmethod
    def _span(lo, hi):
        if hi - lo < 1e-9:
            return lo - 1.0, hi + 1.0
        pad = 0.05 * (hi - lo)
        return lo - pad, hi + pad

    def px(self, x):
        return LEFT + (x - self.x0) / (self.x1 - self.x0) * PLOT_W

    def py(self, y):
        return PANEL_H - (y - self.y0) / (self.y1 - self.y0) * PANEL_H

    def line(self, name, xs, ys, color, cls='', dash=None, width=2, opacity=1.0, legend=True):
        points = ' '.join(f"{_fmt(self.px(x))},{_fmt(self.py(y))}" for x, y in zip(xs, ys))
        self.series.append({'name': name, 'points': points, 'color': color, 'cls': cls, 'dash': dash,
                            'width': width, 'opacity': _fmt(opacity)})
        if legend:
            self.legend.append({'name': name, 'color': color, 'dash': dash})

    def dot(self, name, x, y, cls, fill, stroke, r=3):
        self.points.append({'name': name, 'x': _fmt(self.px(x)), 'y': _fmt(self.py(y)), 'cls': cls,
                            'fill': fill, 'stroke': stroke, 'r': r})

    def box(self, name, role, x_lo, x_hi, y_lo, y_hi):
        # clip to the visible window so huge regions stay finite
        x_lo, x_hi = max(x_lo, self.x0), min(x_hi, self.x1)
        y_lo, y_hi = max(y_lo, self.y0), min(y_hi, self.y1)
        if x_lo >= x_hi or y_lo >= y_hi:
            return
        self.rects.append({'name': name, 'role': role, 'fill': REGION_FILL.get(role, '#999999'),
                           'x': _fmt(self.px(x_lo)), 'y': _fmt(self.py(y_hi)),
                           'w': _fmt(self.px(x_hi) - self.px(x_lo)), 'h': _fmt(self.py(y_lo) - self.py(y_hi))})

    def context(self, top):
        return {'top': top, 'left': LEFT, 'w': PLOT_W, 'h': PANEL_H,
                'xmin': _fmt(self.x0), 'xmax': _fmt(self.x1), 'ymin': _fmt(self.y0), 'ymax': _fmt(self.y1),
                'xlabel': self.xlabel, 'ylabel': self.ylabel, 'series': self.series, 'points': self.points,
                'rects': self.rects, 'legend': self.legend}


def _rows(streams, name):
    if name not in streams:
        raise RenderError(f"log has no {name} stream")
    _, rows = streams[name]
    if not rows:
        raise RenderError(f"{name} stream is empty")
    return rows


def _pick_cycle(rows, cycle):
    cycles = sorted({r['cycle'] for r in rows})
    if cycle is None:
        return cycles[0]
    if cycle not in cycles:
        raise RenderError(f"cycle {cycle} has no candidates (available: {', '.join(map(str, cycles))})")
    return cycle


def _trajectory(streams, regions, cycle):
    rows = _rows(streams, 'states')
    xs, ys = [r['px'] for r in rows], [r['py'] for r in rows]
    panel = Panel(xs, ys, 'x [m]', 'y [m]', equal_aspect=True)
    for r in regions:
        panel.box(r.name, r.role, *r.box)
    if len(rows) > 1:
        panel.line('ego', xs, ys, PALETTE[0], cls='ego')
    for r in rows:
        panel.dot(f"cycle {r['cycle']}", r['px'], r['py'], 'marker', PALETTE[0], PALETTE[0])
    return 'Executed ego trajectory', [panel]


def _controls(streams, regions, cycle):
    rows = _rows(streams, 'controls')
    t = [r['t'] for r in rows]
    panels = []
    for i, (col, label) in enumerate((('a', 'a [m/s^2]'), ('beta', 'beta [rad]'))):
        values = [r[col] for r in rows]
        panel = Panel(t, values, 't [s]', label)
        panel.line(col, t, values, PALETTE[i], cls=col)
        for x, y in zip(t, values):
            panel.dot(col, x, y, 'marker', PALETTE[i], PALETTE[i], r=2)
        panels.append(panel)
    return 'Executed control inputs', panels


def _deltas(streams, regions, cycle):
    header, _ = streams.get('deltas', ([], []))
    rows = _rows(streams, 'deltas')
    names = header[header.index('delta_min') + 1:header.index('total')]
    t = [r['t'] for r in rows]
    columns = ['delta_min', *names]
    panel = Panel([r['t'] for r in rows for _ in columns], [r[c] for r in rows for c in columns],
                  't [s]', 'relaxation')
    for i, name in enumerate(names):
        panel.line(name, t, [r[name] for r in rows], PALETTE[i % len(PALETTE)], cls='delta')
    panel.line('delta_min', t, [r['delta_min'] for r in rows], '#000000', cls='delta-min', dash='6,4')
    return 'Relaxation allocation per negotiable specification', [panel]


def _front(streams, regions, cycle):
    header, _ = streams.get('fronts', ([], []))
    rows = _rows(streams, 'fronts')
    objectives = header[header.index('delta_total') + 1:]
    if len(objectives) < 2:
        raise RenderError("front plot needs at least two objectives")
    cycle = _pick_cycle(rows, cycle)
    rows = [r for r in rows if r['cycle'] == cycle]
    ox, oy = objectives[0], objectives[1]
    panel = Panel([r[ox] for r in rows], [r[oy] for r in rows], ox, oy)
    front = sorted((r for r in rows if r['pareto']), key=lambda r: (r[ox], r[oy]))
    if len(front) > 1:
        panel.line('Pareto front', [r[ox] for r in front], [r[oy] for r in front], PALETTE[0],
                   cls='front', dash='4,3', width=1)
    for r in rows:
        name = f"candidate {r['candidate']}"
        if r['selected']:
            panel.dot(name, r[ox], r[oy], 'candidate pareto selected', PALETTE[1], '#000000', r=6)
        elif r['pareto']:
            panel.dot(name, r[ox], r[oy], 'candidate pareto', PALETTE[0], PALETTE[0], r=4)
        else:
            panel.dot(name, r[ox], r[oy], 'candidate dominated', 'none', '#888888', r=4)
    return f"Explored candidates, cycle {cycle}", [panel]


def _candidates(streams, regions, cycle):
    rows = _rows(streams, 'candidates')
    flags = {(r['cycle'], r['candidate']): r for r in _rows(streams, 'fronts')}
    cycle = _pick_cycle(rows, cycle)
    rows = [r for r in rows if r['cycle'] == cycle]
    panel = Panel([r['px'] for r in rows], [r['py'] for r in rows], 'x [m]', 'y [m]', equal_aspect=True)
    for r in regions:
        panel.box(r.name, r.role, *r.box)
    paths = {}
    for r in rows:
        paths.setdefault(r['candidate'], []).append((r['k'], r['px'], r['py']))
    selected = None
    for cid in sorted(paths):
        pts = sorted(paths[cid])
        flag = flags.get((cycle, cid), {'pareto': 0, 'selected': 0})
        if flag['selected']:
            selected = (cid, pts)
            continue
        if flag['pareto']:
            panel.line(f"candidate {cid}", [p[1] for p in pts], [p[2] for p in pts], PALETTE[0],
                       cls='candidate pareto', width=1.5, opacity=0.8, legend=False)
        else:
            panel.line(f"candidate {cid}", [p[1] for p in pts], [p[2] for p in pts], '#888888',
                       cls='candidate dominated', width=1, opacity=0.35, legend=False)
    if selected is not None:
        cid, pts = selected
        panel.line(f"selected (candidate {cid})", [p[1] for p in pts], [p[2] for p in pts], PALETTE[1],
                   cls='candidate selected', width=3)
    return f"Candidate trajectories, cycle {cycle}", [panel]


_BUILDERS = {
    'trajectory': _trajectory,
    'controls': _controls,
    'deltas': _deltas,
    'front': _front,
    'candidates': _candidates,
}


def render_svg(streams, kind, cycle=None, regions=()):
    """SVG document for one plot kind; ``streams`` is the mapping returned by sim_log.read_log."""
    if kind not in _BUILDERS:
        raise RenderError(f"unknown plot kind '{kind}' (choose from {', '.join(PLOT_KINDS)})")
    title, panels = _BUILDERS[kind](streams, regions, cycle)
    contexts = [p.context(TOP + i * (PANEL_H + GAP)) for i, p in enumerate(panels)]
    height = TOP + len(panels) * (PANEL_H + GAP)
    svg = _env.get_template('chart.svg.j2').render(width=WIDTH, height=height, title=title, panels=contexts)
    logger.debug(f"rendered {kind} plot with {len(panels)} panel(s)")
    return svg


def write_svg(svg, path):
    with open(path, 'w', newline='\n') as f:
        f.write(svg)
    return path
