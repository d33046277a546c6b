"""Trajectory CSV, JSON reports and SVG plots."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .gp import Trajectory
from .metrics import arc_slice
from .world import OccupancyGrid

CSV_COLUMNS = ("agent_id", "step", "t", "x", "y", "vx", "vy")
AGENT_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temporary file beside ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(v: float) -> str:
    return f"{float(v):.17g}"


def trajectories_to_csv(trajs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for t in trajs:
        for k, s in enumerate(t.states):
            w.writerow([t.agent_id, k, _num(k * t.dt), *(_num(v) for v in s.as_vector())])
    return buf.getvalue()


def trajectories_from_csv(text: str) -> list:
    rows = list(csv.DictReader(io.StringIO(text)))
    by_agent: dict = {}
    for r in rows:
        by_agent.setdefault(int(r["agent_id"]), []).append(r)
    out = []
    for agent, rs in by_agent.items():
        rs.sort(key=lambda r: int(r["step"]))
        arr = np.array([[float(r[c]) for c in ("x", "y", "vx", "vy")] for r in rs])
        dt = float(rs[1]["t"]) - float(rs[0]["t"]) if len(rs) > 1 else 1.0
        out.append(Trajectory.from_array(agent, dt, arr))
    return out


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


def _jsonable(x):
    """Replace non-finite floats (which JSON cannot carry) with None."""
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_json(path, obj) -> None:
    atomic_write(path, dumps_json(_jsonable(obj)))


def _obstacle_rects(grid: OccupancyGrid):
    """Occupied cells merged into horizontal runs."""
    h, w = grid.cells.shape
    cs = grid.cell_size
    for i in range(h):
        row = grid.cells[i]
        j = 0
        while j < w:
            if row[j]:
                j0 = j
                while j < w and row[j]:
                    j += 1
                yield grid.origin[0] + j0 * cs, grid.origin[1] + i * cs, (j - j0) * cs, cs
            else:
                j += 1


def render_svg(grid: OccupancyGrid, trajs, violations=(), radii=None, size: int = 600) -> str:
    """World obstacles, one polyline per agent, violating stretches in black."""
    x0, y0, x1, y1 = grid.extent
    scale = size / max(x1 - x0, y1 - y0)
    W, H = (x1 - x0) * scale, (y1 - y0) * scale

    def px(p):
        return (p[0] - x0) * scale, (y1 - p[1]) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H:.0f}" viewBox="0 0 {W:.2f} {H:.2f}">',
        f'<rect x="0" y="0" width="{W:.2f}" height="{H:.2f}" fill="white" stroke="#888"/>',
    ]
    for rx, ry, rw, rh in _obstacle_rects(grid):
        sx, sy = px((rx, ry + rh))
        out.append(f'<rect x="{sx:.2f}" y="{sy:.2f}" width="{rw * scale:.2f}" height="{rh * scale:.2f}" fill="#444"/>')
    for idx, t in enumerate(trajs):
        color = AGENT_COLORS[idx % len(AGENT_COLORS)]
        pts = " ".join("{:.2f},{:.2f}".format(*px(p)) for p in t.positions)
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"><title>agent {t.agent_id}</title></polyline>')
        sx, sy = px(t.positions[0])
        r = (radii or {}).get(t.agent_id, 0.1) * scale
        out.append(f'<circle cx="{sx:.2f}" cy="{sy:.2f}" r="{r:.2f}" fill="none" stroke="{color}"/>')
        gx, gy = px(t.positions[-1])
        out.append(f'<circle cx="{gx:.2f}" cy="{gy:.2f}" r="{r:.2f}" fill="{color}" fill-opacity="0.4" stroke="{color}"/>')
    by_id = {t.agent_id: t for t in trajs}
    for v in violations:
        pts = arc_slice(by_id[v.agent].positions, *v.interval)
        path = " ".join("{:.2f},{:.2f}".format(*px(p)) for p in pts)
        out.append(f'<polyline points="{path}" fill="none" stroke="black" stroke-width="3"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

