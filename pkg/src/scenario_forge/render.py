"""Static SVG frames of a scene: road, centerlines, vehicles and collisions."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes
from .closed_loop import EventLog, derive_events
from .scene import SceneMap, Scenario

ROLE_COLORS = {"ego": "#1f77b4", "adversary": "#d62728", "other": "#7f7f7f"}


def _f(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _road_rects(scene_map: SceneMap) -> list[str]:
    """Drivable cells as one rectangle per horizontal run."""
    out = []
    res = scene_map.resolution
    ox, oy = scene_map.origin
    inside = scene_map.sdf > 0
    for r in range(scene_map.rows):
        row = np.concatenate([[False], inside[r], [False]])
        edges = np.flatnonzero(np.diff(row.astype(np.int8)))
        for c0, c1 in zip(edges[::2], edges[1::2]):
            out.append(
                f'<rect class="road" x="{_f(ox + c0 * res)}" y="{_f(oy + r * res)}" width="{_f((c1 - c0) * res)}" height="{_f(res)}"/>'
            )
    return out


def render_frame(scenario: Scenario, states: np.ndarray, step: int, events: EventLog | None = None) -> str:
    """SVG for time index ``step`` of ``states (T + 1, N, 4)``."""
    m = scenario.map
    ox, oy = m.origin
    w, h = m.cols * m.resolution, m.rows * m.resolution
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{_f(ox)} {_f(-(oy + h))} {_f(w)} {_f(h)}" data-step="{step}">',
        f'<rect x="{_f(ox)}" y="{_f(-(oy + h))}" width="{_f(w)}" height="{_f(h)}" fill="#2d6a2d"/>',
        '<g transform="scale(1,-1)">',
        '<g fill="#bbbbbb" stroke="none">',
        *_road_rects(m),
        "</g>",
        '<g fill="none" stroke="#ffffff" stroke-width="0.15" stroke-dasharray="1,1">',
    ]
    for line in m.centerlines:
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in np.asarray(line))
        parts.append(f'<polyline class="centerline" points="{pts}"/>')
    parts.append("</g>")
    for i, a in enumerate(scenario.agents):
        x, y, th, _ = states[step, i]
        color = ROLE_COLORS.get(a.role, ROLE_COLORS["other"])
        parts.append(
            f'<rect class="agent {a.role}" data-id="{a.id}" x="{_f(-a.length / 2)}" y="{_f(-a.width / 2)}" '
            f'width="{_f(a.length)}" height="{_f(a.width)}" fill="{color}" '
            f'transform="translate({_f(x)},{_f(y)}) rotate({_f(math.degrees(th))})"/>'
        )
    if events is not None:
        index = {a.id: i for i, a in enumerate(scenario.agents)}
        for id_i, id_j, k in events.collisions:
            if k != step:
                continue
            p = 0.5 * (states[step, index[id_i], :2] + states[step, index[id_j], :2])
            parts.append(f'<circle class="collision" data-pair="{id_i}-{id_j}" cx="{_f(p[0])}" cy="{_f(p[1])}" r="1.5" fill="none" stroke="#ff00ff" stroke-width="0.4"/>')
    parts += ["</g>", "</svg>", ""]
    return "\n".join(parts)


def render_frames(scenario: Scenario, states: np.ndarray | None = None, events: EventLog | None = None) -> list[str]:
    """One frame per future step (``t_future`` frames).

    Without ``states`` the scenario's stored futures are drawn.
    """
    if states is None:
        rows = []
        for a in scenario.agents:
            if a.future is None:
                raise ValueError(f"agent {a.id} has no future to render")
            rows.append(np.concatenate([a.current[None], a.future]))
        states = np.stack(rows, axis=1)
    if events is None:
        events = derive_events(states, scenario)
    return [render_frame(scenario, states, k, events) for k in range(1, states.shape[0])]


def write_frames(out_dir, frames: list[str]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, svg in enumerate(frames, start=1):
        p = out / f"frame_{k:03d}.svg"
        atomic_write_bytes(p, svg.encode("utf-8"))
        paths.append(p)
    return paths
