"""Desk-scale synthetic traffic scenes on three road layouts.

Every agent is driven by the planner's IDM + pure-pursuit controller, the
ego with the default :class:`PlannerConfig` and background traffic with
per-agent desired speeds and headways. Scenes whose ground truth contains a
vehicle overlap or an off-road state are resampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .planner import PlannerConfig, PlannerFailure, Polyline, controller_action
from .scene import (
    DEFAULT_DT,
    DEFAULT_T_FUTURE,
    DEFAULT_T_HIST,
    Agent,
    SceneMap,
    Scenario,
    footprint_radius,
    step_array,
    wrap_angle,
)

LAYOUTS = ("straight", "curve", "intersection")
LANE_WIDTH = 5.5


class GenerationFailed(RuntimeError):
    """No valid scene found within the retry budget."""


@dataclass(frozen=True)
class GeneratorConfig:
    layout: str = "mixed"
    n_agents: int | tuple[int, int] = (2, 8)
    dt: float = DEFAULT_DT
    t_hist: int = DEFAULT_T_HIST
    t_future: int = DEFAULT_T_FUTURE
    resolution: float = 0.5
    max_retries: int = 100

    def __post_init__(self):
        if self.layout not in LAYOUTS + ("mixed",):
            raise ValueError(f"unknown layout {self.layout!r}")
        lo, hi = self.agent_range
        if not (2 <= lo <= hi <= 8):
            raise ValueError("agent count must lie in [2, 8]")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def agent_range(self) -> tuple[int, int]:
        n = self.n_agents
        return (n, n) if isinstance(n, int) else (int(n[0]), int(n[1]))


def _offset_path(path: np.ndarray, offset: float) -> np.ndarray:
    """Shift a polyline sideways (positive = left of travel direction)."""
    d = np.gradient(path, axis=0)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    normal = np.stack([-d[:, 1], d[:, 0]], axis=1)
    return path + offset * normal


def _rasterize(paths: list[np.ndarray], half_width: float, origin, shape, res: float) -> np.ndarray:
    rows, cols = shape
    xs = origin[0] + (np.arange(cols) + 0.5) * res
    ys = origin[1] + (np.arange(rows) + 0.5) * res
    px, py = np.meshgrid(xs, ys)
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    inside = np.zeros(len(pts), dtype=bool)
    for path in paths:
        a, b = path[:-1], path[1:]
        ab = b - a
        for j in range(len(a)):
            ap = pts - a[j]
            t = np.clip(ap @ ab[j] / (ab[j] @ ab[j]), 0.0, 1.0)
            d = np.hypot(ap[:, 0] - t * ab[j, 0], ap[:, 1] - t * ab[j, 1])
            inside |= d <= half_width
    return inside.reshape(rows, cols)


@lru_cache(maxsize=None)
def layout_map(layout: str, resolution: float = 0.5) -> SceneMap:
    """Shared drivable-area map for a layout (cached; immutable)."""
    half = LANE_WIDTH / 2
    if layout == "straight":
        ref = np.array([[-20.0, 0.0], [160.0, 0.0]])
        roads = [ref]
        lanes = [ref + [0, -half], ref + [0, half]]
        origin, extent = (-20.0, -12.0), (180.0, 24.0)
        road_half = LANE_WIDTH
    elif layout == "curve":
        theta = np.linspace(-np.pi / 2, 0.0, 31)
        arc = np.stack([10.0 + 45.0 * np.cos(theta), 45.0 + 45.0 * np.sin(theta)], axis=1)
        ref = np.concatenate([[[-20.0, 0.0]], arc, [[55.0, 100.0]]])
        roads = [ref]
        lanes = [_offset_path(ref, -half), _offset_path(ref, half)]
        origin, extent = (-20.0, -12.0), (88.0, 112.0)
        road_half = LANE_WIDTH
    elif layout == "intersection":
        h = np.array([[-45.0, 0.0], [45.0, 0.0]])
        v = np.array([[0.0, -45.0], [0.0, 45.0]])
        roads = [h, v]
        lanes = [
            h + [0, -half],  # eastbound
            h[::-1] + [0, half],  # westbound
            v + [half, 0],  # northbound
            v[::-1] + [-half, 0],  # southbound
        ]
        origin, extent = (-45.0, -45.0), (90.0, 90.0)
        road_half = LANE_WIDTH
    else:
        raise ValueError(f"unknown layout {layout!r}")
    shape = (int(round(extent[1] / resolution)), int(round(extent[0] / resolution)))
    mask = _rasterize(roads, road_half, origin, shape, resolution)
    scene_map = SceneMap.from_mask(mask, origin, resolution, tuple(lanes))
    scene_map.validate()
    return scene_map


def _spawn_lanes(layout: str, scene_map: SceneMap) -> tuple[list[int], list[int]]:
    """Lane indices usable by the ego and by background agents."""
    if layout == "intersection":
        return [0], [0, 1, 2, 3]
    return [0, 1], [0, 1]


BOX_HALF = LANE_WIDTH
MINOR_LANES = (2, 3)


def _intersection_stop_lines(states, lengths, lanes, lane_of) -> list:
    """Stop lines for minor-road agents that must yield to major-road traffic."""
    centre = lanes[0].length / 2
    stop = centre - BOX_HALF - 1.0
    out = [None] * len(states)
    for i, st in enumerate(states):
        if lane_of[i] not in MINOR_LANES:
            continue
        s_i, _, _ = lanes[lane_of[i]].project(st[:2])
        gap = stop - (s_i + 0.5 * lengths[i])
        if gap < -0.5 or (gap > 0 and st[3] ** 2 / (2 * gap) > 6.0) or gap <= 0 and st[3] > 0.5:
            continue
        for j, sj in enumerate(states):
            if lane_of[j] in MINOR_LANES:
                continue
            s_j, _, _ = lanes[lane_of[j]].project(sj[:2])
            if s_j - 0.5 * lengths[j] > centre + BOX_HALF + 1.0:
                continue
            t_in = (centre - BOX_HALF - (s_j + 0.5 * lengths[j])) / max(sj[3], 1.0)
            if t_in < 5.0:
                out[i] = stop
                break
    return out


def _sample_scene(layout: str, n: int, rng: np.random.Generator, cfg: GeneratorConfig):
    scene_map = layout_map(layout, cfg.resolution)
    lanes = [Polyline(line) for line in scene_map.centerlines]
    ego_lanes, bg_lanes = _spawn_lanes(layout, scene_map)
    lengths = rng.uniform(3.8, 4.6, size=n)
    widths = rng.uniform(1.7, 1.9, size=n)

    if layout == "intersection":
        ego_s = rng.uniform(10.0, 25.0)
    else:
        ego_s = rng.uniform(20.0, 40.0)
    placements = [(int(rng.choice(ego_lanes)), ego_s)]
    for _ in range(n - 1):
        for _attempt in range(30):
            lane = int(rng.choice(bg_lanes))
            if layout == "intersection":
                s = rng.uniform(5.0, 40.0)
            else:
                s = ego_s + rng.uniform(-25.0, 35.0)
            if s < 2.0:
                continue
            ok = True
            for (pl, ps) in placements:
                if pl == lane and abs(ps - s) < 9.0:
                    ok = False
                    break
            if ok:
                placements.append((lane, s))
                break
        else:
            return None

    states = np.zeros((n, 4))
    for i, (lane, s) in enumerate(placements):
        line = lanes[lane]
        p = line.point_at(s)
        q = line.point_at(s + 0.5)
        states[i, :2] = p
        states[i, 2] = wrap_angle(math.atan2(q[1] - p[1], q[0] - p[0]))
        states[i, 3] = rng.uniform(3.0, 9.0)

    ego_cfg = PlannerConfig()
    configs = [ego_cfg] + [
        replace(ego_cfg, desired_speed=float(rng.uniform(5.0, 10.5)), time_headway=float(rng.uniform(1.0, 2.0)))
        for _ in range(n - 1)
    ]
    steps = cfg.t_hist + cfg.t_future
    traj = np.empty((steps + 1, n, 4))
    traj[0] = states
    lane_of = [pl for pl, _ in placements]
    try:
        for k in range(steps):
            stops = [None] * n
            if layout == "intersection":
                stops = _intersection_stop_lines(traj[k], lengths, lanes, lane_of)
            actions = np.array(
                [controller_action(i, traj[k], lengths, scene_map, configs[i], cfg.dt, stops[i]) for i in range(n)]
            )
            traj[k + 1] = step_array(traj[k], actions, cfg.dt)
    except PlannerFailure:
        return None

    radii = np.array([footprint_radius(l, w).radius for l, w in zip(lengths, widths)])
    diff = traj[:, :, None, :2] - traj[:, None, :, :2]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    limit = radii[:, None] + radii[None, :]
    iu = np.triu_indices(n, 1)
    if np.any(dist[:, iu[0], iu[1]] < limit[iu]):
        return None
    if np.any(scene_map.query(traj[..., :2]) <= 0):
        return None

    agents = []
    for i in range(n):
        agents.append(
            Agent(
                id=i,
                role="ego" if i == 0 else "other",
                length=float(lengths[i]),
                width=float(widths[i]),
                past=traj[: cfg.t_hist + 1, i],
                future=traj[cfg.t_hist + 1 :, i],
            )
        )
    return Scenario(cfg.dt, cfg.t_hist, cfg.t_future, tuple(agents), scene_map, meta={"layout": layout})


def generate_synthetic_scenario(config: GeneratorConfig | None = None, seed: int = 0) -> Scenario:
    """Deterministic synthetic scene for ``(config, seed)``."""
    cfg = config or GeneratorConfig()
    rng = np.random.default_rng(seed)
    layout = cfg.layout if cfg.layout != "mixed" else LAYOUTS[int(rng.integers(len(LAYOUTS)))]
    lo, hi = cfg.agent_range
    n = int(rng.integers(lo, hi + 1))
    for _ in range(cfg.max_retries):
        scenario = _sample_scene(layout, n, rng, cfg)
        if scenario is not None:
            return scenario.validate()
    raise GenerationFailed(f"no valid {layout} scene with {n} agents after {cfg.max_retries} attempts (seed {seed})")


def generate_corpus(config: GeneratorConfig, seeds) -> list[Scenario]:
    return [generate_synthetic_scenario(config, int(s)) for s in seeds]
