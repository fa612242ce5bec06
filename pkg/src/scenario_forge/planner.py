"""Rule-based ego planner: pure-pursuit lane tracking with IDM car following.

The same one-step controller drives background traffic in the synthetic
generator, so a replayed ground-truth scene reproduces its ego exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .scene import SceneMap, Scenario, step_array, wrap_angle


class PlannerFailure(RuntimeError):
    """The planner cannot produce a plan (e.g. no lane nearby)."""


@dataclass(frozen=True)
class PlannerConfig:
    desired_speed: float = 8.0
    time_headway: float = 1.5
    min_gap: float = 2.0
    max_accel: float = 2.0
    comfort_decel: float = 3.0
    emergency_decel: float = 6.0
    lookahead: float = 10.0
    max_yaw_rate: float = 1.0
    lane_half_width: float = 2.5
    max_lane_distance: float = 10.0

    def __post_init__(self):
        for name in ("desired_speed", "time_headway", "min_gap", "max_accel", "comfort_decel", "emergency_decel", "lookahead"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PlannerConfig.{name} must be positive")


class Polyline:
    """Arc-length parameterised polyline with linear extrapolation past its ends."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if len(pts) < 2:
            raise ValueError("a polyline needs at least two points")
        self.points = pts
        seg = np.diff(pts, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_dir = seg / self.seg_len[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])

    def project(self, p) -> tuple[float, float, float]:
        """Return ``(s, lateral, tangent_heading)``; lateral is positive to the left."""
        p = np.asarray(p, dtype=np.float64)
        rel = p - self.points[:-1]
        t = np.einsum("ij,ij->i", rel, self.seg_dir)
        n = len(self.seg_len)
        lo = np.zeros(n)
        hi = self.seg_len.copy()
        lo[0] = -np.inf
        hi[-1] = np.inf
        tc = np.clip(t, lo, hi)
        foot = self.points[:-1] + tc[:, None] * self.seg_dir
        d2 = np.sum((p - foot) ** 2, axis=1)
        i = int(np.argmin(d2))
        d = self.seg_dir[i]
        lateral = d[0] * rel[i, 1] - d[1] * rel[i, 0]
        return float(self.cum[i] + tc[i]), float(lateral), math.atan2(d[1], d[0])

    def point_at(self, s: float) -> np.ndarray:
        if s <= 0:
            return self.points[0] + s * self.seg_dir[0]
        if s >= self.length:
            return self.points[-1] + (s - self.length) * self.seg_dir[-1]
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        return self.points[i] + (s - self.cum[i]) * self.seg_dir[i]


@lru_cache(maxsize=64)
def _polylines(scene_map: SceneMap) -> tuple[Polyline, ...]:
    return tuple(Polyline(line) for line in scene_map.centerlines if len(line) >= 2)


def polylines(scene_map: SceneMap) -> tuple[Polyline, ...]:
    return _polylines(scene_map)


def nearest_lane(scene_map: SceneMap, state: np.ndarray, max_distance: float = 10.0) -> Polyline:
    """Closest centerline whose direction agrees with the heading."""
    best, best_d = None, math.inf
    for line in polylines(scene_map):
        _, lat, tangent = line.project(state[:2])
        if abs(wrap_angle(state[2] - tangent)) >= math.pi / 2:
            continue
        if abs(lat) < best_d:
            best, best_d = line, abs(lat)
    if best is None or best_d > max_distance:
        raise PlannerFailure(f"no aligned centerline within {max_distance} m of ({state[0]:.2f}, {state[1]:.2f})")
    return best


def idm_accel(v: float, gap: float | None, v_lead: float, cfg: PlannerConfig, dt: float) -> float:
    a = cfg.max_accel * (1.0 - (v / cfg.desired_speed) ** 4)
    if gap is not None:
        if gap + (v_lead - v) * dt < cfg.min_gap and v > 0:
            return -cfg.emergency_decel
        s_star = cfg.min_gap + max(0.0, v * cfg.time_headway + v * (v - v_lead) / (2.0 * math.sqrt(cfg.max_accel * cfg.comfort_decel)))
        a -= cfg.max_accel * (s_star / max(gap, 0.1)) ** 2
    return float(np.clip(a, -cfg.emergency_decel, cfg.max_accel))


def pursuit_yaw_rate(state: np.ndarray, lane: Polyline, s: float, cfg: PlannerConfig) -> float:
    target = lane.point_at(s + cfg.lookahead)
    dx, dy = target - state[:2]
    c, sn = math.cos(state[2]), math.sin(state[2])
    lx, ly = c * dx + sn * dy, -sn * dx + c * dy
    dist = math.hypot(lx, ly)
    if dist < 1e-9:
        return 0.0
    curvature = 2.0 * ly / (dist * dist)
    return float(np.clip(state[3] * curvature, -cfg.max_yaw_rate, cfg.max_yaw_rate))


def find_leader(state: np.ndarray, length: float, lane: Polyline, others: np.ndarray, other_lengths: np.ndarray, cfg: PlannerConfig):
    """Nearest agent ahead on ``lane``; returns ``(gap, speed_along_lane)`` or ``None``."""
    s_self, _, _ = lane.project(state[:2])
    best = None
    for st, ln in zip(others, other_lengths):
        s, lat, tangent = lane.project(st[:2])
        if s <= s_self or abs(lat) > cfg.lane_half_width:
            continue
        gap = s - s_self - 0.5 * (length + ln)
        if best is None or gap < best[0]:
            best = (gap, st[3] * math.cos(st[2] - tangent))
    return best


def controller_action(
    idx: int,
    states: np.ndarray,
    lengths: np.ndarray,
    scene_map: SceneMap,
    cfg: PlannerConfig,
    dt: float,
    stop_line: float | None = None,
) -> np.ndarray:
    """One-step ``(accel, yaw_rate)`` for agent ``idx`` given everyone's current state.

    ``stop_line`` is an arc length on the agent's lane treated as a stationary
    leader (used by the generator for yielding traffic).
    """
    state = states[idx]
    lane = nearest_lane(scene_map, state, cfg.max_lane_distance)
    s, _, _ = lane.project(state[:2])
    mask = np.arange(len(states)) != idx
    leader = find_leader(state, lengths[idx], lane, states[mask], lengths[mask], cfg)
    if stop_line is not None:
        stop_gap = stop_line - s - 0.5 * lengths[idx]
        if leader is None or stop_gap < leader[0]:
            leader = (stop_gap, 0.0)
    gap, v_lead = leader if leader is not None else (None, 0.0)
    accel = idm_accel(state[3], gap, v_lead, cfg, dt)
    return np.array([accel, pursuit_yaw_rate(state, lane, s, cfg)])


def plan_ego(scenario: Scenario, config: PlannerConfig | None = None, current: np.ndarray | None = None) -> np.ndarray:
    """Ego future ``(t_future, 4)`` from the current states of all agents.

    Other agents are extrapolated at constant velocity; the ego re-evaluates
    its controller at every planned step.
    """
    cfg = config or PlannerConfig()
    dt = scenario.dt
    states = np.array([a.current for a in scenario.agents]) if current is None else np.array(current, dtype=np.float64)
    lengths = np.array([a.length for a in scenario.agents])
    ego = scenario.ego_index
    if scenario.map.query(states[ego, :2]) <= 0:
        raise PlannerFailure("ego is off the drivable area")
    plan = np.empty((scenario.t_future, 4))
    for k in range(scenario.t_future):
        action = controller_action(ego, states, lengths, scenario.map, cfg, dt)
        nxt = states.copy()
        nxt[ego] = step_array(states[ego], action, dt)
        others = np.arange(len(states)) != ego
        nxt[others, 0] += states[others, 3] * np.cos(states[others, 2]) * dt
        nxt[others, 1] += states[others, 3] * np.sin(states[others, 2]) * dt
        states = nxt
        plan[k] = states[ego]
    return plan
