"""Scene data model, kinematics, signed-distance maps and scenario files.

States are stored as float arrays with columns ``(x, y, heading, speed)``;
actions as ``(accel, yaw_rate)``. Headings live in (-pi, pi].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .checkpoint import atomic_write_bytes

ROLES = ("ego", "adversary", "other")
DEFAULT_DT = 0.5
DEFAULT_T_HIST = 4
DEFAULT_T_FUTURE = 12


class InvalidInputError(ValueError):
    """Non-finite or out-of-range input to a scene operation."""


class ScenarioError(ValueError):
    """A scenario violates a structural invariant."""


class NoAdversaryError(ScenarioError):
    """No non-ego agent is eligible to act as the adversary."""


class ScenarioParseError(ScenarioError):
    """Malformed scenario file."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]."""
    t = np.asarray(theta, dtype=np.float64)
    out = np.remainder(t + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2.0 * np.pi, out)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float

    def __post_init__(self):
        vals = (self.x, self.y, self.heading, self.speed)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"non-finite state {vals}")
        if self.speed < 0:
            raise InvalidInputError(f"negative speed {self.speed}")
        if not (-math.pi < self.heading <= math.pi):
            raise InvalidInputError(f"heading {self.heading} outside (-pi, pi]")

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed])

    @classmethod
    def from_array(cls, arr) -> "AgentState":
        x, y, h, v = (float(a) for a in arr)
        return cls(x, y, h, v)


@dataclass(frozen=True)
class AgentAction:
    accel: float
    yaw_rate: float

    def __post_init__(self):
        if not (math.isfinite(self.accel) and math.isfinite(self.yaw_rate)):
            raise InvalidInputError(f"non-finite action ({self.accel}, {self.yaw_rate})")


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """States at a fixed timestep; ``states`` has shape ``(T, 4)``."""

    agent_id: int
    states: np.ndarray

    def __post_init__(self):
        arr = np.array(self.states, dtype=np.float64).reshape(-1, 4)
        arr.setflags(write=False)
        object.__setattr__(self, "states", arr)

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i) -> AgentState:
        return AgentState.from_array(self.states[i])

    def __eq__(self, other) -> bool:
        return isinstance(other, AgentTrack) and self.agent_id == other.agent_id and np.array_equal(self.states, other.states)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]


@dataclass(frozen=True)
class VehicleFootprint:
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidInputError("footprint radius must be positive")


def footprint_radius(length: float, width: float) -> VehicleFootprint:
    """Circumscribed disc of a ``length`` x ``width`` rectangle."""
    if not (length > 0 and width > 0):
        raise InvalidInputError(f"vehicle dimensions must be positive, got {length}x{width}")
    return VehicleFootprint(0.5 * math.sqrt(length * length + width * width))


# --------------------------------------------------------------------------
# kinematics


def kinematic_step(state: AgentState, action: AgentAction, dt: float) -> AgentState:
    """Forward-Euler yaw-rate kinematics with the speed clamped at zero."""
    if not (math.isfinite(dt) and dt > 0):
        raise InvalidInputError(f"dt must be positive and finite, got {dt}")
    out = step_array(state.to_array(), np.array([action.accel, action.yaw_rate]), dt)
    return AgentState.from_array(out)


def step_array(states: np.ndarray, actions: np.ndarray, dt: float) -> np.ndarray:
    """Vectorised :func:`kinematic_step` over leading axes of ``(..., 4)``."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
        raise InvalidInputError("non-finite state or action")
    x, y, h, v = states[..., 0], states[..., 1], states[..., 2], states[..., 3]
    a, w = actions[..., 0], actions[..., 1]
    out = np.empty(np.broadcast_shapes(states.shape, actions.shape[:-1] + (4,)))
    out[..., 0] = x + v * np.cos(h) * dt
    out[..., 1] = y + v * np.sin(h) * dt
    out[..., 2] = wrap_angle(h + w * dt)
    out[..., 3] = np.maximum(0.0, v + a * dt)
    return out


def step_nodes(x, y, h, v, accel, yaw_rate, dt: float):
    """Differentiable kinematic step on autodiff nodes (sub-gradient 0 at the speed clamp)."""
    nx = x + v * ad.cos(h) * dt
    ny = y + v * ad.sin(h) * dt
    nh = ad.wrap_angle(h + yaw_rate * dt)
    nv = ad.relu(v + accel * dt)
    return nx, ny, nh, nv


def rollout(initial: AgentState, actions: Sequence[AgentAction], dt: float, agent_id: int = 0) -> AgentTrack:
    if len(actions) == 0:
        raise InvalidInputError("rollout needs at least one action")
    arr = np.array([[a.accel, a.yaw_rate] for a in actions], dtype=np.float64)
    return AgentTrack(agent_id, rollout_array(initial.to_array(), arr, dt))


def rollout_array(initial: np.ndarray, actions: np.ndarray, dt: float) -> np.ndarray:
    """States ``(len(actions) + 1, 4)`` starting at ``initial``."""
    if not (math.isfinite(dt) and dt > 0):
        raise InvalidInputError(f"dt must be positive and finite, got {dt}")
    out = np.empty((len(actions) + 1, 4))
    out[0] = initial
    for k, act in enumerate(actions):
        out[k + 1] = step_array(out[k], act, dt)
    return out


def infer_actions(states: np.ndarray, dt: float) -> np.ndarray:
    """Actions that re-simulate ``states`` (valid when no speed clamp occurred)."""
    states = np.asarray(states, dtype=np.float64)
    accel = np.diff(states[:, 3]) / dt
    yaw = wrap_angle(np.diff(states[:, 2])) / dt
    return np.stack([accel, np.atleast_1d(yaw)], axis=1)


def recurrence_error(states: np.ndarray, dt: float, actions: np.ndarray | None = None) -> float:
    """Max position deviation between ``states`` and a re-simulation of its actions."""
    states = np.asarray(states, dtype=np.float64)
    if len(states) < 2:
        return 0.0
    if actions is None:
        actions = infer_actions(states, dt)
    resim = step_array(states[:-1], actions, dt)
    pos = np.max(np.abs(resim[:, :2] - states[1:, :2]))
    head = np.max(np.abs(wrap_angle(resim[:, 2] - states[1:, 2])))
    spd = np.max(np.abs(resim[:, 3] - states[1:, 3]))
    return float(max(pos, head, spd))


# --------------------------------------------------------------------------
# maps


def _bilinear(sdf: np.ndarray, ox, oy, res, rows, cols, px, py):
    """Bilinear lookup; returns value and spatial gradient. Inputs broadcast."""
    u = (px - ox) / res - 0.5
    w = (py - oy) / res - 0.5
    u_in = (u > 0) & (u < cols - 1)
    w_in = (w > 0) & (w < rows - 1)
    uc = np.clip(u, 0.0, cols - 1)
    wc = np.clip(w, 0.0, rows - 1)
    c0 = np.minimum(np.floor(uc).astype(np.intp), np.maximum(cols - 2, 0))
    r0 = np.minimum(np.floor(wc).astype(np.intp), np.maximum(rows - 2, 0))
    c1 = np.minimum(c0 + 1, cols - 1)
    r1 = np.minimum(r0 + 1, rows - 1)
    fu = uc - c0
    fw = wc - r0
    return sdf, (r0, r1, c0, c1, fu, fw, u_in, w_in)


def _interp(values_at, r0, r1, c0, c1, fu, fw, u_in, w_in, res):
    v00 = values_at(r0, c0)
    v01 = values_at(r0, c1)
    v10 = values_at(r1, c0)
    v11 = values_at(r1, c1)
    val = (1.0 - fw) * ((1.0 - fu) * v00 + fu * v01) + fw * ((1.0 - fu) * v10 + fu * v11)
    gx = np.where(u_in, ((1.0 - fw) * (v01 - v00) + fw * (v11 - v10)) / res, 0.0)
    gy = np.where(w_in, ((1.0 - fu) * (v10 - v00) + fu * (v11 - v01)) / res, 0.0)
    return val, gx, gy


@dataclass(frozen=True, eq=False)
class SceneMap:
    """Signed-distance grid (positive inside the drivable area) plus lane centerlines.

    ``sdf[r, c]`` is the value at the cell centre
    ``(origin_x + (c + 0.5) * resolution, origin_y + (r + 0.5) * resolution)``.
    """

    origin: tuple[float, float]
    resolution: float
    sdf: np.ndarray
    centerlines: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        sdf = np.array(self.sdf, dtype=np.float64)
        if sdf.ndim != 2 or sdf.size == 0:
            raise ScenarioError("sdf grid must be a non-empty 2-D array")
        if not self.resolution > 0:
            raise ScenarioError("map resolution must be positive")
        if not np.all(np.isfinite(sdf)):
            raise ScenarioError("sdf grid contains non-finite values")
        sdf.setflags(write=False)
        lines = []
        for line in self.centerlines:
            arr = np.array(line, dtype=np.float64).reshape(-1, 2)
            arr.setflags(write=False)
            lines.append(arr)
        object.__setattr__(self, "sdf", sdf)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "resolution", float(self.resolution))
        object.__setattr__(self, "centerlines", tuple(lines))

    @property
    def rows(self) -> int:
        return self.sdf.shape[0]

    @property
    def cols(self) -> int:
        return self.sdf.shape[1]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SceneMap)
            and self.origin == other.origin
            and self.resolution == other.resolution
            and np.array_equal(self.sdf, other.sdf)
            and len(self.centerlines) == len(other.centerlines)
            and all(np.array_equal(a, b) for a, b in zip(self.centerlines, other.centerlines))
        )

    __hash__ = object.__hash__

    def query(self, points) -> np.ndarray:
        """Vectorised signed distance at ``points`` of shape ``(..., 2)``."""
        return self.query_with_grad(points)[0]

    def query_with_grad(self, points):
        pts = np.asarray(points, dtype=np.float64)
        sdf, (r0, r1, c0, c1, fu, fw, u_in, w_in) = _bilinear(
            self.sdf, self.origin[0], self.origin[1], self.resolution, self.rows, self.cols, pts[..., 0], pts[..., 1]
        )
        val, gx, gy = _interp(lambda r, c: sdf[r, c], r0, r1, c0, c1, fu, fw, u_in, w_in, self.resolution)
        return val, np.stack([gx, gy], axis=-1)

    def validate(self) -> None:
        for i, line in enumerate(self.centerlines):
            if len(line) and np.any(self.query(line) <= 0):
                raise ScenarioError(f"centerline {i} leaves the drivable area")

    def translated(self, dx: float, dy: float) -> "SceneMap":
        return SceneMap(
            (self.origin[0] + dx, self.origin[1] + dy),
            self.resolution,
            self.sdf,
            tuple(line + np.array([dx, dy]) for line in self.centerlines),
        )

    @classmethod
    def from_mask(cls, mask: np.ndarray, origin, resolution: float, centerlines: Iterable = (), decimals: int | None = 4) -> "SceneMap":
        """Build from a boolean drivable-area mask via exact Euclidean distance transforms.

        The zero level sits on cell boundaries. ``decimals`` rounds the stored
        distances so scenario files stay compact.
        """
        mask = np.asarray(mask, dtype=bool)
        inside = ndimage.distance_transform_edt(mask)
        outside = ndimage.distance_transform_edt(~mask)
        sdf = np.where(mask, inside - 0.5, -(outside - 0.5)) * resolution
        if decimals is not None:
            sdf = np.round(sdf, decimals)
        return cls(tuple(origin), resolution, sdf, tuple(centerlines))


def sdf_query(scene_map: SceneMap, point) -> float:
    """Signed distance (m) at a single point; bilinear, border-clamped."""
    return float(scene_map.query(np.asarray(point, dtype=np.float64)))


class MapStack:
    """Several maps packed for batched, differentiable lookups."""

    def __init__(self, maps: Sequence[SceneMap]):
        if not maps:
            raise ValueError("MapStack needs at least one map")
        self.maps = list(maps)
        rows = max(m.rows for m in maps)
        cols = max(m.cols for m in maps)
        grid = np.empty((len(maps), rows, cols))
        for i, m in enumerate(maps):
            grid[i] = np.pad(m.sdf, ((0, rows - m.rows), (0, cols - m.cols)), mode="edge")
        self.grid = grid
        self.origin = np.array([m.origin for m in maps])
        self.res = np.array([m.resolution for m in maps])
        self.rows = np.array([m.rows for m in maps])
        self.cols = np.array([m.cols for m in maps])

    def query_with_grad(self, map_index: np.ndarray, points: np.ndarray):
        """``map_index`` broadcasts against ``points[..., 0]``."""
        idx = np.broadcast_to(np.asarray(map_index, dtype=np.intp), points.shape[:-1])
        res = self.res[idx]
        grid = self.grid
        _, (r0, r1, c0, c1, fu, fw, u_in, w_in) = _bilinear(
            None, self.origin[idx, 0], self.origin[idx, 1], res, self.rows[idx], self.cols[idx], points[..., 0], points[..., 1]
        )
        val, gx, gy = _interp(lambda r, c: grid[idx, r, c], r0, r1, c0, c1, fu, fw, u_in, w_in, res)
        return val, gx, gy

    def query_nodes(self, map_index: np.ndarray, px: ad.Node, py: ad.Node) -> ad.Node:
        """Differentiable lookup at coordinates given as autodiff nodes."""
        px, py = ad.as_node(px), ad.as_node(py)
        pts = np.stack(np.broadcast_arrays(px.value, py.value), axis=-1)
        val, gx, gy = self.query_with_grad(map_index, pts)
        sx, sy = px.shape, py.shape
        return ad.custom(
            val,
            (px, py),
            (lambda g: ad._unbroadcast(g * gx, sx), lambda g: ad._unbroadcast(g * gy, sy)),
        )


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True, eq=False)
class Agent:
    id: int
    role: str
    length: float
    width: float
    past: np.ndarray
    future: np.ndarray | None = None

    def __post_init__(self):
        past = np.array(self.past, dtype=np.float64).reshape(-1, 4)
        past.setflags(write=False)
        object.__setattr__(self, "past", past)
        if self.future is not None:
            fut = np.array(self.future, dtype=np.float64).reshape(-1, 4)
            fut.setflags(write=False)
            object.__setattr__(self, "future", fut)

    @property
    def current(self) -> np.ndarray:
        return self.past[-1]

    @property
    def radius(self) -> float:
        return footprint_radius(self.length, self.width).radius

    def past_track(self) -> AgentTrack:
        return AgentTrack(self.id, self.past)

    def future_track(self) -> AgentTrack | None:
        return None if self.future is None else AgentTrack(self.id, self.future)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Agent):
            return NotImplemented
        same_future = (self.future is None and other.future is None) or (
            self.future is not None and other.future is not None and np.array_equal(self.future, other.future)
        )
        return (
            self.id == other.id
            and self.role == other.role
            and self.length == other.length
            and self.width == other.width
            and np.array_equal(self.past, other.past)
            and same_future
        )

    __hash__ = object.__hash__


@dataclass(frozen=True, eq=False)
class Scenario:
    dt: float
    t_hist: int
    t_future: int
    agents: tuple[Agent, ...]
    map: SceneMap
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.dt == other.dt
            and self.t_hist == other.t_hist
            and self.t_future == other.t_future
            and self.agents == other.agents
            and self.map == other.map
        )

    __hash__ = object.__hash__

    def validate(self) -> "Scenario":
        if not (self.dt > 0 and self.t_hist >= 0 and self.t_future >= 1):
            raise ScenarioError("dt must be positive, t_hist >= 0 and t_future >= 1")
        roles = [a.role for a in self.agents]
        for r in roles:
            if r not in ROLES:
                raise ScenarioError(f"unknown role {r!r}")
        if roles.count("ego") != 1:
            raise ScenarioError(f"scenario must have exactly one ego, found {roles.count('ego')}")
        if roles.count("adversary") > 1:
            raise ScenarioError("scenario has more than one adversary")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ScenarioError("agent ids must be unique")
        for a in self.agents:
            if not (a.length > 0 and a.width > 0):
                raise ScenarioError(f"agent {a.id}: non-positive dimensions")
            if a.past.shape[0] != self.t_hist + 1:
                raise ScenarioError(f"agent {a.id}: past has {a.past.shape[0]} states, expected {self.t_hist + 1}")
            if a.future is not None and a.future.shape[0] != self.t_future:
                raise ScenarioError(f"agent {a.id}: future has {a.future.shape[0]} states, expected {self.t_future}")
            for name, arr in (("past", a.past), ("future", a.future)):
                if arr is None:
                    continue
                if not np.all(np.isfinite(arr)):
                    raise ScenarioError(f"agent {a.id}: non-finite {name} state")
                if np.any(arr[:, 3] < 0):
                    raise ScenarioError(f"agent {a.id}: negative speed in {name}")
                if np.any(arr[:, 2] <= -np.pi) or np.any(arr[:, 2] > np.pi):
                    raise ScenarioError(f"agent {a.id}: heading outside (-pi, pi] in {name}")
        return self

    @property
    def ego_index(self) -> int:
        return next(i for i, a in enumerate(self.agents) if a.role == "ego")

    @property
    def ego(self) -> Agent:
        return self.agents[self.ego_index]

    @property
    def non_ego_indices(self) -> list[int]:
        return [i for i, a in enumerate(self.agents) if a.role != "ego"]

    @property
    def adversary_index(self) -> int | None:
        return next((i for i, a in enumerate(self.agents) if a.role == "adversary"), None)

    def agent_index(self, agent_id: int) -> int:
        for i, a in enumerate(self.agents):
            if a.id == agent_id:
                return i
        raise KeyError(agent_id)

    def with_adversary(self, agent_id: int) -> "Scenario":
        agents = []
        for a in self.agents:
            if a.role == "ego":
                agents.append(a)
            else:
                agents.append(replace(a, role="adversary" if a.id == agent_id else "other"))
        return replace(self, agents=tuple(agents))

    def with_futures(self, futures: dict[int, np.ndarray]) -> "Scenario":
        """Replace futures of the agents whose ids appear in ``futures``."""
        agents = tuple(replace(a, future=futures[a.id]) if a.id in futures else a for a in self.agents)
        return replace(self, agents=agents)

    def translated(self, dx: float, dy: float) -> "Scenario":
        shift = np.array([dx, dy, 0.0, 0.0])
        agents = tuple(
            replace(a, past=a.past + shift, future=None if a.future is None else a.future + shift) for a in self.agents
        )
        return replace(self, agents=agents, map=self.map.translated(dx, dy))


def select_adversary(scenario: Scenario) -> int:
    """Id of the eligible non-ego agent nearest the ego at the current step.

    Eligible agents are on the drivable area with positive speed; ties go to
    the smallest id.
    """
    if len(scenario.agents) < 2:
        raise NoAdversaryError("need at least two agents")
    ego = scenario.ego.current
    best = None
    for a in scenario.agents:
        if a.role == "ego":
            continue
        cur = a.current
        if cur[3] <= 0 or sdf_query(scenario.map, cur[:2]) <= 0:
            continue
        d = math.hypot(cur[0] - ego[0], cur[1] - ego[1])
        key = (d, a.id)
        if best is None or key < best:
            best = key
    if best is None:
        raise NoAdversaryError("no non-ego agent passes the feasibility screen")
    return best[1]


# --------------------------------------------------------------------------
# file I/O


def scenario_to_dict(scenario: Scenario) -> dict:
    m = scenario.map
    return {
        "dt": scenario.dt,
        "t_hist": scenario.t_hist,
        "t_future": scenario.t_future,
        "map": {
            "origin": [m.origin[0], m.origin[1]],
            "resolution": m.resolution,
            "rows": m.rows,
            "cols": m.cols,
            "sdf": m.sdf.reshape(-1).tolist(),
            "centerlines": [line.tolist() for line in m.centerlines],
        },
        "agents": [
            {
                "id": a.id,
                "role": a.role,
                "length": a.length,
                "width": a.width,
                "past": a.past.tolist(),
                **({"future": a.future.tolist()} if a.future is not None else {}),
            }
            for a in scenario.agents
        ],
    }


def _require(obj: dict, key: str, path: str, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise ScenarioParseError(f"missing required key {key!r}", field=f"{path}{key}")
    val = obj[key]
    if kind is not None and not isinstance(val, kind):
        raise ScenarioParseError(f"expected {getattr(kind, '__name__', kind)}", field=f"{path}{key}")
    return val


def _states(raw, path: str) -> np.ndarray:
    try:
        arr = np.array(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ScenarioParseError(f"states must be numeric: {exc}", field=path) from exc
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ScenarioParseError("states must be a list of [x, y, heading, speed]", field=path)
    return arr


def scenario_from_dict(data: dict) -> Scenario:
    num = (int, float)
    if not isinstance(data, dict):
        raise ScenarioParseError("top level must be an object")
    dt = float(_require(data, "dt", "", num))
    t_hist = _require(data, "t_hist", "", int)
    t_future = _require(data, "t_future", "", int)
    mraw = _require(data, "map", "", dict)
    rows = _require(mraw, "rows", "map.", int)
    cols = _require(mraw, "cols", "map.", int)
    sdf = _require(mraw, "sdf", "map.", list)
    if len(sdf) != rows * cols:
        raise ScenarioParseError(f"sdf has {len(sdf)} values, expected rows*cols={rows * cols}", field="map.sdf")
    origin = _require(mraw, "origin", "map.", list)
    if len(origin) != 2:
        raise ScenarioParseError("origin must be [x, y]", field="map.origin")
    lines = []
    for i, line in enumerate(mraw.get("centerlines", [])):
        arr = np.array(line, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ScenarioParseError("centerline must be a list of [x, y]", field=f"map.centerlines[{i}]")
        lines.append(arr)
    try:
        scene_map = SceneMap(
            (origin[0], origin[1]),
            float(_require(mraw, "resolution", "map.", num)),
            np.array(sdf, dtype=np.float64).reshape(rows, cols),
            tuple(lines),
        )
    except (ScenarioError, TypeError, ValueError) as exc:
        raise ScenarioParseError(str(exc), field="map") from exc
    agents = []
    for i, araw in enumerate(_require(data, "agents", "", list)):
        path = f"agents[{i}]."
        role = _require(araw, "role", path, str)
        if role not in ROLES:
            raise ScenarioParseError(f"unknown role {role!r}", field=f"{path}role")
        fut = araw.get("future")
        agents.append(
            Agent(
                id=_require(araw, "id", path, int),
                role=role,
                length=float(_require(araw, "length", path, num)),
                width=float(_require(araw, "width", path, num)),
                past=_states(_require(araw, "past", path, list), f"{path}past"),
                future=None if fut is None else _states(fut, f"{path}future"),
            )
        )
    scenario = Scenario(dt, t_hist, t_future, tuple(agents), scene_map)
    try:
        scenario.validate()
    except ScenarioError as exc:
        raise ScenarioParseError(str(exc), field="agents") from exc
    return scenario


def dumps_scenario(scenario: Scenario) -> str:
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(scenario_to_dict(scenario), separators=(",", ":"))


def loads_scenario(text: str) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    return scenario_from_dict(data)


def write_scenario(path, scenario: Scenario) -> None:
    atomic_write_bytes(path, dumps_scenario(scenario).encode("utf-8"))


def read_scenario(path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ScenarioParseError(f"cannot read {path}: {exc}") from exc
    return loads_scenario(text)
