"""Closed-loop rollout: the ego replans every step while other agents replay.

Collisions are disc overlaps (``distance < r_i + r_j``) and off-road events
are centre positions with negative signed distance. Both are checked after
every step and never terminate the rollout.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .planner import PlannerConfig, PlannerFailure, plan_ego
from .scene import Scenario

logger = logging.getLogger(__name__)


@dataclass
class EventLog:
    """Events over future steps ``1..T``."""

    adv_ego_first: int | None = None
    collisions: list = field(default_factory=list)  # [id_i, id_j, step] with id_i < id_j
    offroad: dict = field(default_factory=dict)  # agent id -> [[first, last], ...]

    def to_dict(self) -> dict:
        return {
            "adv_ego_first": self.adv_ego_first,
            "collisions": [list(c) for c in self.collisions],
            "offroad": {str(k): [list(iv) for iv in v] for k, v in sorted(self.offroad.items())},
        }

    def __eq__(self, other) -> bool:
        return isinstance(other, EventLog) and self.to_dict() == other.to_dict()

    def collided_ids(self) -> set:
        return {i for c in self.collisions for i in c[:2]}

    def collision_partners(self, agent_id: int) -> set:
        out = set()
        for i, j, _ in self.collisions:
            if i == agent_id:
                out.add(j)
            elif j == agent_id:
                out.add(i)
        return out


@dataclass
class SimulationResult:
    scenario: Scenario
    states: np.ndarray  # (T + 1, N, 4); row 0 is the current state
    events: EventLog
    planner_failed: bool = False
    generation_time: float = 0.0
    candidate_index: int = 0
    failure: str | None = None

    @property
    def agent_ids(self) -> list[int]:
        return [a.id for a in self.scenario.agents]

    def future_of(self, agent_id: int) -> np.ndarray:
        return self.states[1:, self.scenario.agent_index(agent_id)]

    def event_record(self, **extra) -> dict:
        rec = {"candidate": self.candidate_index, "planner_failed": self.planner_failed, **self.events.to_dict()}
        if self.failure:
            rec["failure"] = self.failure
        rec.update(extra)
        return rec


def derive_events(states: np.ndarray, scenario: Scenario) -> EventLog:
    """Recompute the event log from stored states ``(T + 1, N, 4)``."""
    agents = scenario.agents
    ids = [a.id for a in agents]
    radii = np.array([a.radius for a in agents])
    ego = scenario.ego_index
    adv = scenario.adversary_index
    log = EventLog()
    pos = states[1:, :, :2]
    n = len(agents)
    diff = pos[:, :, None, :] - pos[:, None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    limit = radii[:, None] + radii[None, :]
    for step in range(pos.shape[0]):
        for i in range(n):
            for j in range(i + 1, n):
                if dist[step, i, j] < limit[i, j]:
                    a, b = sorted((ids[i], ids[j]))
                    log.collisions.append([a, b, step + 1])
                    if adv is not None and {i, j} == {ego, adv} and log.adv_ego_first is None:
                        log.adv_ego_first = step + 1
    sdf = scenario.map.query(pos)
    for i in range(n):
        off = np.flatnonzero(sdf[:, i] < 0) + 1
        if len(off):
            intervals = []
            start = prev = int(off[0])
            for s in off[1:]:
                s = int(s)
                if s != prev + 1:
                    intervals.append([start, prev])
                    start = s
                prev = s
            intervals.append([start, prev])
            log.offroad[ids[i]] = intervals
    return log


def run_closed_loop(
    scenario: Scenario,
    futures: dict | None = None,
    planner: PlannerConfig | None = None,
    generation_time: float = 0.0,
    candidate_index: int = 0,
) -> SimulationResult:
    """Simulate ``t_future`` steps; non-ego agents replay ``futures`` (id -> ``(T, 4)``).

    When ``futures`` is ``None`` the scenario's stored futures are replayed.
    """
    cfg = planner or PlannerConfig()
    agents = scenario.agents
    T = scenario.t_future
    ego = scenario.ego_index
    replay = {}
    for i, a in enumerate(agents):
        if i == ego:
            continue
        fut = futures.get(a.id) if futures is not None else a.future
        if fut is None:
            raise ValueError(f"no future for agent {a.id}")
        fut = np.asarray(fut, dtype=np.float64)
        if fut.shape != (T, 4):
            raise ValueError(f"future of agent {a.id} has shape {fut.shape}, expected {(T, 4)}")
        replay[i] = fut
    states = np.empty((T + 1, len(agents), 4))
    states[0] = [a.current for a in agents]
    failed, reason = False, None
    for k in range(T):
        try:
            plan = plan_ego(scenario, cfg, current=states[k])
            states[k + 1, ego] = plan[0]
        except PlannerFailure as exc:
            if not failed:
                logger.warning("planner failure at step %d: %s", k + 1, exc)
            failed, reason = True, str(exc)
            # hold the ego on a constant-velocity course so the log stays complete
            x, y, h, v = states[k, ego]
            states[k + 1, ego] = [x + v * np.cos(h) * scenario.dt, y + v * np.sin(h) * scenario.dt, h, v]
        for i, fut in replay.items():
            states[k + 1, i] = fut[k]
    return SimulationResult(
        scenario=scenario,
        states=states,
        events=derive_events(states, scenario),
        planner_failed=failed,
        generation_time=generation_time,
        candidate_index=candidate_index,
        failure=reason,
    )


def write_events_jsonl(path, records) -> None:
    from .checkpoint import atomic_write_bytes

    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    atomic_write_bytes(path, text.encode("utf-8"))
