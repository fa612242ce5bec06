"""Physical-feasibility indicator and weighted candidate selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scene import InvalidInputError, wrap_angle


class SelectionContractError(ValueError):
    """Selection inputs violate a precondition."""


@dataclass(frozen=True)
class FeasibilityLimits:
    a_lon_max: float = 8.0
    a_lat_max: float = 6.0

    def __post_init__(self):
        if not (self.a_lon_max > 0 and self.a_lat_max > 0):
            raise InvalidInputError("feasibility limits must be positive")


@dataclass(frozen=True)
class SelectionConfig:
    w_g: float = 1.0
    w_p: float = 10.0

    def __post_init__(self):
        if not (self.w_g >= 0 and self.w_p >= 0):
            raise InvalidInputError("selection weights must be non-negative")


@dataclass(frozen=True)
class CandidateScore:
    candidate_index: int
    j_total: float
    phi: int
    score: float
    j_br: float = 0.0
    j_ar: float = 0.0
    j_adv: float = 0.0


def accelerations(states: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference ``(a_lon, a_lat)`` per step for tracks ``(..., T, 4)``.

    ``a_lon = dv/dt``; ``a_lat = v * dtheta/dt`` with the speed at the start of
    each interval and the heading change wrapped to (-pi, pi].
    """
    s = np.asarray(states, dtype=np.float64)
    if s.shape[-2] < 2:
        raise SelectionContractError("feasibility needs at least two states per track")
    dv = np.diff(s[..., 3], axis=-1)
    dth = wrap_angle(np.diff(s[..., 2], axis=-1))
    return dv / dt, s[..., :-1, 3] * dth / dt


def feasibility(trajectories, limits: FeasibilityLimits | None = None, dt: float = 0.5, initial=None) -> int:
    """1 iff every agent satisfies both acceleration limits at every step.

    ``trajectories`` is ``(T, 4)`` or ``(N, T, 4)``; ``initial`` (``(4,)`` or
    ``(N, 4)``) is prepended so the first step is checked too.
    """
    lim = limits or FeasibilityLimits()
    s = np.asarray(trajectories, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    if initial is not None:
        init = np.asarray(initial, dtype=np.float64).reshape(s.shape[0], 1, 4)
        s = np.concatenate([init, s], axis=1)
    a_lon, a_lat = accelerations(s, dt)
    ok = np.all(np.abs(a_lon) <= lim.a_lon_max) and np.all(np.abs(a_lat) <= lim.a_lat_max)
    return int(ok)


def score_candidate(j_total: float, phi: int, config: SelectionConfig | None = None) -> float:
    cfg = config or SelectionConfig()
    return cfg.w_g * j_total + cfg.w_p * (1 - phi)


def select_best(candidates: Sequence[CandidateScore]) -> int:
    """Index of the lowest score; ties go to the lowest candidate index."""
    if not candidates:
        raise SelectionContractError("cannot select from an empty candidate list")
    best = min(candidates, key=lambda c: (c.score, c.candidate_index))
    if math.isnan(best.score):
        raise SelectionContractError("candidate scores must not be NaN")
    return best.candidate_index
